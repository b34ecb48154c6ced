use super::{beam_search, DecodeConfig, Scorers, StepScorer};
use crate::error::{Error, Result};
use crate::subword::{BpeModel, TokenId, ASR_TAG};

/// A translation scorer that must see the source sentence before decoding.
pub trait SourceConditioned {
    fn bind<'a>(&'a self, source: &[TokenId]) -> Result<Box<dyn StepScorer + 'a>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MtTarget {
    English,
    French,
}

impl MtTarget {
    pub fn default_beam(self) -> usize {
        match self {
            MtTarget::English => 10,
            MtTarget::French => 25,
        }
    }
}

impl std::str::FromStr for MtTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "en" | "eng" | "english" => Ok(MtTarget::English),
            "fr" | "fra" | "french" => Ok(MtTarget::French),
            other => Err(Error::invalid(format!("unknown MT target language '{other}'"))),
        }
    }
}

pub const DEFAULT_ASR_BEAM: usize = 30;

pub fn default_asr_config() -> DecodeConfig {
    DecodeConfig { beam_size: DEFAULT_ASR_BEAM, ..DecodeConfig::default() }
}

pub fn default_mt_config(target: MtTarget) -> DecodeConfig {
    DecodeConfig::attention_only(target.default_beam())
}

/// ASR followed by MT. Decoder ids of both stages are BPE ids of the
/// respective models.
pub struct CascadeSystem<'a> {
    pub asr: Scorers<'a>,
    pub asr_config: DecodeConfig,
    pub asr_bpe: &'a BpeModel,
    pub mt: &'a dyn SourceConditioned,
    pub mt_lm: Option<&'a dyn StepScorer>,
    pub mt_config: DecodeConfig,
    pub mt_source_bpe: &'a BpeModel,
    pub mt_target_bpe: &'a BpeModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeOutput {
    pub asr_tokens: Vec<TokenId>,
    pub asr_text: String,
    /// Tagged MT input as encoded by the MT source model.
    pub mt_source: Vec<TokenId>,
    pub mt_tokens: Vec<TokenId>,
    pub translation: String,
    pub asr_finished: bool,
    pub mt_finished: bool,
}

impl CascadeOutput {
    /// False if either stage ran out of steps.
    pub fn finished(&self) -> bool {
        self.asr_finished && self.mt_finished
    }
}

impl CascadeSystem<'_> {
    /// Decodes one utterance of `input_len` frames.
    pub fn run(&self, input_len: usize) -> Result<CascadeOutput> {
        let asr = beam_search(&self.asr, &self.asr_config, input_len)?;
        let best = asr.into_iter().next().ok_or_else(|| Error::invalid("ASR produced no hypothesis"))?;
        let asr_text = self.asr_bpe.decode(&best.tokens)?;
        self.translate(best.tokens, asr_text, best.ended)
    }

    /// The MT half of [`run`](Self::run), starting from ASR text.
    pub fn translate_text(&self, asr_text: &str) -> Result<CascadeOutput> {
        self.translate(Vec::new(), asr_text.to_string(), true)
    }

    fn translate(&self, asr_tokens: Vec<TokenId>, asr_text: String, asr_finished: bool) -> Result<CascadeOutput> {
        let tagged = format!("{ASR_TAG} {asr_text}");
        let mt_source = self.mt_source_bpe.encode_ids(tagged.trim_end());
        let scorer = self.mt.bind(&mt_source)?;
        let scorers = Scorers { attention: Some(scorer.as_ref()), ctc: None, lm: self.mt_lm };
        let mt = beam_search(&scorers, &self.mt_config, mt_source.len())?;
        let best = mt.into_iter().next().ok_or_else(|| Error::invalid("MT produced no hypothesis"))?;
        let translation = self.mt_target_bpe.decode(&best.tokens)?;
        Ok(CascadeOutput {
            asr_tokens,
            asr_text,
            mt_source,
            mt_tokens: best.tokens,
            translation,
            asr_finished,
            mt_finished: best.ended,
        })
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::decoder::{NextStates, ScorerState, ScorerStep};
    use crate::modelio::ToyTranslationScorer;
    use crate::toy::ToyWorld;

    /// Uniform over the labels, never end-of-sequence.
    struct Endless(usize);

    impl StepScorer for Endless {
        fn vocab_size(&self) -> usize {
            self.0
        }

        fn initial_state(&self) -> ScorerState {
            Arc::new(())
        }

        fn step(&self, state: &ScorerState, _prefix: &[TokenId]) -> Result<ScorerStep<'_>> {
            let mut logp = vec![-((self.0 - 1) as f64).ln(); self.0];
            logp[0] = f64::NEG_INFINITY;
            Ok(ScorerStep { logp, next: NextStates::Shared(Arc::clone(state)) })
        }
    }

    impl SourceConditioned for Endless {
        fn bind<'a>(&'a self, _source: &[TokenId]) -> Result<Box<dyn StepScorer + 'a>> {
            Ok(Box::new(Endless(self.0)))
        }
    }

    fn system<'a>(world: &'a ToyWorld, mt: &'a dyn SourceConditioned, mt_config: DecodeConfig) -> CascadeSystem<'a> {
        CascadeSystem {
            asr: Scorers::default(),
            asr_config: default_asr_config(),
            asr_bpe: &world.asr_bpe,
            mt,
            mt_lm: None,
            mt_config,
            mt_source_bpe: &world.mt_source_bpe,
            mt_target_bpe: &world.english_bpe,
        }
    }

    #[test]
    fn unfinished_mt_is_reported() {
        let world = ToyWorld::build().unwrap();
        let mt = Endless(world.english_bpe.vocab_size());
        let out = system(&world, &mt, default_mt_config(MtTarget::English)).translate_text("habari yako").unwrap();
        assert!(!out.mt_finished);
        assert!(!out.finished());
        assert_eq!(out.mt_source.len(), 3);
    }

    #[test]
    fn tagged_source_and_beam_independence_on_peaked_tables() {
        let world = ToyWorld::build().unwrap();
        let mt = ToyTranslationScorer::from_params(&world.mt_english, "mt").unwrap();
        let narrow = system(&world, &mt, default_mt_config(MtTarget::English)).translate_text("asante sana").unwrap();
        let wide = system(&world, &mt, default_mt_config(MtTarget::French)).translate_text("asante sana").unwrap();
        assert_eq!(world.mt_source_bpe.piece(narrow.mt_source[0]), Some(ASR_TAG));
        assert_eq!(narrow.translation, "thanks much");
        assert_eq!(narrow, wide);
    }

    #[test]
    fn target_names() {
        assert_eq!("fra".parse::<MtTarget>().unwrap(), MtTarget::French);
        assert_eq!("en".parse::<MtTarget>().unwrap().default_beam(), 10);
        assert!("de".parse::<MtTarget>().is_err());
    }
}
