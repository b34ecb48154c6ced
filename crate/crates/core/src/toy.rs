//! A miniature speech-translation setup for tests, examples and demos.
//!
//! Every Swahili word is "spoken" as a pure tone centred on its own mel
//! band, separated by silence. A linear acoustic model maps the band that
//! stands out to the word's BPE piece and silence to the CTC blank. The MT
//! tables translate word by word into English and French.

use std::fmt::Write as _;
use std::path::Path;

use crate::decoder::{default_asr_config, CascadeSystem, CtcPrefixScorer, MtTarget, Scorers};
use crate::error::{Error, Result};
use crate::frontend::{log_mel_fbank, FbankConfig, MelFilterbank, Waveform};
use crate::modelio::{toy_scorer_from_params, ParameterSet, ToyAcousticModel, ToyTranslationScorer};
use crate::pipeline::write_atomic;
use crate::subword::{bpe_train, BpeModel, TokenId, WORD_BOUNDARY};

pub const SAMPLE_RATE: u32 = 16_000;

/// `(swahili, english, french, mel band)`
pub const LEXICON: [(&str, &str, &str, usize); 5] = [
    ("habari", "news", "nouvelles", 14),
    ("yako", "your", "ton", 24),
    ("asante", "thanks", "merci", 34),
    ("sana", "much", "beaucoup", 44),
    ("rafiki", "friend", "ami", 54),
];

pub const UTTERANCES: [&[&str]; 3] = [&["habari", "yako"], &["asante", "sana", "rafiki"], &["habari", "rafiki"]];

/// Reference translations; they differ from the word-by-word output in
/// places so that scores are not trivially perfect.
pub const REFERENCES_EN: [&str; 3] = ["news your", "thanks much my friend", "news friend"];
pub const REFERENCES_FR: [&str; 3] = ["nouvelles ton", "merci beaucoup mon ami", "nouvelles ami"];

const TONE_SECS: f64 = 0.3;
const GAP_SECS: f64 = 0.1;
const AMPLITUDE: f64 = 0.5;
const PEAK_LOGIT: f64 = 12.0;
const BLANK_BIAS: f64 = 4.0;
const NEVER: f64 = -30.0;

fn lexicon(word: &str) -> Result<&'static (&'static str, &'static str, &'static str, usize)> {
    LEXICON.iter().find(|e| e.0 == word).ok_or_else(|| Error::invalid(format!("'{word}' is not in the toy lexicon")))
}

/// Centre frequency of each mel band for the default 80-band frontend.
pub fn band_centres() -> Vec<f64> {
    let cfg = FbankConfig::default();
    let frame = (SAMPLE_RATE as f64 * cfg.frame_length_ms / 1000.0).round() as usize;
    MelFilterbank::new(cfg.n_mels, frame.next_power_of_two(), SAMPLE_RATE).centre_frequencies()
}

/// Tones for each word with silence before, between and after.
pub fn synthesize(words: &[&str]) -> Result<Waveform> {
    let centres = band_centres();
    let gap = vec![0.0f32; (GAP_SECS * SAMPLE_RATE as f64) as usize];
    let tone_len = (TONE_SECS * SAMPLE_RATE as f64) as usize;
    let mut samples = gap.clone();
    for w in words {
        let hz = centres[lexicon(w)?.3];
        samples.extend((0..tone_len).map(|n| {
            let t = n as f64 / SAMPLE_RATE as f64;
            (AMPLITUDE * (2.0 * std::f64::consts::PI * hz * t).sin()) as f32
        }));
        samples.extend_from_slice(&gap);
    }
    Waveform::new(samples, SAMPLE_RATE)
}

fn piece_id(bpe: &BpeModel, word: &str) -> Result<TokenId> {
    let piece = format!("{WORD_BOUNDARY}{word}");
    bpe.id(&piece).ok_or_else(|| Error::invalid(format!("BPE model has no single piece for '{word}'")))
}

fn word_corpus(words: impl Iterator<Item = &'static str> + Clone) -> Vec<String> {
    // Three copies so every pair clears the minimum merge frequency.
    (0..3).map(|_| words.clone().collect::<Vec<_>>().join(" ")).collect()
}

#[derive(Debug, Clone)]
pub struct ToyWorld {
    pub asr_bpe: BpeModel,
    pub mt_source_bpe: BpeModel,
    pub english_bpe: BpeModel,
    pub french_bpe: BpeModel,
    /// Entries `am.weight` and `am.bias`.
    pub acoustic: ParameterSet,
    /// Entry `att`, a bigram table over ASR pieces.
    pub asr_attention: ParameterSet,
    /// Entry `mt` in both.
    pub mt_english: ParameterSet,
    pub mt_french: ParameterSet,
    pub waveforms: Vec<Waveform>,
}

impl ToyWorld {
    pub fn build() -> Result<Self> {
        let sw = || LEXICON.iter().map(|e| e.0);
        let asr_bpe = bpe_train(&word_corpus(sw()), 200)?;
        let mut src_corpus = word_corpus(sw());
        src_corpus.push("<asrS> <textS>".to_string());
        let mt_source_bpe = bpe_train(&src_corpus, 200)?;
        let english_bpe = bpe_train(&word_corpus(LEXICON.iter().map(|e| e.1)), 200)?;
        let french_bpe = bpe_train(&word_corpus(LEXICON.iter().map(|e| e.2)), 200)?;

        let n_mels = FbankConfig::default().n_mels;
        let v = asr_bpe.vocab_size();
        let mut weight = vec![0.0; n_mels * v];
        let mut bias = vec![NEVER; v];
        bias[0] = BLANK_BIAS;
        let mut word_ids = Vec::new();
        for (word, _, _, band) in LEXICON {
            let k = piece_id(&asr_bpe, word)? as usize;
            word_ids.push(k);
            bias[k] = 0.0;
            // Band energy relative to the mean over all bands.
            for m in 0..n_mels {
                weight[m * v + k] = if m == band { 1.0 - 1.0 / n_mels as f64 } else { -1.0 / n_mels as f64 };
            }
        }
        let mut acoustic = ParameterSet::new();
        acoustic.insert("am.weight", vec![n_mels, v], weight)?;
        acoustic.insert("am.bias", vec![v], bias)?;

        // Mild preference for whole words and end-of-sequence everywhere.
        let mut att = vec![0.0; v * v];
        for row in 0..v {
            for &k in word_ids.iter().chain(std::iter::once(&0)) {
                att[row * v + k] = 3.0;
            }
        }
        let mut asr_attention = ParameterSet::new();
        asr_attention.insert("att", vec![v, v], att)?;

        let mt_table = |target: &BpeModel, lang: MtTarget| -> Result<ParameterSet> {
            let (vs, vt) = (mt_source_bpe.vocab_size(), target.vocab_size());
            let mut table = vec![0.0; vs * vt];
            for row in 0..vs {
                table[row * vt] = PEAK_LOGIT;
            }
            for entry in &LEXICON {
                let s = piece_id(&mt_source_bpe, entry.0)? as usize;
                let t = piece_id(target, if lang == MtTarget::English { entry.1 } else { entry.2 })? as usize;
                table[s * vt] = 0.0;
                table[s * vt + t] = PEAK_LOGIT;
            }
            let mut set = ParameterSet::new();
            set.insert("mt", vec![vs, vt], table)?;
            Ok(set)
        };
        let mt_english = mt_table(&english_bpe, MtTarget::English)?;
        let mt_french = mt_table(&french_bpe, MtTarget::French)?;

        let waveforms = UTTERANCES.iter().map(|u| synthesize(u)).collect::<Result<_>>()?;
        Ok(Self {
            asr_bpe,
            mt_source_bpe,
            english_bpe,
            french_bpe,
            acoustic,
            asr_attention,
            mt_english,
            mt_french,
            waveforms,
        })
    }

    /// Word-by-word translation of the spoken Swahili words.
    pub fn expected_translation(words: &[&str], target: MtTarget) -> Result<String> {
        let out = words
            .iter()
            .map(|w| lexicon(w).map(|e| if target == MtTarget::English { e.1 } else { e.2 }))
            .collect::<Result<Vec<_>>>()?;
        Ok(out.join(" "))
    }

    /// Runs the in-process cascade on utterance `index`.
    pub fn cascade(&self, index: usize, target: MtTarget) -> Result<crate::decoder::CascadeOutput> {
        let feats = log_mel_fbank(&self.waveforms[index], &FbankConfig::default())?;
        let grid = ToyAcousticModel::from_params(&self.acoustic, "am")?.posteriors(&feats)?;
        let frames = grid.frames();
        let ctc = CtcPrefixScorer::new(grid);
        let att = toy_scorer_from_params(&self.asr_attention, "att")?;
        let mt = ToyTranslationScorer::from_params(
            if target == MtTarget::English { &self.mt_english } else { &self.mt_french },
            "mt",
        )?;
        let system = CascadeSystem {
            asr: Scorers { attention: Some(&att), ctc: Some(&ctc), lm: None },
            asr_config: default_asr_config(),
            asr_bpe: &self.asr_bpe,
            mt: &mt,
            mt_lm: None,
            mt_config: crate::decoder::default_mt_config(target),
            mt_source_bpe: &self.mt_source_bpe,
            mt_target_bpe: if target == MtTarget::English { &self.english_bpe } else { &self.french_bpe },
        };
        system.run(frames)
    }

    /// Writes every model, waveform and reference plus `cascade.cfg`, a
    /// pipeline running the whole cascade into `out/`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let put = |name: &str, bytes: Vec<u8>| write_atomic(&dir.join(name), &bytes);
        let buf = |f: &dyn Fn(&mut Vec<u8>) -> std::io::Result<()>| {
            let mut b = Vec::new();
            f(&mut b).expect("writing to memory");
            b
        };
        put("asr.bpe", buf(&|b| self.asr_bpe.write(b)))?;
        put("mt_src.bpe", buf(&|b| self.mt_source_bpe.write(b)))?;
        put("en.bpe", buf(&|b| self.english_bpe.write(b)))?;
        put("fr.bpe", buf(&|b| self.french_bpe.write(b)))?;
        put("acoustic.params", buf(&|b| self.acoustic.write(b)))?;
        put("asr_att.params", buf(&|b| self.asr_attention.write(b)))?;
        put("mt_en.params", buf(&|b| self.mt_english.write(b)))?;
        put("mt_fr.params", buf(&|b| self.mt_french.write(b)))?;
        for (i, w) in self.waveforms.iter().enumerate() {
            w.write_wav(dir.join(format!("utt{i}.wav")))?;
        }
        let lines = |v: &[String]| v.iter().map(|l| format!("{l}\n")).collect::<String>().into_bytes();
        let transcripts: Vec<String> = UTTERANCES.iter().map(|u| u.join(" ")).collect();
        put("transcripts.sw", lines(&transcripts))?;
        put("ref.en", lines(&REFERENCES_EN.map(String::from)))?;
        put("ref.fr", lines(&REFERENCES_FR.map(String::from)))?;
        put("cascade.cfg", cascade_config(UTTERANCES.len()).into_bytes())
    }
}

/// Pipeline config for the toy cascade with `n` utterances. Beam sizes are
/// left at their defaults.
pub fn cascade_config(n: usize) -> String {
    let list = |f: &dyn Fn(usize) -> String| (0..n).map(f).collect::<Vec<_>>().join(",");
    let wavs = list(&|i| format!("utt{i}.wav"));
    let feats = list(&|i| format!("out/utt{i}.feats"));
    let augmented = list(&|i| format!("out/utt{i}.aug"));
    let mut s = String::new();
    let _ = write!(
        s,
        "\
seed = 11
manifest = out/manifest.json

[stage feats]
input = {wavs}
output = {feats}

[stage augment]
input = {feats}
output = {augmented}
freq_width = 8
time_width = 10

[stage decode]
feats = {feats}
acoustic = acoustic.params
attention = asr_att.params
bpe = asr.bpe
output = out/asr.txt

[stage wer]
reference = transcripts.sw
hypothesis = out/asr.txt
output = out/wer.txt

[stage normalize]
input = out/asr.txt
output = out/asr.norm

[stage tag]
input = out/asr.norm
output = out/mt_in.txt

[stage translate]
input = out/mt_in.txt
model = mt_en.params
source_bpe = mt_src.bpe
target_bpe = en.bpe
target = en
output = out/hyp.en

[stage translate]
input = out/mt_in.txt
model = mt_fr.params
source_bpe = mt_src.bpe
target_bpe = fr.bpe
target = fr
output = out/hyp.fr

[stage bleu]
reference = ref.en
hypothesis = out/hyp.en
output = out/bleu.en
smooth = exp

[stage bleu]
reference = ref.fr
hypothesis = out/hyp.fr
output = out/bleu.fr
smooth = exp

[stage chrf]
reference = ref.en
hypothesis = out/hyp.en
output = out/chrf.en
"
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn in_process_cascade_translates_word_by_word() {
        let world = ToyWorld::build().unwrap();
        for (i, words) in UTTERANCES.iter().enumerate() {
            for target in [MtTarget::English, MtTarget::French] {
                let out = world.cascade(i, target).unwrap();
                assert_eq!(out.asr_text, words.join(" "));
                assert!(out.finished());
                assert_eq!(out.translation, ToyWorld::expected_translation(words, target).unwrap());
            }
        }
    }

    #[test]
    fn pipeline_matches_in_process_cascade() {
        let dir = tempfile::tempdir().unwrap();
        let world = ToyWorld::build().unwrap();
        world.write_to(dir.path()).unwrap();
        let manifest = crate::pipeline::run_pipeline_file(&dir.path().join("cascade.cfg")).unwrap();
        assert_eq!(manifest.stages.len(), 11);
        let read = |name: &str| std::fs::read_to_string(dir.path().join("out").join(name)).unwrap();
        let asr: Vec<String> = UTTERANCES.iter().map(|u| u.join(" ")).collect();
        assert_eq!(read("asr.txt").lines().collect::<Vec<_>>(), asr);
        for (file, target) in [("hyp.en", MtTarget::English), ("hyp.fr", MtTarget::French)] {
            let expected: Vec<String> =
                UTTERANCES.iter().map(|u| ToyWorld::expected_translation(u, target).unwrap()).collect();
            assert_eq!(read(file).lines().collect::<Vec<_>>(), expected);
        }
        assert_eq!(read("wer.txt").trim(), "wer 0");
    }
}
