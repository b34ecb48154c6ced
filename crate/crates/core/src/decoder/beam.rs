use std::cmp::Ordering;

use super::{NextStates, ScorerState, StepScorer, EOS_ID};
use crate::error::{Error, Result};
use crate::subword::TokenId;

const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub ctc_weight: f64,
    pub att_weight: f64,
    /// Shallow-fusion weight of the external language model.
    pub lm_weight: f64,
    /// Maximum number of steps is `ceil(max_len_ratio * input_len)`.
    pub max_len_ratio: f64,
    pub n_best: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam_size: 8, ctc_weight: 0.5, att_weight: 0.5, lm_weight: 0.0, max_len_ratio: 1.0, n_best: 1 }
    }
}

impl DecodeConfig {
    /// Attention-only decoding, as used for MT.
    pub fn attention_only(beam_size: usize) -> Self {
        Self { beam_size, ctc_weight: 0.0, att_weight: 1.0, max_len_ratio: 3.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::invalid("beam size must be at least 1"));
        }
        if self.n_best == 0 {
            return Err(Error::invalid("n_best must be at least 1"));
        }
        for (name, w) in [("ctc", self.ctc_weight), ("attention", self.att_weight), ("lm", self.lm_weight)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::invalid(format!("{name} weight must be a finite non-negative number")));
            }
        }
        if (self.ctc_weight + self.att_weight - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::invalid(format!(
                "ctc and attention weights must sum to 1, got {} + {}",
                self.ctc_weight, self.att_weight
            )));
        }
        if !(self.max_len_ratio > 0.0) || !self.max_len_ratio.is_finite() {
            return Err(Error::invalid("max_len_ratio must be positive"));
        }
        Ok(())
    }

    pub fn max_steps(&self, input_len: usize) -> usize {
        ((self.max_len_ratio * input_len as f64).ceil() as usize).max(1)
    }
}

/// The scorers taking part in one search. Absent scorers must have weight 0;
/// present scorers with weight 0 are not evaluated at all.
#[derive(Clone, Copy, Default)]
pub struct Scorers<'a> {
    pub attention: Option<&'a dyn StepScorer>,
    pub ctc: Option<&'a dyn StepScorer>,
    pub lm: Option<&'a dyn StepScorer>,
}

const ATT: usize = 0;
const CTC: usize = 1;
const LM: usize = 2;

#[derive(Clone)]
pub struct Hypothesis {
    /// Output units, end-of-sequence excluded.
    pub tokens: Vec<TokenId>,
    pub score_att: f64,
    pub score_ctc: f64,
    pub score_lm: f64,
    /// Weighted sum of the component scores, accumulated step by step.
    pub combined: f64,
    /// False when the search ran out of steps before this hypothesis emitted
    /// end-of-sequence.
    pub ended: bool,
    states: [Option<ScorerState>; 3],
}

impl std::fmt::Debug for Hypothesis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Hypothesis")
            .field("tokens", &self.tokens)
            .field("score_att", &self.score_att)
            .field("score_ctc", &self.score_ctc)
            .field("score_lm", &self.score_lm)
            .field("combined", &self.combined)
            .field("ended", &self.ended)
            .finish()
    }
}

impl Hypothesis {
    fn component_mut(&mut self, k: usize) -> &mut f64 {
        match k {
            ATT => &mut self.score_att,
            CTC => &mut self.score_ctc,
            LM => &mut self.score_lm,
            _ => unreachable!("scorer slot out of range"),
        }
    }
}

/// Best first; equal scores fall back to the smaller token sequence.
fn rank(a_score: f64, a_tokens: &[TokenId], b_score: f64, b_tokens: &[TokenId]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_tokens.cmp(b_tokens))
}

fn sort_hypotheses(hyps: &mut [Hypothesis]) {
    hyps.sort_by(|a, b| rank(a.combined, &a.tokens, b.combined, &b.tokens));
}

struct Candidate {
    combined: f64,
    parent: usize,
    token: TokenId,
    /// Sequence used for tie-breaking: parent tokens plus `token`.
    key: Vec<TokenId>,
    increments: [f64; 3],
}

/// N-best beam search over the weighted sum of the active scorers.
///
/// Every live hypothesis is expanded with every output index; the
/// `beam_size` best candidates survive and those that chose end-of-sequence
/// move to the finished pool. On the last allowed step only end-of-sequence
/// is offered. The search also stops once `n_best` finished hypotheses
/// score at least as well as the best live one, which is exact when every
/// scorer returns log-probabilities (increments never positive).
pub fn beam_search(scorers: &Scorers<'_>, cfg: &DecodeConfig, input_len: usize) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let slots: [(Option<&dyn StepScorer>, f64, &str); 3] = [
        (scorers.attention, cfg.att_weight, "attention"),
        (scorers.ctc, cfg.ctc_weight, "ctc"),
        (scorers.lm, cfg.lm_weight, "lm"),
    ];
    if slots.iter().all(|(s, _, _)| s.is_none()) {
        return Err(Error::invalid("beam search needs at least one scorer"));
    }
    let mut active: Vec<(usize, &dyn StepScorer, f64)> = Vec::new();
    for (k, (scorer, weight, name)) in slots.iter().enumerate() {
        match scorer {
            None if *weight > 0.0 => {
                return Err(Error::invalid(format!("{name} weight is {weight} but no {name} scorer was given")));
            }
            Some(s) if *weight > 0.0 => active.push((k, *s, *weight)),
            _ => {}
        }
    }
    if active.is_empty() {
        return Err(Error::invalid("every present scorer has weight 0"));
    }
    let vocab = active[0].1.vocab_size();
    if vocab < 2 {
        return Err(Error::invalid("empty output vocabulary"));
    }
    if let Some((k, s, _)) = active.iter().find(|(_, s, _)| s.vocab_size() != vocab) {
        return Err(Error::invalid(format!(
            "{} scorer has vocabulary {} but another has {vocab}",
            slots[*k].2,
            s.vocab_size()
        )));
    }

    let mut initial = Hypothesis {
        tokens: Vec::new(),
        score_att: 0.0,
        score_ctc: 0.0,
        score_lm: 0.0,
        combined: 0.0,
        ended: false,
        states: [None, None, None],
    };
    for &(k, s, _) in &active {
        initial.states[k] = Some(s.initial_state());
    }

    let max_steps = cfg.max_steps(input_len);
    let mut live = vec![initial];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 0..max_steps {
        let last_step = step + 1 == max_steps;
        let mut expansions: Vec<[Option<NextStates<'_>>; 3]> = Vec::with_capacity(live.len());
        let mut candidates = Vec::new();
        for (parent, hyp) in live.iter().enumerate() {
            let mut vectors: [Option<Vec<f64>>; 3] = [None, None, None];
            let mut nexts: [Option<NextStates<'_>>; 3] = [None, None, None];
            for &(k, s, _) in &active {
                let state = hyp.states[k].as_ref().expect("active scorer has a state");
                let out = s.step(state, &hyp.tokens)?;
                if out.logp.len() != vocab {
                    return Err(Error::invalid(format!(
                        "{} scorer returned {} scores for a vocabulary of {vocab}",
                        slots[k].2,
                        out.logp.len()
                    )));
                }
                if out.logp.iter().any(|v| v.is_nan()) {
                    return Err(Error::invalid(format!("{} scorer returned NaN", slots[k].2)));
                }
                vectors[k] = Some(out.logp);
                nexts[k] = Some(out.next);
            }
            let tokens: Box<dyn Iterator<Item = usize>> =
                if last_step { Box::new(std::iter::once(EOS_ID as usize)) } else { Box::new(0..vocab) };
            for c in tokens {
                let mut increments = [0.0; 3];
                let mut delta = 0.0;
                for &(k, _, w) in &active {
                    let v = vectors[k].as_ref().unwrap()[c];
                    increments[k] = v;
                    delta += w * v;
                }
                let combined = hyp.combined + delta;
                if combined == f64::NEG_INFINITY || combined.is_nan() {
                    continue;
                }
                let mut key = hyp.tokens.clone();
                key.push(c as TokenId);
                candidates.push(Candidate { combined, parent, token: c as TokenId, key, increments });
            }
            expansions.push(nexts);
        }

        candidates.sort_by(|a, b| rank(a.combined, &a.key, b.combined, &b.key));
        candidates.truncate(cfg.beam_size);

        let mut next_live = Vec::with_capacity(candidates.len());
        for cand in candidates {
            let parent = &live[cand.parent];
            let mut hyp = Hypothesis { tokens: parent.tokens.clone(), states: [None, None, None], ..parent.clone() };
            for &(k, _, _) in &active {
                *hyp.component_mut(k) += cand.increments[k];
            }
            hyp.combined = cand.combined;
            if cand.token == EOS_ID {
                hyp.ended = true;
                finished.push(hyp);
            } else {
                for &(k, _, _) in &active {
                    let next = expansions[cand.parent][k].as_ref().unwrap();
                    hyp.states[k] = Some(next.child(cand.token));
                }
                hyp.tokens.push(cand.token);
                next_live.push(hyp);
            }
        }

        if next_live.is_empty() {
            break;
        }
        live = next_live;

        if finished.len() >= cfg.n_best {
            sort_hypotheses(&mut finished);
            let best_live = live.iter().map(|h| h.combined).fold(f64::NEG_INFINITY, f64::max);
            if finished[cfg.n_best - 1].combined >= best_live {
                break;
            }
        }
    }

    let mut result = if finished.is_empty() { live } else { finished };
    sort_hypotheses(&mut result);
    result.truncate(cfg.n_best);
    for h in &mut result {
        h.states = [None, None, None];
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{log_softmax, CtcPrefixScorer, PosteriorGrid};
    use std::sync::Arc;

    /// Scorer whose distribution depends on the whole prefix through a hash.
    struct HashScorer {
        vocab: usize,
        salt: u64,
        /// Added to every entry when the prefix has this length.
        shift_at: Option<(usize, f64)>,
    }

    impl HashScorer {
        fn logp(&self, prefix: &[TokenId]) -> Vec<f64> {
            let mut h = self.salt;
            for &t in prefix {
                h = crate::rng::derive_seed(h, t as u64 + 1);
            }
            let mut rng = crate::rng::SplitMix64::new(h);
            let logits: Vec<f64> =
                (0..self.vocab).map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 4.0).collect();
            let mut v = log_softmax(&logits);
            if let Some((len, c)) = self.shift_at {
                if prefix.len() == len {
                    v.iter_mut().for_each(|x| *x += c);
                }
            }
            v
        }
    }

    impl StepScorer for HashScorer {
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn initial_state(&self) -> ScorerState {
            Arc::new(())
        }
        fn step(&self, _state: &ScorerState, prefix: &[TokenId]) -> Result<super::super::ScorerStep<'_>> {
            Ok(super::super::ScorerStep { logp: self.logp(prefix), next: NextStates::Shared(Arc::new(())) })
        }
    }

    fn att_only(beam: usize) -> DecodeConfig {
        DecodeConfig { beam_size: beam, ctc_weight: 0.0, att_weight: 1.0, ..Default::default() }
    }

    #[test]
    fn beam_one_is_greedy() {
        let s = HashScorer { vocab: 4, salt: 9, shift_at: None };
        let scorers = Scorers { attention: Some(&s), ..Default::default() };
        let out = beam_search(&scorers, &att_only(1), 6).unwrap();
        let mut prefix = Vec::new();
        loop {
            let v = s.logp(&prefix);
            let best = (0..4).max_by(|&a, &b| v[a].total_cmp(&v[b]).then(b.cmp(&a))).unwrap();
            if best == 0 || prefix.len() + 1 == 6 {
                break;
            }
            prefix.push(best as TokenId);
        }
        assert_eq!(out[0].tokens, prefix);
    }

    #[test]
    fn zero_lm_weight_matches_no_lm() {
        let att = HashScorer { vocab: 5, salt: 1, shift_at: None };
        let lm = HashScorer { vocab: 5, salt: 2, shift_at: None };
        let cfg = DecodeConfig { n_best: 3, ..att_only(4) };
        let a = beam_search(&Scorers { attention: Some(&att), ..Default::default() }, &cfg, 5).unwrap();
        let b = beam_search(&Scorers { attention: Some(&att), lm: Some(&lm), ..Default::default() }, &cfg, 5).unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }

    #[test]
    fn constant_shift_at_first_step_keeps_ranking() {
        for shift in [-3.0, 2.5] {
            let base = HashScorer { vocab: 4, salt: 5, shift_at: None };
            let shifted = HashScorer { vocab: 4, salt: 5, shift_at: Some((0, shift)) };
            let cfg = DecodeConfig { n_best: 4, ..att_only(3) };
            let a = beam_search(&Scorers { attention: Some(&base), ..Default::default() }, &cfg, 4).unwrap();
            let b = beam_search(&Scorers { attention: Some(&shifted), ..Default::default() }, &cfg, 4).unwrap();
            let ta: Vec<_> = a.iter().map(|h| h.tokens.clone()).collect();
            let tb: Vec<_> = b.iter().map(|h| h.tokens.clone()).collect();
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn configuration_errors() {
        let att = HashScorer { vocab: 4, salt: 1, shift_at: None };
        let none = Scorers::default();
        assert!(beam_search(&none, &att_only(2), 3).is_err());
        let only_att = Scorers { attention: Some(&att), ..Default::default() };
        assert!(beam_search(&only_att, &DecodeConfig::default(), 3).is_err(), "ctc weight without scorer");
        let bad = DecodeConfig { ctc_weight: 0.3, att_weight: 0.3, ..Default::default() };
        assert!(bad.validate().is_err());
        let tiny = HashScorer { vocab: 1, salt: 1, shift_at: None };
        assert!(beam_search(&Scorers { attention: Some(&tiny), ..Default::default() }, &att_only(2), 3).is_err());
        let other = HashScorer { vocab: 5, salt: 1, shift_at: None };
        let mixed = Scorers { attention: Some(&att), lm: Some(&other), ..Default::default() };
        let cfg = DecodeConfig { lm_weight: 0.5, ..att_only(2) };
        assert!(beam_search(&mixed, &cfg, 3).is_err());
    }

    #[test]
    fn unfinished_hypotheses_are_flagged() {
        // CTC can never end: every frame is certain to emit label 1 with no
        // blank, so "exactly the prefix" has probability 0 until length 1 and
        // only "1" can end. A one-step budget forces end-of-sequence first.
        let row = vec![f64::NEG_INFINITY, 0.0];
        let grid = PosteriorGrid::new(vec![row.clone(), row]).unwrap();
        let ctc = CtcPrefixScorer::new(grid);
        let cfg =
            DecodeConfig { beam_size: 2, ctc_weight: 1.0, att_weight: 0.0, max_len_ratio: 0.5, ..Default::default() };
        let out = beam_search(&Scorers { ctc: Some(&ctc), ..Default::default() }, &cfg, 2).unwrap();
        assert_eq!(out.len(), 1);
        assert!(!out[0].ended);
        assert!(out[0].tokens.is_empty());

        let cfg = DecodeConfig { max_len_ratio: 1.0, ..cfg };
        let out = beam_search(&Scorers { ctc: Some(&ctc), ..Default::default() }, &cfg, 2).unwrap();
        assert!(out[0].ended);
        assert_eq!(out[0].tokens, vec![1]);
        assert!(out[0].combined.abs() < 1e-12);
    }

    #[test]
    fn combined_score_is_weighted_sum() {
        let grid = {
            let mut rng = crate::rng::SplitMix64::new(4);
            let rows = (0..6)
                .map(|_| log_softmax(&(0..4).map(|_| (rng.next_u64() % 100) as f64 / 25.0).collect::<Vec<_>>()))
                .collect();
            PosteriorGrid::new(rows).unwrap()
        };
        let ctc = CtcPrefixScorer::new(grid);
        let att = HashScorer { vocab: 4, salt: 3, shift_at: None };
        let lm = HashScorer { vocab: 4, salt: 8, shift_at: None };
        let cfg = DecodeConfig { beam_size: 4, lm_weight: 0.3, n_best: 4, ..Default::default() };
        let scorers = Scorers { attention: Some(&att), ctc: Some(&ctc), lm: Some(&lm) };
        let out = beam_search(&scorers, &cfg, 6).unwrap();
        assert!(!out.is_empty());
        for h in &out {
            assert!(h.ended && h.combined.is_finite());
            let expected = 0.5 * h.score_ctc + 0.5 * h.score_att + 0.3 * h.score_lm;
            assert!((h.combined - expected).abs() < 1e-9);
        }
        assert!(out.windows(2).all(|w| w[0].combined >= w[1].combined));
    }
}
