//! Joint CTC/attention beam search with shallow language-model fusion.
//!
//! All scorers share one output space: index 0 is end-of-sequence (it sits
//! in the CTC blank column of a [`PosteriorGrid`]) and indices `1..V` are
//! output units. With BPE models the decoder id of a piece is its BPE id;
//! BPE id 0 (`<unk>`) is never produced.

use std::any::Any;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::subword::TokenId;

mod beam;
mod cascade;
mod ctc;

pub use beam::{beam_search, DecodeConfig, Hypothesis, Scorers};
pub use cascade::{
    default_asr_config, default_mt_config, CascadeOutput, CascadeSystem, MtTarget, SourceConditioned, DEFAULT_ASR_BEAM,
};
pub use ctc::{CtcPrefixScorer, CtcState, PosteriorGrid};

/// Output index reserved for end-of-sequence (and the CTC blank).
pub const EOS_ID: TokenId = 0;

/// Opaque per-hypothesis scorer state. States are never mutated after
/// creation, so expanding a hypothesis hands each child its own handle.
pub type ScorerState = Arc<dyn Any + Send + Sync>;

/// How the states of a hypothesis's children are obtained.
pub enum NextStates<'a> {
    /// Every child shares one state.
    Shared(ScorerState),
    /// Child state computed on demand for the chosen token.
    Lazy(Box<dyn Fn(TokenId) -> ScorerState + 'a>),
}

impl NextStates<'_> {
    pub fn child(&self, token: TokenId) -> ScorerState {
        match self {
            NextStates::Shared(s) => Arc::clone(s),
            NextStates::Lazy(f) => f(token),
        }
    }
}

pub struct ScorerStep<'a> {
    /// Log-probability increments for every output index, end included.
    pub logp: Vec<f64>,
    pub next: NextStates<'a>,
}

/// Incremental scorer used by [`beam_search`].
///
/// Probabilistic scorers return vectors that log-sum-exp to zero.
pub trait StepScorer {
    /// Size of the output space including end-of-sequence.
    fn vocab_size(&self) -> usize;

    fn initial_state(&self) -> ScorerState;

    fn step(&self, state: &ScorerState, prefix: &[TokenId]) -> Result<ScorerStep<'_>>;
}

pub(crate) fn downcast<T: 'static>(state: &ScorerState) -> Result<&T> {
    state.downcast_ref::<T>().ok_or_else(|| Error::invalid("scorer received a state it did not create"))
}

/// `log(exp(a) + exp(b))` with `-inf` handled.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let norm = log_sum_exp(logits);
    logits.iter().map(|v| v - norm).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_add_handles_infinities() {
        let ninf = f64::NEG_INFINITY;
        assert_eq!(log_add(ninf, ninf), ninf);
        assert_eq!(log_add(ninf, -1.0), -1.0);
        assert!((log_add(0.5f64.ln(), 0.5f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn log_softmax_normalizes() {
        let v = log_softmax(&[1.0, 2.0, 3.0, -1000.0]);
        assert!(log_sum_exp(&v).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }
}
