//! CTC prefix scoring over a grid of frame posteriors.
//!
//! For a prefix `g` the state keeps, for every frame `t`, the log
//! probability that the first `t + 1` frames collapse to exactly `g` with
//! the last emission being a label (`r_n`) or a blank (`r_b`). Extending
//! `g` by `c` then costs one pass over the frames:
//!
//! ```text
//! phi[t]     = r_b[t] + (c == last(g) ? 0 : r_n[t])
//! r_n'[t]    = (r_n'[t-1] + phi[t-1]) * p_t(c)
//! r_b'[t]    = (r_b'[t-1] + r_n'[t-1]) * p_t(blank)
//! psi(g + c) = r_n'[0] + sum_{t >= 1} phi[t-1] * p_t(c)
//! ```
//!
//! (sums and products are in the probability domain; the code works with
//! logs). `psi` is the probability that the collapsed output starts with
//! `g + c`; `r_n[T-1] + r_b[T-1]` is the probability that it is exactly `g`.

use std::io::{BufRead, Write};
use std::sync::Arc;

use super::{downcast, log_add, NextStates, ScorerState, ScorerStep, StepScorer, EOS_ID};
use crate::error::{Error, Result};
use crate::frontend::parse_header;
use crate::subword::TokenId;

const ROW_TOLERANCE: f64 = 1e-6;

/// `T x (V + 1)` per-frame log-probabilities; column 0 is the blank.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGrid {
    logp: Vec<f64>,
    frames: usize,
    width: usize,
}

impl PosteriorGrid {
    /// Builds a grid from log-probability rows. Each row must exponentiate
    /// to a distribution (sum within 1e-6 of one).
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let frames = rows.len();
        if frames == 0 {
            return Err(Error::invalid("posterior grid needs at least one frame"));
        }
        let width = rows[0].len();
        if width < 2 {
            return Err(Error::invalid("posterior grid needs a blank and at least one label"));
        }
        let mut logp = Vec::with_capacity(frames * width);
        for (t, row) in rows.into_iter().enumerate() {
            if row.len() != width {
                return Err(Error::invalid(format!("frame {t} has {} columns, expected {width}", row.len())));
            }
            if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(Error::invalid(format!("frame {t} contains NaN or +inf")));
            }
            let mass: f64 = row.iter().map(|v| v.exp()).sum();
            if (mass - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::invalid(format!("frame {t} sums to {mass}, not 1")));
            }
            logp.extend(row);
        }
        Ok(Self { logp, frames, width })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Number of non-blank labels `V`.
    pub fn labels(&self) -> usize {
        self.width - 1
    }

    pub fn logp(&self, t: usize, k: usize) -> f64 {
        self.logp[t * self.width + k]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.logp[t * self.width..(t + 1) * self.width]
    }

    /// `T=<frames> V=<labels> blank=0`, then one line of `V + 1` values per
    /// frame.
    pub fn write_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "T={} V={} blank=0", self.frames, self.labels())?;
        for t in 0..self.frames {
            let line: Vec<String> = self.row(t).iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(input: R, label: &str) -> Result<Self> {
        let mut lines = input.lines();
        let header =
            lines.next().ok_or_else(|| Error::parse(label, 1, "missing header"))?.map_err(|e| Error::io(label, e))?;
        let fields = parse_header(&header, label, 1, &["T", "V", "blank"])?;
        let (frames, labels, blank) = (fields[0], fields[1], fields[2]);
        if blank != 0 {
            return Err(Error::parse(label, 1, "blank index must be 0"));
        }
        let mut rows = Vec::with_capacity(frames);
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line.map_err(|e| Error::io(label, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|tok| tok.parse::<f64>().map_err(|_| Error::parse(label, lineno, format!("bad number `{tok}`"))))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != labels + 1 {
                return Err(Error::parse(
                    label,
                    lineno,
                    format!("expected {} values, found {}", labels + 1, row.len()),
                ));
            }
            rows.push(row);
        }
        if rows.len() != frames {
            return Err(Error::parse(label, 1, format!("header declares {frames} frames, found {}", rows.len())));
        }
        Self::new(rows).map_err(|e| Error::parse(label, 1, e.to_string()))
    }
}

/// Forward variables of one prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcState {
    pub prefix_len: usize,
    pub last: Option<TokenId>,
    /// `log r_n[t]`: prefix complete at frame `t`, last emission a label.
    pub r_label: Vec<f64>,
    /// `log r_b[t]`: prefix complete at frame `t`, last emission blank.
    pub r_blank: Vec<f64>,
    /// Log prefix probability of this prefix.
    pub log_psi: f64,
}

impl CtcState {
    /// Log probability that the collapsed output equals the prefix exactly.
    pub fn log_end(&self) -> f64 {
        let last = self.r_label.len() - 1;
        log_add(self.r_label[last], self.r_blank[last])
    }
}

/// Prefix scorer over a shared posterior grid.
#[derive(Debug, Clone)]
pub struct CtcPrefixScorer {
    grid: Arc<PosteriorGrid>,
}

impl CtcPrefixScorer {
    pub fn new(grid: impl Into<Arc<PosteriorGrid>>) -> Self {
        Self { grid: grid.into() }
    }

    pub fn grid(&self) -> &PosteriorGrid {
        &self.grid
    }

    pub fn empty_state(&self) -> CtcState {
        let frames = self.grid.frames();
        let mut r_blank = Vec::with_capacity(frames);
        let mut acc = 0.0;
        for t in 0..frames {
            acc += self.grid.logp(t, 0);
            r_blank.push(acc);
        }
        CtcState { prefix_len: 0, last: None, r_label: vec![f64::NEG_INFINITY; frames], r_blank, log_psi: 0.0 }
    }

    fn check_label(&self, c: TokenId) -> Result<()> {
        if c == EOS_ID || c as usize > self.grid.labels() {
            return Err(Error::invalid(format!("label {c} outside 1..={}", self.grid.labels())));
        }
        Ok(())
    }

    /// State for `prefix + c`, including its prefix score.
    pub fn extend_state(&self, g: &CtcState, c: TokenId) -> Result<CtcState> {
        self.check_label(c)?;
        let frames = self.grid.frames();
        let ci = c as usize;
        let mut r_label = vec![f64::NEG_INFINITY; frames];
        let mut r_blank = vec![f64::NEG_INFINITY; frames];
        let mut psi = f64::NEG_INFINITY;
        if g.prefix_len < frames {
            if g.prefix_len == 0 {
                r_label[0] = self.grid.logp(0, ci);
            }
            psi = r_label[0];
            let repeat = g.last == Some(c);
            for t in 1..frames {
                let phi = if repeat { g.r_blank[t - 1] } else { log_add(g.r_blank[t - 1], g.r_label[t - 1]) };
                let emit = self.grid.logp(t, ci);
                r_label[t] = log_add(r_label[t - 1], phi) + emit;
                r_blank[t] = log_add(r_blank[t - 1], r_label[t - 1]) + self.grid.logp(t, 0);
                psi = log_add(psi, phi + emit);
            }
        }
        Ok(CtcState { prefix_len: g.prefix_len + 1, last: Some(c), r_label, r_blank, log_psi: psi })
    }

    /// Log prefix scores of every one-label extension of `g`. Index 0 holds
    /// the log probability that the output is exactly `g`.
    pub fn prefix_scores(&self, g: &CtcState) -> Vec<f64> {
        let mut scores = Vec::with_capacity(self.grid.labels() + 1);
        scores.push(g.log_end());
        for c in 1..=self.grid.labels() {
            let ext = self.extend_state(g, c as TokenId).expect("label range checked by loop bounds");
            scores.push(ext.log_psi);
        }
        scores
    }

    /// Convenience wrapper: state for an arbitrary label sequence.
    pub fn state_for(&self, prefix: &[TokenId]) -> Result<CtcState> {
        let mut state = self.empty_state();
        for &c in prefix {
            state = self.extend_state(&state, c)?;
        }
        Ok(state)
    }
}

impl StepScorer for CtcPrefixScorer {
    fn vocab_size(&self) -> usize {
        self.grid.labels() + 1
    }

    fn initial_state(&self) -> ScorerState {
        Arc::new(self.empty_state())
    }

    /// Increments `psi(g + c) - psi(g)`; the end entry is
    /// `log p(exactly g) - psi(g)`.
    fn step(&self, state: &ScorerState, _prefix: &[TokenId]) -> Result<ScorerStep<'_>> {
        let g = downcast::<CtcState>(state)?.clone();
        let base = g.log_psi;
        let logp =
            self.prefix_scores(&g).into_iter().map(|s| if s == f64::NEG_INFINITY { s } else { s - base }).collect();
        Ok(ScorerStep {
            logp,
            next: NextStates::Lazy(Box::new(move |c| {
                let child = self.extend_state(&g, c).unwrap_or_else(|_| {
                    let mut dead = g.clone();
                    dead.log_psi = f64::NEG_INFINITY;
                    dead
                });
                Arc::new(child) as ScorerState
            })),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::log_sum_exp;
    use crate::rng::SplitMix64;

    fn random_grid(frames: usize, labels: usize, seed: u64) -> PosteriorGrid {
        let mut rng = SplitMix64::new(seed);
        let rows = (0..frames)
            .map(|_| {
                let w: Vec<f64> = (0..=labels).map(|_| (rng.next_u64() >> 11) as f64 + 1.0).collect();
                let s: f64 = w.iter().sum();
                w.iter().map(|x| (x / s).ln()).collect()
            })
            .collect();
        PosteriorGrid::new(rows).unwrap()
    }

    /// Sums over all `(V+1)^T` alignments whose collapse starts with `prefix`.
    fn brute_force_prefix(grid: &PosteriorGrid, prefix: &[TokenId]) -> (f64, f64) {
        let width = grid.labels() + 1;
        let total = width.pow(grid.frames() as u32);
        let (mut starts, mut exact) = (0.0, 0.0);
        for code in 0..total {
            let mut c = code;
            let mut path = Vec::new();
            let mut p = 1.0;
            for t in 0..grid.frames() {
                let k = c % width;
                c /= width;
                p *= grid.logp(t, k).exp();
                path.push(k as TokenId);
            }
            let mut collapsed = Vec::new();
            let mut prev = None;
            for &k in &path {
                if Some(k) != prev && k != 0 {
                    collapsed.push(k);
                }
                prev = Some(k);
            }
            if collapsed.starts_with(prefix) {
                starts += p;
                if collapsed.len() == prefix.len() {
                    exact += p;
                }
            }
        }
        (starts, exact)
    }

    #[test]
    fn single_frame_scores_are_posteriors() {
        let grid = random_grid(1, 3, 5);
        let scorer = CtcPrefixScorer::new(grid.clone());
        let scores = scorer.prefix_scores(&scorer.empty_state());
        for (c, score) in scores.iter().enumerate().skip(1) {
            assert!((score - grid.logp(0, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_enumeration_on_small_grid() {
        let grid = random_grid(3, 2, 17);
        let scorer = CtcPrefixScorer::new(grid.clone());
        for prefix in [vec![], vec![1], vec![2], vec![1, 1], vec![1, 2], vec![2, 2, 1]] {
            let state = scorer.state_for(&prefix).unwrap();
            let (_, exact) = brute_force_prefix(&grid, &prefix);
            assert!((state.log_end().exp() - exact).abs() < 1e-12);
            for c in 1..=2 {
                let mut ext = prefix.clone();
                ext.push(c);
                let (starts, _) = brute_force_prefix(&grid, &ext);
                let got = scorer.extend_state(&state, c).unwrap().log_psi.exp();
                assert!((got - starts).abs() < 1e-12, "{ext:?}: {got} vs {starts}");
            }
        }
    }

    #[test]
    fn repeat_needs_a_blank() {
        // p(blank) = 0 on every frame, so "a a" can never be emitted.
        let row = vec![f64::NEG_INFINITY, 0.7f64.ln(), 0.3f64.ln()];
        let grid = PosteriorGrid::new(vec![row.clone(), row.clone(), row]).unwrap();
        let scorer = CtcPrefixScorer::new(grid);
        let a = scorer.state_for(&[1]).unwrap();
        assert_eq!(scorer.extend_state(&a, 1).unwrap().log_psi, f64::NEG_INFINITY);
        assert!(scorer.extend_state(&a, 2).unwrap().log_psi.is_finite());
    }

    #[test]
    fn prefix_longer_than_input_is_impossible() {
        let scorer = CtcPrefixScorer::new(random_grid(2, 2, 3));
        let g = scorer.state_for(&[1, 2]).unwrap();
        assert!(scorer.prefix_scores(&g)[1..].iter().all(|&s| s == f64::NEG_INFINITY));
    }

    #[test]
    fn step_increments_normalize() {
        let scorer = CtcPrefixScorer::new(random_grid(5, 3, 8));
        let mut state = scorer.initial_state();
        let mut prefix = Vec::new();
        for c in [2, 2, 1] {
            let step = scorer.step(&state, &prefix).unwrap();
            assert!(log_sum_exp(&step.logp).abs() < 1e-9);
            state = step.next.child(c);
            prefix.push(c);
        }
    }

    #[test]
    fn grid_validation_and_text_format() {
        assert!(PosteriorGrid::new(vec![vec![0.5f64.ln(), 0.4f64.ln()]]).is_err());
        assert!(PosteriorGrid::new(vec![]).is_err());
        let grid = random_grid(3, 2, 1);
        let mut buf = Vec::new();
        grid.write_text(&mut buf).unwrap();
        assert!(buf.starts_with(b"T=3 V=2 blank=0\n"));
        assert_eq!(PosteriorGrid::read_text(buf.as_slice(), "g").unwrap(), grid);
        let err = PosteriorGrid::read_text("T=1 V=1 blank=0\n0 x\n".as_bytes(), "g.txt").unwrap_err();
        assert!(err.to_string().starts_with("g.txt:2:"));
    }
}
