//! Parameter sets, checkpoint averaging and table-driven toy scorers.
//!
//! A parameter file holds one entry per pair of lines:
//!
//! ```text
//! decoder.table shape 3,3
//! 0.0 1.5 -2.0 0.0 0.0 4.0 1.0 1.0 1.0
//! ```
//!
//! A scalar has shape `-`. Values are printed with enough digits to read
//! back bit-exactly.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use crate::decoder::{
    log_softmax, NextStates, PosteriorGrid, ScorerState, ScorerStep, SourceConditioned, StepScorer, EOS_ID,
};
use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;
use crate::subword::{TokenId, SPECIALS};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::invalid(format!("shape {shape:?} needs {expected} values, got {}", values.len())));
        }
        Ok(Self { shape, values })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let width = self.shape[1];
        &self.values[i * width..(i + 1) * width]
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::invalid(format!("bad parameter name '{name}'")));
        }
        let tensor = Tensor::new(shape, values).map_err(|e| Error::invalid(format!("{name}: {e}")))?;
        if self.entries.insert(name.clone(), tensor).is_some() {
            return Err(Error::invalid(format!("duplicate parameter '{name}'")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (name, t) in &self.entries {
            let shape = if t.shape.is_empty() {
                "-".to_string()
            } else {
                t.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
            };
            writeln!(out, "{name} shape {shape}")?;
            let values: Vec<String> = t.values.iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", values.join(" "))?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R, label: &str) -> Result<Self> {
        let mut set = Self::new();
        let mut lines = input.lines().enumerate();
        while let Some((i, header)) = lines.next() {
            let header = header.map_err(|e| Error::io(label, e))?;
            let lineno = i + 1;
            let fields: Vec<&str> = header.split_whitespace().collect();
            let [name, "shape", dims] = fields[..] else {
                return Err(Error::parse(label, lineno, "expected 'name shape d1,d2,...'"));
            };
            let shape = if dims == "-" {
                Vec::new()
            } else {
                dims.split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::parse(label, lineno, format!("bad shape '{dims}'")))?
            };
            let Some((j, body)) = lines.next() else {
                return Err(Error::parse(label, lineno + 1, format!("missing values for '{name}'")));
            };
            let body = body.map_err(|e| Error::io(label, e))?;
            let values = body
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse(label, j + 1, format!("bad value: {e}")))?;
            set.insert(name, shape, values).map_err(|e| Error::parse(label, j + 1, e.to_string()))?;
        }
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(file), &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Elementwise arithmetic mean of checkpoints with identical layouts.
pub fn average_checkpoints(sets: &[ParameterSet]) -> Result<ParameterSet> {
    let (first, rest) = sets.split_first().ok_or_else(|| Error::invalid("no checkpoints to average"))?;
    let mut sums = first.clone();
    for (k, set) in rest.iter().enumerate() {
        for name in set.entries.keys() {
            if !first.entries.contains_key(name) {
                return Err(Error::invalid(format!("checkpoint {} has extra parameter '{name}'", k + 1)));
            }
        }
        for (name, acc) in sums.entries.iter_mut() {
            let t = set
                .entries
                .get(name)
                .ok_or_else(|| Error::invalid(format!("checkpoint {} lacks parameter '{name}'", k + 1)))?;
            if t.shape != acc.shape {
                return Err(Error::invalid(format!(
                    "parameter '{name}' has shape {:?} in checkpoint {} but {:?} in checkpoint 0",
                    t.shape,
                    k + 1,
                    acc.shape
                )));
            }
            acc.values.iter_mut().zip(&t.values).for_each(|(a, v)| *a += v);
        }
    }
    let n = sets.len() as f64;
    for t in sums.entries.values_mut() {
        t.values.iter_mut().for_each(|v| *v /= n);
    }
    Ok(sums)
}

fn square_table(set: &ParameterSet, name: &str) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let t = set.get(name).ok_or_else(|| Error::invalid(format!("parameter '{name}' not found")))?;
    let [rows, cols] = t.shape[..] else {
        return Err(Error::invalid(format!("parameter '{name}' must be 2-D, has shape {:?}", t.shape)));
    };
    if rows == 0 || cols < 2 {
        return Err(Error::invalid(format!("parameter '{name}' has unusable shape {:?}", t.shape)));
    }
    let table = (0..rows).map(|i| log_softmax(t.row(i))).collect();
    Ok((rows, cols, table))
}

/// Bigram scorer: the next-token distribution is the softmax of the table
/// row for the previous token. Row 0 doubles as the start row, since the
/// end-of-sequence index never precedes another token.
#[derive(Debug, Clone)]
pub struct ToyTableScorer {
    table: Vec<Vec<f64>>,
}

impl ToyTableScorer {
    pub fn from_logits(rows: Vec<Vec<f64>>) -> Result<Self> {
        let v = rows.len();
        if v < 2 || rows.iter().any(|r| r.len() != v) {
            return Err(Error::invalid("toy table must be square with at least 2 rows"));
        }
        Ok(Self { table: rows.iter().map(|r| log_softmax(r)).collect() })
    }

    pub fn logp_after(&self, last: TokenId) -> &[f64] {
        &self.table[last as usize]
    }
}

pub fn toy_scorer_from_params(set: &ParameterSet, name: &str) -> Result<ToyTableScorer> {
    let (rows, cols, table) = square_table(set, name)?;
    if rows != cols {
        return Err(Error::invalid(format!("parameter '{name}' must have shape [V, V], has [{rows}, {cols}]")));
    }
    Ok(ToyTableScorer { table })
}

impl StepScorer for ToyTableScorer {
    fn vocab_size(&self) -> usize {
        self.table.len()
    }

    fn initial_state(&self) -> ScorerState {
        Arc::new(EOS_ID)
    }

    fn step(&self, state: &ScorerState, _prefix: &[TokenId]) -> Result<ScorerStep<'_>> {
        let last = *crate::decoder::downcast::<TokenId>(state)?;
        let row = self
            .table
            .get(last as usize)
            .ok_or_else(|| Error::invalid(format!("token {last} outside the toy table")))?;
        Ok(ScorerStep { logp: row.clone(), next: NextStates::Lazy(Box::new(|token| Arc::new(token) as ScorerState)) })
    }
}

/// Monotone toy translator over a `[V_src, V_tgt]` table: output step `i`
/// uses the row of the `i`-th non-special source token, and row 0 once the
/// source is exhausted.
#[derive(Debug, Clone)]
pub struct ToyTranslationScorer {
    table: Vec<Vec<f64>>,
    target_vocab: usize,
}

impl ToyTranslationScorer {
    pub fn from_params(set: &ParameterSet, name: &str) -> Result<Self> {
        let (_, cols, table) = square_table(set, name)?;
        Ok(Self { table, target_vocab: cols })
    }

    pub fn source_vocab_size(&self) -> usize {
        self.table.len()
    }
}

struct BoundTranslation<'a> {
    rows: Vec<&'a [f64]>,
    end_row: &'a [f64],
    target_vocab: usize,
}

impl SourceConditioned for ToyTranslationScorer {
    fn bind<'a>(&'a self, source: &[TokenId]) -> Result<Box<dyn StepScorer + 'a>> {
        let mut rows = Vec::new();
        for &id in source {
            if (id as usize) < SPECIALS.len() {
                continue;
            }
            let row = self
                .table
                .get(id as usize)
                .ok_or_else(|| Error::invalid(format!("source token {id} outside the translation table")))?;
            rows.push(row.as_slice());
        }
        Ok(Box::new(BoundTranslation { rows, end_row: &self.table[0], target_vocab: self.target_vocab }))
    }
}

impl StepScorer for BoundTranslation<'_> {
    fn vocab_size(&self) -> usize {
        self.target_vocab
    }

    fn initial_state(&self) -> ScorerState {
        Arc::new(())
    }

    fn step(&self, state: &ScorerState, prefix: &[TokenId]) -> Result<ScorerStep<'_>> {
        let row = self.rows.get(prefix.len()).copied().unwrap_or(self.end_row);
        Ok(ScorerStep { logp: row.to_vec(), next: NextStates::Shared(Arc::clone(state)) })
    }
}

/// Frame-wise linear classifier turning features into a CTC posterior grid:
/// `log_softmax(x W + b)` with `W` of shape `[n_mels, V]` and `b` of
/// shape `[V]`, column 0 being the blank.
#[derive(Debug, Clone)]
pub struct ToyAcousticModel {
    weight: Tensor,
    bias: Vec<f64>,
}

impl ToyAcousticModel {
    /// Reads `<name>.weight` and `<name>.bias`.
    pub fn from_params(set: &ParameterSet, name: &str) -> Result<Self> {
        let fetch = |suffix: &str| {
            let key = format!("{name}.{suffix}");
            set.get(&key).cloned().ok_or_else(|| Error::invalid(format!("parameter '{key}' not found")))
        };
        let weight = fetch("weight")?;
        let bias = fetch("bias")?;
        let [_, v] = weight.shape[..] else {
            return Err(Error::invalid(format!("'{name}.weight' must be 2-D, has shape {:?}", weight.shape)));
        };
        if v < 2 || bias.shape != [v] {
            return Err(Error::invalid(format!(
                "'{name}.bias' must have shape [{v}] matching the weight, has {:?}",
                bias.shape
            )));
        }
        Ok(Self { weight, bias: bias.values })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn posteriors(&self, feats: &FeatureMatrix) -> Result<PosteriorGrid> {
        if feats.n_mels() != self.input_dim() {
            return Err(Error::invalid(format!(
                "features have {} bins but the acoustic model expects {}",
                feats.n_mels(),
                self.input_dim()
            )));
        }
        let rows = feats
            .rows()
            .map(|x| {
                let mut logits = self.bias.clone();
                for (m, &xm) in x.iter().enumerate() {
                    for (l, w) in logits.iter_mut().zip(self.weight.row(m)) {
                        *l += xm as f64 * w;
                    }
                }
                log_softmax(&logits)
            })
            .collect();
        PosteriorGrid::new(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{beam_search, log_sum_exp, DecodeConfig, Scorers};
    use proptest::prelude::*;

    fn set_with(name: &str, shape: Vec<usize>, values: Vec<f64>) -> ParameterSet {
        let mut s = ParameterSet::new();
        s.insert(name, shape, values).unwrap();
        s
    }

    fn greedy(scorer: &dyn StepScorer, steps: usize) -> Vec<TokenId> {
        let cfg = DecodeConfig { beam_size: 1, ctc_weight: 0.0, att_weight: 1.0, ..Default::default() };
        let out = beam_search(&Scorers { attention: Some(scorer), ..Default::default() }, &cfg, steps).unwrap();
        out[0].tokens.clone()
    }

    #[test]
    fn file_round_trip() {
        let mut s = ParameterSet::new();
        s.insert("a.w", vec![2, 3], vec![0.1, -2.5, 1e-300, 3.0, f64::MAX, -0.0]).unwrap();
        s.insert("bias", vec![], vec![7.25]).unwrap();
        s.insert("empty", vec![0], vec![]).unwrap();
        let mut buf = Vec::new();
        s.write(&mut buf).unwrap();
        assert_eq!(ParameterSet::read(buf.as_slice(), "p").unwrap(), s);

        let mut buf = Vec::new();
        ParameterSet::new().write(&mut buf).unwrap();
        assert!(buf.is_empty());
        assert!(ParameterSet::read(buf.as_slice(), "p").unwrap().is_empty());
    }

    #[test]
    fn malformed_files_report_lines() {
        let err = ParameterSet::read("w shape 2,2\n1 2 3\n".as_bytes(), "m.params").unwrap_err();
        assert!(err.to_string().starts_with("m.params:2:"), "{err}");
        let err = ParameterSet::read("w shape 1\n1\nv shape x\n1\n".as_bytes(), "m").unwrap_err();
        assert!(err.to_string().starts_with("m:3:"), "{err}");
        assert!(ParameterSet::read("w shape 1\n".as_bytes(), "m").is_err());
        assert!(ParameterSet::read("w shape 1\n1\nw shape 1\n2\n".as_bytes(), "m").is_err());
    }

    #[test]
    fn averaging_examples() {
        let a = set_with("w", vec![2], vec![0.0, 0.0]);
        let b = set_with("w", vec![2], vec![2.0, 2.0]);
        assert_eq!(average_checkpoints(&[a.clone(), b]).unwrap(), set_with("w", vec![2], vec![1.0, 1.0]));
        assert_eq!(average_checkpoints(&[a.clone(), a.clone(), a.clone()]).unwrap(), a);
        assert!(average_checkpoints(&[]).is_err());

        let err = average_checkpoints(&[a.clone(), set_with("w", vec![1, 2], vec![0.0, 0.0])]).unwrap_err();
        assert!(err.to_string().contains("'w'"));
        let err = average_checkpoints(&[a.clone(), set_with("v", vec![2], vec![0.0, 0.0])]).unwrap_err();
        assert!(err.to_string().contains("'v'"));
    }

    #[test]
    fn uniform_table_gives_uniform_steps() {
        let s = toy_scorer_from_params(&set_with("t", vec![4, 4], vec![0.3; 16]), "t").unwrap();
        let out = s.step(&s.initial_state(), &[]).unwrap();
        assert!(out.logp.iter().all(|v| (v - 0.25f64.ln()).abs() < 1e-15));
        assert!(toy_scorer_from_params(&set_with("t", vec![4, 3], vec![0.0; 12]), "t").is_err());
        assert!(toy_scorer_from_params(&set_with("t", vec![4, 4], vec![0.0; 16]), "u").is_err());
    }

    /// Row `i` strongly prefers `forced[i]`, so greedy decoding walks the
    /// forced chain 1 → 2 → 3 → end.
    #[test]
    fn peaked_table_forces_sequence() {
        let mut rows = vec![vec![0.0; 4]; 4];
        for (from, to) in [(0, 1), (1, 2), (2, 3), (3, 0)] {
            rows[from][to] = 20.0;
        }
        let s = ToyTableScorer::from_logits(rows).unwrap();
        assert_eq!(greedy(&s, 10), vec![1, 2, 3]);
    }

    #[test]
    fn averaged_tables_decode_like_hand_average() {
        // Table A walks 1 → 2 → end, table B walks 2 → 1 → end. Averaged
        // logits by hand, with A's start row weighted more heavily.
        let a = set_with("t", vec![3, 3], vec![0.0, 6.0, 0.0, 8.0, 0.0, 6.0, 6.0, 0.0, 0.0]);
        let b = set_with("t", vec![3, 3], vec![0.0, 0.0, 4.0, 6.0, 0.0, 0.0, 0.0, 6.0, 0.0]);
        let avg = average_checkpoints(&[a, b]).unwrap();
        let hand =
            ToyTableScorer::from_logits(vec![vec![0.0, 3.0, 2.0], vec![7.0, 0.0, 3.0], vec![3.0, 3.0, 0.0]]).unwrap();
        let from_avg = toy_scorer_from_params(&avg, "t").unwrap();
        assert_eq!(greedy(&from_avg, 5), greedy(&hand, 5));
        assert_eq!(greedy(&hand, 5), vec![1]);
    }

    #[test]
    fn translation_scorer_follows_source() {
        // Source vocab: 5 specials plus ids 5 and 6; target vocab of 3.
        let mut values = vec![0.0; 7 * 3];
        values[0] = 30.0; // exhausted source: end
        values[5 * 3 + 2] = 30.0;
        values[6 * 3 + 1] = 30.0;
        let t = ToyTranslationScorer::from_params(&set_with("mt", vec![7, 3], values), "mt").unwrap();
        let bound = t.bind(&[3, 6, 5, 6]).unwrap();
        assert_eq!(greedy(bound.as_ref(), 12), vec![1, 2, 1]);
        assert!(t.bind(&[9]).is_err());
    }

    #[test]
    fn acoustic_model_picks_the_loud_bin() {
        let mut set = ParameterSet::new();
        set.insert("am.weight", vec![2, 3], vec![0.0, 1.0, -1.0, 0.0, -1.0, 1.0]).unwrap();
        set.insert("am.bias", vec![3], vec![2.0, 0.0, 0.0]).unwrap();
        let am = ToyAcousticModel::from_params(&set, "am").unwrap();
        let feats = FeatureMatrix::from_rows(vec![vec![5.0, 0.0], vec![0.0, 0.0], vec![0.0, 5.0]], 25.0, 10.0).unwrap();
        let grid = am.posteriors(&feats).unwrap();
        let argmax: Vec<usize> =
            (0..3).map(|t| (0..3).max_by(|&a, &b| grid.logp(t, a).total_cmp(&grid.logp(t, b))).unwrap()).collect();
        assert_eq!(argmax, vec![1, 0, 2]);
        let wrong = FeatureMatrix::from_rows(vec![vec![0.0; 3]], 25.0, 10.0).unwrap();
        assert!(am.posteriors(&wrong).is_err());
        assert!(ToyAcousticModel::from_params(&set, "lm").is_err());
    }

    proptest! {
        #[test]
        fn averaging_permutation_and_singleton(
            vals in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 6), 1..6),
            rot in 0usize..6,
        ) {
            let sets: Vec<_> = vals.iter().map(|v| set_with("w", vec![2, 3], v.clone())).collect();
            let avg = average_checkpoints(&sets).unwrap();
            let mut rotated = sets.clone();
            rotated.rotate_left(rot % sets.len());
            let other = average_checkpoints(&rotated).unwrap();
            for (x, y) in avg.get("w").unwrap().values.iter().zip(&other.get("w").unwrap().values) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
            prop_assert_eq!(average_checkpoints(&sets[..1]).unwrap(), sets[0].clone());
        }

        #[test]
        fn toy_steps_normalize(vals in prop::collection::vec(-50f64..50.0, 9), last in 0u32..3) {
            let s = toy_scorer_from_params(&set_with("t", vec![3, 3], vals), "t").unwrap();
            let out = s.step(&(Arc::new(last) as ScorerState), &[]).unwrap();
            prop_assert!(log_sum_exp(&out.logp).abs() < 1e-9);
        }
    }
}
