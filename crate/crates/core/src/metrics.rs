//! Corpus-level WER, BLEU and chrF.
//!
//! All three pool their sufficient statistics over the corpus before
//! computing the final score. BLEU tokenizes with the 13a rules used by
//! WMT scoring scripts and chrF follows the common 6-gram, beta = 2 setup,
//! so scores line up with sacreBLEU on single-reference input.

use std::collections::HashMap;
use std::hash::Hash;
use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPair {
    pub reference: String,
    pub hypothesis: String,
}

impl EvalPair {
    pub fn new(reference: impl Into<String>, hypothesis: impl Into<String>) -> Self {
        Self { reference: reference.into(), hypothesis: hypothesis.into() }
    }
}

/// Zips line-aligned reference and hypothesis texts.
pub fn pair_lines(references: &str, hypotheses: &str) -> Result<Vec<EvalPair>> {
    let refs: Vec<&str> = references.lines().collect();
    let hyps: Vec<&str> = hypotheses.lines().collect();
    if refs.len() != hyps.len() {
        return Err(Error::invalid(format!("{} reference lines but {} hypothesis lines", refs.len(), hyps.len())));
    }
    Ok(refs.into_iter().zip(hyps).map(|(r, h)| EvalPair::new(r, h)).collect())
}

/// Levenshtein distance with unit substitution, insertion and deletion
/// costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WerStats {
    pub errors: usize,
    pub reference_words: usize,
}

impl WerStats {
    pub fn percent(&self) -> f64 {
        100.0 * self.errors as f64 / self.reference_words as f64
    }
}

/// Word error counts over whitespace-separated words.
pub fn wer_stats(pairs: &[EvalPair]) -> Result<WerStats> {
    let mut stats = WerStats::default();
    for p in pairs {
        let r: Vec<&str> = p.reference.split_whitespace().collect();
        let h: Vec<&str> = p.hypothesis.split_whitespace().collect();
        stats.errors += edit_distance(&r, &h);
        stats.reference_words += r.len();
    }
    if stats.reference_words == 0 {
        return Err(Error::invalid("WER is undefined without reference words"));
    }
    Ok(stats)
}

/// Word error rate in percent.
pub fn wer(pairs: &[EvalPair]) -> Result<f64> {
    wer_stats(pairs).map(|s| s.percent())
}

/// The 13a tokenizer: splits off most ASCII punctuation and symbols, and
/// periods or commas unless they sit inside a number.
pub fn tokenize_13a(line: &str) -> String {
    static RULES: OnceLock<[(Regex, &str); 4]> = OnceLock::new();
    let rules = RULES.get_or_init(|| {
        [
            (Regex::new(r"([\{-~\[-` -&\(-\+:-@/])").unwrap(), " $1 "),
            (Regex::new(r"([^0-9])([\.,])").unwrap(), "$1 $2 "),
            (Regex::new(r"([\.,])([^0-9])").unwrap(), " $1 $2"),
            (Regex::new(r"([0-9])(-)").unwrap(), "$1 $2 "),
        ]
    });
    let mut line = line.replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
    if line.contains('&') {
        line = line.replace("&quot;", "\"").replace("&amp;", "&").replace("&lt;", "<").replace("&gt;", ">");
    }
    let mut line = format!(" {line} ");
    for (re, rep) in rules {
        line = re.replace_all(&line, *rep).into_owned();
    }
    line.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn counts<K: Eq + Hash>(items: impl Iterator<Item = K>) -> HashMap<K, usize> {
    let mut m = HashMap::new();
    for k in items {
        *m.entry(k).or_insert(0) += 1;
    }
    m
}

fn clipped_matches<K: Eq + Hash>(hyp: &HashMap<K, usize>, reference: &HashMap<K, usize>) -> usize {
    hyp.iter().map(|(k, &c)| c.min(reference.get(k).copied().unwrap_or(0))).sum()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum BleuSmoothing {
    /// Plain geometric mean; any order without matches gives 0.
    #[default]
    None,
    /// Halves the pseudo-count for each successive order without matches.
    Exp,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuConfig {
    pub lowercase: bool,
    pub smoothing: BleuSmoothing,
}

pub const BLEU_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BleuScore {
    pub score: f64,
    /// Modified n-gram precisions in percent.
    pub precisions: [f64; BLEU_ORDER],
    pub brevity_penalty: f64,
    pub hypothesis_length: usize,
    pub reference_length: usize,
}

/// Corpus BLEU with one reference per segment.
pub fn bleu(pairs: &[EvalPair], cfg: &BleuConfig) -> BleuScore {
    let mut correct = [0usize; BLEU_ORDER];
    let mut total = [0usize; BLEU_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    let prep = |s: &str| {
        let s = s.trim_end();
        tokenize_13a(&if cfg.lowercase { s.to_lowercase() } else { s.to_string() })
    };
    for p in pairs {
        let h = prep(&p.hypothesis);
        let r = prep(&p.reference);
        let h: Vec<&str> = h.split_whitespace().collect();
        let r: Vec<&str> = r.split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=BLEU_ORDER {
            let hc = counts(h.windows(n));
            let rc = counts(r.windows(n));
            total[n - 1] += h.len().saturating_sub(n - 1);
            correct[n - 1] += clipped_matches(&hc, &rc);
        }
    }

    let brevity_penalty = match hyp_len {
        0 => 0.0,
        c if c < ref_len => (1.0 - ref_len as f64 / c as f64).exp(),
        _ => 1.0,
    };
    let mut precisions = [0.0; BLEU_ORDER];
    let mut score = 0.0;
    if correct.iter().any(|&c| c > 0) {
        let mut pseudo = 1.0;
        let mut log_sum = 0.0;
        let mut zero = false;
        for n in 0..BLEU_ORDER {
            if total[n] == 0 {
                zero = true;
                break;
            }
            precisions[n] = if correct[n] > 0 {
                100.0 * correct[n] as f64 / total[n] as f64
            } else if cfg.smoothing == BleuSmoothing::Exp {
                pseudo *= 2.0;
                100.0 / (pseudo * total[n] as f64)
            } else {
                0.0
            };
            if precisions[n] == 0.0 {
                zero = true;
            } else {
                log_sum += precisions[n].ln();
            }
        }
        if !zero {
            score = brevity_penalty * (log_sum / BLEU_ORDER as f64).exp();
        }
    }
    BleuScore { score, precisions, brevity_penalty, hypothesis_length: hyp_len, reference_length: ref_len }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ChrfAveraging {
    /// Mean of the per-order F scores, with a tiny epsilon standing in for
    /// undefined precisions or recalls.
    #[default]
    PerOrderF,
    /// F score of the mean precision and mean recall over the orders that
    /// have both hypothesis and reference n-grams.
    MeanPrecisionRecall,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChrfConfig {
    pub char_order: usize,
    pub beta: f64,
    pub lowercase: bool,
    pub averaging: ChrfAveraging,
}

impl Default for ChrfConfig {
    fn default() -> Self {
        Self { char_order: 6, beta: 2.0, lowercase: false, averaging: ChrfAveraging::PerOrderF }
    }
}

/// Pooled per-order `(hypothesis, reference, matched)` n-gram counts.
pub fn chrf_statistics(pairs: &[EvalPair], cfg: &ChrfConfig) -> Vec<[usize; 3]> {
    let mut stats = vec![[0usize; 3]; cfg.char_order];
    let chars = |s: &str| -> Vec<char> {
        let s = if cfg.lowercase { s.to_lowercase() } else { s.to_string() };
        s.chars().filter(|c| !c.is_whitespace()).collect()
    };
    for p in pairs {
        let h = chars(&p.hypothesis);
        let r = chars(&p.reference);
        for n in 1..=cfg.char_order {
            let hc = counts(h.windows(n));
            let rc = counts(r.windows(n));
            let h_total = h.len().saturating_sub(n - 1);
            let r_total = r.len().saturating_sub(n - 1);
            let s = &mut stats[n - 1];
            // A segment without reference n-grams of this order contributes
            // no hypothesis n-grams either.
            s[0] += if r_total > 0 { h_total } else { 0 };
            s[1] += r_total;
            s[2] += clipped_matches(&hc, &rc);
        }
    }
    stats
}

/// Character n-gram F-score in percent.
pub fn chrf(pairs: &[EvalPair], cfg: &ChrfConfig) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("chrF needs at least one segment"));
    }
    if cfg.char_order == 0 || !(cfg.beta > 0.0) {
        return Err(Error::invalid("chrF needs a positive order and beta"));
    }
    const EPS: f64 = 1e-16;
    let factor = cfg.beta * cfg.beta;
    let f_beta = |prec: f64, rec: f64| {
        let denom = factor * prec + rec;
        if denom > 0.0 {
            (1.0 + factor) * prec * rec / denom
        } else {
            EPS
        }
    };
    let stats = chrf_statistics(pairs, cfg);
    let mut f_sum = 0.0;
    let (mut prec_sum, mut rec_sum, mut effective) = (0.0, 0.0, 0);
    for &[hyp, reference, matched] in &stats {
        let prec = if hyp > 0 { matched as f64 / hyp as f64 } else { EPS };
        let rec = if reference > 0 { matched as f64 / reference as f64 } else { EPS };
        f_sum += f_beta(prec, rec);
        if hyp > 0 && reference > 0 {
            prec_sum += prec;
            rec_sum += rec;
            effective += 1;
        }
    }
    Ok(match cfg.averaging {
        ChrfAveraging::PerOrderF => 100.0 * f_sum / cfg.char_order as f64,
        ChrfAveraging::MeanPrecisionRecall => {
            if effective == 0 {
                return Ok(0.0);
            }
            let (p, r) = (prec_sum / effective as f64, rec_sum / effective as f64);
            if p + r > 0.0 {
                100.0 * (1.0 + factor) * p * r / (factor * p + r)
            } else {
                0.0
            }
        }
    })
}
