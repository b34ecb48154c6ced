//! Parallel corpus preparation: deduplication, multi-task tagging, random
//! validation splits and size statistics.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::subword::{ASR_TAG, TEXT_TAG};
use crate::textnorm::{written_to_spoken, NormalizerConfig};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CorpusEntry {
    pub source: String,
    pub target: String,
    /// Dataset the pair came from.
    pub origin: String,
}

impl CorpusEntry {
    pub fn new(source: impl Into<String>, target: impl Into<String>, origin: impl Into<String>) -> Result<Self> {
        let entry = Self { source: source.into(), target: target.into(), origin: origin.into() };
        if entry.source.trim().is_empty() && entry.target.trim().is_empty() {
            return Err(Error::invalid("entry has empty source and empty target"));
        }
        for field in [&entry.source, &entry.target, &entry.origin] {
            if field.contains(['\t', '\n', '\r']) {
                return Err(Error::invalid("corpus fields cannot contain tabs or line breaks"));
            }
        }
        Ok(entry)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub entries: Vec<CorpusEntry>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub sentences: usize,
    pub source_words: usize,
}

fn squash_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl ParallelCorpus {
    pub fn new(entries: Vec<CorpusEntry>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One `source \t target \t origin` triple per line. Blank lines are
    /// skipped.
    pub fn read_tsv<R: BufRead>(input: R, label: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::io(label, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::parse(
                    label,
                    i + 1,
                    format!("expected 3 tab-separated fields, found {}", fields.len()),
                ));
            }
            let entry = CorpusEntry::new(fields[0], fields[1], fields[2])
                .map_err(|e| Error::parse(label, i + 1, e.to_string()))?;
            entries.push(entry);
        }
        Ok(Self { entries })
    }

    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.entries {
            writeln!(out, "{}\t{}\t{}", e.source, e.target, e.origin)?;
        }
        Ok(())
    }

    /// Drops repeated `(source, target)` pairs, comparing after whitespace
    /// normalization. The first occurrence (and its origin) is kept.
    pub fn dedup(&self) -> Self {
        let mut seen = HashSet::with_capacity(self.entries.len());
        let entries = self
            .entries
            .iter()
            .filter(|e| seen.insert((squash_whitespace(&e.source), squash_whitespace(&e.target))))
            .cloned()
            .collect();
        Self { entries }
    }

    /// Every pair becomes a `<textS>`-tagged original and an `<asrS>`-tagged
    /// spoken-form copy, adjacent and in that order.
    pub fn make_multitask(&self, cfg: &NormalizerConfig) -> Self {
        let mut entries = Vec::with_capacity(self.entries.len() * 2);
        for e in &self.entries {
            let spoken = written_to_spoken(&e.source, cfg);
            entries.push(CorpusEntry {
                source: format!("{TEXT_TAG} {}", e.source).trim_end().to_string(),
                target: e.target.clone(),
                origin: e.origin.clone(),
            });
            entries.push(CorpusEntry {
                source: format!("{ASR_TAG} {spoken}").trim_end().to_string(),
                target: e.target.clone(),
                origin: e.origin.clone(),
            });
        }
        Self { entries }
    }

    /// Indices drawn for validation: a partial Fisher-Yates shuffle of
    /// `0..len` driven by SplitMix64, returned in ascending order.
    pub fn sample_indices(len: usize, n_valid: usize, seed: u64) -> Result<Vec<usize>> {
        if n_valid > len {
            return Err(Error::invalid(format!("cannot draw {n_valid} validation entries from a corpus of {len}")));
        }
        let mut rng = SplitMix64::new(seed);
        let mut order: Vec<usize> = (0..len).collect();
        for i in 0..n_valid {
            let j = i + rng.below((len - i) as u64) as usize;
            order.swap(i, j);
        }
        let mut picked = order[..n_valid].to_vec();
        picked.sort_unstable();
        Ok(picked)
    }

    /// Splits into `(train, valid)`; both keep the original relative order.
    pub fn split_random(&self, n_valid: usize, seed: u64) -> Result<(Self, Self)> {
        let picked = Self::sample_indices(self.len(), n_valid, seed)?;
        let mut is_valid = vec![false; self.len()];
        for &i in &picked {
            is_valid[i] = true;
        }
        let (valid, train): (Vec<_>, Vec<_>) = self.entries.iter().cloned().zip(is_valid).partition(|(_, v)| *v);
        Ok((
            Self::new(train.into_iter().map(|(e, _)| e).collect()),
            Self::new(valid.into_iter().map(|(e, _)| e).collect()),
        ))
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats {
            sentences: self.entries.len(),
            source_words: self.entries.iter().map(|e| e.source.split_whitespace().count()).sum(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(s: &str, t: &str, o: &str) -> CorpusEntry {
        CorpusEntry::new(s, t, o).unwrap()
    }

    fn corpus(pairs: &[(&str, &str)]) -> ParallelCorpus {
        ParallelCorpus::new(pairs.iter().map(|(s, t)| entry(s, t, "x")).collect())
    }

    #[test]
    fn dedup_keeps_first_origin() {
        let c = ParallelCorpus::new(vec![
            entry("habari", "hello", "gamayun"),
            entry("asante", "thanks", "jw300"),
            entry("habari  ", " hello", "tanzil"),
        ]);
        let d = c.dedup();
        assert_eq!(d.len(), 2);
        assert_eq!(d.entries[0].origin, "gamayun");
        assert_eq!(d.dedup(), d);

        let distinct = corpus(&[("a", "b"), ("b", "a"), ("a", "c")]);
        assert_eq!(distinct.dedup(), distinct);
    }

    #[test]
    fn multitask_tags_both_variants() {
        let c = ParallelCorpus::new(vec![entry(
            "Sara, je! Haujui tena, thamani ya kikombe hiki?",
            "Tu ne connais donc pas, Sarah, la valeur de cette coupe ?",
            "iwslt",
        )]);
        let m = c.make_multitask(&NormalizerConfig::default());
        assert_eq!(m.len(), 2);
        assert_eq!(m.entries[0].source, "<textS> Sara, je! Haujui tena, thamani ya kikombe hiki?");
        assert_eq!(m.entries[1].source, "<asrS> sara je haujui tena thamani ya kikombe hiki");
        assert!(m.entries.iter().all(|e| e.target == c.entries[0].target));
        assert!(ParallelCorpus::default().make_multitask(&NormalizerConfig::default()).is_empty());
    }

    #[test]
    fn multitask_on_spoken_source_differs_only_in_tag() {
        let c = corpus(&[("sara je", "sarah")]);
        let m = c.make_multitask(&NormalizerConfig::default());
        assert_eq!(m.entries[0].source.strip_prefix("<textS>"), m.entries[1].source.strip_prefix("<asrS>"));
    }

    #[test]
    fn split_edges() {
        let c = corpus(&[("a", "1"), ("b", "2"), ("c", "3")]);
        let (train, valid) = c.split_random(0, 9).unwrap();
        assert_eq!((train, valid.len()), (c.clone(), 0));
        let (train, valid) = c.split_random(3, 9).unwrap();
        assert_eq!((train.len(), valid), (0, c.clone()));
        assert!(c.split_random(4, 9).is_err());
    }

    #[test]
    fn stats_counts() {
        assert_eq!(ParallelCorpus::default().stats(), CorpusStats { sentences: 0, source_words: 0 });
        assert_eq!(corpus(&[("a b c", "x")]).stats(), CorpusStats { sentences: 1, source_words: 3 });
        assert_eq!(corpus(&[("a", "x"), ("b b", "y")]).stats(), CorpusStats { sentences: 2, source_words: 3 });
    }

    #[test]
    fn tsv_round_trip_and_errors() {
        let c = corpus(&[("a b", "c"), ("d", "e")]);
        let mut buf = Vec::new();
        c.write_tsv(&mut buf).unwrap();
        assert_eq!(ParallelCorpus::read_tsv(buf.as_slice(), "m").unwrap(), c);
        let err = ParallelCorpus::read_tsv("a\tb\tc\nbad line\n".as_bytes(), "c.tsv").unwrap_err();
        assert!(err.to_string().starts_with("c.tsv:2:"));
        assert!(ParallelCorpus::read_tsv(" \t \tx\n".as_bytes(), "c.tsv").is_err());
    }

    proptest! {
        #[test]
        fn split_partitions(n in 0usize..60, frac in 0.0f64..=1.0, seed in any::<u64>()) {
            let entries: Vec<_> = (0..n).map(|i| entry(&format!("s{i}"), "t", "o")).collect();
            let c = ParallelCorpus::new(entries);
            let k = ((n as f64) * frac).floor() as usize;
            let (train, valid) = c.split_random(k, seed).unwrap();
            prop_assert_eq!(valid.len(), k);
            prop_assert_eq!(train.len() + valid.len(), n);
            let tr: HashSet<_> = train.entries.iter().map(|e| e.source.clone()).collect();
            prop_assert!(valid.entries.iter().all(|e| !tr.contains(&e.source)));
            prop_assert_eq!(c.split_random(k, seed).unwrap(), (train, valid));
        }

        #[test]
        fn dedup_shrinks_and_keeps_order(idx in prop::collection::vec(0usize..5, 0..30)) {
            let entries: Vec<_> = idx.iter().map(|i| entry(&format!("s{i}"), "t", "o")).collect();
            let c = ParallelCorpus::new(entries);
            let d = c.dedup();
            prop_assert!(d.len() <= c.len());
            let positions: Vec<usize> = d.entries.iter()
                .map(|e| c.entries.iter().position(|x| x == e).unwrap())
                .collect();
            prop_assert!(positions.windows(2).all(|w| w[0] < w[1]));
            let m = c.make_multitask(&NormalizerConfig::default());
            prop_assert_eq!(m.len(), 2 * c.len());
        }
    }
}
