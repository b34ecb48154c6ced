//! Byte-pair-encoding subword models.
//!
//! Words are split on whitespace and each word becomes the boundary marker
//! `▁` followed by its characters. Training greedily merges the most
//! frequent adjacent pair; ties go to the lexicographically smallest merged
//! string, so training is deterministic.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const WORD_BOUNDARY: char = '\u{2581}';
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const ASR_TAG: &str = "<asrS>";
pub const TEXT_TAG: &str = "<textS>";

/// Reserved tokens; they always take ids `0..SPECIALS.len()` in this order.
pub const SPECIALS: [&str; 5] = [UNK, BOS, EOS, ASR_TAG, TEXT_TAG];

pub type TokenId = u32;

fn is_special(s: &str) -> bool {
    SPECIALS.contains(&s)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeTrainConfig {
    pub vocab_size: usize,
    /// Pairs seen fewer times than this are never merged.
    pub min_frequency: u64,
}

impl BpeTrainConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self { vocab_size, min_frequency: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    vocab: Vec<String>,
    ids: HashMap<String, TokenId>,
    ranks: HashMap<(String, String), usize>,
}

/// Trains with the default minimum pair frequency of 2.
pub fn bpe_train<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<BpeModel> {
    BpeModel::train(corpus, &BpeTrainConfig::new(vocab_size))
}

/// Interned working state for training.
struct Trainer {
    pieces: Vec<String>,
    piece_ids: HashMap<String, u32>,
    words: Vec<(Vec<u32>, u64)>,
    pair_counts: HashMap<(u32, u32), u64>,
    pair_words: HashMap<(u32, u32), HashSet<usize>>,
}

impl Trainer {
    fn intern(&mut self, piece: &str) -> u32 {
        if let Some(&id) = self.piece_ids.get(piece) {
            return id;
        }
        let id = self.pieces.len() as u32;
        self.pieces.push(piece.to_string());
        self.piece_ids.insert(piece.to_string(), id);
        id
    }

    fn count_word(&mut self, w: usize, sign: i8) {
        let (symbols, freq) = &self.words[w];
        for pair in symbols.windows(2) {
            let key = (pair[0], pair[1]);
            let count = self.pair_counts.entry(key).or_insert(0);
            if sign > 0 {
                *count += freq;
                self.pair_words.entry(key).or_default().insert(w);
            } else {
                *count -= freq;
            }
        }
    }

    fn best_pair(&self, min_frequency: u64) -> Option<(u32, u32)> {
        let mut best: Option<((u32, u32), u64, String)> = None;
        for (&pair, &count) in &self.pair_counts {
            if count < min_frequency || count == 0 {
                continue;
            }
            let merged = format!("{}{}", self.pieces[pair.0 as usize], self.pieces[pair.1 as usize]);
            let better = match &best {
                None => true,
                Some((bp, bc, bm)) => {
                    count > *bc
                        || (count == *bc
                            && (merged < *bm
                                || (merged == *bm && self.pieces[pair.0 as usize] < self.pieces[bp.0 as usize])))
                }
            };
            if better {
                best = Some((pair, count, merged));
            }
        }
        best.map(|(pair, _, _)| pair)
    }

    fn apply_merge(&mut self, pair: (u32, u32), merged: u32) {
        let affected: Vec<usize> =
            self.pair_words.get(&pair).map(|set| set.iter().copied().collect()).unwrap_or_default();
        for w in affected {
            if !self.words[w].0.windows(2).any(|p| (p[0], p[1]) == pair) {
                continue;
            }
            self.count_word(w, -1);
            self.words[w].0 = merge_symbols(&self.words[w].0, pair, merged);
            self.count_word(w, 1);
        }
        self.pair_counts.retain(|_, c| *c > 0);
    }
}

fn merge_symbols<T: PartialEq + Copy>(symbols: &[T], pair: (T, T), merged: T) -> Vec<T> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(merged);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    out
}

impl BpeModel {
    /// Smallest vocabulary a corpus with this alphabet accepts (the size
    /// itself is rejected: at least one merge slot is required).
    pub fn minimum_vocab_size(alphabet_len: usize) -> usize {
        SPECIALS.len() + alphabet_len
    }

    /// Trains a model. Training stops early, with a smaller vocabulary, when
    /// no pair reaches `min_frequency`.
    pub fn train<S: AsRef<str>>(corpus: &[S], cfg: &BpeTrainConfig) -> Result<Self> {
        let mut word_freq: HashMap<&str, u64> = HashMap::new();
        for line in corpus {
            for word in line.as_ref().split_whitespace() {
                if !is_special(word) {
                    *word_freq.entry(word).or_insert(0) += 1;
                }
            }
        }
        if word_freq.is_empty() {
            return Err(Error::invalid("cannot train BPE on an empty corpus"));
        }
        if word_freq.keys().any(|w| w.contains(WORD_BOUNDARY)) {
            return Err(Error::invalid(format!("corpus contains the reserved boundary marker `{WORD_BOUNDARY}`")));
        }
        let mut alphabet: BTreeSet<char> = word_freq.keys().flat_map(|w| w.chars()).collect();
        alphabet.insert(WORD_BOUNDARY);
        let minimum = Self::minimum_vocab_size(alphabet.len());
        if cfg.vocab_size <= minimum {
            return Err(Error::invalid(format!(
                "vocab_size {} too small: this corpus needs more than {minimum} ({} specials + {} characters)",
                cfg.vocab_size,
                SPECIALS.len(),
                alphabet.len()
            )));
        }

        let mut trainer = Trainer {
            pieces: Vec::new(),
            piece_ids: HashMap::new(),
            words: Vec::new(),
            pair_counts: HashMap::new(),
            pair_words: HashMap::new(),
        };
        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for c in &alphabet {
            vocab.push(c.to_string());
            trainer.intern(&c.to_string());
        }
        let boundary = trainer.piece_ids[&WORD_BOUNDARY.to_string()];
        let mut sorted_words: Vec<(&str, u64)> = word_freq.into_iter().collect();
        sorted_words.sort_unstable();
        for (word, freq) in sorted_words {
            let mut symbols = vec![boundary];
            symbols.extend(word.chars().map(|c| trainer.piece_ids[&c.to_string()]));
            trainer.words.push((symbols, freq));
        }
        for w in 0..trainer.words.len() {
            trainer.count_word(w, 1);
        }

        let mut in_vocab: HashSet<String> = vocab.iter().cloned().collect();
        let mut merges = Vec::new();
        while vocab.len() < cfg.vocab_size {
            let Some(pair) = trainer.best_pair(cfg.min_frequency) else {
                break;
            };
            let left = trainer.pieces[pair.0 as usize].clone();
            let right = trainer.pieces[pair.1 as usize].clone();
            let merged_str = format!("{left}{right}");
            let merged = trainer.intern(&merged_str);
            trainer.apply_merge(pair, merged);
            merges.push((left, right));
            if in_vocab.insert(merged_str.clone()) {
                vocab.push(merged_str);
            }
        }
        Self::from_parts(merges, vocab)
    }

    fn from_parts(merges: Vec<(String, String)>, vocab: Vec<String>) -> Result<Self> {
        for (i, special) in SPECIALS.iter().enumerate() {
            if vocab.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::invalid(format!("vocabulary must start with `{special}` at id {i}")));
            }
        }
        let mut ids = HashMap::with_capacity(vocab.len());
        for (i, piece) in vocab.iter().enumerate() {
            if ids.insert(piece.clone(), i as TokenId).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary entry `{piece}`")));
            }
        }
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            if !ids.contains_key(&format!("{l}{r}")) {
                return Err(Error::invalid(format!("merge `{l} {r}` produces a piece missing from the vocabulary")));
            }
            if ranks.insert((l.clone(), r.clone()), rank).is_some() {
                return Err(Error::invalid(format!("duplicate merge `{l} {r}`")));
            }
        }
        Ok(Self { merges, vocab, ids, ranks })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn id(&self, piece: &str) -> Option<TokenId> {
        self.ids.get(piece).copied()
    }

    pub fn piece(&self, id: TokenId) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    fn encode_word(&self, word: &str, out: &mut Vec<String>) {
        let mut symbols: Vec<String> = std::iter::once(WORD_BOUNDARY.to_string())
            .chain(word.chars().map(|c| {
                let s = c.to_string();
                if self.ids.contains_key(&s) && c != WORD_BOUNDARY {
                    s
                } else {
                    UNK.to_string()
                }
            }))
            .collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|&r| (r, p)))
                .min_by_key(|(r, _)| *r)
                .map(|(_, p)| (p[0].clone(), p[1].clone()));
            let Some((left, right)) = best else { break };
            let merged = format!("{left}{right}");
            let mut next = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
                    next.push(merged.clone());
                    i += 2;
                } else {
                    next.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = next;
        }
        out.extend(symbols);
    }

    /// Segments `text` into subword pieces. Whitespace-delimited special
    /// tokens are emitted whole; characters outside the training alphabet
    /// become `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            if is_special(word) {
                out.push(word.to_string());
            } else {
                self.encode_word(word, &mut out);
            }
        }
        out
    }

    pub fn encode_ids(&self, text: &str) -> Vec<TokenId> {
        self.encode(text).iter().map(|p| self.ids.get(p).copied().unwrap_or(0)).collect()
    }

    /// Joins pieces back into text. Boundary markers become spaces and
    /// special tokens other than `<unk>` stand as separate words.
    pub fn decode_pieces<S: AsRef<str>>(&self, pieces: &[S]) -> Result<String> {
        let mut text = String::new();
        for piece in pieces {
            let piece = piece.as_ref();
            if !self.ids.contains_key(piece) {
                return Err(Error::invalid(format!("unknown token `{piece}`")));
            }
            if is_special(piece) && piece != UNK {
                text.push(' ');
                text.push_str(piece);
                text.push(' ');
            } else {
                text.extend(piece.chars().map(|c| if c == WORD_BOUNDARY { ' ' } else { c }));
            }
        }
        Ok(text.split_whitespace().collect::<Vec<_>>().join(" "))
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let pieces = ids
            .iter()
            .map(|&id| self.piece(id).ok_or_else(|| Error::invalid(format!("unknown token id {id}"))))
            .collect::<Result<Vec<_>>>()?;
        self.decode_pieces(&pieces)
    }

    /// Text format:
    ///
    /// ```text
    /// bpe vocab_size=<N> marker=▁ merges=<M>
    /// <left> <right>        (M lines, in merge order)
    /// <id> <piece>          (N lines, ids 0..N)
    /// ```
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "bpe vocab_size={} marker={WORD_BOUNDARY} merges={}", self.vocab.len(), self.merges.len())?;
        for (l, r) in &self.merges {
            writeln!(out, "{l} {r}")?;
        }
        for (i, piece) in self.vocab.iter().enumerate() {
            writeln!(out, "{i} {piece}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R, label: &str) -> Result<Self> {
        let lines: Vec<String> = input.lines().collect::<std::io::Result<_>>().map_err(|e| Error::io(label, e))?;
        let header = lines.first().ok_or_else(|| Error::parse(label, 1, "missing header"))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("bpe") {
            return Err(Error::parse(label, 1, "header must start with `bpe`"));
        }
        let mut vocab_size = None;
        let mut n_merges = None;
        for field in fields {
            let (key, value) =
                field.split_once('=').ok_or_else(|| Error::parse(label, 1, format!("bad header field `{field}`")))?;
            match key {
                "vocab_size" => vocab_size = value.parse::<usize>().ok(),
                "merges" => n_merges = value.parse::<usize>().ok(),
                "marker" if value == WORD_BOUNDARY.to_string() => {}
                "marker" => {
                    return Err(Error::parse(label, 1, format!("unsupported marker `{value}`")));
                }
                _ => return Err(Error::parse(label, 1, format!("unknown header field `{key}`"))),
            }
        }
        let (vocab_size, n_merges) =
            vocab_size.zip(n_merges).ok_or_else(|| Error::parse(label, 1, "header needs vocab_size and merges"))?;
        if lines.len() != 1 + n_merges + vocab_size {
            return Err(Error::parse(
                label,
                lines.len(),
                format!("expected {} lines, found {}", 1 + n_merges + vocab_size, lines.len()),
            ));
        }
        let mut merges = Vec::with_capacity(n_merges);
        for (i, line) in lines[1..1 + n_merges].iter().enumerate() {
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
                return Err(Error::parse(label, i + 2, "merge line must be `<left> <right>`"));
            }
            merges.push((parts[0].to_string(), parts[1].to_string()));
        }
        let mut vocab = Vec::with_capacity(vocab_size);
        for (i, line) in lines[1 + n_merges..].iter().enumerate() {
            let lineno = i + 2 + n_merges;
            let (id, piece) =
                line.split_once(' ').ok_or_else(|| Error::parse(label, lineno, "vocab line must be `<id> <piece>`"))?;
            if id.parse::<usize>().ok() != Some(i) {
                return Err(Error::parse(label, lineno, format!("expected id {i}, found `{id}`")));
            }
            if piece.is_empty() || piece.contains(char::is_whitespace) {
                return Err(Error::parse(label, lineno, "bad piece"));
            }
            vocab.push(piece.to_string());
        }
        Self::from_parts(merges, vocab).map_err(|e| Error::parse(label, 1, e.to_string()))
    }
}
