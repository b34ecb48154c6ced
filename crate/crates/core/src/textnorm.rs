//! Written-to-spoken normalization for Swahili text.
//!
//! The output imitates what an ASR system emits: numbers spelled out as
//! Swahili cardinals, punctuation removed, everything lowercase, single
//! spaces.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

const UNITS: [&str; 10] = ["sifuri", "moja", "mbili", "tatu", "nne", "tano", "sita", "saba", "nane", "tisa"];

const TENS: [&str; 10] =
    ["", "kumi", "ishirini", "thelathini", "arobaini", "hamsini", "sitini", "sabini", "themanini", "tisini"];

/// Exclusive upper bound of [`number_to_swahili_words`].
pub const MAX_NUMBER: u64 = 1_000_000_000;

static PUNCTUATION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\p{P}$").unwrap());

fn is_unicode_punctuation(c: char) -> bool {
    let mut buf = [0u8; 4];
    PUNCTUATION.is_match(c.encode_utf8(&mut buf))
}

fn below_hundred(n: u64) -> String {
    debug_assert!(n < 100);
    let (tens, units) = ((n / 10) as usize, (n % 10) as usize);
    match (tens, units) {
        (0, u) => UNITS[u].to_string(),
        (t, 0) => TENS[t].to_string(),
        (t, u) => format!("{} na {}", TENS[t], UNITS[u]),
    }
}

/// Count that follows `elfu` or `milioni`. Read without `na` so that the
/// count can never absorb the `na ...` tail of the whole number.
fn multiplier(n: u64) -> String {
    debug_assert!((1..1000).contains(&n));
    let mut words = Vec::new();
    if n >= 100 {
        words.push("mia");
        words.push(UNITS[(n / 100) as usize]);
    }
    let rest = n % 100;
    if rest >= 10 {
        words.push(TENS[(rest / 10) as usize]);
    }
    if !rest.is_multiple_of(10) {
        words.push(UNITS[(rest % 10) as usize]);
    }
    words.join(" ")
}

/// Swahili cardinal for `0 <= n < 10^9`.
///
/// Larger components come first (`milioni`, `elfu`, `mia`); the final
/// sub-hundred part is joined with `na` whenever something precedes it.
///
/// ```
/// use stcascade::textnorm::number_to_swahili_words;
/// assert_eq!(number_to_swahili_words(205).unwrap(), "mia mbili na tano");
/// assert_eq!(number_to_swahili_words(1_000_001).unwrap(), "milioni moja na moja");
/// ```
pub fn number_to_swahili_words(n: u64) -> Result<String> {
    if n >= MAX_NUMBER {
        return Err(Error::UnsupportedNumber(n.to_string()));
    }
    if n == 0 {
        return Ok(UNITS[0].to_string());
    }
    let millions = n / 1_000_000;
    let thousands = n / 1000 % 1000;
    let hundreds = n / 100 % 10;
    let rest = n % 100;

    let mut parts = Vec::new();
    if millions > 0 {
        parts.push(format!("milioni {}", multiplier(millions)));
    }
    if thousands > 0 {
        parts.push(format!("elfu {}", multiplier(thousands)));
    }
    if hundreds > 0 {
        parts.push(format!("mia {}", UNITS[hundreds as usize]));
    }
    if rest > 0 {
        if parts.is_empty() {
            parts.push(below_hundred(rest));
        } else {
            parts.push(format!("na {}", below_hundred(rest)));
        }
    }
    Ok(parts.join(" "))
}

/// Signed variant used by the CLI: negative input is rejected.
pub fn number_to_swahili_words_signed(n: i64) -> Result<String> {
    if n < 0 {
        return Err(Error::UnsupportedNumber(n.to_string()));
    }
    number_to_swahili_words(n as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DigitPolicy {
    ToWords,
    Drop,
    Keep,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PunctuationSet {
    /// Every character in the Unicode `P*` general categories.
    Unicode,
    Chars(BTreeSet<char>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizerConfig {
    pub punctuation: PunctuationSet,
    /// Keep `'` and `’` when both neighbours are letters (ng'ombe).
    pub keep_inword_apostrophe: bool,
    pub digit_policy: DigitPolicy,
}

impl Default for NormalizerConfig {
    fn default() -> Self {
        Self { punctuation: PunctuationSet::Unicode, keep_inword_apostrophe: true, digit_policy: DigitPolicy::ToWords }
    }
}

impl NormalizerConfig {
    pub fn validate(&self) -> Result<()> {
        if let PunctuationSet::Chars(set) = &self.punctuation {
            if let Some(c) = set.iter().find(|c| c.is_alphanumeric()) {
                return Err(Error::invalid(format!("punctuation set must not contain letters or digits, found `{c}`")));
            }
        }
        Ok(())
    }

    fn is_punctuation(&self, c: char) -> bool {
        match &self.punctuation {
            PunctuationSet::Unicode => is_unicode_punctuation(c),
            PunctuationSet::Chars(set) => set.contains(&c),
        }
    }
}

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

/// Reads a run of ASCII digits. Runs too long for a cardinal are read digit
/// by digit.
fn spell_digit_run(run: &str) -> String {
    let trimmed = run.trim_start_matches('0');
    let value = if trimmed.is_empty() {
        Some(0)
    } else if trimmed.len() <= 9 {
        trimmed.parse::<u64>().ok()
    } else {
        None
    };
    match value.and_then(|v| number_to_swahili_words(v).ok()) {
        Some(words) => words,
        None => run.bytes().map(|b| UNITS[(b - b'0') as usize]).collect::<Vec<_>>().join(" "),
    }
}

fn replace_digits(s: &str, policy: DigitPolicy) -> String {
    if policy == DigitPolicy::Keep {
        return s.to_string();
    }
    let mut out = String::with_capacity(s.len());
    let mut run = String::new();
    let flush = |run: &mut String, out: &mut String| {
        if run.is_empty() {
            return;
        }
        if policy == DigitPolicy::ToWords {
            out.push(' ');
            out.push_str(&spell_digit_run(run));
            out.push(' ');
        }
        run.clear();
    };
    for c in s.chars() {
        if c.is_ascii_digit() {
            run.push(c);
        } else {
            flush(&mut run, &mut out);
            out.push(c);
        }
    }
    flush(&mut run, &mut out);
    out
}

fn strip_punctuation(s: &str, cfg: &NormalizerConfig) -> String {
    let chars: Vec<char> = s.chars().collect();
    chars
        .iter()
        .enumerate()
        .filter(|&(i, &c)| {
            if !cfg.is_punctuation(c) {
                return true;
            }
            cfg.keep_inword_apostrophe
                && is_apostrophe(c)
                && i > 0
                && chars[i - 1].is_alphabetic()
                && chars.get(i + 1).is_some_and(|n| n.is_alphabetic())
        })
        .map(|(_, &c)| c)
        .collect()
}

/// Converts written-form text to spoken form: digits to words, punctuation
/// removed, lowercase, whitespace collapsed. The function is idempotent.
///
/// ```
/// use stcascade::textnorm::{written_to_spoken, NormalizerConfig};
/// let cfg = NormalizerConfig::default();
/// assert_eq!(
///     written_to_spoken("Nina miaka 25.", &cfg),
///     "nina miaka ishirini na tano"
/// );
/// ```
pub fn written_to_spoken(s: &str, cfg: &NormalizerConfig) -> String {
    let composed: String = s.nfc().collect();
    let spelled = replace_digits(&composed, cfg.digit_policy);
    // Lowercasing first keeps the in-word apostrophe test stable: some
    // uppercase letters lowercase to a letter plus a combining mark.
    let lowered = spelled.to_lowercase();
    let stripped: String = strip_punctuation(&lowered, cfg).nfc().collect();
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn small_numbers() {
        assert_eq!(number_to_swahili_words(0).unwrap(), "sifuri");
        assert_eq!(number_to_swahili_words(7).unwrap(), "saba");
        assert_eq!(number_to_swahili_words(10).unwrap(), "kumi");
        assert_eq!(number_to_swahili_words(11).unwrap(), "kumi na moja");
        assert_eq!(number_to_swahili_words(25).unwrap(), "ishirini na tano");
        assert_eq!(number_to_swahili_words(99).unwrap(), "tisini na tisa");
    }

    #[test]
    fn compound_numbers() {
        assert_eq!(number_to_swahili_words(100).unwrap(), "mia moja");
        assert_eq!(number_to_swahili_words(205).unwrap(), "mia mbili na tano");
        assert_eq!(number_to_swahili_words(1000).unwrap(), "elfu moja");
        assert_eq!(number_to_swahili_words(21_000).unwrap(), "elfu ishirini moja");
        assert_eq!(number_to_swahili_words(20_001).unwrap(), "elfu ishirini na moja");
        assert_eq!(
            number_to_swahili_words(999_999_999).unwrap(),
            "milioni mia tisa tisini tisa elfu mia tisa tisini tisa mia tisa na tisini na tisa"
        );
    }

    #[test]
    fn out_of_range() {
        let err = number_to_swahili_words(MAX_NUMBER).unwrap_err();
        assert!(err.to_string().starts_with("unsupported number"));
        assert!(number_to_swahili_words_signed(-3).is_err());
    }

    #[test]
    fn injective_up_to_a_million() {
        let words: HashSet<String> = (0..=1_000_000).map(|n| number_to_swahili_words(n).unwrap()).collect();
        assert_eq!(words.len(), 1_000_001);
    }

    #[test]
    fn sentence_example() {
        let cfg = NormalizerConfig::default();
        let out = written_to_spoken("Sara, je! Haujui tena, thamani ya kikombe hiki?", &cfg);
        assert_eq!(out, "sara je haujui tena thamani ya kikombe hiki");
        assert_eq!(written_to_spoken(&out, &cfg), out);
        assert_eq!(written_to_spoken("", &cfg), "");
    }

    #[test]
    fn apostrophes_inside_words_survive() {
        let cfg = NormalizerConfig::default();
        assert_eq!(written_to_spoken("Ng'ombe 'wawili'.", &cfg), "ng'ombe wawili");
        let strict = NormalizerConfig { keep_inword_apostrophe: false, ..cfg };
        assert_eq!(written_to_spoken("Ng'ombe", &strict), "ngombe");
    }

    #[test]
    fn mixed_tokens_and_policies() {
        let cfg = NormalizerConfig::default();
        assert_eq!(written_to_spoken("Karatasi A4", &cfg), "karatasi a nne");
        assert_eq!(written_to_spoken("saa 007", &cfg), "saa saba");
        assert_eq!(written_to_spoken("1234567890", &cfg), "moja mbili tatu nne tano sita saba nane tisa sifuri");
        let drop = NormalizerConfig { digit_policy: DigitPolicy::Drop, ..Default::default() };
        assert_eq!(written_to_spoken("Nina miaka 25.", &drop), "nina miaka");
        let keep = NormalizerConfig { digit_policy: DigitPolicy::Keep, ..Default::default() };
        assert_eq!(written_to_spoken("Nina miaka 25.", &keep), "nina miaka 25");
    }

    #[test]
    fn explicit_punctuation_set() {
        let cfg = NormalizerConfig {
            punctuation: PunctuationSet::Chars([',', '!'].into_iter().collect()),
            ..Default::default()
        };
        assert_eq!(written_to_spoken("Sara, je! Haujui?", &cfg), "sara je haujui?");
        let bad =
            NormalizerConfig { punctuation: PunctuationSet::Chars(['a'].into_iter().collect()), ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dotted_capital_i_keeps_idempotence() {
        let cfg = NormalizerConfig::default();
        let once = written_to_spoken("\u{130}'a e,\u{301}", &cfg);
        assert_eq!(written_to_spoken(&once, &cfg), once);
    }

    #[test]
    fn symbols_are_not_punctuation() {
        let cfg = NormalizerConfig::default();
        assert_eq!(written_to_spoken("A+B = «C»", &cfg), "a+b = c");
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(s in "\\PC{0,40}") {
            let cfg = NormalizerConfig::default();
            let once = written_to_spoken(&s, &cfg);
            prop_assert_eq!(written_to_spoken(&once, &cfg), once.clone());
            prop_assert!(!once.contains("  "));
            prop_assert!(!once.chars().any(|c| c.is_ascii_digit()));
            // Uppercase letters with no lowercase mapping (e.g. U+03D2) stay.
            prop_assert!(once.chars().all(|c| c.to_lowercase().eq(std::iter::once(c))));
            for (i, c) in once.char_indices() {
                if is_unicode_punctuation(c) {
                    prop_assert!(is_apostrophe(c), "unexpected `{}` in {:?} at {}", c, once, i);
                }
            }
        }

        #[test]
        fn every_number_in_range_has_words(n in 0u64..MAX_NUMBER) {
            let words = number_to_swahili_words(n).unwrap();
            prop_assert!(!words.is_empty());
            prop_assert!(!words.contains("  "));
        }
    }
}
