//! Config-driven pipelines.
//!
//! A pipeline file is line oriented. Top-level `key = value` lines come
//! first, then one section per stage:
//!
//! ```text
//! seed = 7
//! manifest = run/manifest.json
//!
//! [stage normalize]
//! input = text.sw
//! output = run/text.norm
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Relative paths are
//! resolved against the directory holding the config. Input and output
//! values of the per-utterance stages (`feats`, `augment`, `decode`) and
//! `avg-ckpt` inputs may be comma-separated lists.
//!
//! Every input must exist or be produced by an earlier stage. Inputs are
//! hashed before their stage runs and outputs are written through a
//! temporary file and a rename, so a failed stage never leaves a partial
//! output behind. The JSON manifest records paths as written in the config
//! and contains no timestamps, so identical runs produce identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::ParallelCorpus;
use crate::decoder::{
    beam_search, default_asr_config, default_mt_config, CtcPrefixScorer, DecodeConfig, MtTarget, PosteriorGrid,
    Scorers, SourceConditioned, StepScorer,
};
use crate::error::{Error, Result};
use crate::frontend::{
    log_mel_fbank, resample, spec_augment, speed_perturb, FbankConfig, FeatureMatrix, MaskFill, SpecAugmentConfig,
    Waveform,
};
use crate::metrics::{bleu, chrf, pair_lines, wer, BleuConfig, BleuSmoothing, ChrfAveraging, ChrfConfig};
use crate::modelio::{
    average_checkpoints, toy_scorer_from_params, ParameterSet, ToyAcousticModel, ToyTableScorer, ToyTranslationScorer,
};
use crate::rng::derive_seed;
use crate::subword::{BpeModel, BpeTrainConfig, ASR_TAG, TEXT_TAG};
use crate::textnorm::{written_to_spoken, DigitPolicy, NormalizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StageKind {
    Normalize,
    Tag,
    BpeTrain,
    BpeApply,
    BpeDecode,
    Dedup,
    Multitask,
    Split,
    Stats,
    Feats,
    Augment,
    AvgCkpt,
    Decode,
    Translate,
    Wer,
    Bleu,
    Chrf,
}

const KIND_NAMES: &[(StageKind, &str)] = &[
    (StageKind::Normalize, "normalize"),
    (StageKind::Tag, "tag"),
    (StageKind::BpeTrain, "bpe-train"),
    (StageKind::BpeApply, "bpe-apply"),
    (StageKind::BpeDecode, "bpe-decode"),
    (StageKind::Dedup, "dedup"),
    (StageKind::Multitask, "multitask"),
    (StageKind::Split, "split"),
    (StageKind::Stats, "stats"),
    (StageKind::Feats, "feats"),
    (StageKind::Augment, "augment"),
    (StageKind::AvgCkpt, "avg-ckpt"),
    (StageKind::Decode, "decode"),
    (StageKind::Translate, "translate"),
    (StageKind::Wer, "wer"),
    (StageKind::Bleu, "bleu"),
    (StageKind::Chrf, "chrf"),
];

impl StageKind {
    pub fn name(self) -> &'static str {
        KIND_NAMES.iter().find(|(k, _)| *k == self).map(|(_, n)| *n).unwrap()
    }

    pub fn all() -> impl Iterator<Item = StageKind> {
        KIND_NAMES.iter().map(|(k, _)| *k)
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KIND_NAMES
            .iter()
            .find(|(_, n)| *n == s)
            .map(|(k, _)| *k)
            .ok_or_else(|| Error::invalid(format!("unknown stage kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Input,
    Output,
    Param,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ty {
    Path,
    Usize,
    U64,
    F64,
    Bool,
    Text,
    Choice(&'static [&'static str]),
}

struct Key {
    name: &'static str,
    role: Role,
    ty: Ty,
    /// `None` for required keys, `Some("")` for optional keys without a
    /// default.
    default: Option<&'static str>,
}

const fn input(name: &'static str) -> Key {
    Key { name, role: Role::Input, ty: Ty::Path, default: None }
}

const fn opt_input(name: &'static str) -> Key {
    Key { name, role: Role::Input, ty: Ty::Path, default: Some("") }
}

const fn output(name: &'static str) -> Key {
    Key { name, role: Role::Output, ty: Ty::Path, default: None }
}

const fn param(name: &'static str, ty: Ty, default: Option<&'static str>) -> Key {
    Key { name, role: Role::Param, ty, default }
}

const DIGITS: &[&str] = &["words", "drop", "keep"];
const TAGS: &[&str] = &["asr", "text"];
const FILLS: &[&str] = &["zero", "mean"];
const TARGETS: &[&str] = &["en", "fr"];
const SMOOTHING: &[&str] = &["none", "exp"];
const CHRF_AVERAGING: &[&str] = &["f", "pr"];

fn keys(kind: StageKind) -> Vec<Key> {
    use StageKind::*;
    match kind {
        Normalize => vec![
            input("input"),
            output("output"),
            param("digits", Ty::Choice(DIGITS), Some("words")),
            param("keep_apostrophe", Ty::Bool, Some("true")),
        ],
        Tag => vec![input("input"), output("output"), param("tag", Ty::Choice(TAGS), Some("asr"))],
        BpeTrain => vec![
            input("input"),
            output("output"),
            param("vocab_size", Ty::Usize, None),
            param("min_frequency", Ty::U64, Some("2")),
        ],
        BpeApply | BpeDecode => vec![input("model"), input("input"), output("output")],
        Dedup | Multitask | Stats => vec![input("input"), output("output")],
        Split => vec![input("input"), output("train"), output("valid"), param("n_valid", Ty::Usize, None)],
        Feats => vec![
            input("input"),
            output("output"),
            param("n_mels", Ty::Usize, Some("80")),
            param("sample_rate", Ty::U64, Some("16000")),
            param("frame_ms", Ty::F64, Some("25")),
            param("shift_ms", Ty::F64, Some("10")),
            param("speed", Ty::F64, Some("1.0")),
        ],
        Augment => vec![
            input("input"),
            output("output"),
            param("freq_masks", Ty::Usize, Some("2")),
            param("freq_width", Ty::Usize, Some("30")),
            param("time_masks", Ty::Usize, Some("2")),
            param("time_width", Ty::Usize, Some("40")),
            param("fill", Ty::Choice(FILLS), Some("zero")),
        ],
        AvgCkpt => vec![input("input"), output("output")],
        Decode => vec![
            opt_input("grid"),
            opt_input("feats"),
            opt_input("acoustic"),
            param("acoustic_entry", Ty::Text, Some("am")),
            opt_input("attention"),
            param("attention_entry", Ty::Text, Some("att")),
            opt_input("lm"),
            param("lm_entry", Ty::Text, Some("lm")),
            input("bpe"),
            output("output"),
            param("beam", Ty::Usize, Some("30")),
            param("ctc_weight", Ty::F64, Some("0.5")),
            param("att_weight", Ty::F64, Some("0.5")),
            param("lm_weight", Ty::F64, Some("0")),
            param("nbest", Ty::Usize, Some("1")),
            param("max_len_ratio", Ty::F64, Some("1.0")),
        ],
        Translate => vec![
            input("input"),
            output("output"),
            input("model"),
            param("model_entry", Ty::Text, Some("mt")),
            input("source_bpe"),
            input("target_bpe"),
            param("target", Ty::Choice(TARGETS), Some("en")),
            // Empty means the default for the target language.
            param("beam", Ty::Usize, Some("")),
            opt_input("lm"),
            param("lm_entry", Ty::Text, Some("lm")),
            param("lm_weight", Ty::F64, Some("0")),
            param("max_len_ratio", Ty::F64, Some("3.0")),
        ],
        Wer => vec![input("reference"), input("hypothesis"), output("output")],
        Bleu => vec![
            input("reference"),
            input("hypothesis"),
            output("output"),
            param("lowercase", Ty::Bool, Some("false")),
            param("smooth", Ty::Choice(SMOOTHING), Some("none")),
        ],
        Chrf => vec![
            input("reference"),
            input("hypothesis"),
            output("output"),
            param("lowercase", Ty::Bool, Some("false")),
            param("averaging", Ty::Choice(CHRF_AVERAGING), Some("f")),
            param("order", Ty::Usize, Some("6")),
            param("beta", Ty::F64, Some("2")),
        ],
    }
}

fn list_valued(kind: StageKind, key: &str) -> bool {
    matches!(
        (kind, key),
        (StageKind::Feats | StageKind::Augment, "input" | "output")
            | (StageKind::Decode, "grid" | "feats" | "output")
            | (StageKind::AvgCkpt, "input")
    )
}

fn split_list(value: &str) -> Vec<String> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect()
}

fn check_type(name: &str, ty: Ty, value: &str) -> Result<()> {
    let bad = |msg: String| Error::Parameter { name: name.to_string(), msg };
    match ty {
        Ty::Path | Ty::Text => {
            if value.is_empty() {
                return Err(bad("must not be empty".into()));
            }
        }
        Ty::Usize | Ty::U64 => {
            value.parse::<u64>().map_err(|_| bad(format!("expected a non-negative integer, got '{value}'")))?;
        }
        Ty::F64 => {
            let v = value.parse::<f64>().map_err(|_| bad(format!("expected a number, got '{value}'")))?;
            if !v.is_finite() {
                return Err(bad(format!("expected a finite number, got '{value}'")));
            }
        }
        Ty::Bool => {
            if !matches!(value, "true" | "false") {
                return Err(bad(format!("expected true or false, got '{value}'")));
            }
        }
        Ty::Choice(options) => {
            if !options.contains(&value) {
                return Err(bad(format!("expected one of {}, got '{value}'", options.join(", "))));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub kind: StageKind,
    /// Values as written, without defaults.
    pub params: BTreeMap<String, String>,
    /// Line of the section header, for error messages.
    pub line: usize,
}

impl StageConfig {
    pub fn new(kind: StageKind) -> Self {
        Self { kind, params: BTreeMap::new(), line: 0 }
    }

    pub fn with(mut self, key: &str, value: impl Into<String>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }

    /// Parameters with defaults filled in, checked against the stage's keys.
    fn effective(&self) -> Result<BTreeMap<String, String>> {
        let spec = keys(self.kind);
        for k in self.params.keys() {
            if !spec.iter().any(|s| s.name == k) {
                return Err(Error::Parameter { name: k.clone(), msg: format!("not a key of stage '{}'", self.kind) });
            }
        }
        let mut out = BTreeMap::new();
        for key in spec {
            let value = match (self.params.get(key.name), key.default) {
                (Some(v), _) => v.clone(),
                (None, Some(d)) => d.to_string(),
                (None, None) => {
                    return Err(Error::Parameter { name: key.name.to_string(), msg: "required".into() });
                }
            };
            if value.is_empty() && key.default == Some("") && !self.params.contains_key(key.name) {
                continue;
            }
            if list_valued(self.kind, key.name) {
                let items = split_list(&value);
                if items.is_empty() {
                    return Err(Error::Parameter { name: key.name.to_string(), msg: "empty list".into() });
                }
            } else {
                check_type(key.name, key.ty, &value)?;
            }
            out.insert(key.name.to_string(), value);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Manifest location, relative to the base directory.
    pub manifest: String,
    pub stages: Vec<StageConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { seed: 0, manifest: "manifest.json".into(), stages: Vec::new() }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str, label: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut current: Option<StageConfig> = None;
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(inner) = line.strip_prefix('[') {
                let inner = inner
                    .strip_suffix(']')
                    .ok_or_else(|| Error::parse(label, lineno, "unterminated section header"))?;
                let name = inner.trim();
                let name = name.strip_prefix("stage").map(str::trim).unwrap_or(name);
                let kind = name.parse::<StageKind>().map_err(|e| Error::parse(label, lineno, e.to_string()))?;
                cfg.stages.extend(current.take());
                current = Some(StageConfig { kind, params: BTreeMap::new(), line: lineno });
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(label, lineno, "expected 'key = value' or '[stage kind]'"))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(Error::parse(label, lineno, "empty key"));
            }
            match current.as_mut() {
                Some(stage) => {
                    if stage.params.insert(key.to_string(), value.to_string()).is_some() {
                        return Err(Error::parse(label, lineno, format!("duplicate key '{key}'")));
                    }
                }
                None => match key {
                    "seed" => {
                        cfg.seed =
                            value.parse().map_err(|_| Error::parse(label, lineno, format!("bad seed '{value}'")))?;
                    }
                    "manifest" if !value.is_empty() => cfg.manifest = value.to_string(),
                    _ => return Err(Error::parse(label, lineno, format!("unknown top-level key '{key}'"))),
                },
            }
        }
        cfg.stages.extend(current);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Checks every stage's keys and values, and that each input either
    /// exists under `base` or is an output of an earlier stage.
    pub fn validate(&self, base: &Path) -> Result<()> {
        let mut produced: BTreeSet<PathBuf> = BTreeSet::new();
        for (index, stage) in self.stages.iter().enumerate() {
            let wrap = |e: Error| Error::Stage { index, kind: stage.kind.to_string(), source: Box::new(e) };
            let params = stage.effective().map_err(wrap)?;
            check_stage(stage.kind, &params).map_err(wrap)?;
            for (key, paths) in role_paths(stage.kind, &params, Role::Input) {
                for p in paths {
                    let full = base.join(&p);
                    if !produced.contains(&full) && !full.exists() {
                        return Err(wrap(Error::Parameter {
                            name: key.to_string(),
                            msg: format!("'{p}' neither exists nor is produced by an earlier stage"),
                        }));
                    }
                }
            }
            for (_, paths) in role_paths(stage.kind, &params, Role::Output) {
                produced.extend(paths.iter().map(|p| base.join(p)));
            }
        }
        Ok(())
    }
}

fn role_paths(kind: StageKind, params: &BTreeMap<String, String>, role: Role) -> Vec<(&'static str, Vec<String>)> {
    keys(kind)
        .iter()
        .filter(|k| k.role == role)
        .filter_map(|k| {
            let v = params.get(k.name)?;
            let paths = if list_valued(kind, k.name) { split_list(v) } else { vec![v.clone()] };
            Some((k.name, paths))
        })
        .collect()
}

struct Params<'a> {
    map: &'a BTreeMap<String, String>,
}

impl Params<'_> {
    fn str(&self, key: &str) -> &str {
        self.map.get(key).map(String::as_str).unwrap_or("")
    }

    fn opt(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    fn list(&self, key: &str) -> Vec<String> {
        self.opt(key).map(split_list).unwrap_or_default()
    }

    fn usize(&self, key: &str) -> usize {
        self.str(key).parse().expect("validated")
    }

    fn u64(&self, key: &str) -> u64 {
        self.str(key).parse().expect("validated")
    }

    fn f64(&self, key: &str) -> f64 {
        self.str(key).parse().expect("validated")
    }

    fn bool(&self, key: &str) -> bool {
        self.str(key) == "true"
    }
}

fn decode_config(p: &Params<'_>) -> DecodeConfig {
    DecodeConfig {
        beam_size: p.usize("beam"),
        ctc_weight: p.f64("ctc_weight"),
        att_weight: p.f64("att_weight"),
        lm_weight: p.f64("lm_weight"),
        max_len_ratio: p.f64("max_len_ratio"),
        n_best: p.usize("nbest"),
    }
}

fn mt_target(p: &Params<'_>) -> MtTarget {
    p.str("target").parse().expect("validated")
}

fn translate_config(p: &Params<'_>) -> DecodeConfig {
    let target = mt_target(p);
    let mut cfg = default_mt_config(target);
    if let Some(beam) = p.opt("beam") {
        cfg.beam_size = beam.parse().expect("validated");
    }
    cfg.lm_weight = p.f64("lm_weight");
    cfg.max_len_ratio = p.f64("max_len_ratio");
    cfg
}

fn augment_config(p: &Params<'_>, seed: u64) -> SpecAugmentConfig {
    SpecAugmentConfig {
        n_freq_masks: p.usize("freq_masks"),
        max_freq_width: p.usize("freq_width"),
        n_time_masks: p.usize("time_masks"),
        max_time_width: p.usize("time_width"),
        fill: if p.str("fill") == "mean" { MaskFill::UtteranceMean } else { MaskFill::Zero },
        seed,
    }
}

/// Cross-key checks that need more than one value.
fn check_stage(kind: StageKind, map: &BTreeMap<String, String>) -> Result<()> {
    let p = Params { map };
    match kind {
        StageKind::Decode => {
            let cfg = decode_config(&p);
            cfg.validate()?;
            match (p.opt("grid"), p.opt("feats"), p.opt("acoustic")) {
                (Some(_), None, None) => {}
                (None, Some(_), Some(_)) => {}
                _ => return Err(Error::invalid("decode needs either 'grid' or both 'feats' and 'acoustic'")),
            }
            if cfg.att_weight > 0.0 && p.opt("attention").is_none() {
                return Err(Error::invalid("att_weight > 0 needs an 'attention' parameter file"));
            }
            if cfg.lm_weight > 0.0 && p.opt("lm").is_none() {
                return Err(Error::invalid("lm_weight > 0 needs an 'lm' parameter file"));
            }
            let outputs = p.list("output").len();
            if outputs != 1 {
                return Err(Error::invalid("decode writes a single output file"));
            }
        }
        StageKind::Translate => {
            let cfg = translate_config(&p);
            cfg.validate()?;
            if cfg.lm_weight > 0.0 && p.opt("lm").is_none() {
                return Err(Error::invalid("lm_weight > 0 needs an 'lm' parameter file"));
            }
        }
        StageKind::Feats => {
            if p.list("input").len() != p.list("output").len() {
                return Err(Error::invalid("feats needs one output per input"));
            }
            for name in ["speed", "frame_ms", "shift_ms"] {
                if !(p.f64(name) > 0.0) {
                    return Err(Error::Parameter { name: name.into(), msg: "must be positive".into() });
                }
            }
            if p.usize("n_mels") == 0 || p.u64("sample_rate") == 0 || p.u64("sample_rate") > u32::MAX as u64 {
                return Err(Error::invalid("n_mels and sample_rate must be positive"));
            }
        }
        StageKind::Augment => {
            if p.list("input").len() != p.list("output").len() {
                return Err(Error::invalid("augment needs one output per input"));
            }
        }
        StageKind::Chrf if p.usize("order") == 0 || !(p.f64("beta") > 0.0) => {
            return Err(Error::invalid("chrF order and beta must be positive"));
        }
        _ => {}
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub index: usize,
    pub kind: String,
    pub seed: u64,
    /// Effective parameters, defaults included. File paths are listed under
    /// `inputs` and `outputs` instead.
    pub parameters: BTreeMap<String, String>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    /// Stage-specific results such as scores or unfinished-hypothesis
    /// counts.
    pub results: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn stage(&self, kind: &str) -> impl Iterator<Item = &StageRecord> {
        let kind = kind.to_string();
        self.stages.iter().filter(move |s| s.kind == kind)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let name = path.file_name().ok_or_else(|| Error::invalid(format!("'{}' is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn file_record(path: &str, bytes: &[u8]) -> FileRecord {
    FileRecord { path: path.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 }
}

struct Ctx<'a> {
    base: &'a Path,
    seed: u64,
}

impl Ctx<'_> {
    fn path(&self, p: &str) -> PathBuf {
        self.base.join(p)
    }

    fn text(&self, p: &str) -> Result<String> {
        let path = self.path(p);
        std::fs::read_to_string(&path).map_err(|e| Error::io(path, e))
    }

    fn lines(&self, p: &str) -> Result<Vec<String>> {
        Ok(self.text(p)?.lines().map(str::to_string).collect())
    }

    fn corpus(&self, p: &str) -> Result<ParallelCorpus> {
        ParallelCorpus::read_tsv(self.text(p)?.as_bytes(), p)
    }

    fn bpe(&self, p: &str) -> Result<BpeModel> {
        BpeModel::read(self.text(p)?.as_bytes(), p)
    }

    fn params(&self, p: &str) -> Result<ParameterSet> {
        ParameterSet::read(self.text(p)?.as_bytes(), p)
    }

    fn features(&self, p: &str) -> Result<FeatureMatrix> {
        FeatureMatrix::read_text(self.text(p)?.as_bytes(), p)
    }

    fn grid(&self, p: &str) -> Result<PosteriorGrid> {
        PosteriorGrid::read_text(self.text(p)?.as_bytes(), p)
    }
}

fn join_lines<I: IntoIterator<Item = String>>(lines: I) -> Vec<u8> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    out.into_bytes()
}

fn to_bytes(write: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    write(&mut buf).expect("writing to memory");
    buf
}

struct StageOutput {
    files: Vec<(String, Vec<u8>)>,
    results: BTreeMap<String, String>,
}

impl StageOutput {
    fn one(path: &str, bytes: Vec<u8>) -> Self {
        Self { files: vec![(path.to_string(), bytes)], results: BTreeMap::new() }
    }

    fn with_result(mut self, key: &str, value: impl ToString) -> Self {
        self.results.insert(key.to_string(), value.to_string());
        self
    }
}

/// Formats a score line as written by the metric stages and the CLI.
pub fn score_line(metric: &str, value: f64) -> String {
    format!("{metric} {value}")
}

fn normalizer_config(p: &Params<'_>) -> NormalizerConfig {
    NormalizerConfig {
        keep_inword_apostrophe: p.bool("keep_apostrophe"),
        digit_policy: match p.str("digits") {
            "drop" => DigitPolicy::Drop,
            "keep" => DigitPolicy::Keep,
            _ => DigitPolicy::ToWords,
        },
        ..NormalizerConfig::default()
    }
}

fn run_stage(kind: StageKind, p: &Params<'_>, ctx: &Ctx<'_>) -> Result<StageOutput> {
    let out = p.str("output");
    Ok(match kind {
        StageKind::Normalize => {
            let cfg = normalizer_config(p);
            let lines = ctx.lines(p.str("input"))?;
            StageOutput::one(out, join_lines(lines.iter().map(|l| written_to_spoken(l, &cfg))))
        }
        StageKind::Tag => {
            let tag = if p.str("tag") == "text" { TEXT_TAG } else { ASR_TAG };
            let lines = ctx.lines(p.str("input"))?;
            StageOutput::one(
                out,
                join_lines(lines.iter().map(|l| format!("{tag} {}", l.trim()).trim_end().to_string())),
            )
        }
        StageKind::BpeTrain => {
            let lines = ctx.lines(p.str("input"))?;
            let cfg = BpeTrainConfig { vocab_size: p.usize("vocab_size"), min_frequency: p.u64("min_frequency") };
            let model = BpeModel::train(&lines, &cfg)?;
            StageOutput::one(out, to_bytes(|b| model.write(b))).with_result("merges", model.merges().len())
        }
        StageKind::BpeApply => {
            let model = ctx.bpe(p.str("model"))?;
            let lines = ctx.lines(p.str("input"))?;
            StageOutput::one(out, join_lines(lines.iter().map(|l| model.encode(l).join(" "))))
        }
        StageKind::BpeDecode => {
            let model = ctx.bpe(p.str("model"))?;
            let lines = ctx
                .lines(p.str("input"))?
                .iter()
                .map(|l| model.decode_pieces(&l.split_whitespace().collect::<Vec<_>>()))
                .collect::<Result<Vec<_>>>()?;
            StageOutput::one(out, join_lines(lines))
        }
        StageKind::Dedup => {
            let c = ctx.corpus(p.str("input"))?;
            let d = c.dedup();
            StageOutput::one(out, to_bytes(|b| d.write_tsv(b))).with_result("removed", c.len() - d.len())
        }
        StageKind::Multitask => {
            let c = ctx.corpus(p.str("input"))?.make_multitask(&NormalizerConfig::default());
            StageOutput::one(out, to_bytes(|b| c.write_tsv(b)))
        }
        StageKind::Split => {
            let c = ctx.corpus(p.str("input"))?;
            let (train, valid) = c.split_random(p.usize("n_valid"), ctx.seed)?;
            StageOutput {
                files: vec![
                    (p.str("train").to_string(), to_bytes(|b| train.write_tsv(b))),
                    (p.str("valid").to_string(), to_bytes(|b| valid.write_tsv(b))),
                ],
                results: BTreeMap::new(),
            }
        }
        StageKind::Stats => {
            let s = ctx.corpus(p.str("input"))?.stats();
            StageOutput::one(out, format!("sentences {}\nsource_words {}\n", s.sentences, s.source_words).into_bytes())
        }
        StageKind::Feats => {
            let cfg = FbankConfig {
                n_mels: p.usize("n_mels"),
                frame_length_ms: p.f64("frame_ms"),
                frame_shift_ms: p.f64("shift_ms"),
                ..FbankConfig::default()
            };
            let rate = p.u64("sample_rate") as u32;
            let speed = p.f64("speed");
            let mut files = Vec::new();
            for (inp, outp) in p.list("input").iter().zip(p.list("output")) {
                let mut w = Waveform::read_wav(ctx.path(inp))?;
                w = resample(&w, rate)?;
                w = speed_perturb(&w, speed)?;
                let f = log_mel_fbank(&w, &cfg)?;
                files.push((outp, to_bytes(|b| f.write_text(b))));
            }
            StageOutput { files, results: BTreeMap::new() }
        }
        StageKind::Augment => {
            let mut files = Vec::new();
            for (i, (inp, outp)) in p.list("input").iter().zip(p.list("output")).enumerate() {
                let f = ctx.features(inp)?;
                let cfg = augment_config(p, derive_seed(ctx.seed, i as u64));
                let g = spec_augment(&f, &cfg)?;
                files.push((outp, to_bytes(|b| g.write_text(b))));
            }
            StageOutput { files, results: BTreeMap::new() }
        }
        StageKind::AvgCkpt => {
            let sets = p.list("input").iter().map(|f| ctx.params(f)).collect::<Result<Vec<_>>>()?;
            let avg = average_checkpoints(&sets)?;
            StageOutput::one(out, to_bytes(|b| avg.write(b))).with_result("checkpoints", sets.len())
        }
        StageKind::Decode => run_decode(p, ctx)?,
        StageKind::Translate => run_translate(p, ctx)?,
        StageKind::Wer | StageKind::Bleu | StageKind::Chrf => {
            let pairs = pair_lines(&ctx.text(p.str("reference"))?, &ctx.text(p.str("hypothesis"))?)?;
            let (name, value) = match kind {
                StageKind::Wer => ("wer", wer(&pairs)?),
                StageKind::Bleu => {
                    let cfg = BleuConfig {
                        lowercase: p.bool("lowercase"),
                        smoothing: if p.str("smooth") == "exp" { BleuSmoothing::Exp } else { BleuSmoothing::None },
                    };
                    ("bleu", bleu(&pairs, &cfg).score)
                }
                _ => {
                    let cfg = ChrfConfig {
                        char_order: p.usize("order"),
                        beta: p.f64("beta"),
                        lowercase: p.bool("lowercase"),
                        averaging: if p.str("averaging") == "pr" {
                            ChrfAveraging::MeanPrecisionRecall
                        } else {
                            ChrfAveraging::PerOrderF
                        },
                    };
                    ("chrf", chrf(&pairs, &cfg)?)
                }
            };
            let line = score_line(name, value);
            StageOutput::one(out, format!("{line}\n").into_bytes()).with_result(name, value)
        }
    })
}

fn optional_table(ctx: &Ctx<'_>, p: &Params<'_>, file_key: &str, entry_key: &str) -> Result<Option<ToyTableScorer>> {
    p.opt(file_key).map(|f| toy_scorer_from_params(&ctx.params(f)?, p.str(entry_key))).transpose()
}

fn run_decode(p: &Params<'_>, ctx: &Ctx<'_>) -> Result<StageOutput> {
    let cfg = decode_config(p);
    let bpe = ctx.bpe(p.str("bpe"))?;
    let attention = optional_table(ctx, p, "attention", "attention_entry")?;
    let lm = optional_table(ctx, p, "lm", "lm_entry")?;
    let grids: Vec<PosteriorGrid> = if let Some(acoustic) = p.opt("acoustic") {
        let am = ToyAcousticModel::from_params(&ctx.params(acoustic)?, p.str("acoustic_entry"))?;
        p.list("feats").iter().map(|f| am.posteriors(&ctx.features(f)?)).collect::<Result<_>>()?
    } else {
        p.list("grid").iter().map(|g| ctx.grid(g)).collect::<Result<_>>()?
    };
    let mut lines = Vec::new();
    let mut unfinished = 0;
    for (u, grid) in grids.into_iter().enumerate() {
        let frames = grid.frames();
        let ctc = CtcPrefixScorer::new(grid);
        let scorers = Scorers {
            attention: attention.as_ref().map(|s| s as &dyn StepScorer),
            ctc: Some(&ctc),
            lm: lm.as_ref().map(|s| s as &dyn StepScorer),
        };
        let hyps = beam_search(&scorers, &cfg, frames)?;
        unfinished += hyps.iter().filter(|h| !h.ended).count();
        if cfg.n_best == 1 {
            lines.push(bpe.decode(&hyps[0].tokens)?);
        } else {
            for (rank, h) in hyps.iter().enumerate() {
                lines.push(format!("{u}\t{rank}\t{}\t{}", h.combined, bpe.decode(&h.tokens)?));
            }
        }
    }
    Ok(StageOutput::one(p.str("output"), join_lines(lines)).with_result("unfinished", unfinished))
}

fn run_translate(p: &Params<'_>, ctx: &Ctx<'_>) -> Result<StageOutput> {
    let cfg = translate_config(p);
    let model = ToyTranslationScorer::from_params(&ctx.params(p.str("model"))?, p.str("model_entry"))?;
    let source_bpe = ctx.bpe(p.str("source_bpe"))?;
    let target_bpe = ctx.bpe(p.str("target_bpe"))?;
    let lm = optional_table(ctx, p, "lm", "lm_entry")?;
    let mut lines = Vec::new();
    let mut unfinished = 0;
    for line in ctx.lines(p.str("input"))? {
        let source = source_bpe.encode_ids(&line);
        let bound = model.bind(&source)?;
        let scorers =
            Scorers { attention: Some(bound.as_ref()), ctc: None, lm: lm.as_ref().map(|s| s as &dyn StepScorer) };
        let hyps = beam_search(&scorers, &cfg, source.len())?;
        unfinished += usize::from(!hyps[0].ended);
        lines.push(target_bpe.decode(&hyps[0].tokens)?);
    }
    Ok(StageOutput::one(p.str("output"), join_lines(lines)).with_result("unfinished", unfinished))
}

/// Parameters shown in the manifest: the non-path keys, with the beam of
/// `translate` resolved from its target language.
fn recorded_parameters(kind: StageKind, params: &BTreeMap<String, String>) -> BTreeMap<String, String> {
    let mut out: BTreeMap<String, String> = keys(kind)
        .iter()
        .filter(|k| k.role == Role::Param)
        .filter_map(|k| params.get(k.name).map(|v| (k.name.to_string(), v.clone())))
        .collect();
    if kind == StageKind::Translate {
        let cfg = translate_config(&Params { map: params });
        out.insert("beam".into(), cfg.beam_size.to_string());
    }
    out
}

/// Runs every stage in order, writes the manifest and returns it.
pub fn run_pipeline(cfg: &PipelineConfig, base: &Path) -> Result<Manifest> {
    cfg.validate(base)?;
    let mut manifest = Manifest { seed: cfg.seed, stages: Vec::new() };
    for (index, stage) in cfg.stages.iter().enumerate() {
        let wrap = |e: Error| Error::Stage { index, kind: stage.kind.to_string(), source: Box::new(e) };
        let params = stage.effective().map_err(wrap)?;
        let seed = derive_seed(cfg.seed, index as u64);
        let mut inputs = Vec::new();
        for (_, paths) in role_paths(stage.kind, &params, Role::Input) {
            for path in paths {
                let full = base.join(&path);
                let bytes = std::fs::read(&full).map_err(|e| wrap(Error::io(full, e)))?;
                inputs.push(file_record(&path, &bytes));
            }
        }
        let ctx = Ctx { base, seed };
        let result = run_stage(stage.kind, &Params { map: &params }, &ctx).map_err(wrap)?;
        let mut outputs = Vec::new();
        for (path, bytes) in &result.files {
            write_atomic(&base.join(path), bytes).map_err(wrap)?;
            outputs.push(file_record(path, bytes));
        }
        manifest.stages.push(StageRecord {
            index,
            kind: stage.kind.to_string(),
            seed,
            parameters: recorded_parameters(stage.kind, &params),
            inputs,
            outputs,
            results: result.results,
        });
    }
    write_atomic(&base.join(&cfg.manifest), manifest.to_json().as_bytes())?;
    Ok(manifest)
}

/// Loads a config file and runs it relative to the file's directory.
pub fn run_pipeline_file(path: &Path) -> Result<Manifest> {
    let cfg = PipelineConfig::load(path)?;
    let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    run_pipeline(&cfg, base)
}

/// Default beams of the cascade: ASR, then MT into English and French.
pub fn default_beams() -> (usize, usize, usize) {
    (default_asr_config().beam_size, MtTarget::English.default_beam(), MtTarget::French.default_beam())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) {
        std::fs::write(dir.join(name), text).unwrap();
    }

    #[test]
    fn parse_sections_and_errors() {
        let cfg = PipelineConfig::parse(
            "# demo\nseed = 9\n\n[stage normalize]\ninput = a.txt\noutput = b.txt\n[wer]\nreference=b.txt\nhypothesis=b.txt\noutput=s\n",
            "p.cfg",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.stages.len(), 2);
        assert_eq!(cfg.stages[0].kind, StageKind::Normalize);
        assert_eq!(cfg.stages[1].params["hypothesis"], "b.txt");

        let err = PipelineConfig::parse("[stage nope]\n", "p.cfg").unwrap_err();
        assert!(err.to_string().starts_with("p.cfg:1:"), "{err}");
        assert!(PipelineConfig::parse("colour = red\n", "p").is_err());
        assert!(PipelineConfig::parse("[tag]\ninput=a\ninput=b\n", "p").is_err());
        assert!(PipelineConfig::parse("just words\n", "p").is_err());
        for k in StageKind::all() {
            assert_eq!(k.name().parse::<StageKind>().unwrap(), k);
        }
    }

    #[test]
    fn zero_stages_give_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = run_pipeline(&PipelineConfig::default(), dir.path()).unwrap();
        assert!(m.stages.is_empty());
        let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        assert_eq!(serde_json::from_str::<Manifest>(&text).unwrap(), m);
    }

    #[test]
    fn validation_catches_undeclared_inputs_and_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.txt", "Habari 2\n");
        let ok =
            PipelineConfig::parse("[normalize]\ninput=a.txt\noutput=b.txt\n[tag]\ninput=b.txt\noutput=c.txt\n", "p")
                .unwrap();
        ok.validate(dir.path()).unwrap();

        let missing = PipelineConfig::parse("[tag]\ninput=zzz.txt\noutput=c.txt\n", "p").unwrap();
        let err = missing.validate(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Stage { index: 0, .. }), "{err}");
        assert!(err.is_validation());

        let bad = PipelineConfig::parse("[normalize]\ninput=a.txt\noutput=b\ndigits=roman\n", "p").unwrap();
        assert!(bad.validate(dir.path()).is_err());
        let unknown = PipelineConfig::parse("[normalize]\ninput=a.txt\noutput=b\nfoo=1\n", "p").unwrap();
        assert!(unknown.validate(dir.path()).is_err());
        let weights =
            PipelineConfig::parse("[decode]\ngrid=a.txt\nbpe=a.txt\noutput=o\nctc_weight=0.7\natt_weight=0.7\n", "p")
                .unwrap();
        assert!(weights.validate(dir.path()).is_err());
    }

    #[test]
    fn text_stages_run_and_record_hashes() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.txt", "Nina miaka 25.\nSara, je!\n");
        let cfg = PipelineConfig::parse(
            "seed=3\n[normalize]\ninput=a.txt\noutput=out/b.txt\n[tag]\ninput=out/b.txt\noutput=out/c.txt\n",
            "p",
        )
        .unwrap();
        let m = run_pipeline(&cfg, dir.path()).unwrap();
        let c = std::fs::read_to_string(dir.path().join("out/c.txt")).unwrap();
        assert_eq!(c, "<asrS> nina miaka ishirini na tano\n<asrS> sara je\n");
        assert_eq!(m.stages[1].inputs[0].sha256, m.stages[0].outputs[0].sha256);
        assert_eq!(m.stages[0].inputs[0].sha256, sha256_hex(b"Nina miaka 25.\nSara, je!\n"));
        assert_eq!(m.stages[0].seed, derive_seed(3, 0));
        assert_eq!(m.stages[0].parameters["digits"], "words");
        assert!(!dir.path().join("out/.c.txt.tmp").exists());
    }

    #[test]
    fn failing_stage_is_qualified_and_leaves_no_output() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "r.txt", "a\nb\n");
        write(dir.path(), "h.txt", "a\n");
        let cfg = PipelineConfig::parse(
            "[tag]\ninput=r.txt\noutput=t.txt\n[wer]\nreference=r.txt\nhypothesis=h.txt\noutput=s.txt\n",
            "p",
        )
        .unwrap();
        let err = run_pipeline(&cfg, dir.path()).unwrap_err();
        assert!(err.to_string().starts_with("stage 1 (wer) failed"), "{err}");
        assert!(dir.path().join("t.txt").exists());
        assert!(!dir.path().join("s.txt").exists());
    }

    #[test]
    fn translate_beam_defaults_follow_target() {
        let map = |target: &str| {
            let s = StageConfig::new(StageKind::Translate)
                .with("input", "i")
                .with("output", "o")
                .with("model", "m")
                .with("source_bpe", "s")
                .with("target_bpe", "t")
                .with("target", target);
            recorded_parameters(StageKind::Translate, &s.effective().unwrap())["beam"].clone()
        };
        assert_eq!(map("en"), "10");
        assert_eq!(map("fr"), "25");
        assert_eq!(default_beams(), (30, 10, 25));
    }
}
