use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stcascade::corpus::ParallelCorpus;
use stcascade::decoder::{
    beam_search, default_mt_config, CascadeSystem, CtcPrefixScorer, DecodeConfig, MtTarget, PosteriorGrid, Scorers,
    StepScorer,
};
use stcascade::frontend::{
    log_mel_fbank, resample, spec_augment, speed_perturb, FbankConfig, FeatureMatrix, MaskFill, SpecAugmentConfig,
    Waveform,
};
use stcascade::metrics::{bleu, chrf, pair_lines, wer, BleuConfig, BleuSmoothing, ChrfAveraging, ChrfConfig};
use stcascade::modelio::{
    average_checkpoints, toy_scorer_from_params, ParameterSet, ToyAcousticModel, ToyTableScorer, ToyTranslationScorer,
};
use stcascade::pipeline::{run_pipeline_file, score_line, write_atomic};
use stcascade::subword::{BpeModel, BpeTrainConfig};
use stcascade::textnorm::{number_to_swahili_words_signed, written_to_spoken, DigitPolicy, NormalizerConfig};
use stcascade::{Error, Result};

#[derive(Parser)]
#[command(name = "stcascade", version, about = "Cascaded speech translation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert written text to spoken form, one line at a time.
    Normalize {
        #[command(flatten)]
        io: TextIo,
        #[arg(long, value_enum, default_value = "words")]
        digits: Digits,
        /// Remove apostrophes inside words too.
        #[arg(long)]
        strip_apostrophes: bool,
    },
    /// Print the Swahili words for a number.
    Numwords {
        #[arg(allow_negative_numbers = true)]
        number: i64,
    },
    BpeTrain {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long, default_value_t = 2)]
        min_frequency: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Segment text into subword pieces.
    BpeApply {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        io: TextIo,
        /// Print ids instead of pieces.
        #[arg(long)]
        ids: bool,
    },
    /// Join subword pieces back into text.
    BpeDecode {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        io: TextIo,
        /// Input holds ids instead of pieces.
        #[arg(long)]
        ids: bool,
    },
    Dedup {
        #[command(flatten)]
        io: TextIo,
    },
    /// Emit `<textS>` and `<asrS>` variants of every pair.
    Multitask {
        #[command(flatten)]
        io: TextIo,
    },
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, alias = "valid-size")]
        n_valid: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
    },
    Stats {
        #[arg(long)]
        input: PathBuf,
    },
    /// Log-mel filterbank features of a mono 16-bit WAV file.
    Feats {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 80)]
        n_mels: usize,
        #[arg(long, default_value_t = 16000)]
        sample_rate: u32,
        #[arg(long, default_value_t = 25.0)]
        frame_ms: f64,
        #[arg(long, default_value_t = 10.0)]
        shift_ms: f64,
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        /// Apply SpecAugment with default settings and this seed.
        #[arg(long)]
        specaug_seed: Option<u64>,
    },
    /// SpecAugment masking of a feature file.
    Augment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        freq_masks: usize,
        #[arg(long, default_value_t = 30)]
        freq_width: usize,
        #[arg(long, default_value_t = 2)]
        time_masks: usize,
        #[arg(long, default_value_t = 40)]
        time_width: usize,
        #[arg(long, value_enum, default_value = "zero")]
        fill: Fill,
    },
    /// Joint CTC/attention beam search over one utterance.
    Decode {
        #[command(flatten)]
        source: AcousticSource,
        #[arg(long)]
        bpe: PathBuf,
        #[command(flatten)]
        scorers: ToyScorers,
        #[arg(long, default_value_t = 30)]
        beam: usize,
        #[arg(long, default_value_t = 0.5)]
        ctc_weight: f64,
        #[arg(long, default_value_t = 0.5)]
        att_weight: f64,
        #[arg(long, default_value_t = 0.0)]
        lm_weight: f64,
        #[arg(long, default_value_t = 1)]
        nbest: usize,
        #[arg(long, default_value_t = 1.0)]
        max_len_ratio: f64,
    },
    /// ASR decoding followed by tagged MT decoding.
    Cascade {
        #[command(flatten)]
        source: AcousticSource,
        #[arg(long)]
        asr_bpe: PathBuf,
        #[command(flatten)]
        scorers: ToyScorers,
        #[arg(long, default_value_t = 30)]
        asr_beam: usize,
        #[arg(long, default_value_t = 0.5)]
        ctc_weight: f64,
        #[arg(long, default_value_t = 0.5)]
        att_weight: f64,
        #[arg(long, default_value_t = 0.0)]
        lm_weight: f64,
        #[arg(long)]
        mt_model: PathBuf,
        #[arg(long, default_value = "mt")]
        mt_entry: String,
        #[arg(long)]
        mt_source_bpe: PathBuf,
        #[arg(long)]
        mt_target_bpe: PathBuf,
        #[arg(long, value_enum, default_value = "en")]
        target: Target,
        /// Defaults to 10 for English and 25 for French.
        #[arg(long)]
        mt_beam: Option<usize>,
    },
    /// Average parameter files elementwise.
    AvgCkpt {
        output: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    Wer {
        reference: PathBuf,
        hypothesis: PathBuf,
    },
    Bleu {
        reference: PathBuf,
        hypothesis: PathBuf,
        #[arg(long)]
        lowercase: bool,
        #[arg(long, value_enum, default_value = "none")]
        smooth: Smooth,
    },
    Chrf {
        reference: PathBuf,
        hypothesis: PathBuf,
        #[arg(long)]
        lowercase: bool,
        #[arg(long, value_enum, default_value = "f")]
        averaging: Averaging,
    },
    /// Run a pipeline config and write its manifest.
    Pipeline {
        config: PathBuf,
    },
}

#[derive(Args)]
struct TextIo {
    /// Defaults to standard input.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Defaults to standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct AcousticSource {
    /// Posterior grid file.
    #[arg(long, conflicts_with_all = ["feats", "acoustic"])]
    grid: Option<PathBuf>,
    /// Feature file, scored with `--acoustic`.
    #[arg(long, requires = "acoustic")]
    feats: Option<PathBuf>,
    #[arg(long, requires = "feats")]
    acoustic: Option<PathBuf>,
    #[arg(long, default_value = "am")]
    acoustic_entry: String,
}

#[derive(Args)]
struct ToyScorers {
    #[arg(long)]
    attention: Option<PathBuf>,
    #[arg(long, default_value = "att")]
    attention_entry: String,
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long, default_value = "lm")]
    lm_entry: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum Digits {
    Words,
    Drop,
    Keep,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fill {
    Zero,
    Mean,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    En,
    Fr,
}

#[derive(Clone, Copy, ValueEnum)]
enum Smooth {
    None,
    Exp,
}

#[derive(Clone, Copy, ValueEnum)]
enum Averaging {
    F,
    Pr,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn label(path: &Path) -> String {
    path.display().to_string()
}

impl TextIo {
    fn read(&self) -> Result<String> {
        match &self.input {
            Some(p) => read_text(p),
            None => {
                let mut s = String::new();
                std::io::stdin().read_to_string(&mut s).map_err(|e| Error::Io { path: "<stdin>".into(), source: e })?;
                Ok(s)
            }
        }
    }

    fn label(&self) -> String {
        self.input.as_deref().map(label).unwrap_or_else(|| "<stdin>".into())
    }

    fn write(&self, bytes: &[u8]) -> Result<()> {
        emit(self.output.as_deref(), bytes)
    }
}

fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => write_atomic(p, bytes),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(bytes).map_err(|e| Error::Io { path: "<stdout>".into(), source: e })
        }
    }
}

fn lines_out<I: IntoIterator<Item = String>>(lines: I) -> Vec<u8> {
    let mut s = String::new();
    for l in lines {
        s.push_str(&l);
        s.push('\n');
    }
    s.into_bytes()
}

fn buffer(write: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut b = Vec::new();
    write(&mut b).expect("writing to memory");
    b
}

fn load_bpe(path: &Path) -> Result<BpeModel> {
    BpeModel::read(read_text(path)?.as_bytes(), &label(path))
}

fn load_params(path: &Path) -> Result<ParameterSet> {
    ParameterSet::load(path)
}

fn load_corpus(path: &Path, text: &str) -> Result<ParallelCorpus> {
    ParallelCorpus::read_tsv(text.as_bytes(), &label(path))
}

impl AcousticSource {
    fn grid(&self) -> Result<PosteriorGrid> {
        match (&self.grid, &self.feats, &self.acoustic) {
            (Some(g), _, _) => PosteriorGrid::read_text(read_text(g)?.as_bytes(), &label(g)),
            (None, Some(f), Some(a)) => {
                let feats = FeatureMatrix::read_text(read_text(f)?.as_bytes(), &label(f))?;
                ToyAcousticModel::from_params(&load_params(a)?, &self.acoustic_entry)?.posteriors(&feats)
            }
            _ => Err(Error::InvalidArgument("give --grid, or --feats with --acoustic".into())),
        }
    }
}

impl ToyScorers {
    fn load(&self) -> Result<(Option<ToyTableScorer>, Option<ToyTableScorer>)> {
        let table = |p: &Option<PathBuf>, entry: &str| {
            p.as_deref().map(|p| toy_scorer_from_params(&load_params(p)?, entry)).transpose()
        };
        Ok((table(&self.attention, &self.attention_entry)?, table(&self.lm, &self.lm_entry)?))
    }
}

fn as_scorer(s: &Option<ToyTableScorer>) -> Option<&dyn StepScorer> {
    s.as_ref().map(|s| s as &dyn StepScorer)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Normalize { io, digits, strip_apostrophes } => {
            let cfg = NormalizerConfig {
                keep_inword_apostrophe: !strip_apostrophes,
                digit_policy: match digits {
                    Digits::Words => DigitPolicy::ToWords,
                    Digits::Drop => DigitPolicy::Drop,
                    Digits::Keep => DigitPolicy::Keep,
                },
                ..NormalizerConfig::default()
            };
            let text = io.read()?;
            io.write(&lines_out(text.lines().map(|l| written_to_spoken(l, &cfg))))
        }
        Command::Numwords { number } => {
            println!("{}", number_to_swahili_words_signed(number)?);
            Ok(())
        }
        Command::BpeTrain { input, vocab_size, min_frequency, output } => {
            let text = read_text(&input)?;
            let lines: Vec<&str> = text.lines().collect();
            let model = BpeModel::train(&lines, &BpeTrainConfig { vocab_size, min_frequency })?;
            write_atomic(&output, &buffer(|b| model.write(b)))
        }
        Command::BpeApply { model, io, ids } => {
            let model = load_bpe(&model)?;
            let text = io.read()?;
            io.write(&lines_out(text.lines().map(|l| {
                if ids {
                    model.encode_ids(l).iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
                } else {
                    model.encode(l).join(" ")
                }
            })))
        }
        Command::BpeDecode { model, io, ids } => {
            let model = load_bpe(&model)?;
            let text = io.read()?;
            let label = io.label();
            let mut out = Vec::new();
            for (i, l) in text.lines().enumerate() {
                let decoded = if ids {
                    let ids = l
                        .split_whitespace()
                        .map(|t| {
                            t.parse().map_err(|_| Error::Parse {
                                path: label.clone(),
                                line: i + 1,
                                msg: format!("bad token id '{t}'"),
                            })
                        })
                        .collect::<Result<Vec<u32>>>()?;
                    model.decode(&ids)?
                } else {
                    model.decode_pieces(&l.split_whitespace().collect::<Vec<_>>())?
                };
                out.push(decoded);
            }
            io.write(&lines_out(out))
        }
        Command::Dedup { io } => {
            let text = io.read()?;
            let c = ParallelCorpus::read_tsv(text.as_bytes(), &io.label())?.dedup();
            io.write(&buffer(|b| c.write_tsv(b)))
        }
        Command::Multitask { io } => {
            let text = io.read()?;
            let c =
                ParallelCorpus::read_tsv(text.as_bytes(), &io.label())?.make_multitask(&NormalizerConfig::default());
            io.write(&buffer(|b| c.write_tsv(b)))
        }
        Command::Split { input, n_valid, seed, train, valid } => {
            let c = load_corpus(&input, &read_text(&input)?)?;
            let (tr, va) = c.split_random(n_valid, seed)?;
            write_atomic(&train, &buffer(|b| tr.write_tsv(b)))?;
            write_atomic(&valid, &buffer(|b| va.write_tsv(b)))
        }
        Command::Stats { input } => {
            let s = load_corpus(&input, &read_text(&input)?)?.stats();
            println!("sentences {}\nsource_words {}", s.sentences, s.source_words);
            Ok(())
        }
        Command::Feats { input, output, n_mels, sample_rate, frame_ms, shift_ms, speed, specaug_seed } => {
            let w = Waveform::read_wav(&input)?;
            let w = speed_perturb(&resample(&w, sample_rate)?, speed)?;
            let cfg =
                FbankConfig { n_mels, frame_length_ms: frame_ms, frame_shift_ms: shift_ms, ..FbankConfig::default() };
            let mut f = log_mel_fbank(&w, &cfg)?;
            if let Some(seed) = specaug_seed {
                f = spec_augment(&f, &SpecAugmentConfig { seed, ..SpecAugmentConfig::default() })?;
            }
            write_atomic(&output, &buffer(|b| f.write_text(b)))
        }
        Command::Augment { input, output, seed, freq_masks, freq_width, time_masks, time_width, fill } => {
            let f = FeatureMatrix::read_text(read_text(&input)?.as_bytes(), &label(&input))?;
            let cfg = SpecAugmentConfig {
                n_freq_masks: freq_masks,
                max_freq_width: freq_width,
                n_time_masks: time_masks,
                max_time_width: time_width,
                fill: match fill {
                    Fill::Zero => MaskFill::Zero,
                    Fill::Mean => MaskFill::UtteranceMean,
                },
                seed,
            };
            let g = spec_augment(&f, &cfg)?;
            write_atomic(&output, &buffer(|b| g.write_text(b)))
        }
        Command::Decode { source, bpe, scorers, beam, ctc_weight, att_weight, lm_weight, nbest, max_len_ratio } => {
            let cfg = DecodeConfig { beam_size: beam, ctc_weight, att_weight, lm_weight, max_len_ratio, n_best: nbest };
            cfg.validate()?;
            let grid = source.grid()?;
            let bpe = load_bpe(&bpe)?;
            let (att, lm) = scorers.load()?;
            let frames = grid.frames();
            let ctc = CtcPrefixScorer::new(grid);
            let s = Scorers { attention: as_scorer(&att), ctc: Some(&ctc), lm: as_scorer(&lm) };
            let hyps = beam_search(&s, &cfg, frames)?;
            for h in &hyps {
                let text = bpe.decode(&h.tokens)?;
                if nbest == 1 {
                    println!("{text}");
                } else {
                    let flag = if h.ended { "" } else { "\tunfinished" };
                    println!("{}\t{text}{flag}", h.combined);
                }
            }
            if hyps.iter().any(|h| !h.ended) {
                eprintln!("warning: search ended before end-of-sequence");
            }
            Ok(())
        }
        Command::Cascade {
            source,
            asr_bpe,
            scorers,
            asr_beam,
            ctc_weight,
            att_weight,
            lm_weight,
            mt_model,
            mt_entry,
            mt_source_bpe,
            mt_target_bpe,
            target,
            mt_beam,
        } => {
            let target = match target {
                Target::En => MtTarget::English,
                Target::Fr => MtTarget::French,
            };
            let asr_config =
                DecodeConfig { beam_size: asr_beam, ctc_weight, att_weight, lm_weight, ..DecodeConfig::default() };
            let mut mt_config = default_mt_config(target);
            if let Some(b) = mt_beam {
                mt_config.beam_size = b;
            }
            asr_config.validate()?;
            mt_config.validate()?;
            let grid = source.grid()?;
            let frames = grid.frames();
            let ctc = CtcPrefixScorer::new(grid);
            let (att, lm) = scorers.load()?;
            let asr_bpe = load_bpe(&asr_bpe)?;
            let mt = ToyTranslationScorer::from_params(&load_params(&mt_model)?, &mt_entry)?;
            let src_bpe = load_bpe(&mt_source_bpe)?;
            let tgt_bpe = load_bpe(&mt_target_bpe)?;
            let system = CascadeSystem {
                asr: Scorers { attention: as_scorer(&att), ctc: Some(&ctc), lm: as_scorer(&lm) },
                asr_config,
                asr_bpe: &asr_bpe,
                mt: &mt,
                mt_lm: None,
                mt_config,
                mt_source_bpe: &src_bpe,
                mt_target_bpe: &tgt_bpe,
            };
            let out = system.run(frames)?;
            eprintln!("asr: {}", out.asr_text);
            println!("{}", out.translation);
            if !out.finished() {
                eprintln!("warning: a stage ended before end-of-sequence");
            }
            Ok(())
        }
        Command::AvgCkpt { output, inputs } => {
            let sets = inputs.iter().map(|p| load_params(p)).collect::<Result<Vec<_>>>()?;
            average_checkpoints(&sets)?.save(&output)
        }
        Command::Wer { reference, hypothesis } => {
            let pairs = pair_lines(&read_text(&reference)?, &read_text(&hypothesis)?)?;
            println!("{}", score_line("wer", wer(&pairs)?));
            Ok(())
        }
        Command::Bleu { reference, hypothesis, lowercase, smooth } => {
            let pairs = pair_lines(&read_text(&reference)?, &read_text(&hypothesis)?)?;
            let smoothing = match smooth {
                Smooth::None => BleuSmoothing::None,
                Smooth::Exp => BleuSmoothing::Exp,
            };
            println!("{}", score_line("bleu", bleu(&pairs, &BleuConfig { lowercase, smoothing }).score));
            Ok(())
        }
        Command::Chrf { reference, hypothesis, lowercase, averaging } => {
            let pairs = pair_lines(&read_text(&reference)?, &read_text(&hypothesis)?)?;
            let averaging = match averaging {
                Averaging::F => ChrfAveraging::PerOrderF,
                Averaging::Pr => ChrfAveraging::MeanPrecisionRecall,
            };
            let cfg = ChrfConfig { lowercase, averaging, ..ChrfConfig::default() };
            println!("{}", score_line("chrf", chrf(&pairs, &cfg)?));
            Ok(())
        }
        Command::Pipeline { config } => {
            let manifest = run_pipeline_file(&config)?;
            eprintln!("ran {} stage(s)", manifest.stages.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
