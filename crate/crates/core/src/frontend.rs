//! Audio frontend: resampling, speed perturbation, log-mel filterbank
//! features and SpecAugment masking.
//!
//! Everything here is a pure function of its inputs, so utterances can be
//! processed in parallel without coordination.

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Half-width of the windowed-sinc kernel, in input samples (64 taps total).
const SINC_HALF_WIDTH: i64 = 32;

/// Mono PCM audio with amplitudes nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(Self { samples, sample_rate_hz })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Reads a mono 16-bit PCM WAV file.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let reader = hound::WavReader::open(path.as_ref())?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::invalid(format!("expected mono audio, found {} channels", spec.channels)));
        }
        if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
            return Err(Error::invalid("expected 16-bit integer PCM"));
        }
        let samples = reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(samples, spec.sample_rate)
    }

    /// Writes the waveform as mono 16-bit PCM, clipping to `[-1, 1]`.
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate_hz,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path.as_ref(), spec)?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer.write_sample(v)?;
        }
        writer.finalize()?;
        Ok(())
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited interpolation of `x` at positions `n * step` for
/// `n in 0..out_len`, with a low-pass cutoff given as a fraction of the input
/// Nyquist frequency.
fn sinc_interpolate(x: &[f32], step: f64, cutoff: f64, out_len: usize) -> Vec<f32> {
    let len = x.len() as i64;
    let half = SINC_HALF_WIDTH as f64;
    (0..out_len)
        .map(|n| {
            let t = n as f64 * step;
            let centre = t.floor() as i64;
            let lo = (centre - SINC_HALF_WIDTH + 1).max(0);
            let hi = (centre + SINC_HALF_WIDTH).min(len - 1);
            let mut acc = 0.0f64;
            for k in lo..=hi {
                let d = t - k as f64;
                if d.abs() >= half {
                    continue;
                }
                let window = 0.5 * (1.0 + (PI * d / half).cos());
                acc += x[k as usize] as f64 * cutoff * sinc(cutoff * d) * window;
            }
            acc as f32
        })
        .collect()
}

/// Converts `w` to `target_hz` with a 64-tap Hann-windowed sinc kernel.
///
/// When the rates already match the samples are returned unchanged, which
/// makes the operation idempotent at the target rate.
pub fn resample(w: &Waveform, target_hz: u32) -> Result<Waveform> {
    if w.is_empty() {
        return Err(Error::EmptyWaveform);
    }
    if target_hz == 0 {
        return Err(Error::invalid("target sample rate must be positive"));
    }
    if target_hz == w.sample_rate_hz {
        return Ok(w.clone());
    }
    let ratio = target_hz as f64 / w.sample_rate_hz as f64;
    let out_len = ((w.len() as f64) * ratio).round().max(1.0) as usize;
    let samples = sinc_interpolate(&w.samples, 1.0 / ratio, ratio.min(1.0), out_len);
    Waveform::new(samples, target_hz)
}

/// Changes playback speed by `factor` while keeping the nominal sample rate,
/// so both tempo and pitch scale by `factor`.
pub fn speed_perturb(w: &Waveform, factor: f64) -> Result<Waveform> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::invalid(format!("speed factor must be positive, got {factor}")));
    }
    if w.is_empty() {
        return Err(Error::EmptyWaveform);
    }
    if factor == 1.0 {
        return Ok(w.clone());
    }
    let out_len = (w.len() as f64 / factor).round().max(1.0) as usize;
    let samples = sinc_interpolate(&w.samples, factor, (1.0 / factor).min(1.0), out_len);
    Waveform::new(samples, w.sample_rate_hz)
}

/// Frame geometry and filterbank settings for [`log_mel_fbank`].
#[derive(Debug, Clone, PartialEq)]
pub struct FbankConfig {
    pub n_mels: usize,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub preemphasis: f64,
    /// Filterbank energies are clamped to this value before the logarithm.
    pub energy_floor: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self { n_mels: 80, frame_length_ms: 25.0, frame_shift_ms: 10.0, preemphasis: 0.97, energy_floor: 1e-10 }
    }
}

impl FbankConfig {
    pub fn log_floor(&self) -> f32 {
        self.energy_floor.ln() as f32
    }

    fn frame_samples(&self, sample_rate_hz: u32) -> Result<(usize, usize)> {
        let to_samples = |ms: f64| (sample_rate_hz as f64 * ms / 1000.0).round() as usize;
        let length = to_samples(self.frame_length_ms);
        let shift = to_samples(self.frame_shift_ms);
        if length == 0 || shift == 0 {
            return Err(Error::invalid("frame length and shift must span at least one sample"));
        }
        Ok((length, shift))
    }
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters spaced evenly on the mel scale from 0 Hz to Nyquist.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `n_mels + 2` edge frequencies in Hz; filter `m` spans
    /// `edges[m]..edges[m + 2]` and peaks at `edges[m + 1]`.
    edges: Vec<f64>,
    /// Dense `n_mels x n_bins` weights.
    weights: Vec<Vec<f64>>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate_hz: u32) -> Self {
        let nyquist = sample_rate_hz as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64)).collect();
        let n_bins = n_fft / 2 + 1;
        let bin_hz = sample_rate_hz as f64 / n_fft as f64;
        let weights = (0..n_mels)
            .map(|m| {
                let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= left || f >= right {
                            0.0
                        } else if f <= centre {
                            (f - left) / (centre - left)
                        } else {
                            (right - f) / (right - centre)
                        }
                    })
                    .collect()
            })
            .collect();
        Self { edges, weights }
    }

    pub fn centre_frequencies(&self) -> Vec<f64> {
        self.edges[1..self.edges.len() - 1].to_vec()
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights.iter().map(|row| row.iter().zip(power).map(|(w, p)| w * p).sum()).collect()
    }
}

/// `T x n_mels` log filterbank energies, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f32>,
    n_frames: usize,
    n_mels: usize,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
}

impl FeatureMatrix {
    pub fn from_rows(rows: Vec<Vec<f32>>, frame_length_ms: f64, frame_shift_ms: f64) -> Result<Self> {
        let n_frames = rows.len();
        if n_frames == 0 {
            return Err(Error::invalid("feature matrix needs at least one frame"));
        }
        let n_mels = rows[0].len();
        if n_mels == 0 {
            return Err(Error::invalid("feature matrix needs at least one mel bin"));
        }
        let mut data = Vec::with_capacity(n_frames * n_mels);
        for (t, row) in rows.into_iter().enumerate() {
            if row.len() != n_mels {
                return Err(Error::invalid(format!("frame {t} has {} entries, expected {n_mels}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("frame {t} contains a non-finite value")));
            }
            data.extend(row);
        }
        Ok(Self { data, n_frames, n_mels, frame_length_ms, frame_shift_ms })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn get(&self, t: usize, m: usize) -> f32 {
        self.data[t * self.n_mels + m]
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.n_mels)
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    fn set(&mut self, t: usize, m: usize, v: f32) {
        self.data[t * self.n_mels + m] = v;
    }

    /// Writes `frames=T mels=N` followed by one line of N values per frame.
    /// Values use the shortest representation that parses back exactly.
    pub fn write_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "frames={} mels={}", self.n_frames, self.n_mels)?;
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }

    /// Parses the text format written by [`FeatureMatrix::write_text`].
    /// Frame geometry is not stored in the file and defaults to 25/10 ms.
    pub fn read_text<R: BufRead>(input: R, label: &str) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::parse(label, 1, "missing header"))?;
        let header = header.map_err(|e| Error::io(label, e))?;
        let fields = parse_header(&header, label, 1, &["frames", "mels"])?;
        let (n_frames, n_mels) = (fields[0], fields[1]);
        let mut rows = Vec::with_capacity(n_frames);
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io(label, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|tok| tok.parse::<f32>().map_err(|_| Error::parse(label, i + 1, format!("bad number `{tok}`"))))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != n_mels {
                return Err(Error::parse(label, i + 1, format!("expected {n_mels} values, found {}", row.len())));
            }
            rows.push(row);
        }
        if rows.len() != n_frames {
            return Err(Error::parse(label, 1, format!("header declares {n_frames} frames, found {}", rows.len())));
        }
        let defaults = FbankConfig::default();
        Self::from_rows(rows, defaults.frame_length_ms, defaults.frame_shift_ms)
            .map_err(|e| Error::parse(label, 1, e.to_string()))
    }
}

/// Parses `k1=v1 k2=v2 ...` requiring exactly the given keys in order.
pub(crate) fn parse_header(line: &str, label: &str, lineno: usize, keys: &[&str]) -> Result<Vec<usize>> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != keys.len() {
        return Err(Error::parse(
            label,
            lineno,
            format!("expected header `{}`", keys.iter().map(|k| format!("{k}=..")).collect::<Vec<_>>().join(" ")),
        ));
    }
    parts
        .iter()
        .zip(keys)
        .map(|(part, key)| {
            let value = part
                .strip_prefix(key)
                .and_then(|rest| rest.strip_prefix('='))
                .ok_or_else(|| Error::parse(label, lineno, format!("expected `{key}=`, found `{part}`")))?;
            value.parse::<usize>().map_err(|_| Error::parse(label, lineno, format!("bad value for `{key}`: `{value}`")))
        })
        .collect()
}

/// Log-mel filterbank features.
///
/// Pre-emphasis is applied to the whole signal, then each frame is
/// Hann-windowed, zero-padded to the next power of two and transformed.
/// Frame count is `1 + (len - frame_length) / frame_shift` in samples.
pub fn log_mel_fbank(w: &Waveform, cfg: &FbankConfig) -> Result<FeatureMatrix> {
    if w.is_empty() {
        return Err(Error::EmptyWaveform);
    }
    if cfg.n_mels == 0 {
        return Err(Error::invalid("n_mels must be at least 1"));
    }
    if !(cfg.energy_floor > 0.0) {
        return Err(Error::invalid("energy floor must be positive"));
    }
    let (frame_len, shift) = cfg.frame_samples(w.sample_rate_hz)?;
    if w.len() < frame_len {
        return Err(Error::invalid(format!("waveform has {} samples, shorter than one frame of {frame_len}", w.len())));
    }
    let n_frames = 1 + (w.len() - frame_len) / shift;
    let n_fft = frame_len.next_power_of_two();

    let mut emphasized = Vec::with_capacity(w.len());
    let mut prev = 0.0f64;
    for (i, &s) in w.samples.iter().enumerate() {
        let s = s as f64;
        emphasized.push(if i == 0 { s } else { s - cfg.preemphasis * prev });
        prev = s;
    }

    let window: Vec<f64> = if frame_len == 1 {
        vec![1.0]
    } else {
        (0..frame_len).map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / (frame_len - 1) as f64).cos()).collect()
    };
    let bank = MelFilterbank::new(cfg.n_mels, n_fft, w.sample_rate_hz);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];

    let mut rows = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let frame = &emphasized[t * shift..t * shift + frame_len];
        for (slot, (x, win)) in buf.iter_mut().zip(frame.iter().zip(&window)) {
            *slot = Complex::new(x * win, 0.0);
        }
        for slot in buf.iter_mut().skip(frame_len) {
            *slot = Complex::new(0.0, 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        let row = bank
            .apply(&power)
            .into_iter()
            .map(|e| {
                let e = if e.is_finite() { e } else { f64::MAX };
                e.max(cfg.energy_floor).ln() as f32
            })
            .collect();
        rows.push(row);
    }
    FeatureMatrix::from_rows(rows, cfg.frame_length_ms, cfg.frame_shift_ms)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskFill {
    Zero,
    /// Mean of every cell of the input matrix.
    UtteranceMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpecAugmentConfig {
    pub n_freq_masks: usize,
    pub max_freq_width: usize,
    pub n_time_masks: usize,
    pub max_time_width: usize,
    pub fill: MaskFill,
    pub seed: u64,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self { n_freq_masks: 2, max_freq_width: 30, n_time_masks: 2, max_time_width: 40, fill: MaskFill::Zero, seed: 0 }
    }
}

/// A masked band: `start..start + width` along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    Freq { start: usize, width: usize },
    Time { start: usize, width: usize },
}

impl Mask {
    pub fn covers(&self, t: usize, m: usize) -> bool {
        match *self {
            Mask::Freq { start, width } => (start..start + width).contains(&m),
            Mask::Time { start, width } => (start..start + width).contains(&t),
        }
    }
}

/// Draws the mask bands for a `n_frames x n_mels` matrix. Frequency masks are
/// drawn first, then time masks; each draws its width uniformly from
/// `0..=max` and then its start uniformly from the positions that fit.
pub fn sample_masks(n_frames: usize, n_mels: usize, cfg: &SpecAugmentConfig) -> Result<Vec<Mask>> {
    if cfg.max_freq_width > n_mels {
        return Err(Error::invalid(format!("max_freq_width {} exceeds n_mels {n_mels}", cfg.max_freq_width)));
    }
    let mut rng = SplitMix64::new(cfg.seed);
    let mut masks = Vec::with_capacity(cfg.n_freq_masks + cfg.n_time_masks);
    for _ in 0..cfg.n_freq_masks {
        let width = rng.inclusive(0, cfg.max_freq_width as u64) as usize;
        let start = rng.inclusive(0, (n_mels - width) as u64) as usize;
        masks.push(Mask::Freq { start, width });
    }
    let max_time = cfg.max_time_width.min(n_frames);
    for _ in 0..cfg.n_time_masks {
        let width = rng.inclusive(0, max_time as u64) as usize;
        let start = rng.inclusive(0, (n_frames - width) as u64) as usize;
        masks.push(Mask::Time { start, width });
    }
    Ok(masks)
}

/// Applies frequency and time masking. Cells outside the sampled bands are
/// copied bit-for-bit.
pub fn spec_augment(f: &FeatureMatrix, cfg: &SpecAugmentConfig) -> Result<FeatureMatrix> {
    let masks = sample_masks(f.n_frames(), f.n_mels(), cfg)?;
    let fill = match cfg.fill {
        MaskFill::Zero => 0.0,
        MaskFill::UtteranceMean => {
            let sum: f64 = f.values().iter().map(|&v| v as f64).sum();
            (sum / f.values().len() as f64) as f32
        }
    };
    let mut out = f.clone();
    for mask in &masks {
        match *mask {
            Mask::Freq { start, width } => {
                for t in 0..out.n_frames() {
                    for m in start..start + width {
                        out.set(t, m, fill);
                    }
                }
            }
            Mask::Time { start, width } => {
                for t in start..start + width {
                    for m in 0..out.n_mels() {
                        out.set(t, m, fill);
                    }
                }
            }
        }
    }
    Ok(out)
}
