//! Waveform to 39-dimensional spectral feature sequences.
//!
//! The default pipeline is the usual MFCC chain: 25 ms Hamming-windowed
//! frames every 10 ms, 512-point power spectrum, 40 triangular mel filters,
//! log with a floor, orthonormal DCT-II keeping 13 coefficients, then first
//! and second order regression deltas. [`FeatureKind::LogMel`] skips the DCT
//! and deltas and emits 39 log-mel bins instead.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_DIM: usize = 39;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }

    /// Reads a 16-bit PCM mono WAV file, scaling samples to [-1, 1).
    pub fn from_wav(path: &Path) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::InvalidArgument(format!(
                "{}: expected 16-bit PCM mono, got {} channel(s) at {} bits",
                path.display(),
                spec.channels,
                spec.bits_per_sample
            )));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Waveform::new(samples, spec.sample_rate)
    }

    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            w.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)?;
        }
        w.finalize()?;
        Ok(())
    }

    /// Sub-segment between `start` and `end` seconds.
    pub fn slice_seconds(&self, start: f64, end: f64) -> Result<Waveform> {
        let sr = self.sample_rate as f64;
        let a = (start * sr).round().max(0.0) as usize;
        let b = ((end * sr).round() as usize).min(self.samples.len());
        if !(start <= end) || a >= b {
            return Err(Error::InvalidArgument(format!("empty time range {start}..{end}")));
        }
        Waveform::new(self.samples[a..b].to_vec(), self.sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn scaled(&self, factor: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|s| s * factor).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// 13 cepstral coefficients with deltas and delta-deltas.
    #[default]
    Mfcc,
    /// 39 raw log-mel filterbank energies.
    LogMel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub kind: FeatureKind,
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub n_mels: usize,
    pub n_static: usize,
    pub delta_window: usize,
    pub log_floor: f64,
    /// Mean/variance normalization fitted on the training split.
    pub normalize: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            kind: FeatureKind::Mfcc,
            frame_ms: 25.0,
            hop_ms: 10.0,
            fft_size: 512,
            n_mels: 40,
            n_static: 13,
            delta_window: 2,
            log_floor: 1e-10,
            normalize: true,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.frame_ms > self.hop_ms && self.hop_ms > 0.0) {
            return bad("need frame_ms > hop_ms > 0");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        match self.kind {
            FeatureKind::Mfcc => {
                if self.n_static * 3 != FEATURE_DIM {
                    return bad("n_static × 3 must equal 39");
                }
                if self.n_mels < self.n_static {
                    return bad("n_mels must be at least n_static");
                }
                if self.delta_window == 0 {
                    return bad("delta_window must be positive");
                }
            }
            FeatureKind::LogMel => {
                if self.n_mels != FEATURE_DIM {
                    return bad("log-mel features need n_mels = 39");
                }
            }
        }
        Ok(())
    }

    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.frame_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }
}

/// `T×39` feature sequence for one spoken segment.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix(Array2<f64>);

impl FeatureMatrix {
    pub fn new(frames: Array2<f64>) -> Result<Self> {
        if frames.ncols() != FEATURE_DIM {
            return Err(Error::Shape(format!("features need {FEATURE_DIM} columns, got {}", frames.ncols())));
        }
        if frames.nrows() == 0 {
            return Err(Error::Shape("feature matrix has no frames".into()));
        }
        if !frames.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("feature matrix entry".into()));
        }
        Ok(FeatureMatrix(frames))
    }

    pub fn frames(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array2<f64> {
        self.0
    }

    /// Writes `{T: u32, dim: u32}` followed by `T×dim` little-endian f32.
    pub fn write(&self, path: &Path) -> Result<()> {
        let (t, d) = self.0.dim();
        let mut buf = Vec::with_capacity(8 + 4 * t * d);
        buf.extend_from_slice(&(t as u32).to_le_bytes());
        buf.extend_from_slice(&(d as u32).to_le_bytes());
        for v in self.0.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |msg: &str| Error::Parse { path: path.to_path_buf(), line: 0, msg: msg.to_string() };
        if bytes.len() < 8 {
            return Err(parse_err("feature file shorter than its header"));
        }
        let t = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() != 8 + 4 * t * d {
            return Err(parse_err("feature file size does not match its header"));
        }
        let values = bytes[8..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let m = Array2::from_shape_vec((t, d), values).map_err(|e| parse_err(&e.to_string()))?;
        FeatureMatrix::new(m)
    }
}

fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Splits a waveform into Hamming-windowed frames, one per row.
pub fn frame_signal(w: &Waveform, cfg: &FeatureConfig) -> Result<Array2<f64>> {
    let window = cfg.window_samples(w.sample_rate);
    let hop = cfg.hop_samples(w.sample_rate);
    let n = w.samples.len();
    if window == 0 || hop == 0 {
        return Err(Error::Config("frame or hop rounds to zero samples".into()));
    }
    if n < window {
        return Err(Error::SegmentTooShort { samples: n, window });
    }
    let t = (n - window) / hop + 1;
    let win = hamming(window);
    Ok(Array2::from_shape_fn((t, window), |(i, j)| w.samples[i * hop + j] * win[j]))
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters over `0..=fft_size/2` bins, equally spaced on the mel
/// scale between 0 Hz and Nyquist. Returns the filter matrix
/// (`n_mels × bins`) and each filter's (left, center, right) bin.
pub fn mel_filterbank(n_mels: usize, fft_size: usize, sample_rate: u32) -> (Array2<f64>, Vec<(usize, usize, usize)>) {
    let bins = fft_size / 2 + 1;
    let sr = sample_rate as f64;
    let top = hz_to_mel(sr / 2.0);
    let points: Vec<usize> = (0..n_mels + 2)
        .map(|i| {
            let hz = mel_to_hz(top * i as f64 / (n_mels + 1) as f64);
            (((fft_size + 1) as f64 * hz / sr).floor() as usize).min(bins - 1)
        })
        .collect();
    let mut fb = Array2::zeros((n_mels, bins));
    let mut edges = Vec::with_capacity(n_mels);
    for m in 0..n_mels {
        let (l, c, r) = (points[m], points[m + 1], points[m + 2]);
        for k in l..=r {
            let w = if k < c {
                (k - l) as f64 / (c - l) as f64
            } else if k == c {
                1.0
            } else {
                (r - k) as f64 / (r - c) as f64
            };
            fb[[m, k]] = w;
        }
        edges.push((l, c, r));
    }
    (fb, edges)
}

/// Orthonormal DCT-II matrix, `n_out × n_in`.
pub fn dct_matrix(n_out: usize, n_in: usize) -> Array2<f64> {
    let n = n_in as f64;
    Array2::from_shape_fn((n_out, n_in), |(k, i)| {
        let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        scale * (PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos()
    })
}

/// Reusable spectral front-end for one sample rate and config.
pub struct Extractor {
    cfg: FeatureConfig,
    sample_rate: u32,
    fft: Arc<dyn Fft<f64>>,
    filterbank: Array2<f64>,
    dct: Array2<f64>,
}

impl Extractor {
    pub fn new(cfg: &FeatureConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate()?;
        let window = cfg.window_samples(sample_rate);
        if window > cfg.fft_size {
            return Err(Error::Config(format!(
                "fft_size {} smaller than the {window}-sample window",
                cfg.fft_size
            )));
        }
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        let (filterbank, _) = mel_filterbank(cfg.n_mels, cfg.fft_size, sample_rate);
        let dct = dct_matrix(cfg.n_static, cfg.n_mels);
        Ok(Extractor { cfg: cfg.clone(), sample_rate, fft, filterbank, dct })
    }

    pub fn power_spectrum(&self, frame: &[f64]) -> Array1<f64> {
        let mut buf: Vec<Complex<f64>> = (0..self.cfg.fft_size)
            .map(|i| Complex::new(frame.get(i).copied().unwrap_or(0.0), 0.0))
            .collect();
        self.fft.process(&mut buf);
        let bins = self.cfg.fft_size / 2 + 1;
        Array1::from_iter(buf[..bins].iter().map(|c| c.norm_sqr()))
    }

    /// Floored log filterbank energies, one row per frame.
    pub fn log_mel(&self, frames: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((frames.nrows(), self.cfg.n_mels));
        for (i, frame) in frames.rows().into_iter().enumerate() {
            let spec = self.power_spectrum(frame.as_slice().expect("standard layout"));
            let energies = self.filterbank.dot(&spec);
            out.row_mut(i)
                .assign(&energies.mapv(|e| e.max(self.cfg.log_floor).ln()));
        }
        out
    }

    /// Static cepstra (`T×n_static`) of windowed frames.
    pub fn mel_static(&self, frames: &Array2<f64>) -> Array2<f64> {
        self.log_mel(frames).dot(&self.dct.t())
    }

    pub fn extract(&self, w: &Waveform) -> Result<FeatureMatrix> {
        if w.sample_rate != self.sample_rate {
            return Err(Error::InvalidArgument(format!(
                "extractor built for {} Hz, waveform is {} Hz",
                self.sample_rate, w.sample_rate
            )));
        }
        let frames = frame_signal(w, &self.cfg)?;
        let feats = match self.cfg.kind {
            FeatureKind::Mfcc => append_deltas(&self.mel_static(&frames), self.cfg.delta_window),
            FeatureKind::LogMel => self.log_mel(&frames),
        };
        FeatureMatrix::new(feats)
    }
}

/// Static cepstra for frames produced by [`frame_signal`].
pub fn mel_static(frames: &Array2<f64>, cfg: &FeatureConfig, sample_rate: u32) -> Result<Array2<f64>> {
    Ok(Extractor::new(cfg, sample_rate)?.mel_static(frames))
}

pub fn extract(w: &Waveform, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    Extractor::new(cfg, w.sample_rate)?.extract(w)
}

/// Two-sided regression deltas with edge replication:
/// `d_t = Σ_{n=1..N} n·(c_{t+n} − c_{t−n}) / (2·Σ n²)`.
pub fn deltas(x: &Array2<f64>, window: usize) -> Array2<f64> {
    let (t, d) = x.dim();
    let denom = 2.0 * (1..=window).map(|n| (n * n) as f64).sum::<f64>();
    let clamp = |i: isize| i.clamp(0, t as isize - 1) as usize;
    let mut out = Array2::zeros((t, d));
    for i in 0..t {
        let mut row = out.row_mut(i);
        for n in 1..=window {
            let ahead = x.row(clamp(i as isize + n as isize));
            let behind = x.row(clamp(i as isize - n as isize));
            row.scaled_add(n as f64 / denom, &(&ahead - &behind));
        }
    }
    out
}

/// `[static | Δ | ΔΔ]` column layout.
pub fn append_deltas(stat: &Array2<f64>, window: usize) -> Array2<f64> {
    let d1 = deltas(stat, window);
    let d2 = deltas(&d1, window);
    ndarray::concatenate(Axis(1), &[stat.view(), d1.view(), d2.view()]).expect("matching row counts")
}

/// Per-dimension mean/variance normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fits statistics over every frame of `mats`.
    pub fn fit<'a>(mats: impl IntoIterator<Item = &'a Array2<f64>>) -> Result<Self> {
        let mut sum = Array1::<f64>::zeros(FEATURE_DIM);
        let mut sq = Array1::<f64>::zeros(FEATURE_DIM);
        let mut n = 0usize;
        for m in mats {
            sum += &m.sum_axis(Axis(0));
            sq += &m.mapv(|v| v * v).sum_axis(Axis(0));
            n += m.nrows();
        }
        if n == 0 {
            return Err(Error::EmptySplit("normalization statistics".into()));
        }
        let mean = &sum / n as f64;
        let var = &sq / n as f64 - &mean.mapv(|m| m * m);
        let std = var.mapv(|v| v.max(0.0).sqrt().max(1e-8));
        Ok(Normalizer { mean: mean.to_vec(), std: std.to_vec() })
    }

    pub fn apply(&self, m: &mut Array2<f64>) {
        for mut row in m.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
    }
}
