//! Log mel-filterbank front-end: pre-emphasis, Hamming-windowed framing,
//! power spectrum and triangular mel filters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound applied before taking the log of filterbank energies.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub preemphasis: f64,
    /// Window length in milliseconds.
    pub win_ms: f64,
    /// Hop length in milliseconds.
    pub hop_ms: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub mel_fmin: f64,
    pub mel_fmax: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            preemphasis: 0.97,
            win_ms: 25.0,
            hop_ms: 10.0,
            n_fft: 512,
            n_mels: 64,
            mel_fmin: 20.0,
            mel_fmax: 7600.0,
        }
    }
}

impl FeatureConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    pub fn with_mels(n_mels: usize) -> Self {
        Self {
            n_mels,
            ..Self::default()
        }
    }

    pub fn win_samples(&self) -> usize {
        (self.win_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    /// Number of frames produced for `len` samples, or `None` if the signal
    /// is shorter than one window.
    pub fn num_frames(&self, len: usize) -> Option<usize> {
        let win = self.win_samples();
        (len >= win).then(|| 1 + (len - win) / self.hop_samples())
    }

    /// Collects every violated constraint.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.sample_rate == 0 {
            p.push("features.sample_rate must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.preemphasis) {
            p.push(format!("features.preemphasis must be in [0, 1), got {}", self.preemphasis));
        }
        if self.sample_rate > 0 {
            if self.win_samples() == 0 {
                p.push("features.win_ms gives an empty window".to_string());
            }
            if self.hop_samples() == 0 {
                p.push("features.hop_ms gives a zero hop".to_string());
            }
            if self.n_fft < self.win_samples() {
                p.push(format!(
                    "features.n_fft ({}) is shorter than the window ({} samples)",
                    self.n_fft,
                    self.win_samples()
                ));
            }
        }
        if self.n_mels == 0 {
            p.push("features.n_mels must be at least 1".to_string());
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.mel_fmin >= 0.0 && self.mel_fmin < self.mel_fmax && self.mel_fmax <= nyquist) {
            p.push(format!(
                "features.mel_fmin/mel_fmax must satisfy 0 <= fmin < fmax <= {nyquist}, got {} / {}",
                self.mel_fmin, self.mel_fmax
            ));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("waveform contains non-finite samples"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let e: f64 = self.samples.iter().map(|&v| (v as f64) * (v as f64)).sum();
        (e / self.samples.len() as f64).sqrt()
    }
}

/// Reads a 16-bit PCM mono WAV file. Samples are scaled to `[-1, 1)`.
pub fn read_wav(path: &Path, expected_rate: u32) -> Result<Waveform> {
    let audio_err = |message: String| Error::Audio {
        path: path.to_path_buf(),
        message,
    };
    let reader = hound::WavReader::open(path).map_err(|e| audio_err(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(audio_err(format!("expected mono audio, found {} channels", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(audio_err(format!(
            "expected 16-bit PCM, found {:?} with {} bits",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if spec.sample_rate != expected_rate {
        return Err(Error::SampleRate {
            expected: expected_rate,
            found: spec.sample_rate,
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| audio_err(e.to_string()))?;
    if samples.is_empty() {
        return Err(audio_err("no samples".to_string()));
    }
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM mono, clipping to the representable range.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let audio_err = |e: hound::Error| Error::Audio {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(audio_err)?;
    for &s in &w.samples {
        let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(audio_err)?;
    }
    writer.finalize().map_err(audio_err)
}

pub fn preemphasize(w: &Waveform, alpha: f64) -> Result<Waveform> {
    if w.is_empty() {
        return Err(Error::invalid("cannot pre-emphasize an empty waveform"));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::invalid(format!("pre-emphasis coefficient must be in [0, 1), got {alpha}")));
    }
    let x = &w.samples;
    let mut y = Vec::with_capacity(x.len());
    y.push(x[0]);
    for n in 1..x.len() {
        y.push((x[n] as f64 - alpha * x[n - 1] as f64) as f32);
    }
    Ok(Waveform {
        samples: y,
        sample_rate: w.sample_rate,
    })
}

/// Symmetric Hamming window `0.54 - 0.46 cos(2 pi n / (L - 1))`.
pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let denom = (len - 1) as f64;
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / denom).cos())
        .collect()
}

/// Splits into overlapping Hamming-windowed frames, `[T, win_samples]`.
pub fn frame_window(w: &Waveform, cfg: &FeatureConfig) -> Result<Tensor<f64>> {
    let (win, hop) = (cfg.win_samples(), cfg.hop_samples());
    let t = cfg.num_frames(w.len()).ok_or_else(|| {
        Error::invalid(format!(
            "utterance of {} samples is shorter than one {win}-sample window",
            w.len()
        ))
    })?;
    let window = hamming(win);
    let mut out = Vec::with_capacity(t * win);
    for f in 0..t {
        let frame = &w.samples[f * hop..f * hop + win];
        out.extend(frame.iter().zip(&window).map(|(&x, &h)| x as f64 * h));
    }
    Tensor::new(&[t, win], out)
}

/// Squared DFT magnitude of each zero-padded frame, `[T, n_fft / 2 + 1]`.
pub fn power_spectrum(frames: &Tensor<f64>, n_fft: usize) -> Result<Tensor<f64>> {
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    power_spectrum_with(frames, n_fft, fft.as_ref())
}

fn power_spectrum_with(frames: &Tensor<f64>, n_fft: usize, fft: &dyn Fft<f64>) -> Result<Tensor<f64>> {
    if frames.ndim() != 2 || frames.shape()[1] > n_fft {
        return Err(Error::shape(format!(
            "power_spectrum expects [T, win <= {n_fft}], got {:?}",
            frames.shape()
        )));
    }
    let (t, win) = (frames.shape()[0], frames.shape()[1]);
    let bins = n_fft / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut out = Vec::with_capacity(t * bins);
    for row in frames.data().chunks(win) {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (b, &x) in buf.iter_mut().zip(row) {
            b.re = x;
        }
        fft.process(&mut buf);
        out.extend(buf[..bins].iter().map(|c| c.norm_sqr()));
    }
    Tensor::new(&[t, bins], out)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of the mel filters.
pub fn mel_centers(cfg: &FeatureConfig) -> Vec<f64> {
    let edges = mel_edges(cfg);
    edges[1..edges.len() - 1].to_vec()
}

fn mel_edges(cfg: &FeatureConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.mel_fmin), hz_to_mel(cfg.mel_fmax));
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    (0..cfg.n_mels + 2).map(|i| mel_to_hz(lo + step * i as f64)).collect()
}

/// Triangular filters on the HTK mel scale, `[n_mels, n_fft / 2 + 1]`,
/// each scaled to a peak of one.
pub fn mel_filterbank(cfg: &FeatureConfig) -> Result<Tensor<f64>> {
    cfg.validate()?;
    let bins = cfg.n_fft / 2 + 1;
    let edges = mel_edges(cfg);
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    let mut out = vec![0.0; cfg.n_mels * bins];
    for m in 0..cfg.n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut out[m * bins..(m + 1) * bins];
        for (k, v) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            *v = ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0);
        }
        let peak = row.iter().copied().fold(0.0, f64::max);
        if peak <= 0.0 {
            return Err(Error::invalid(format!(
                "mel filter {m} ({l:.1}-{r:.1} Hz) covers no FFT bin; reduce n_mels or raise n_fft"
            )));
        }
        row.iter_mut().for_each(|v| *v /= peak);
    }
    Tensor::new(&[cfg.n_mels, bins], out)
}

/// Reusable extractor holding the FFT plan and filterbank.
pub struct Fbank {
    cfg: FeatureConfig,
    fft: Arc<dyn Fft<f64>>,
    filters: Tensor<f64>,
}

impl Fbank {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        let filters = mel_filterbank(cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            fft: FftPlanner::new().plan_fft_forward(cfg.n_fft),
            filters,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// Log mel energies oriented `[n_mels, T]`.
    pub fn compute(&self, w: &Waveform) -> Result<Tensor<f32>> {
        if w.sample_rate != self.cfg.sample_rate {
            return Err(Error::SampleRate {
                expected: self.cfg.sample_rate,
                found: w.sample_rate,
            });
        }
        let pre = preemphasize(w, self.cfg.preemphasis)?;
        let frames = frame_window(&pre, &self.cfg)?;
        let spec = power_spectrum_with(&frames, self.cfg.n_fft, self.fft.as_ref())?;
        let (t, bins) = (spec.shape()[0], spec.shape()[1]);
        let nm = self.cfg.n_mels;
        let mut out = vec![0.0f32; nm * t];
        let fd = self.filters.data();
        for (ti, p) in spec.data().chunks(bins).enumerate() {
            for m in 0..nm {
                let e: f64 = fd[m * bins..(m + 1) * bins].iter().zip(p).map(|(a, b)| a * b).sum();
                out[m * t + ti] = e.max(LOG_FLOOR).ln() as f32;
            }
        }
        Tensor::new(&[nm, t], out)
    }
}

/// One-shot log mel-filterbank extraction, `[n_mels, T]`.
pub fn log_fbanks(w: &Waveform, cfg: &FeatureConfig) -> Result<Tensor<f32>> {
    Fbank::new(cfg)?.compute(w)
}

/// Writes `[F, T]` features: two little-endian u32 dims, then f32 data.
pub fn write_features(path: &Path, feats: &Tensor<f32>) -> Result<()> {
    if feats.ndim() != 2 {
        return Err(Error::shape(format!("features must be [F, T], got {:?}", feats.shape())));
    }
    let ctx = || format!("writing {}", path.display());
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::with_capacity(8 + 4 * feats.numel());
    for &d in feats.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in feats.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| Error::io(ctx(), e))
}

pub fn read_features(path: &Path) -> Result<Tensor<f32>> {
    let ctx = || format!("reading {}", path.display());
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(ctx(), e))?)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(ctx(), e))?;
    let bad = || Error::invalid(format!("{}: malformed feature file", path.display()));
    if bytes.len() < 8 {
        return Err(bad());
    }
    let f = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if f == 0 || t == 0 || bytes.len() != 8 + 4 * f * t {
        return Err(bad());
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&[f, t], data)
}
