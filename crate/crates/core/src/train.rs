//! Training loop: random cropping, augmentation, AAM-softmax loss, Adam
//! with linear warmup and step decay.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::frontend::{read_wav, Fbank, FeatureConfig, Waveform};
use crate::model::{Mode, Model};
use crate::optim::{Adam, AdamConfig, AdamState};
use crate::rng::{derive_seed, normal_vec, seeded, Rng};
use crate::scoring::wrap_to;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub noise_prob: f64,
    pub reverb_prob: f64,
    pub snr_db_min: f64,
    pub snr_db_max: f64,
    /// Text file with one noise WAV path per line.
    pub noise_list: Option<PathBuf>,
    /// Text file with one impulse-response WAV path per line.
    pub rir_list: Option<PathBuf>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_prob: 0.6,
            reverb_prob: 0.5,
            snr_db_min: 0.0,
            snr_db_max: 15.0,
            noise_list: None,
            rir_list: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub margin: f64,
    pub scale: f64,
    pub lr_peak: f64,
    pub warmup_steps: u64,
    /// 1-based epochs from which the learning rate is multiplied by `decay_ratio`.
    pub decay_epochs: Vec<u64>,
    pub decay_ratio: f64,
    pub epochs: u64,
    pub weight_decay: f64,
    pub crop_seconds: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub features: FeatureConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            scale: 30.0,
            lr_peak: 1e-3,
            warmup_steps: 20_000,
            decay_epochs: vec![20, 32],
            decay_ratio: 0.1,
            epochs: 40,
            weight_decay: 2e-5,
            crop_seconds: 2.0,
            batch_size: 64,
            seed: 0,
            augment: AugmentConfig::default(),
            features: FeatureConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.margin >= 0.0 && self.margin < std::f64::consts::FRAC_PI_2) {
            p.push(format!("margin must lie in [0, pi/2), got {}", self.margin));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            p.push(format!("scale must be positive, got {}", self.scale));
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            p.push(format!("lr_peak must be positive, got {}", self.lr_peak));
        }
        if !(self.decay_ratio > 0.0 && self.decay_ratio <= 1.0) {
            p.push(format!("decay_ratio must lie in (0, 1], got {}", self.decay_ratio));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            p.push("decay_epochs must be strictly increasing".into());
        }
        if self.epochs == 0 {
            p.push("epochs must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            p.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.crop_seconds > 0.0 && self.crop_seconds.is_finite()) {
            p.push(format!("crop_seconds must be positive, got {}", self.crop_seconds));
        }
        if self.batch_size == 0 {
            p.push("batch_size must be at least 1".into());
        }
        let a = &self.augment;
        for (name, v) in [("noise_prob", a.noise_prob), ("reverb_prob", a.reverb_prob)] {
            if !(0.0..=1.0).contains(&v) {
                p.push(format!("augment.{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(a.snr_db_min.is_finite() && a.snr_db_max.is_finite() && a.snr_db_min <= a.snr_db_max) {
            p.push("augment.snr_db_min must not exceed augment.snr_db_max".into());
        }
        p.extend(self.features.problems().into_iter().map(|m| format!("features: {m}")));
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

/// Learning rate for the update at `step` (0-based) inside 1-based `epoch`.
pub fn lr_at(cfg: &TrainConfig, step: u64, epoch: u64) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr_peak * step as f64 / cfg.warmup_steps as f64;
    }
    let passed = cfg.decay_epochs.iter().filter(|&&d| d <= epoch).count();
    cfg.lr_peak * cfg.decay_ratio.powi(passed as i32)
}

/// Random crop of exactly `seconds`; shorter inputs are repeated to length.
pub fn crop_segment(w: &Waveform, seconds: f64, rng: &mut Rng) -> Result<Waveform> {
    if w.is_empty() {
        return Err(Error::invalid("cannot crop an empty waveform"));
    }
    let len = (seconds * w.sample_rate as f64).round() as usize;
    if len == 0 {
        return Err(Error::invalid("crop length rounds to zero samples"));
    }
    let samples = if w.len() <= len {
        wrap_to(&w.samples, len)
    } else {
        let start = rng.gen_range(0..=w.len() - len);
        w.samples[start..start + len].to_vec()
    };
    Ok(Waveform {
        samples,
        sample_rate: w.sample_rate,
    })
}

/// Full linear convolution via FFT.
pub fn fft_convolve(x: &[f32], h: &[f32]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let out_len = x.len() + h.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |v: &[f32]| {
        let mut b: Vec<Complex<f64>> = v.iter().map(|&s| Complex::new(s as f64, 0.0)).collect();
        b.resize(n, Complex::new(0.0, 0.0));
        b
    };
    let (mut a, mut b) = (pad(x), pad(h));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    a.truncate(out_len);
    a.into_iter().map(|c| c.re / n as f64).collect()
}

fn mean_power(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x * x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Noise clips and impulse responses; either may be empty.
#[derive(Clone, Debug, Default)]
pub struct AugmentPools {
    pub noise: Vec<Waveform>,
    pub rirs: Vec<Waveform>,
}

fn read_list(path: &Path, sample_rate: u32) -> Result<Vec<Waveform>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let w = read_wav(Path::new(l), sample_rate)?;
            if w.is_empty() {
                return Err(Error::Audio {
                    path: l.into(),
                    message: "empty augmentation source".into(),
                });
            }
            Ok(w)
        })
        .collect()
}

impl AugmentPools {
    pub fn load(cfg: &AugmentConfig, sample_rate: u32) -> Result<Self> {
        Ok(Self {
            noise: cfg.noise_list.as_deref().map(|p| read_list(p, sample_rate)).transpose()?.unwrap_or_default(),
            rirs: cfg.rir_list.as_deref().map(|p| read_list(p, sample_rate)).transpose()?.unwrap_or_default(),
        })
    }

    pub fn is_empty(&self) -> bool {
        self.noise.is_empty() && self.rirs.is_empty()
    }
}

/// Reverberation (renormalized to the input RMS) then additive noise at a
/// random SNR, each applied with its configured probability.
pub fn augment(w: &Waveform, pools: &AugmentPools, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Waveform> {
    let mut out: Vec<f64> = w.samples.iter().map(|&v| v as f64).collect();
    let reverb = !pools.rirs.is_empty() && rng.gen::<f64>() < cfg.reverb_prob;
    let noise = !pools.noise.is_empty() && rng.gen::<f64>() < cfg.noise_prob;
    if reverb {
        let h = &pools.rirs[rng.gen_range(0..pools.rirs.len())];
        if h.sample_rate != w.sample_rate {
            return Err(Error::SampleRate { expected: w.sample_rate, found: h.sample_rate });
        }
        let before = mean_power(out.iter().copied()).sqrt();
        let mut y = fft_convolve(&w.samples, &h.samples);
        y.truncate(w.len());
        let after = mean_power(y.iter().copied()).sqrt();
        out = if after > 0.0 { y.into_iter().map(|v| v * before / after).collect() } else { y };
    }
    if noise {
        let n = &pools.noise[rng.gen_range(0..pools.noise.len())];
        if n.sample_rate != w.sample_rate {
            return Err(Error::SampleRate { expected: w.sample_rate, found: n.sample_rate });
        }
        let offset = rng.gen_range(0..n.len());
        let clip: Vec<f64> = n.samples.iter().cycle().skip(offset).take(out.len()).map(|&v| v as f64).collect();
        let snr = rng.gen_range(cfg.snr_db_min..=cfg.snr_db_max);
        let (ps, pn) = (mean_power(out.iter().copied()), mean_power(clip.iter().copied()));
        if pn > 0.0 {
            let g = (ps / (pn * 10f64.powf(snr / 10.0))).sqrt();
            for (o, c) in out.iter_mut().zip(&clip) {
                *o += g * c;
            }
        }
    }
    Waveform::new(out.into_iter().map(|v| v as f32).collect(), w.sample_rate)
}

/// Parses `speaker_id<TAB>path` lines. Speaker ids must be integers covering
/// `0..n_speakers` without gaps.
pub fn read_manifest(path: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut items = Vec::new();
    let mut problems = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match line.split_once('\t') {
            Some((id, p)) if !p.trim().is_empty() => match id.trim().parse::<usize>() {
                Ok(id) => items.push((id, PathBuf::from(p.trim()))),
                Err(_) => problems.push(format!("line {}: speaker id `{id}` is not a non-negative integer", n + 1)),
            },
            _ => problems.push(format!("line {}: expected `speaker_id<TAB>wav_path`", n + 1)),
        }
    }
    problems.extend(label_problems(items.iter().map(|i| i.0)));
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    Ok(items)
}

fn label_problems(ids: impl Iterator<Item = usize>) -> Vec<String> {
    let ids: std::collections::BTreeSet<usize> = ids.collect();
    let mut p = Vec::new();
    let Some(&max) = ids.iter().next_back() else {
        return vec!["dataset is empty".into()];
    };
    let missing: Vec<String> = (0..=max).filter(|i| !ids.contains(i)).map(|i| i.to_string()).collect();
    if !missing.is_empty() {
        p.push(format!("speaker ids must be dense in 0..{}; missing {}", max + 1, missing.join(", ")));
    }
    if ids.len() < 2 {
        p.push("training needs at least 2 speakers".into());
    }
    p
}

#[derive(Clone, Debug)]
pub struct SpeakerDataset {
    pub items: Vec<(usize, Arc<Waveform>)>,
    pub n_speakers: usize,
}

impl SpeakerDataset {
    pub fn new(items: Vec<(usize, Waveform)>) -> Result<Self> {
        let problems = label_problems(items.iter().map(|i| i.0));
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        if items.iter().any(|i| i.1.is_empty()) {
            return Err(Error::invalid("dataset contains an empty waveform"));
        }
        let n_speakers = items.iter().map(|i| i.0).max().unwrap() + 1;
        Ok(Self {
            items: items.into_iter().map(|(s, w)| (s, Arc::new(w))).collect(),
            n_speakers,
        })
    }

    pub fn from_manifest(path: &Path, sample_rate: u32) -> Result<Self> {
        let entries = read_manifest(path)?;
        let items = entries
            .par_iter()
            .map(|(s, p)| Ok((*s, read_wav(p, sample_rate)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(items)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub acc: f64,
}

pub const METRICS_HEADER: &str = "step,epoch,lr,loss,acc";

impl StepRecord {
    pub fn csv(&self) -> String {
        format!("{},{},{:.9e},{:.6},{:.6}", self.step, self.epoch, self.lr, self.loss, self.acc)
    }
}

/// Model plus classification head and optimizer state.
pub struct Trainer {
    pub cfg: TrainConfig,
    model: Model<f32>,
    /// AAM class centres, `[K, E]`.
    head: Arc<Tensor<f32>>,
    fbank: Fbank,
    adam: Adam,
    states: Vec<AdamState<f32>>,
    head_state: AdamState<f32>,
    pools: AugmentPools,
    step: u64,
    epoch: u64,
}

impl Trainer {
    pub fn new(model: Model<f32>, n_speakers: usize, cfg: TrainConfig, pools: AugmentPools) -> Result<Self> {
        cfg.validate()?;
        if cfg.features.n_mels != model.config().in_mels {
            return Err(Error::Config(vec![format!(
                "features.n_mels = {} but the model expects {} mels",
                cfg.features.n_mels,
                model.config().in_mels
            )]));
        }
        if n_speakers < 2 {
            return Err(Error::Config(vec!["training needs at least 2 speakers".into()]));
        }
        let e = model.config().embed_dim;
        let mut rng = seeded(derive_seed(cfg.seed, &[7]));
        let head = Tensor::from_f64(&[n_speakers, e], &normal_vec(&mut rng, n_speakers * e, 1.0))?;
        let states = model
            .params()
            .iter()
            .filter(|p| p.trainable())
            .map(|p| AdamState::new(p.value.numel()))
            .collect();
        Ok(Self {
            fbank: Fbank::new(&cfg.features)?,
            adam: Adam::new(AdamConfig {
                weight_decay: cfg.weight_decay,
                ..AdamConfig::default()
            }),
            head_state: AdamState::new(n_speakers * e),
            head: Arc::new(head),
            states,
            model,
            pools,
            cfg,
            step: 0,
            epoch: 0,
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn head(&self) -> &Tensor<f32> {
        &self.head
    }

    /// Updates completed so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Crop, augment and featurize one batch; every item has its own seed.
    fn prepare(&self, data: &SpeakerDataset, idx: &[usize], epoch: u64, first: usize) -> Result<Tensor<f32>> {
        let feats = idx
            .par_iter()
            .enumerate()
            .map(|(j, &i)| {
                let mut rng = seeded(derive_seed(self.cfg.seed, &[10, epoch, (first + j) as u64]));
                let w = crop_segment(&data.items[i].1, self.cfg.crop_seconds, &mut rng)?;
                let w = augment(&w, &self.pools, &self.cfg.augment, &mut rng)?;
                self.fbank.compute(&w)
            })
            .collect::<Result<Vec<_>>>()?;
        let (f, t) = (feats[0].shape()[0], feats[0].shape()[1]);
        let mut buf = Vec::with_capacity(idx.len() * f * t);
        for x in &feats {
            buf.extend_from_slice(x.data());
        }
        Tensor::new(&[idx.len(), f, t], buf)
    }

    /// One optimization step on a prepared batch.
    pub fn train_step(&mut self, feats: Tensor<f32>, labels: &[usize], epoch: u64) -> Result<StepRecord> {
        let step = self.step;
        let lr = lr_at(&self.cfg, step, epoch);
        let non_finite = |e: Error| match e {
            Error::NonFinite(_) => Error::NonFiniteLoss { step, loss: f64::NAN },
            other => other,
        };
        let mut g = Graph::<f32>::new();
        let x = g.constant(feats);
        let out = self.model.forward(&mut g, x, Mode::Train).map_err(non_finite)?;
        let w = g.param(self.head.clone());
        let en = g.l2_normalize(out.embedding).map_err(non_finite)?;
        let wn = g.l2_normalize(w).map_err(non_finite)?;
        let cos = g.linear(en, wn, None)?;
        let loss = g.aam_softmax(cos, labels, self.cfg.margin, self.cfg.scale).map_err(non_finite)?;
        let loss_value = g.value(loss).item() as f64;
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss: loss_value });
        }
        let k = self.head.shape()[0];
        let cd = g.value(cos).data();
        let correct = labels
            .iter()
            .enumerate()
            .filter(|&(r, &l)| {
                let row = &cd[r * k..(r + 1) * k];
                let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                best == l
            })
            .count();
        g.backward(loss).map_err(non_finite)?;
        let grads: Vec<Tensor<f32>> = self
            .model
            .params()
            .iter()
            .zip(&out.param_vars)
            .filter(|(p, _)| p.trainable())
            .map(|(p, v)| match v.and_then(|v| g.take_grad(v)) {
                Some(t) => t,
                None => Tensor::zeros(p.value.shape()),
            })
            .collect();
        let head_grad = g.take_grad(w).unwrap_or_else(|| Tensor::zeros(self.head.shape()));
        drop(g);
        let bn_updates = out.bn_updates;

        let head = Arc::make_mut(&mut self.head);
        let mut params = self.model.trainable_mut();
        let mut items: Vec<(&mut [f32], &[f32], &mut AdamState<f32>)> = params
            .iter_mut()
            .zip(&grads)
            .zip(self.states.iter_mut())
            .map(|(((_, p), gr), s)| (p.data_mut(), gr.data(), s))
            .collect();
        items.push((head.data_mut(), head_grad.data(), &mut self.head_state));
        self.adam.step(lr, &mut items).map_err(non_finite)?;
        drop(items);
        drop(params);
        self.model.apply_bn_updates(&bn_updates);
        self.step += 1;
        Ok(StepRecord {
            step,
            epoch,
            lr,
            loss: loss_value,
            acc: correct as f64 / labels.len() as f64,
        })
    }

    /// One pass over the dataset in a seeded random order. The last batch
    /// may be smaller than `batch_size`.
    pub fn train_epoch(&mut self, data: &SpeakerDataset, on_step: &mut dyn FnMut(&StepRecord) -> Result<()>) -> Result<Vec<StepRecord>> {
        if data.n_speakers != self.head.shape()[0] {
            return Err(Error::invalid(format!(
                "dataset has {} speakers, head has {}",
                data.n_speakers,
                self.head.shape()[0]
            )));
        }
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seeded(derive_seed(self.cfg.seed, &[11, epoch])));
        let mut records = Vec::new();
        for (b, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let feats = self.prepare(data, idx, epoch, b * self.cfg.batch_size)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.items[i].0).collect();
            let rec = self.train_step(feats, &labels, epoch)?;
            on_step(&rec)?;
            records.push(rec);
        }
        self.epoch = epoch;
        Ok(records)
    }

    /// Runs all configured epochs. With `out_dir`, writes `metrics.csv`,
    /// `epoch_NNN.ckpt` after every epoch and `final.ckpt`.
    pub fn run(&mut self, data: &SpeakerDataset, out_dir: Option<&Path>) -> Result<Vec<StepRecord>> {
        let mut log = match out_dir {
            Some(d) => {
                std::fs::create_dir_all(d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
                let p = d.join("metrics.csv");
                let mut w = BufWriter::new(File::create(&p).map_err(|e| Error::io(format!("creating {}", p.display()), e))?);
                writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io("writing metrics", e))?;
                Some(w)
            }
            None => None,
        };
        let mut all = Vec::new();
        while self.epoch < self.cfg.epochs {
            let recs = self.train_epoch(data, &mut |r| {
                if let Some(w) = log.as_mut() {
                    writeln!(w, "{}", r.csv())
                        .and_then(|_| w.flush())
                        .map_err(|e| Error::io("writing metrics", e))?;
                }
                Ok(())
            })?;
            all.extend(recs);
            if let Some(d) = out_dir {
                let p = d.join(format!("epoch_{:03}.ckpt", self.epoch));
                self.model.save(&p, &self.cfg.features, self.step, self.epoch)?;
            }
        }
        if let Some(d) = out_dir {
            self.model.save(&d.join("final.ckpt"), &self.cfg.features, self.step, self.epoch)?;
        }
        Ok(all)
    }
}
