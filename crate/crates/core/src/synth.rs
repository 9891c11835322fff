//! Synthetic speaker corpus: per-speaker harmonic source shaped by a cascade
//! of formant resonators, plus noise and impulse-response pools for
//! augmentation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frontend::{write_wav, Waveform};
use crate::rng::{derive_seed, normal, seeded, Rng};
use crate::scoring::{write_trials, Trial};

const BASE_FORMANTS: [f64; 4] = [550.0, 1500.0, 2500.0, 3400.0];
const BASE_BANDWIDTHS: [f64; 4] = [70.0, 100.0, 140.0, 180.0];
/// Vowel targets as multipliers on (F1, F2), shared by all speakers.
const VOWELS: [(f64, f64); 6] = [(1.0, 1.0), (0.55, 1.45), (1.35, 0.8), (0.65, 0.65), (1.2, 1.2), (0.8, 1.25)];

#[derive(Clone, Debug)]
pub struct SpeakerProfile {
    pub f0: f64,
    pub formants: [f64; 4],
    pub bandwidths: [f64; 4],
    /// One-pole low-pass coefficient applied to the glottal pulse train.
    pub tilt: f64,
    pub breathiness: f64,
}

impl SpeakerProfile {
    pub fn random(rng: &mut Rng) -> Self {
        let mut formants = [0.0; 4];
        let mut bandwidths = [0.0; 4];
        for i in 0..4 {
            formants[i] = BASE_FORMANTS[i] * rng.gen_range(0.8..1.22);
            bandwidths[i] = BASE_BANDWIDTHS[i] * rng.gen_range(0.7..1.4);
        }
        Self {
            f0: rng.gen_range(85.0..250.0),
            formants,
            bandwidths,
            tilt: rng.gen_range(0.6..0.95),
            breathiness: rng.gen_range(0.005..0.05),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    /// Utterances per speaker kept out of training for trials.
    pub held_out: usize,
    /// Extra speakers, disjoint from the training set, used as the AS-norm cohort.
    pub cohort_speakers: usize,
    pub cohort_utts: usize,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub target_trials: usize,
    pub nontarget_trials: usize,
    pub noise_clips: usize,
    pub impulse_responses: usize,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_speakers: 20,
            utts_per_speaker: 50,
            held_out: 10,
            cohort_speakers: 10,
            cohort_utts: 4,
            min_seconds: 3.0,
            max_seconds: 6.0,
            target_trials: 200,
            nontarget_trials: 200,
            noise_clips: 8,
            impulse_responses: 8,
            sample_rate: 16_000,
            seed: 2024,
        }
    }
}

impl CorpusConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.n_speakers < 2 {
            p.push("n_speakers must be at least 2".into());
        }
        if self.held_out < 2 || self.held_out >= self.utts_per_speaker {
            p.push("held_out must be at least 2 and below utts_per_speaker".into());
        }
        if !(self.min_seconds >= 0.5 && self.max_seconds >= self.min_seconds) {
            p.push("durations need 0.5 <= min_seconds <= max_seconds".into());
        }
        let pairs = self.held_out * self.held_out.saturating_sub(1) / 2;
        if self.target_trials > self.n_speakers * pairs {
            p.push(format!("at most {} target trials are available", self.n_speakers * pairs));
        }
        if self.sample_rate < 8_000 {
            p.push("sample_rate must be at least 8000".into());
        }
        p
    }
}

/// Two-pole resonator with unit gain at DC.
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bw: f64, sr: f64) -> Self {
        let mut r = Self { a1: 0.0, a2: 0.0, gain: 1.0, y1: 0.0, y2: 0.0 };
        r.retune(freq, bw, sr);
        r
    }

    fn retune(&mut self, freq: f64, bw: f64, sr: f64) {
        let radius = (-std::f64::consts::PI * bw / sr).exp();
        let theta = 2.0 * std::f64::consts::PI * freq.min(0.45 * sr) / sr;
        self.a1 = 2.0 * radius * theta.cos();
        self.a2 = -radius * radius;
        self.gain = 1.0 - self.a1 - self.a2;
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// One utterance: a sequence of voiced syllables with varying vowel and
/// pitch, separated by short pauses.
pub fn synth_utterance(p: &SpeakerProfile, seconds: f64, sample_rate: u32, rng: &mut Rng) -> Waveform {
    let sr = sample_rate as f64;
    let n = (seconds * sr).round() as usize;
    let mut out = vec![0.0f64; n];
    let mut res: Vec<Resonator> = (0..4).map(|i| Resonator::new(p.formants[i], p.bandwidths[i], sr)).collect();
    let mut pos = (rng.gen_range(0.0..0.1) * sr) as usize;
    let mut lp = 0.0;
    let mut phase = 0.0;
    while pos < n {
        let len = ((rng.gen_range(0.15..0.4) * sr) as usize).min(n - pos);
        let (v1, v2) = VOWELS[rng.gen_range(0..VOWELS.len())];
        let mut fmt = p.formants;
        fmt[0] *= v1;
        fmt[1] *= v2;
        for f in fmt.iter_mut() {
            *f *= 1.0 + 0.03 * normal(rng);
        }
        for (i, r) in res.iter_mut().enumerate() {
            r.retune(fmt[i], p.bandwidths[i], sr);
        }
        let f_start = p.f0 * (1.0 + 0.08 * normal(rng));
        let f_end = f_start * (1.0 + 0.1 * normal(rng));
        let amp = rng.gen_range(0.6..1.0);
        for j in 0..len {
            let t = j as f64 / len as f64;
            let f0 = f_start + (f_end - f_start) * t;
            phase += f0 / sr;
            let pulse = if phase >= 1.0 {
                phase -= 1.0;
                1.0 + 0.02 * normal(rng)
            } else {
                0.0
            };
            lp = p.tilt * lp + (1.0 - p.tilt) * pulse;
            let mut x = lp + p.breathiness * 0.05 * normal(rng);
            for r in res.iter_mut() {
                x = r.step(x);
            }
            let env = (std::f64::consts::PI * t).sin().powf(0.5);
            out[pos + j] = amp * env * x;
        }
        pos += len + (rng.gen_range(0.02..0.15) * sr) as usize;
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt().max(1e-12);
    let gain = 0.1 * rng.gen_range(0.5..1.5) / rms;
    let floor = 0.1 * 10f64.powf(-30.0 / 20.0);
    let samples = out
        .into_iter()
        .map(|v| (v * gain + floor * normal(rng)).clamp(-1.0, 1.0) as f32)
        .collect();
    Waveform { samples, sample_rate }
}

#[derive(Clone, Debug)]
pub struct Utterance {
    pub speaker: usize,
    pub index: usize,
    pub wave: Waveform,
}

fn utterance(cfg: &CorpusConfig, profiles: &[SpeakerProfile], speaker: usize, index: usize) -> Utterance {
    let mut rng = seeded(derive_seed(cfg.seed, &[1, speaker as u64, index as u64]));
    let secs = rng.gen_range(cfg.min_seconds..=cfg.max_seconds);
    Utterance {
        speaker,
        index,
        wave: synth_utterance(&profiles[speaker], secs, cfg.sample_rate, &mut rng),
    }
}

pub fn speaker_profiles(cfg: &CorpusConfig, count: usize) -> Vec<SpeakerProfile> {
    (0..count)
        .map(|s| SpeakerProfile::random(&mut seeded(derive_seed(cfg.seed, &[0, s as u64]))))
        .collect()
}

/// All utterances of the main speakers, in (speaker, index) order.
pub fn generate(cfg: &CorpusConfig) -> Result<Vec<Utterance>> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let profiles = speaker_profiles(cfg, cfg.n_speakers + cfg.cohort_speakers);
    Ok((0..cfg.n_speakers * cfg.utts_per_speaker)
        .into_par_iter()
        .map(|i| utterance(cfg, &profiles, i / cfg.utts_per_speaker, i % cfg.utts_per_speaker))
        .collect())
}

/// Utterances of the cohort speakers, which never appear in training.
pub fn generate_cohort(cfg: &CorpusConfig) -> Vec<Utterance> {
    let profiles = speaker_profiles(cfg, cfg.n_speakers + cfg.cohort_speakers);
    (0..cfg.cohort_speakers * cfg.cohort_utts)
        .into_par_iter()
        .map(|i| utterance(cfg, &profiles, cfg.n_speakers + i / cfg.cohort_utts, i % cfg.cohort_utts))
        .collect()
}

/// Background clips cycling through white, pink-ish, brown-ish and babble.
pub fn noise_pool(count: usize, seconds: f64, sample_rate: u32, seed: u64) -> Vec<Waveform> {
    let n = (seconds * sample_rate as f64).round() as usize;
    (0..count)
        .map(|c| {
            let mut rng = seeded(derive_seed(seed, &[2, c as u64]));
            let samples: Vec<f64> = match c % 4 {
                0 => (0..n).map(|_| normal(&mut rng)).collect(),
                1 | 2 => {
                    let a = if c % 4 == 1 { 0.9 } else { 0.995 };
                    let mut s = 0.0;
                    (0..n)
                        .map(|_| {
                            s = a * s + normal(&mut rng);
                            s
                        })
                        .collect()
                }
                _ => {
                    let mut acc = vec![0.0f64; n];
                    for _ in 0..4 {
                        let p = SpeakerProfile::random(&mut rng);
                        let w = synth_utterance(&p, seconds, sample_rate, &mut rng);
                        for (a, &v) in acc.iter_mut().zip(&w.samples) {
                            *a += v as f64;
                        }
                    }
                    acc
                }
            };
            let rms = (samples.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt().max(1e-12);
            Waveform {
                samples: samples.iter().map(|v| (0.1 * v / rms) as f32).collect(),
                sample_rate,
            }
        })
        .collect()
}

/// Exponentially decaying noise tails behind a unit direct path.
pub fn impulse_responses(count: usize, sample_rate: u32, seed: u64) -> Vec<Waveform> {
    let sr = sample_rate as f64;
    (0..count)
        .map(|c| {
            let mut rng = seeded(derive_seed(seed, &[3, c as u64]));
            let rt60 = rng.gen_range(0.15..0.6);
            let n = (0.5 * sr) as usize;
            let delay = (rng.gen_range(0.002..0.01) * sr) as usize;
            let mut h = vec![0.0f32; n];
            h[0] = 1.0;
            for (i, v) in h.iter_mut().enumerate().skip(delay) {
                let t = i as f64 / sr;
                *v = (0.3 * normal(&mut rng) * (-6.9 * t / rt60).exp()) as f32;
            }
            Waveform { samples: h, sample_rate }
        })
        .collect()
}

/// Target pairs drawn within each speaker's held-out set, nontarget pairs
/// across speakers; utterances are referred to by the given names.
pub fn make_trials(held_out: &[Vec<String>], n_target: usize, n_nontarget: usize, seed: u64) -> Vec<Trial> {
    let mut rng = seeded(derive_seed(seed, &[4]));
    let mut trials = Vec::with_capacity(n_target + n_nontarget);
    let ns = held_out.len();
    let mut pairs: Vec<Vec<(usize, usize)>> = held_out
        .iter()
        .map(|u| {
            let mut v: Vec<(usize, usize)> =
                (0..u.len()).flat_map(|a| (a + 1..u.len()).map(move |b| (a, b))).collect();
            for i in (1..v.len()).rev() {
                v.swap(i, rng.gen_range(0..=i));
            }
            v
        })
        .collect();
    for t in 0..n_target {
        let s = t % ns;
        if let Some((a, b)) = pairs[s].pop() {
            trials.push(Trial { target: true, enroll: held_out[s][a].clone(), test: held_out[s][b].clone() });
        }
    }
    for _ in 0..n_nontarget {
        let s1 = rng.gen_range(0..ns);
        let s2 = (s1 + rng.gen_range(1..ns)) % ns;
        let a = rng.gen_range(0..held_out[s1].len());
        let b = rng.gen_range(0..held_out[s2].len());
        trials.push(Trial { target: false, enroll: held_out[s1][a].clone(), test: held_out[s2][b].clone() });
    }
    trials
}

/// Files of a corpus written to disk.
#[derive(Clone, Debug)]
pub struct CorpusFiles {
    pub root: PathBuf,
    /// `speaker_id<TAB>path` lines of the training utterances.
    pub train_manifest: PathBuf,
    pub trials: PathBuf,
    /// One path per line: held-out utterances referenced by the trials.
    pub eval_list: PathBuf,
    pub cohort_list: PathBuf,
    pub noise_list: PathBuf,
    pub rir_list: PathBuf,
}

fn write_list(path: &Path, lines: &[String]) -> Result<()> {
    let mut s = String::new();
    for l in lines {
        let _ = writeln!(s, "{l}");
    }
    std::fs::write(path, s).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_all(dir: &Path, sub: &str, items: &[(String, &Waveform)]) -> Result<Vec<String>> {
    let d = dir.join(sub);
    std::fs::create_dir_all(&d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    items
        .iter()
        .map(|(name, w)| {
            let p = d.join(name);
            write_wav(&p, w)?;
            Ok(p.display().to_string())
        })
        .collect()
}

/// Generates the corpus, pools and trial list under `dir`.
pub fn write_corpus(dir: &Path, cfg: &CorpusConfig) -> Result<CorpusFiles> {
    let utts = generate(cfg)?;
    let named: Vec<(String, &Waveform)> = utts
        .iter()
        .map(|u| (format!("spk{:03}_utt{:03}.wav", u.speaker, u.index), &u.wave))
        .collect();
    let paths = write_all(dir, "wav", &named)?;
    let train_cut = cfg.utts_per_speaker - cfg.held_out;
    let mut manifest = Vec::new();
    let mut held: Vec<Vec<String>> = vec![Vec::new(); cfg.n_speakers];
    for (u, p) in utts.iter().zip(&paths) {
        if u.index < train_cut {
            manifest.push(format!("{}\t{p}", u.speaker));
        } else {
            held[u.speaker].push(p.clone());
        }
    }
    let cohort = generate_cohort(cfg);
    let cohort_named: Vec<(String, &Waveform)> = cohort
        .iter()
        .map(|u| (format!("spk{:03}_utt{:03}.wav", u.speaker, u.index), &u.wave))
        .collect();
    let cohort_paths = write_all(dir, "cohort", &cohort_named)?;
    let noise = noise_pool(cfg.noise_clips, 3.0, cfg.sample_rate, cfg.seed);
    let noise_named: Vec<(String, &Waveform)> =
        noise.iter().enumerate().map(|(i, w)| (format!("noise{i:02}.wav"), w)).collect();
    let noise_paths = write_all(dir, "noise", &noise_named)?;
    let rirs = impulse_responses(cfg.impulse_responses, cfg.sample_rate, cfg.seed);
    let rir_named: Vec<(String, &Waveform)> =
        rirs.iter().enumerate().map(|(i, w)| (format!("rir{i:02}.wav"), w)).collect();
    let rir_paths = write_all(dir, "rir", &rir_named)?;

    let files = CorpusFiles {
        root: dir.to_path_buf(),
        train_manifest: dir.join("train.tsv"),
        trials: dir.join("trials.txt"),
        eval_list: dir.join("eval.lst"),
        cohort_list: dir.join("cohort.lst"),
        noise_list: dir.join("noise.lst"),
        rir_list: dir.join("rir.lst"),
    };
    write_list(&files.train_manifest, &manifest)?;
    write_list(&files.eval_list, &held.concat())?;
    write_list(&files.cohort_list, &cohort_paths)?;
    write_list(&files.noise_list, &noise_paths)?;
    write_list(&files.rir_list, &rir_paths)?;
    write_trials(&files.trials, &make_trials(&held, cfg.target_trials, cfg.nontarget_trials, cfg.seed))?;
    Ok(files)
}
