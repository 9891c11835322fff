//! Trial scoring: fixed-length segmentation, averaged cosine scoring,
//! adaptive s-norm, and EER / minDCF.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::checkpoint::TensorFile;
use crate::error::{Error, Result};
use crate::frontend::Waveform;

/// Segment length and hop for embedding extraction, in seconds.
pub const SEGMENT_SECONDS: f64 = 4.0;
pub const SEGMENT_HOP_SECONDS: f64 = 3.0;
/// Shortest uncovered tail that still gets its own segment.
pub const MIN_TAIL_SECONDS: f64 = 1.0;

/// Detection cost parameters.
pub const P_TARGET: f64 = 0.01;
pub const C_MISS: f64 = 1.0;
pub const C_FA: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub target: bool,
    pub enroll: String,
    pub test: String,
}

/// Repeats `samples` cyclically to exactly `len` samples.
pub fn wrap_to(samples: &[f32], len: usize) -> Vec<f32> {
    samples.iter().copied().cycle().take(len).collect()
}

/// Start offsets (samples) of the segments of an utterance of `len` samples,
/// and whether the last one is a wrap-padded tail.
pub fn segment_starts(len: usize, sample_rate: u32) -> Vec<usize> {
    let sr = sample_rate as f64;
    let seg = (SEGMENT_SECONDS * sr).round() as usize;
    let hop = (SEGMENT_HOP_SECONDS * sr).round() as usize;
    let min_tail = (MIN_TAIL_SECONDS * sr).round() as usize;
    if len <= seg {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..).map(|i| i * hop).take_while(|s| s + seg <= len).collect();
    let last = *starts.last().expect("len > seg");
    if len - (last + seg) >= min_tail {
        starts.push(last + hop);
    }
    starts
}

/// Splits into 4 s segments with 1 s overlap. A tail of at least 1 s past
/// the last full segment, or an utterance shorter than 4 s, is wrap-padded.
pub fn segment_utterance(w: &Waveform) -> Result<Vec<Waveform>> {
    if w.is_empty() {
        return Err(Error::invalid("cannot segment an empty waveform"));
    }
    let seg = (SEGMENT_SECONDS * w.sample_rate as f64).round() as usize;
    Ok(segment_starts(w.len(), w.sample_rate)
        .into_iter()
        .map(|s| {
            let end = (s + seg).min(w.len());
            Waveform {
                samples: wrap_to(&w.samples[s..end], seg),
                sample_rate: w.sample_rate,
            }
        })
        .collect())
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("cosine of {}- and {}-dim vectors", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine of a zero-norm vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean cosine over every (enroll, test) embedding pair.
pub fn trial_score(enroll: &[Vec<f32>], test: &[Vec<f32>]) -> Result<f64> {
    if enroll.is_empty() || test.is_empty() {
        return Err(Error::invalid("trial_score needs at least one embedding per side"));
    }
    let mut total = 0.0;
    for e in enroll {
        for t in test {
            total += cosine(e, t)?;
        }
    }
    Ok(total / (enroll.len() * test.len()) as f64)
}

/// Mean and population standard deviation of the `k` highest scores. Ties
/// keep input order.
pub fn top_k_stats(scores: &[f64], k: usize) -> Result<(f64, f64)> {
    if k == 0 || k > scores.len() {
        return Err(Error::invalid(format!(
            "top-k of {} cohort scores with k = {k}",
            scores.len()
        )));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top = &sorted[..k];
    let mean = top.iter().sum::<f64>() / k as f64;
    let var = top.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
    Ok((mean, var.sqrt()))
}

/// Adaptive s-norm: symmetric z-normalization against the top-k cohort
/// scores of each side.
pub fn as_norm(raw: f64, enroll_cohort: &[f64], test_cohort: &[f64], top_k: usize) -> Result<f64> {
    let (me, se) = top_k_stats(enroll_cohort, top_k)?;
    let (mt, st) = top_k_stats(test_cohort, top_k)?;
    if se == 0.0 || st == 0.0 {
        return Err(Error::invalid("degenerate cohort: zero standard deviation among top-k scores"));
    }
    Ok(0.5 * ((raw - me) / se + (raw - mt) / st))
}

/// Operating points `(threshold, P_miss, P_fa)` for thresholds at every
/// distinct score plus `+inf`, ascending. A trial is accepted when its
/// score is `>= threshold`.
pub fn det_curve(scores: &[(f64, bool)]) -> Result<Vec<(f64, f64, f64)>> {
    let nt = scores.iter().filter(|s| s.1).count();
    let nn = scores.len() - nt;
    if nt == 0 || nn == 0 {
        return Err(Error::invalid("score set needs both target and nontarget trials"));
    }
    if scores.iter().any(|s| !s.0.is_finite()) {
        return Err(Error::invalid("score set contains non-finite scores"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = Vec::new();
    // Running counts of trials strictly below the current threshold.
    let (mut tb, mut nb) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let th = sorted[i].0;
        out.push((th, tb as f64 / nt as f64, (nn - nb) as f64 / nn as f64));
        while i < sorted.len() && sorted[i].0 == th {
            if sorted[i].1 {
                tb += 1;
            } else {
                nb += 1;
            }
            i += 1;
        }
    }
    out.push((f64::INFINITY, 1.0, 0.0));
    Ok(out)
}

/// Equal error rate by linear interpolation between the two operating
/// points around the crossing of P_miss and P_fa.
pub fn eer(scores: &[(f64, bool)]) -> Result<f64> {
    let det = det_curve(scores)?;
    let i = det.iter().position(|p| p.1 - p.2 >= 0.0).expect("last point has P_miss = 1");
    let (a, b) = (det[i - 1], det[i]);
    let (da, db) = (a.1 - a.2, b.1 - b.2);
    let t = -da / (db - da);
    Ok(a.1 + t * (b.1 - a.1))
}

/// Minimum normalized detection cost over all thresholds, including
/// accept-all and reject-all.
pub fn min_dcf(scores: &[(f64, bool)], p_target: f64, c_miss: f64, c_fa: f64) -> Result<f64> {
    if !(0.0 < p_target && p_target < 1.0) || c_miss <= 0.0 || c_fa <= 0.0 {
        return Err(Error::invalid("min_dcf needs 0 < p_target < 1 and positive costs"));
    }
    let det = det_curve(scores)?;
    let norm = (c_miss * p_target).min(c_fa * (1.0 - p_target));
    Ok(det
        .iter()
        .map(|&(_, pm, pf)| c_miss * p_target * pm + c_fa * (1.0 - p_target) * pf)
        .fold(f64::INFINITY, f64::min)
        / norm)
}

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    let mut problems = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            [l @ ("0" | "1"), e, t] => out.push(Trial {
                target: *l == "1",
                enroll: e.to_string(),
                test: t.to_string(),
            }),
            _ => problems.push(format!(
                "{}:{}: expected `label enroll test` with label 0 or 1",
                path.display(),
                n + 1
            )),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if out.is_empty() {
        return Err(Error::invalid(format!("{}: no trials", path.display())));
    }
    Ok(out)
}

pub fn write_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    let mut s = String::new();
    for t in trials {
        let _ = writeln!(s, "{} {} {}", u8::from(t.target), t.enroll, t.test);
    }
    std::fs::write(path, s).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreLine {
    pub enroll: String,
    pub test: String,
    pub raw: f64,
    /// AS-normalized score; equals `raw` when normalization is off.
    pub norm: f64,
}

pub fn write_scores(path: &Path, lines: &[ScoreLine]) -> Result<()> {
    let mut s = String::new();
    for l in lines {
        let _ = writeln!(s, "{} {} {:.9} {:.9}", l.enroll, l.test, l.raw, l.norm);
    }
    std::fs::write(path, s).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreLine>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let f: Vec<&str> = l.split_whitespace().collect();
            let bad = || Error::invalid(format!("{}:{}: malformed score line", path.display(), n + 1));
            match f.as_slice() {
                [e, t, r, s] => Ok(ScoreLine {
                    enroll: e.to_string(),
                    test: t.to_string(),
                    raw: r.parse().map_err(|_| bad())?,
                    norm: s.parse().map_err(|_| bad())?,
                }),
                _ => Err(bad()),
            }
        })
        .collect()
}

/// Segment embeddings and their mean for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceEmbedding {
    pub segments: Vec<Vec<f32>>,
    pub mean: Vec<f32>,
}

impl UtteranceEmbedding {
    pub fn from_segments(segments: Vec<Vec<f32>>) -> Result<Self> {
        let first = segments.first().ok_or_else(|| Error::invalid("utterance without segments"))?;
        let e = first.len();
        if segments.iter().any(|s| s.len() != e) {
            return Err(Error::shape("segment embeddings differ in dimension"));
        }
        let mut mean = vec![0.0f64; e];
        for s in &segments {
            for (m, &v) in mean.iter_mut().zip(s) {
                *m += v as f64;
            }
        }
        let n = segments.len() as f64;
        Ok(Self {
            mean: mean.into_iter().map(|m| (m / n) as f32).collect(),
            segments,
        })
    }
}

/// Utterance embeddings keyed by path, stored in the named-tensor container
/// as `<path>` (`[segments, E]`) and `<path>#mean` (`[E]`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingStore {
    pub items: BTreeMap<String, UtteranceEmbedding>,
}

const STORE_META: &str = "kind = \"embeddings\"\n";
const MEAN_SUFFIX: &str = "#mean";

impl EmbeddingStore {
    pub fn get(&self, key: &str) -> Option<&UtteranceEmbedding> {
        self.items.get(key)
    }

    pub fn insert(&mut self, key: impl Into<String>, emb: UtteranceEmbedding) {
        self.items.insert(key.into(), emb);
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let mut f = TensorFile::new(STORE_META);
        for (k, u) in &self.items {
            let e = u.mean.len();
            let data: Vec<f32> = u.segments.iter().flatten().copied().collect();
            f.push(k.clone(), &[u.segments.len(), e], data)?;
            f.push(format!("{k}{MEAN_SUFFIX}"), &[e], u.mean.clone())?;
        }
        Ok(f)
    }

    pub fn from_tensor_file(f: &TensorFile) -> Result<Self> {
        if f.metadata != STORE_META {
            return Err(Error::invalid("file is not an embedding store"));
        }
        let mut items = BTreeMap::new();
        for e in f.entries.iter().filter(|e| !e.name.ends_with(MEAN_SUFFIX)) {
            let [n, d] = e.shape[..] else {
                return Err(Error::CorruptCheckpoint(format!("embedding `{}` is not 2-d", e.name)));
            };
            let mean = f
                .get(&format!("{}{MEAN_SUFFIX}", e.name))
                .ok_or_else(|| Error::MissingTensor(format!("{}{MEAN_SUFFIX}", e.name)))?;
            items.insert(
                e.name.clone(),
                UtteranceEmbedding {
                    segments: e.data.chunks(d).take(n).map(<[f32]>::to_vec).collect(),
                    mean: mean.data.clone(),
                },
            );
        }
        Ok(Self { items })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::load(path)?)
    }
}

/// Cohort used for AS-norm: per-utterance mean embeddings.
pub struct Cohort<'a> {
    pub embeddings: &'a [Vec<f32>],
    pub top_k: usize,
}

/// Scores every trial; with a cohort, the normalized column holds AS-norm
/// scores, otherwise it repeats the raw score.
pub fn score_trials(trials: &[Trial], store: &EmbeddingStore, cohort: Option<&Cohort<'_>>) -> Result<Vec<ScoreLine>> {
    let mut missing: Vec<String> = trials
        .iter()
        .flat_map(|t| [&t.enroll, &t.test])
        .filter(|k| store.get(k).is_none())
        .cloned()
        .collect();
    missing.sort();
    missing.dedup();
    if !missing.is_empty() {
        return Err(Error::Config(
            missing.into_iter().map(|m| format!("no embedding for utterance {m}")).collect(),
        ));
    }
    if let Some(c) = cohort {
        if c.top_k == 0 || c.top_k > c.embeddings.len() {
            return Err(Error::invalid(format!(
                "top_k = {} but the cohort has {} utterances",
                c.top_k,
                c.embeddings.len()
            )));
        }
    }
    let mut cohort_cache: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut out = Vec::with_capacity(trials.len());
    for t in trials {
        let (e, s) = (store.get(&t.enroll).unwrap(), store.get(&t.test).unwrap());
        let raw = trial_score(&e.segments, &s.segments)?;
        let norm = match cohort {
            None => raw,
            Some(c) => {
                let side = |key: &str, u: &UtteranceEmbedding| -> Result<Vec<f64>> {
                    if let Some(v) = cohort_cache.get(key) {
                        return Ok(v.clone());
                    }
                    let v = c
                        .embeddings
                        .iter()
                        .map(|ce| trial_score(&u.segments, std::slice::from_ref(ce)))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(v)
                };
                let ec = side(&t.enroll, e)?;
                let tc = side(&t.test, s)?;
                let n = as_norm(raw, &ec, &tc, c.top_k)?;
                cohort_cache.entry(t.enroll.as_str()).or_insert(ec);
                cohort_cache.entry(t.test.as_str()).or_insert(tc);
                n
            }
        };
        out.push(ScoreLine {
            enroll: t.enroll.clone(),
            test: t.test.clone(),
            raw,
            norm,
        });
    }
    Ok(out)
}

/// Pairs score lines with trial labels by (enroll, test).
pub fn label_scores(trials: &[Trial], lines: &[ScoreLine], normalized: bool) -> Result<Vec<(f64, bool)>> {
    let index: BTreeMap<(&str, &str), &ScoreLine> =
        lines.iter().map(|l| ((l.enroll.as_str(), l.test.as_str()), l)).collect();
    trials
        .iter()
        .map(|t| {
            let l = index
                .get(&(t.enroll.as_str(), t.test.as_str()))
                .ok_or_else(|| Error::invalid(format!("no score for trial {} {}", t.enroll, t.test)))?;
            Ok((if normalized { l.norm } else { l.raw }, t.target))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn secs(s: f64) -> Waveform {
        let n = (s * 16_000.0).round() as usize;
        Waveform::new((0..n).map(|i| i as f32).collect(), 16_000).unwrap()
    }

    #[test]
    fn segmentation_examples() {
        let starts = |s: f64| segment_starts((s * 16_000.0) as usize, 16_000);
        assert_eq!(starts(10.0), vec![0, 48_000, 96_000]);
        assert_eq!(starts(4.0), vec![0]);
        assert_eq!(starts(11.5), vec![0, 48_000, 96_000, 144_000]);
        assert_eq!(starts(10.9), vec![0, 48_000, 96_000]);
        assert_eq!(starts(2.0), vec![0]);
        let segs = segment_utterance(&secs(11.5)).unwrap();
        assert_eq!(segs.len(), 4);
        assert!(segs.iter().all(|s| s.len() == 64_000));
        // tail is 2.5 s of content then wraps to its own start
        let tail = &segs[3].samples;
        assert_eq!(tail[0], 144_000.0);
        assert_eq!(tail[40_000], 144_000.0);
        let short = segment_utterance(&secs(1.0)).unwrap();
        assert_eq!(short[0].samples[16_000], 0.0);
        assert!(segment_utterance(&Waveform { samples: vec![], sample_rate: 16_000 }).is_err());
    }

    #[test]
    fn cosine_examples() {
        let a = vec![1.0, 2.0, -0.5];
        let neg: Vec<f32> = a.iter().map(|v| -v).collect();
        assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!(cosine(&a, &[0.0; 3]).is_err());
    }

    #[test]
    fn trial_score_examples() {
        let a = vec![0.3, -1.0, 2.0];
        let b = vec![1.0, 1.0, 0.5];
        assert_eq!(trial_score(&[a.clone()], &[b.clone()]).unwrap(), cosine(&a, &b).unwrap());
        assert!((trial_score(&[a.clone(), a.clone()], &[a.clone()]).unwrap() - 1.0).abs() < 1e-12);
        assert!(trial_score(&[], &[a]).is_err());
    }

    #[test]
    fn as_norm_top_k_example() {
        let (m, s) = top_k_stats(&[0.9, 0.5, 0.1, 0.7, 0.3], 3).unwrap();
        assert!((m - 0.7).abs() < 1e-12);
        assert!((s - (8.0f64 / 300.0).sqrt()).abs() < 1e-12);
        assert!(as_norm(0.5, &[1.0, 1.0], &[0.0, 1.0], 2).is_err());
        assert!(top_k_stats(&[1.0], 2).is_err());
    }

    #[test]
    fn as_norm_identity_cohort() {
        // top-3 of {1, 0, -1, -5} has mean 0 and population std sqrt(2/3)
        let c = [1.0, 0.0, -1.0, -5.0];
        let s = (2.0f64 / 3.0).sqrt();
        let raw = 0.4;
        assert!((as_norm(raw, &c, &c, 3).unwrap() - raw / s).abs() < 1e-12);
    }

    #[test]
    fn metric_extremes() {
        let sep: Vec<(f64, bool)> = (0..10).map(|i| (i as f64, i >= 5)).collect();
        assert_eq!(eer(&sep).unwrap(), 0.0);
        assert_eq!(min_dcf(&sep, P_TARGET, C_MISS, C_FA).unwrap(), 0.0);
        let same: Vec<(f64, bool)> = (0..10).map(|i| (0.3, i % 2 == 0)).collect();
        assert!((eer(&same).unwrap() - 0.5).abs() < 1e-12);
        assert!((min_dcf(&same, P_TARGET, C_MISS, C_FA).unwrap() - 1.0).abs() < 1e-12);
        assert!(eer(&[(0.1, true)]).is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let trials = vec![
            Trial { target: true, enroll: "a.wav".into(), test: "b.wav".into() },
            Trial { target: false, enroll: "a.wav".into(), test: "c.wav".into() },
        ];
        let tp = dir.path().join("trials.txt");
        write_trials(&tp, &trials).unwrap();
        assert_eq!(read_trials(&tp).unwrap(), trials);
        std::fs::write(&tp, "1 a b\n2 a c\nx\n").unwrap();
        match read_trials(&tp) {
            Err(Error::Config(p)) => assert_eq!(p.len(), 2),
            other => panic!("{other:?}"),
        }

        let mut store = EmbeddingStore::default();
        store.insert("a.wav", UtteranceEmbedding::from_segments(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        store.insert("b.wav", UtteranceEmbedding::from_segments(vec![vec![1.0, 1.0]]).unwrap());
        assert_eq!(store.get("a.wav").unwrap().mean, vec![0.5, 0.5]);
        let sp = dir.path().join("emb.bin");
        store.save(&sp).unwrap();
        assert_eq!(EmbeddingStore::load(&sp).unwrap(), store);

        let lines = score_trials(&trials[..1], &store, None).unwrap();
        assert!((lines[0].raw - 2f64.sqrt() / 2.0).abs() < 1e-7);
        match score_trials(&trials, &store, None) {
            Err(Error::Config(p)) => assert!(p[0].contains("c.wav")),
            other => panic!("{other:?}"),
        }
        let scp = dir.path().join("scores.txt");
        write_scores(&scp, &lines).unwrap();
        let back = read_scores(&scp).unwrap();
        assert!((back[0].raw - lines[0].raw).abs() < 1e-9);
    }
}
