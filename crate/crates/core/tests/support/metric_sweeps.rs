//! Exhaustive threshold-sweep oracles for the detection metrics, shared by
//! the oracle tests and the acceptance suite.

#![allow(dead_code)]

use c2datt::rng::{self, Rng};
use c2datt::scoring::{as_norm, eer, min_dcf, C_FA, C_MISS, P_TARGET};
use rand::Rng as _;

/// Agreement between the library and the sweep oracles.
pub const METRIC_TOL: f64 = 1e-9;
/// Agreement for algebraic invariances computed in floating point.
pub const INVARIANCE_TOL: f64 = 1e-9;

/// Miss and false-alarm rates when accepting scores `>= th`, by direct
/// counting.
pub fn rates(scores: &[(f64, bool)], th: f64) -> (f64, f64) {
    let nt = scores.iter().filter(|s| s.1).count() as f64;
    let nn = scores.len() as f64 - nt;
    let miss = scores.iter().filter(|s| s.1 && s.0 < th).count() as f64;
    let fa = scores.iter().filter(|s| !s.1 && s.0 >= th).count() as f64;
    (miss / nt, fa / nn)
}

/// Every distinct score plus `+inf`, ascending.
pub fn candidates(scores: &[(f64, bool)]) -> Vec<f64> {
    let mut c: Vec<f64> = scores.iter().map(|s| s.0).collect();
    c.push(f64::INFINITY);
    c.sort_by(f64::total_cmp);
    c.dedup();
    c
}

pub fn eer_oracle(scores: &[(f64, bool)]) -> f64 {
    let pts: Vec<(f64, f64)> = candidates(scores).into_iter().map(|t| rates(scores, t)).collect();
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (da, db) = (a.0 - a.1, b.0 - b.1);
        if da < 0.0 && db >= 0.0 {
            let t = -da / (db - da);
            return a.0 + t * (b.0 - a.0);
        }
    }
    unreachable!("miss rate rises from 0 to 1 while false alarms fall from 1 to 0")
}

pub fn dcf_oracle(scores: &[(f64, bool)]) -> f64 {
    let norm = (C_MISS * P_TARGET).min(C_FA * (1.0 - P_TARGET));
    candidates(scores)
        .into_iter()
        .map(|t| {
            let (pm, pf) = rates(scores, t);
            (C_MISS * P_TARGET * pm + C_FA * (1.0 - P_TARGET) * pf) / norm
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn random_scores(r: &mut Rng) -> Vec<(f64, bool)> {
    let n = r.gen_range(2..80);
    let quantize = r.gen_bool(0.3);
    let shift = r.gen_range(0.0..2.0);
    let mut s: Vec<(f64, bool)> = (0..n)
        .map(|_| {
            let target = r.gen_bool(0.5);
            let mut v = rng::normal(r) + if target { shift } else { 0.0 };
            if quantize {
                v = (v * 4.0).round() / 4.0;
            }
            (v, target)
        })
        .collect();
    s[0].1 = true;
    s[1].1 = false;
    s
}

/// Largest EER and minDCF deviations from the oracles over `sets` random
/// score sets.
pub fn sweep_worst(seed: u64, sets: usize) -> (f64, f64) {
    let mut r = rng::seeded(seed);
    let (mut we, mut wd) = (0.0f64, 0.0f64);
    for _ in 0..sets {
        let s = random_scores(&mut r);
        we = we.max((eer(&s).unwrap() - eer_oracle(&s)).abs());
        wd = wd.max((min_dcf(&s, P_TARGET, C_MISS, C_FA).unwrap() - dcf_oracle(&s)).abs());
    }
    (we, wd)
}

/// Relative change of AS-norm under `a * x + b` applied to the raw score and
/// both cohorts, for one random configuration.
pub fn as_norm_affine_change(r: &mut Rng) -> Option<f64> {
    let k = r.gen_range(2..6);
    let cohort = |r: &mut Rng| -> Vec<f64> { (0..r.gen_range(k..40)).map(|_| r.gen_range(-1.0..1.0)).collect() };
    let (ec, tc) = (cohort(r), cohort(r));
    let raw: f64 = r.gen_range(-1.0..1.0);
    let (a, b): (f64, f64) = (r.gen_range(0.1..10.0), r.gen_range(-5.0..5.0));
    let base = as_norm(raw, &ec, &tc, k).ok()?;
    let f = |v: &f64| a * v + b;
    let moved = as_norm(f(&raw), &ec.iter().map(f).collect::<Vec<_>>(), &tc.iter().map(f).collect::<Vec<_>>(), k).ok()?;
    Some((moved - base).abs() / (1.0 + base.abs()))
}
