//! Fused additive-angular-margin softmax cross-entropy on cosine logits.

use super::{check_finite, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `cos(theta + m)` for a target cosine, with the usual fallback
/// `cos(theta) - m sin(m)` once `theta + m` would pass `pi`.
/// Returns the value and its derivative with respect to `cos(theta)`.
pub fn margin_cosine(c: f64, m: f64) -> (f64, f64) {
    let threshold = (std::f64::consts::PI - m).cos();
    if c > threshold {
        let sin = (1.0 - c * c).max(0.0).sqrt();
        let value = c * m.cos() - sin * m.sin();
        let slope = m.cos() + if sin > 1e-7 { c * m.sin() / sin } else { 0.0 };
        (value, slope)
    } else {
        (c - m * m.sin(), 1.0)
    }
}

pub(crate) fn aam_backward<T: Real>(
    shape: &[usize],
    labels: &[usize],
    scale: T,
    probs: &[T],
    target_slope: &[T],
    upstream: T,
) -> Tensor<T> {
    let (n, k) = (shape[0], shape[1]);
    let coef = upstream * scale / T::from_f64(n as f64);
    let mut d = vec![T::zero(); n * k];
    for r in 0..n {
        for j in 0..k {
            let p = probs[r * k + j];
            d[r * k + j] = if j == labels[r] {
                coef * (p - T::one()) * target_slope[r]
            } else {
                coef * p
            };
        }
    }
    Tensor::new(shape, d).expect("shape")
}

impl<T: Real> Graph<T> {
    /// Mean AAM-softmax cross-entropy. `cos: [N, K]` holds cosines between
    /// normalized embeddings and class centres; the target logit becomes
    /// `scale * cos(theta + margin)`, all others `scale * cos(theta)`.
    pub fn aam_softmax(&mut self, cos: Var, labels: &[usize], margin: f64, scale: f64) -> Result<Var> {
        let s = self.shape(cos).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(format!(
                "aam_softmax: cosines {s:?} do not match {} labels",
                labels.len()
            )));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let cd = self.value(cos).data();
        let mut probs = vec![T::zero(); n * k];
        let mut slopes = vec![T::zero(); n];
        let mut total = 0.0f64;
        for r in 0..n {
            let row = &cd[r * k..(r + 1) * k];
            let (phi, slope) = margin_cosine(row[labels[r]].as_f64(), margin);
            slopes[r] = T::from_f64(slope);
            let logits: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(j, &c)| scale * if j == labels[r] { phi } else { c.as_f64() })
                .collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|&l| (l - mx).exp()).sum();
            for (j, &l) in logits.iter().enumerate() {
                probs[r * k + j] = T::from_f64((l - mx).exp() / z);
            }
            total += mx + z.ln() - logits[labels[r]];
        }
        let loss = Tensor::scalar(T::from_f64(total / n as f64));
        check_finite(&loss, "aam_softmax")?;
        Ok(self.push(
            loss,
            Op::AamSoftmax {
                cos,
                labels: labels.to_vec(),
                scale: T::from_f64(scale),
                probs,
                target_slope: slopes,
            },
            &[cos],
        ))
    }
}
