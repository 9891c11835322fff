//! Batch normalization over `[N, C, H, W]` and per-frequency instance
//! normalization over `[N, F, T]`.

use super::{check_finite, BnMode, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const IN_EPS: f64 = 1e-5;

/// Per-channel batch statistics from a train-mode forward, used to update
/// running estimates. `var` is the unbiased estimate.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Normalized value per element, recomputed from the saved statistics.
fn xhat_at<T: Real>(x: T, mean: T, inv_std: T) -> T {
    (x - mean) * inv_std
}

pub(crate) fn batch_norm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    g: &Tensor<T>,
    train: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let m = T::from_f64((n * hw) as f64);
    let (xd, gd) = (x.data(), g.data());
    let mut dx = vec![T::zero(); x.numel()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ci in 0..c {
        let (mu, is) = (mean[ci], inv_std[ci]);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for k in base..base + hw {
                sum_g += gd[k];
                sum_gx += gd[k] * xhat_at(xd[k], mu, is);
            }
        }
        dgamma[ci] = sum_gx;
        dbeta[ci] = sum_g;
        let gam = gamma.data()[ci];
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for k in base..base + hw {
                dx[k] = if train {
                    gam * is / m * (m * gd[k] - sum_g - xhat_at(xd[k], mu, is) * sum_gx)
                } else {
                    gam * is * gd[k]
                };
            }
        }
    }
    (
        Tensor::new(s, dx).expect("shape"),
        Tensor::new(&[c], dgamma).expect("shape"),
        Tensor::new(&[c], dbeta).expect("shape"),
    )
}

pub(crate) fn instance_norm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let (n, f, t) = (s[0], s[1], s[2]);
    let m = T::from_f64(t as f64);
    let (xd, gd) = (x.data(), g.data());
    let mut dx = vec![T::zero(); x.numel()];
    let mut dgamma = vec![T::zero(); f];
    let mut dbeta = vec![T::zero(); f];
    for ni in 0..n {
        for fi in 0..f {
            let row = ni * f + fi;
            let (mu, is) = (mean[row], inv_std[row]);
            let r = row * t..(row + 1) * t;
            let sum_g: T = gd[r.clone()].iter().copied().sum();
            let sum_gx: T = r.clone().map(|k| gd[k] * xhat_at(xd[k], mu, is)).sum();
            dgamma[fi] += sum_gx;
            dbeta[fi] += sum_g;
            let gam = gamma.data()[fi];
            for k in r {
                dx[k] = gam * is / m * (m * gd[k] - sum_g - xhat_at(xd[k], mu, is) * sum_gx);
            }
        }
    }
    (
        Tensor::new(s, dx).expect("shape"),
        Tensor::new(&[f], dgamma).expect("shape"),
        Tensor::new(&[f], dbeta).expect("shape"),
    )
}

impl<T: Real> Graph<T> {
    /// 2D batch normalization. In train mode the batch statistics are
    /// returned so the caller can update its running estimates.
    pub fn batch_norm_2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("batch_norm_2d expects [N, C, H, W], got {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(format!(
                    "batch_norm_2d: {name} shape {:?} does not match {c} channels",
                    self.shape(v)
                )));
            }
        }
        let count = n * hw;
        let eps = T::from_f64(BN_EPS);
        let xd = self.value(x).data();
        let (mean, inv_std, stats) = match mode {
            BnMode::Train => {
                if count < 2 {
                    return Err(Error::shape(format!(
                        "batch_norm_2d in train mode needs N*H*W >= 2, got {count}"
                    )));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let cnt = T::from_f64(count as f64);
                for ci in 0..c {
                    let mut sum = T::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        sum += xd[base..base + hw].iter().copied().sum::<T>();
                    }
                    let mu = sum / cnt;
                    let mut sq = T::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        sq += xd[base..base + hw].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                    }
                    mean[ci] = mu;
                    var[ci] = sq / cnt;
                }
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let unbiased = T::from_f64(count as f64 / (count - 1) as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.iter().map(|&v| v * unbiased).collect(),
                };
                (mean, inv_std, Some(stats))
            }
            BnMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::shape("batch_norm_2d: running statistics do not match channels"));
                }
                let inv_std = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (running_mean.to_vec(), inv_std, None)
            }
        };
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let (mu, is, ga, be) = (mean[ci], inv_std[ci], gd[ci], bd[ci]);
                for k in base..base + hw {
                    out[k] = (xd[k] - mu) * is * ga + be;
                }
            }
        }
        let y = Tensor::new(&s, out)?;
        check_finite(&y, "batch_norm_2d")?;
        let train = stats.is_some();
        let v = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    /// Normalizes every `(sample, frequency)` row of `x: [N, F, T]` over time,
    /// then applies a per-frequency affine transform.
    pub fn instance_norm_freq(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape(format!("instance_norm_freq expects [N, F, T], got {s:?}")));
        }
        let (n, f, t) = (s[0], s[1], s[2]);
        if t < 2 {
            return Err(Error::shape(format!("instance_norm_freq needs T >= 2, got {t}")));
        }
        if self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return Err(Error::shape("instance_norm_freq: affine parameters must be [F]"));
        }
        let eps = T::from_f64(IN_EPS);
        let cnt = T::from_f64(t as f64);
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = vec![T::zero(); n * f];
        let mut inv_std = vec![T::zero(); n * f];
        let mut out = vec![T::zero(); xd.len()];
        for row in 0..n * f {
            let r = &xd[row * t..(row + 1) * t];
            let mu = r.iter().copied().sum::<T>() / cnt;
            let var = r.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / cnt;
            let is = T::one() / (var + eps).sqrt();
            mean[row] = mu;
            inv_std[row] = is;
            let fi = row % f;
            for (o, &v) in out[row * t..(row + 1) * t].iter_mut().zip(r) {
                *o = (v - mu) * is * gd[fi] + bd[fi];
            }
        }
        let y = Tensor::new(&s, out)?;
        check_finite(&y, "instance_norm_freq")?;
        Ok(self.push(
            y,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn randn(shape: &[usize], seed: u64, scale: f64, shift: f64) -> Tensor<f64> {
        let mut r = rng::seeded(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = rng::normal_vec(&mut r, n, scale).into_iter().map(|v| v + shift).collect();
        Tensor::from_f64(shape, &v).unwrap()
    }

    fn channel_moments(t: &Tensor<f64>, c: usize) -> (f64, f64) {
        let s = t.shape();
        let hw = s[2] * s[3];
        let vals: Vec<f64> = (0..s[0])
            .flat_map(|n| t.data()[(n * s[1] + c) * hw..(n * s[1] + c + 1) * hw].to_vec())
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        (m, v)
    }

    #[test]
    fn train_mode_standardizes_channels() {
        let mut g = Graph::new();
        let x = g.constant(randn(&[4, 3, 5, 5], 1, 3.0, 2.0));
        let gamma = g.constant(Tensor::ones(&[3]));
        let beta = g.constant(Tensor::zeros(&[3]));
        let (y, stats) = g.batch_norm_2d(x, gamma, beta, BnMode::Train).unwrap();
        let stats = stats.unwrap();
        for c in 0..3 {
            let (m, v) = channel_moments(g.value(y), c);
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-5, "var {v}");
            let (xm, xv) = channel_moments(g.value(x), c);
            assert!((stats.mean[c] - xm).abs() < 1e-12);
            assert!((stats.var[c] - xv * 100.0 / 99.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::full(&[2, 1, 3, 3], 4.2));
        let gamma = g.constant(Tensor::ones(&[1]));
        let beta = g.constant(Tensor::full(&[1], 5.0));
        let (y, _) = g.batch_norm_2d(x, gamma, beta, BnMode::Train).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 5.0).abs() < 1e-9));
    }

    #[test]
    fn eval_with_unit_stats_is_identity() {
        let mut g = Graph::new();
        let xv = randn(&[2, 2, 3, 3], 4, 1.0, 0.0);
        let x = g.constant(xv.clone());
        let gamma = g.constant(Tensor::ones(&[2]));
        let beta = g.constant(Tensor::zeros(&[2]));
        let (y, stats) = g
            .batch_norm_2d(
                x,
                gamma,
                beta,
                BnMode::Eval {
                    running_mean: &[0.0, 0.0],
                    running_var: &[1.0, 1.0],
                },
            )
            .unwrap();
        assert!(stats.is_none());
        assert!(g.value(y).max_abs_diff(&xv) < 1e-5);
    }

    #[test]
    fn train_mode_rejects_single_element() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[1, 2, 1, 1]));
        let gamma = g.constant(Tensor::ones(&[2]));
        let beta = g.constant(Tensor::zeros(&[2]));
        assert!(g.batch_norm_2d(x, gamma, beta, BnMode::Train).is_err());
    }

    #[test]
    fn instance_norm_rows() {
        let mut g = Graph::new();
        let xv = randn(&[2, 4, 9], 7, 2.0, -1.0);
        let x = g.constant(xv.clone());
        let gamma = g.constant(Tensor::ones(&[4]));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.instance_norm_freq(x, gamma, beta).unwrap();
        for row in g.value(y).data().chunks(9) {
            let m = row.iter().sum::<f64>() / 9.0;
            let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 9.0;
            assert!(m.abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-5);
        }
        // shift invariance
        let shifted = g.constant(xv.map(|v| v + 10.0));
        let y2 = g.instance_norm_freq(shifted, gamma, beta).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(y2)) < 1e-9);
    }

    #[test]
    fn instance_norm_constant_rows_give_beta() {
        let mut g = Graph::new();
        let mut v = Vec::new();
        for f in 0..3 {
            v.extend(std::iter::repeat(f as f64 * 2.0 - 1.0).take(5));
        }
        let x = g.constant(Tensor::<f64>::from_f64(&[1, 3, 5], &v).unwrap());
        let gamma = g.constant(Tensor::ones(&[3]));
        let beta = g.constant(Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap());
        let y = g.instance_norm_freq(x, gamma, beta).unwrap();
        let out = g.value(y);
        for f in 0..3 {
            for t in 0..5 {
                assert!((out.at(&[0, f, t]) - [0.5, -1.0, 2.0][f]).abs() < 1e-12);
            }
        }
        let short = g.constant(Tensor::ones(&[1, 3, 1]));
        assert!(g.instance_norm_freq(short, gamma, beta).is_err());
    }
}
