//! Reductions, layout ops and attention-weighted statistics.

use super::elementwise::{for_each_offset, for_each_run};
use super::{check_finite, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{strides_of, Real, Tensor};

/// Added under the square root of every standard deviation.
pub const STD_EPS: f64 = 1e-8;

struct Reduction {
    out_shape: Vec<usize>,
    /// Output offsets as seen from the input index space.
    strides: Vec<usize>,
    count: usize,
}

fn reduction(shape: &[usize], axes: &[usize]) -> Result<Reduction> {
    if axes.is_empty() {
        return Err(Error::shape("reduction over an empty axis list"));
    }
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != axes.len() || *sorted.last().unwrap() >= shape.len() {
        return Err(Error::shape(format!("invalid reduction axes {axes:?} for shape {shape:?}")));
    }
    let kept: Vec<usize> = (0..shape.len())
        .filter(|a| !sorted.contains(a))
        .map(|a| shape[a])
        .collect();
    let kept_strides = strides_of(&kept);
    let mut strides = vec![0; shape.len()];
    let mut k = 0;
    for (a, s) in strides.iter_mut().enumerate() {
        if !sorted.contains(&a) {
            *s = kept_strides[k];
            k += 1;
        }
    }
    let out_shape = if kept.is_empty() { vec![1] } else { kept };
    Ok(Reduction {
        out_shape,
        strides,
        count: sorted.iter().map(|&a| shape[a]).product(),
    })
}

fn mean_forward<T: Real>(x: &Tensor<T>, r: &Reduction) -> Vec<T> {
    let mut acc = vec![T::zero(); r.out_shape.iter().product()];
    let xd = x.data();
    for_each_run(x.shape(), &r.strides, |i0, j0, len, s| {
        let xr = &xd[i0..i0 + len];
        if s == 0 {
            acc[j0] += xr.iter().copied().sum::<T>();
        } else {
            xr.iter().enumerate().for_each(|(k, &v)| acc[j0 + k * s] += v);
        }
    });
    let inv = T::one() / T::from_f64(r.count as f64);
    acc.iter_mut().for_each(|v| *v *= inv);
    acc
}

pub(crate) fn mean_backward<T: Real>(x: &Tensor<T>, axes: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let r = reduction(x.shape(), axes).expect("validated in forward");
    let inv = T::one() / T::from_f64(r.count as f64);
    let mut dx = vec![T::zero(); x.numel()];
    let gd = g.data();
    for_each_offset(x.shape(), &r.strides, |i, j| dx[i] = gd[j] * inv);
    Tensor::new(x.shape(), dx).expect("shape")
}

pub(crate) fn std_backward<T: Real>(x: &Tensor<T>, axes: &[usize], mean: &[T], std: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let r = reduction(x.shape(), axes).expect("validated in forward");
    let cnt = T::from_f64(r.count as f64);
    let mut dx = vec![T::zero(); x.numel()];
    let (xd, gd, sd) = (x.data(), g.data(), std.data());
    for_each_run(x.shape(), &r.strides, |i0, j0, len, s| {
        if s == 0 {
            let (m, c) = (mean[j0], gd[j0] / (cnt * sd[j0]));
            for (d, &v) in dx[i0..i0 + len].iter_mut().zip(&xd[i0..i0 + len]) {
                *d = c * (v - m);
            }
        } else {
            for k in 0..len {
                let j = j0 + k * s;
                dx[i0 + k] = gd[j] * (xd[i0 + k] - mean[j]) / (cnt * sd[j]);
            }
        }
    });
    Tensor::new(x.shape(), dx).expect("shape")
}

pub(crate) fn permute<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_strides = x.strides();
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![T::zero(); x.numel()];
    let xd = x.data();
    for_each_offset(&out_shape, &gather, |i, j| out[i] = xd[j]);
    Tensor::new(&out_shape, out).expect("shape")
}

fn attentive_moments_forward<T: Real>(h: &Tensor<T>, a: &Tensor<T>) -> Tensor<T> {
    let s = h.shape();
    let (n, d, t) = (s[0], s[1], s[2]);
    let eps = T::from_f64(STD_EPS);
    let mut out = vec![T::zero(); n * 2 * d];
    for ni in 0..n {
        for di in 0..d {
            let base = (ni * d + di) * t;
            let hs = &h.data()[base..base + t];
            let al = &a.data()[base..base + t];
            let mu: T = hs.iter().zip(al).map(|(&h, &a)| a * h).sum();
            let m2: T = hs.iter().zip(al).map(|(&h, &a)| a * h * h).sum();
            out[ni * 2 * d + di] = mu;
            out[ni * 2 * d + d + di] = ((m2 - mu * mu).max(T::zero()) + eps).sqrt();
        }
    }
    Tensor::new(&[n, 2 * d], out).expect("shape")
}

pub(crate) fn attentive_moments_backward<T: Real>(
    h: &Tensor<T>,
    a: &Tensor<T>,
    out: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let s = h.shape();
    let (n, d, t) = (s[0], s[1], s[2]);
    let mut dh = vec![T::zero(); h.numel()];
    let mut da = vec![T::zero(); a.numel()];
    let two = T::from_f64(2.0);
    for ni in 0..n {
        for di in 0..d {
            let mu = out.data()[ni * 2 * d + di];
            let sigma = out.data()[ni * 2 * d + d + di];
            let gmu = g.data()[ni * 2 * d + di];
            let gsig = g.data()[ni * 2 * d + d + di];
            let base = (ni * d + di) * t;
            for k in base..base + t {
                let (hv, av) = (h.data()[k], a.data()[k]);
                // sigma = sqrt(sum a h^2 - mu^2 + eps)
                dh[k] = gmu * av + gsig * av * (hv - mu) / sigma;
                da[k] = gmu * hv + gsig * (hv * hv - two * mu * hv) / (two * sigma);
            }
        }
    }
    (
        Tensor::new(h.shape(), dh).expect("shape"),
        Tensor::new(a.shape(), da).expect("shape"),
    )
}

impl<T: Real> Graph<T> {
    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean over `axes`; reduced axes are removed from the output shape.
    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let r = reduction(self.shape(x), axes)?;
        let y = Tensor::new(&r.out_shape, mean_forward(self.value(x), &r))?;
        Ok(self.push(y, Op::Mean { x, axes: axes.to_vec() }, &[x]))
    }

    /// Population standard deviation over `axes`, `sqrt(var + STD_EPS)`.
    pub fn std(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let r = reduction(self.shape(x), axes)?;
        let xv = self.value(x);
        let mean = mean_forward(xv, &r);
        let mut var = vec![T::zero(); mean.len()];
        let xd = xv.data();
        for_each_run(xv.shape(), &r.strides, |i0, j0, len, s| {
            let xr = &xd[i0..i0 + len];
            if s == 0 {
                let m = mean[j0];
                var[j0] += xr.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
            } else {
                for (k, &v) in xr.iter().enumerate() {
                    let d = v - mean[j0 + k * s];
                    var[j0 + k * s] += d * d;
                }
            }
        });
        let inv = T::one() / T::from_f64(r.count as f64);
        let eps = T::from_f64(STD_EPS);
        let std: Vec<T> = var.iter().map(|&v| (v * inv + eps).sqrt()).collect();
        let y = Tensor::new(&r.out_shape, std)?;
        check_finite(&y, "std")?;
        Ok(self.push(
            y,
            Op::Std {
                x,
                axes: axes.to_vec(),
                mean,
            },
            &[x],
        ))
    }

    /// Mean and standard deviation over `axes`.
    pub fn moments(&mut self, x: Var, axes: &[usize]) -> Result<(Var, Var)> {
        Ok((self.mean(x, axes)?, self.std(x, axes)?))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let nd = self.value(x).ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("invalid permutation {perm:?} for rank {nd}")));
        }
        let y = permute(self.value(x), perm);
        Ok(self.push(y, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    /// Attention-weighted mean and standard deviation over the last axis.
    /// `h` and `alpha` are `[N, D, T]` with `alpha` summing to one over `T`;
    /// the result is `[N, 2D]` laid out as `(mu, sigma)`.
    pub fn attentive_moments(&mut self, h: Var, alpha: Var) -> Result<Var> {
        let (hs, as_) = (self.shape(h), self.shape(alpha));
        if hs.len() != 3 || hs != as_ {
            return Err(Error::shape(format!(
                "attentive_moments expects matching [N, D, T] inputs, got {hs:?} and {as_:?}"
            )));
        }
        let y = attentive_moments_forward(self.value(h), self.value(alpha));
        check_finite(&y, "attentive_moments")?;
        Ok(self.push(y, Op::AttentiveMoments { h, alpha }, &[h, alpha]))
    }
}
