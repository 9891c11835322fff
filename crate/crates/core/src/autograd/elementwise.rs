//! Element-wise ops, broadcasting multiply and softmax.

use super::{check_finite, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{strides_of, Real, Tensor};

pub(crate) fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    // split by sign so exp never overflows
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn relu_backward<T: Real>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    zip_map(g, x, |g, x| if x > T::zero() { g } else { T::zero() })
}

pub(crate) fn sigmoid_backward<T: Real>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    zip_map(g, y, |g, y| g * y * (T::one() - y))
}

pub(crate) fn tanh_backward<T: Real>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    zip_map(g, y, |g, y| g * (T::one() - y * y))
}

/// (outer, axis extent, inner) decomposition for an axis.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_forward<T: Real>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = T::neg_infinity();
            for k in 0..len {
                m = m.max(d[base + k * inner]);
            }
            let mut s = T::zero();
            for k in 0..len {
                let e = (d[base + k * inner] - m).exp();
                d[base + k * inner] = e;
                s += e;
            }
            for k in 0..len {
                d[base + k * inner] = d[base + k * inner] / s;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Real>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = split_axis(y.shape(), axis);
    let mut dx = Tensor::zeros(y.shape());
    let (yd, gd) = (y.data(), g.data());
    let dd = dx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let dot: T = (0..len).map(|k| yd[base + k * inner] * gd[base + k * inner]).sum();
            for k in 0..len {
                let j = base + k * inner;
                dd[j] = yd[j] * (gd[j] - dot);
            }
        }
    }
    dx
}

/// Strides of `w` as seen from `x`'s index space (0 on broadcast axes).
fn broadcast_strides(x: &[usize], w: &[usize]) -> Result<Vec<usize>> {
    if x.len() != w.len() || x.iter().zip(w).any(|(&a, &b)| b != a && b != 1) {
        return Err(Error::shape(format!("cannot broadcast {w:?} onto {x:?}")));
    }
    let ws = strides_of(w);
    Ok(x.iter()
        .zip(w)
        .zip(ws)
        .map(|((&a, &b), s)| if b == 1 && a != 1 { 0 } else { s })
        .collect())
}

/// Visits every index of `shape`, passing the flat index and the matching
/// flat offset under `strides`.
pub(crate) fn for_each_offset(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    for_each_run(shape, strides, |i0, j0, len, s| {
        for k in 0..len {
            f(i0 + k, j0 + k * s);
        }
    });
}

/// Visits `shape` one innermost row at a time, passing
/// `(flat start, offset start, row length, offset stride)`.
pub(crate) fn for_each_run(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize, usize, usize)) {
    let nd = shape.len();
    let n: usize = shape.iter().product();
    if nd == 0 {
        f(0, 0, 1, 0);
        return;
    }
    let last = shape[nd - 1];
    let last_stride = strides[nd - 1];
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    let mut flat = 0usize;
    while flat < n {
        f(flat, off, last, last_stride);
        flat += last;
        // carry into the leading axes
        let mut ax = nd - 1;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

fn broadcast_mul_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let bs = broadcast_strides(x.shape(), w.shape())?;
    let mut out = vec![T::zero(); x.numel()];
    let (xd, wd) = (x.data(), w.data());
    for_each_run(x.shape(), &bs, |i0, j0, len, s| {
        let (o, xr) = (&mut out[i0..i0 + len], &xd[i0..i0 + len]);
        match s {
            0 => {
                let wv = wd[j0];
                o.iter_mut().zip(xr).for_each(|(o, &x)| *o = x * wv);
            }
            1 => o.iter_mut().zip(xr).zip(&wd[j0..j0 + len]).for_each(|((o, &x), &w)| *o = x * w),
            _ => o.iter_mut().zip(xr).enumerate().for_each(|(k, (o, &x))| *o = x * wd[j0 + k * s]),
        }
    });
    Tensor::new(x.shape(), out)
}

pub(crate) fn broadcast_mul_backward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let bs = broadcast_strides(x.shape(), w.shape()).expect("validated in forward");
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); w.numel()];
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    for_each_run(x.shape(), &bs, |i0, j0, len, s| {
        let (dxr, xr, gr) = (&mut dx[i0..i0 + len], &xd[i0..i0 + len], &gd[i0..i0 + len]);
        if s == 0 {
            let wv = wd[j0];
            dxr.iter_mut().zip(gr).for_each(|(d, &g)| *d = g * wv);
            dw[j0] += super::conv::dot(gr, xr);
        } else {
            for k in 0..len {
                dxr[k] = gr[k] * wd[j0 + k * s];
                dw[j0 + k * s] += gr[k] * xr[k];
            }
        }
    });
    (
        Tensor::new(x.shape(), dx).expect("shape"),
        Tensor::new(w.shape(), dw).expect("shape"),
    )
}

impl<T: Real> Graph<T> {
    fn unary(&mut self, x: Var, name: &'static str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let y = self.value(x).map(f);
        check_finite(&y, name)?;
        Ok(self.push(y, op, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "relu", |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "sigmoid", sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "tanh", |v| v.tanh(), Op::Tanh(x))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        self.unary(x, "scale", |v| v * factor, Op::Scale { x, factor })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        if axis >= self.value(x).ndim() {
            return Err(Error::shape(format!("softmax axis {axis} out of range")));
        }
        let y = softmax_forward(self.value(x), axis);
        check_finite(&y, "softmax")?;
        Ok(self.push(y, Op::Softmax { x, axis }, &[x]))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{name}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let y = zip_map(self.value(a), self.value(b), f);
        check_finite(&y, name)?;
        Ok(self.push(y, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x * w` where `w` has the same rank as `x` and extent 1 on the
    /// broadcast axes.
    pub fn broadcast_mul(&mut self, x: Var, w: Var) -> Result<Var> {
        let y = broadcast_mul_forward(self.value(x), self.value(w))?;
        check_finite(&y, "broadcast_mul")?;
        Ok(self.push(y, Op::BroadcastMul { x, w }, &[x, w]))
    }
}
