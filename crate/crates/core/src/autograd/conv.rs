//! 2D cross-correlation via im2col + GEMM, batch-parallel.

use rayon::prelude::*;

use super::{check_finite, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Output extent of a convolution along one axis, or `None` if non-positive.
pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }

    /// 1x1, stride 1, no padding: the image itself is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Target size (elements) of one column-buffer tile.
const TILE_ELEMS: usize = 1 << 16;

impl Geom {
    /// Output rows per tile so that a `patch x (rows * ow)` tile stays small.
    fn tile_rows(&self) -> usize {
        (TILE_ELEMS / (self.patch() * self.ow).max(1)).clamp(1, self.oh)
    }
}

/// Fills `cols[patch, (oy1 - oy0) * ow]` for output rows `oy0..oy1`.
fn im2col<T: Real>(img: &[T], g: &Geom, oy0: usize, oy1: usize, cols: &mut [T]) {
    let p = (oy1 - oy0) * g.ow;
    for c in 0..g.cin {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                // valid ox range for stride 1: 0 <= ox + kj - pad < w
                let lo = g.pad.saturating_sub(kj).min(g.ow);
                let hi = (g.w + g.pad).saturating_sub(kj).min(g.ow).max(lo);
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[(oy - oy0) * g.ow..(oy - oy0 + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        if hi > lo {
                            let start = lo + kj - g.pad;
                            out_row[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        }
                    } else {
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *o = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a column tile back into the image.
fn col2im<T: Real>(cols: &[T], g: &Geom, oy0: usize, oy1: usize, img: &mut [T]) {
    let p = (oy1 - oy0) * g.ow;
    for c in 0..g.cin {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                let lo = g.pad.saturating_sub(kj).min(g.ow);
                let hi = (g.w + g.pad).saturating_sub(kj).min(g.ow).max(lo);
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let in_row = &src[(oy - oy0) * g.ow..(oy - oy0 + 1) * g.ow];
                    if g.stride == 1 {
                        if hi > lo {
                            let start = lo + kj - g.pad;
                            for (d, &v) in dst[start..start + (hi - lo)].iter_mut().zip(&in_row[lo..hi]) {
                                *d += v;
                            }
                        }
                    } else {
                        for (ox, &v) in in_row.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn geometry<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, padding: usize) -> Result<(usize, usize, Geom)> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::shape(format!(
            "conv2d expects 4-d input and weight, got {xs:?} and {ws:?}"
        )));
    }
    let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if wcin != cin {
        return Err(Error::shape(format!(
            "conv2d: input has {cin} channels, weight expects {wcin}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::shape(format!("conv2d: kernel must be square and odd, got {kh}x{kw}")));
    }
    let oh = conv2d_output_size(h, kh, stride, padding);
    let ow = conv2d_output_size(wd, kw, stride, padding);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(Error::shape(format!(
            "conv2d: non-positive output size for input {h}x{wd}, kernel {kh}, stride {stride}, padding {padding}"
        )));
    };
    Ok((
        n,
        cout,
        Geom {
            cin,
            h,
            w: wd,
            k: kh,
            stride,
            pad: padding,
            oh,
            ow,
        },
    ))
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, cout, g) = geometry(x, w, stride, padding)?;
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(Error::shape(format!(
                "conv2d: bias shape {:?} does not match {cout} output channels",
                b.shape()
            )));
        }
    }
    let in_sz = g.cin * g.h * g.w;
    let p = g.pixels();
    let kk = g.patch();
    let mut out = vec![T::zero(); n * cout * p];
    let wd = w.data();
    out.par_chunks_mut(cout * p)
        .zip(x.data().par_chunks(in_sz))
        .for_each(|(y, img)| {
            if g.is_pointwise() {
                T::gemm(cout, kk, p, T::one(), wd, (kk as isize, 1), img, (p as isize, 1), T::zero(), y, (p as isize, 1));
            } else {
                let rows = g.tile_rows();
                let mut buf = vec![T::zero(); kk * rows * g.ow];
                for oy0 in (0..g.oh).step_by(rows) {
                    let oy1 = (oy0 + rows).min(g.oh);
                    let tp = (oy1 - oy0) * g.ow;
                    im2col(img, &g, oy0, oy1, &mut buf);
                    let ys = &mut y[oy0 * g.ow..];
                    T::gemm(cout, kk, tp, T::one(), wd, (kk as isize, 1), &buf, (tp as isize, 1), T::zero(), ys, (p as isize, 1));
                }
            }
            if let Some(b) = b {
                for (co, row) in y.chunks_mut(p).enumerate() {
                    let bv = b.data()[co];
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    Tensor::new(&[n, cout, g.oh, g.ow], out)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let (n, cout, g) = geometry(x, w, stride, padding).expect("validated in forward");
    let in_sz = g.cin * g.h * g.w;
    let p = g.pixels();
    let kk = g.patch();
    let wd = w.data();

    let mut dx = if need_dx { vec![T::zero(); n * in_sz] } else { Vec::new() };
    let per_sample: Vec<Option<Vec<T>>> = if need_dx {
        dx.par_chunks_mut(in_sz)
            .zip(x.data().par_chunks(in_sz))
            .zip(dy.data().par_chunks(cout * p))
            .map(|((dimg, img), dyn_)| sample_backward(img, dyn_, wd, &g, cout, Some(dimg), need_dw))
            .collect()
    } else {
        x.data()
            .par_chunks(in_sz)
            .zip(dy.data().par_chunks(cout * p))
            .map(|(img, dyn_)| sample_backward(img, dyn_, wd, &g, cout, None, need_dw))
            .collect()
    };

    // Reduce per-sample weight gradients in sample order so results do not
    // depend on the thread schedule.
    let dw = need_dw.then(|| {
        let mut acc = vec![T::zero(); cout * kk];
        for part in per_sample.iter().flatten() {
            for (a, v) in acc.iter_mut().zip(part) {
                *a += *v;
            }
        }
        Tensor::new(w.shape(), acc).expect("weight shape")
    });
    let db = need_db.then(|| {
        let mut acc = vec![T::zero(); cout];
        for s in dy.data().chunks(cout * p) {
            for (co, row) in s.chunks(p).enumerate() {
                acc[co] += row.iter().copied().sum::<T>();
            }
        }
        Tensor::new(&[cout], acc).expect("bias shape")
    });
    ConvGrads {
        dx: need_dx.then(|| Tensor::new(x.shape(), dx).expect("input shape")),
        dw,
        db,
    }
}

/// Output channel count from which the weight gradient goes through GEMM;
/// below it, GEMM packing overhead dominates and plain dot products win.
const DW_GEMM_MIN_COUT: usize = 64;

/// Dot product with eight independent accumulators so it vectorizes.
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    let pairs = [acc[0] + acc[4], acc[1] + acc[5], acc[2] + acc[6], acc[3] + acc[7]];
    (pairs[0] + pairs[2]) + (pairs[1] + pairs[3]) + tail
}

/// `dw[co, r] += dot(dy[co, :len], cols[r, :len])`; `dy` rows are `dy_stride`
/// apart and `cols` rows are `len` apart.
fn accumulate_dw<T: Real>(dy: &[T], dy_stride: usize, cols: &[T], len: usize, cout: usize, kk: usize, dw: &mut [T]) {
    if cout >= DW_GEMM_MIN_COUT {
        let (ds, cs) = (dy_stride as isize, len as isize);
        T::gemm(cout, len, kk, T::one(), dy, (ds, 1), cols, (1, cs), T::one(), dw, (kk as isize, 1));
        return;
    }
    for r in 0..kk {
        let crow = &cols[r * len..(r + 1) * len];
        for co in 0..cout {
            dw[co * kk + r] += dot(&dy[co * dy_stride..co * dy_stride + len], crow);
        }
    }
}

fn sample_backward<T: Real>(
    img: &[T],
    dy: &[T],
    wd: &[T],
    g: &Geom,
    cout: usize,
    mut dimg: Option<&mut [T]>,
    need_dw: bool,
) -> Option<Vec<T>> {
    let p = g.pixels();
    let kk = g.patch();
    let mut dw = need_dw.then(|| vec![T::zero(); cout * kk]);
    if g.is_pointwise() {
        if let Some(dw) = dw.as_mut() {
            accumulate_dw(dy, p, img, p, cout, kk, dw);
        }
        if let Some(dimg) = dimg {
            T::gemm(kk, cout, p, T::one(), wd, (1, kk as isize), dy, (p as isize, 1), T::zero(), dimg, (p as isize, 1));
        }
        return dw;
    }
    let rows = g.tile_rows();
    let mut cols = vec![T::zero(); kk * rows * g.ow];
    for oy0 in (0..g.oh).step_by(rows) {
        let oy1 = (oy0 + rows).min(g.oh);
        let tp = (oy1 - oy0) * g.ow;
        let dys = &dy[oy0 * g.ow..];
        if let Some(dw) = dw.as_mut() {
            im2col(img, g, oy0, oy1, &mut cols);
            accumulate_dw(dys, p, &cols, tp, cout, kk, dw);
        }
        if let Some(dimg) = dimg.as_deref_mut() {
            T::gemm(kk, cout, tp, T::one(), wd, (1, kk as isize), dys, (p as isize, 1), T::zero(), &mut cols, (tp as isize, 1));
            col2im(&cols, g, oy0, oy1, dimg);
        }
    }
    dw
}

/// Direct nested-loop cross-correlation, used as an oracle in tests.
pub fn conv2d_reference<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, cout, g) = geometry(x, w, stride, padding)?;
    let mut out = Tensor::zeros(&[n, cout, g.oh, g.ow]);
    let od = out.data_mut();
    let mut idx = 0;
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[co].as_f64());
                    for ci in 0..g.cin {
                        for ki in 0..g.k {
                            for kj in 0..g.k {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += x.at(&[ni, ci, iy as usize, ix as usize]).as_f64()
                                    * w.at(&[co, ci, ki, kj]).as_f64();
                            }
                        }
                    }
                    od[idx] = T::from_f64(acc);
                    idx += 1;
                }
            }
        }
    }
    Ok(out)
}

impl<T: Real> Graph<T> {
    /// Cross-correlation of `x: [N, Cin, H, W]` with `weight: [Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let y = conv2d_forward(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        check_finite(&y, "conv2d")?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(
            y,
            Op::Conv2d {
                x,
                w: weight,
                b: bias,
                stride,
                padding,
            },
            &inputs,
        ))
    }
}
