use super::{check_finite, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const NORM_EPS: f64 = 1e-12;

pub(crate) fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[0];
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); n * din];
        // dx[n, din] = g[n, dout] * w[dout, din]
        T::gemm(n, dout, din, T::one(), g.data(), (dout as isize, 1), w.data(), (din as isize, 1), T::zero(), &mut dx, (din as isize, 1));
        Tensor::new(x.shape(), dx).expect("shape")
    });
    let mut dw = vec![T::zero(); dout * din];
    // dw[dout, din] = g^T[dout, n] * x[n, din]
    T::gemm(dout, n, din, T::one(), g.data(), (1, dout as isize), x.data(), (din as isize, 1), T::zero(), &mut dw, (din as isize, 1));
    let mut db = vec![T::zero(); dout];
    for row in g.data().chunks(dout) {
        for (b, v) in db.iter_mut().zip(row) {
            *b += *v;
        }
    }
    (
        dx,
        Tensor::new(w.shape(), dw).expect("shape"),
        Tensor::new(&[dout], db).expect("shape"),
    )
}

pub(crate) fn l2_normalize_backward<T: Real>(x: &Tensor<T>, norms: &[T], g: &Tensor<T>) -> Tensor<T> {
    let d = x.shape()[1];
    let mut dx = vec![T::zero(); x.numel()];
    for (r, &nrm) in norms.iter().enumerate() {
        let xs = &x.data()[r * d..(r + 1) * d];
        let gs = &g.data()[r * d..(r + 1) * d];
        let dot: T = xs.iter().zip(gs).map(|(&a, &b)| a * b).sum();
        let n3 = nrm * nrm * nrm;
        for k in 0..d {
            dx[r * d + k] = gs[k] / nrm - xs[k] * dot / n3;
        }
    }
    Tensor::new(x.shape(), dx).expect("shape")
}

impl<T: Real> Graph<T> {
    /// `x: [N, Din]` times `weight: [Dout, Din]` transposed, plus `bias: [Dout]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(weight));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(format!("linear: input {xs:?} incompatible with weight {ws:?}")));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            if self.shape(b) != [dout] {
                return Err(Error::shape(format!("linear: bias shape {:?}, expected [{dout}]", self.shape(b))));
            }
        }
        let mut y = vec![T::zero(); n * dout];
        if let Some(b) = bias {
            for row in y.chunks_mut(dout) {
                row.copy_from_slice(self.value(b).data());
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            n,
            din,
            dout,
            T::one(),
            self.value(x).data(),
            (din as isize, 1),
            self.value(weight).data(),
            (1, din as isize),
            beta,
            &mut y,
            (dout as isize, 1),
        );
        let y = Tensor::new(&[n, dout], y)?;
        check_finite(&y, "linear")?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(y, Op::Linear { x, w: weight, b: bias }, &inputs))
    }

    /// Scales every row of `x: [N, D]` to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape(format!("l2_normalize expects [N, D], got {s:?}")));
        }
        let d = s[1];
        let eps = T::from_f64(NORM_EPS);
        let xd = self.value(x).data();
        let norms: Vec<T> = xd
            .chunks(d)
            .map(|r| (r.iter().map(|&v| v * v).sum::<T>() + eps).sqrt())
            .collect();
        let out: Vec<T> = xd
            .chunks(d)
            .zip(&norms)
            .flat_map(|(r, &n)| r.iter().map(move |&v| v / n))
            .collect();
        let y = Tensor::new(&s, out)?;
        check_finite(&y, "l2_normalize")?;
        Ok(self.push(y, Op::L2Normalize { x, norms }, &[x]))
    }
}
