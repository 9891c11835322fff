//! Central finite-difference gradient checking in 64-bit precision.

use rand::seq::index::sample;

use super::{Graph, Var};
use crate::error::Result;
use crate::rng;
use crate::tensor::Tensor;

/// Magnitude below which gradients are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub seed: u64,
    /// Coordinates probed per input; `None` probes all of them.
    pub max_coords: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// (input index, flat coordinate) of the worst mismatch.
    pub worst: Option<(usize, usize)>,
}

impl GradCheck {
    pub fn new(seed: u64) -> Self {
        Self {
            step: 1e-4,
            seed,
            max_coords: None,
        }
    }

    pub fn max_coords(mut self, n: usize) -> Self {
        self.max_coords = Some(n);
        self
    }

    /// Unit-normal inputs of the given shapes.
    pub fn random_inputs(&self, shapes: &[&[usize]]) -> Vec<Tensor<f64>> {
        let mut r = rng::seeded(rng::derive_seed(self.seed, &[0xC0FFEE]));
        shapes
            .iter()
            .map(|s| {
                let n = s.iter().product();
                Tensor::new(s, rng::normal_vec(&mut r, n, 1.0)).expect("shape")
            })
            .collect()
    }

    /// Compares the analytic gradient of `sum(build(inputs) * R)`, `R` a fixed
    /// random projection, against central differences for every input.
    pub fn run<F>(&self, inputs: &[Tensor<f64>], build: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let mut projection: Option<Tensor<f64>> = None;
        let mut eval = |inputs: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
            let out = build(&mut g, &vars)?;
            let proj = projection.get_or_insert_with(|| {
                let mut r = rng::seeded(rng::derive_seed(self.seed, &[0x9A0]));
                let s = g.shape(out).to_vec();
                let n = s.iter().product();
                Tensor::new(&s, rng::normal_vec(&mut r, n, 1.0)).expect("shape")
            });
            let p = g.constant(proj.clone());
            let prod = g.mul(out, p)?;
            let loss = g.sum(prod);
            let value = g.value(loss).item();
            if !grads {
                return Ok((value, Vec::new()));
            }
            g.backward(loss)?;
            let gs = vars
                .iter()
                .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
                .collect();
            Ok((value, gs))
        };

        let (_, analytic) = eval(inputs, true)?;
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        let mut pick = rng::seeded(rng::derive_seed(self.seed, &[0x51C]));
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            coords_checked: 0,
            worst: None,
        };
        for i in 0..inputs.len() {
            let n = inputs[i].numel();
            let coords: Vec<usize> = match self.max_coords {
                Some(m) if m < n => sample(&mut pick, n, m).into_vec(),
                _ => (0..n).collect(),
            };
            for c in coords {
                let orig = work[i].data()[c];
                work[i].data_mut()[c] = orig + self.step;
                let (plus, _) = eval(&work, false)?;
                work[i].data_mut()[c] = orig - self.step;
                let (minus, _) = eval(&work, false)?;
                work[i].data_mut()[c] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                let a = analytic[i].data()[c];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
                report.coords_checked += 1;
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = Some((i, c));
                }
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::BnMode;

    #[test]
    fn tanh_all_coords() {
        let gc = GradCheck::new(1);
        let inputs = gc.random_inputs(&[&[3, 4]]);
        let rep = gc.run(&inputs, |g, v| g.tanh(v[0])).unwrap();
        assert!(rep.max_rel_error < 1e-7, "{rep:?}");
        assert_eq!(rep.coords_checked, 12);
    }

    #[test]
    fn sigmoid_scalar() {
        let gc = GradCheck::new(2);
        let inputs = gc.random_inputs(&[&[1]]);
        let rep = gc.run(&inputs, |g, v| g.sigmoid(v[0])).unwrap();
        assert!(rep.max_rel_error < 1e-6);
    }

    #[test]
    fn conv_small() {
        let gc = GradCheck::new(3);
        let inputs = gc.random_inputs(&[&[1, 2, 5, 5], &[3, 2, 3, 3], &[3]]);
        let rep = gc.run(&inputs, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1)).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn batch_norm_train() {
        let gc = GradCheck::new(4);
        let inputs = gc.random_inputs(&[&[4, 3, 2, 2], &[3], &[3]]);
        let rep = gc
            .run(&inputs, |g, v| Ok(g.batch_norm_2d(v[0], v[1], v[2], BnMode::Train)?.0))
            .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}
