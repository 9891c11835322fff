//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation executed through it as a node holding
//! the output value and whatever the backward rule needs. Nodes are appended
//! in execution order, so the node list is already topologically sorted and
//! [`Graph::backward`] simply walks it in reverse.

mod conv;
mod elementwise;
pub mod gradcheck;
mod linear;
mod loss;
mod norm;
mod reduce;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use conv::{conv2d_output_size, conv2d_reference};
pub use norm::{BatchStats, BN_EPS, IN_EPS};
pub use reduce::STD_EPS;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running statistics used by batch normalization in eval mode.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    Train,
    Eval {
        running_mean: &'a [T],
        running_var: &'a [T],
    },
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    BroadcastMul {
        x: Var,
        w: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Sum(Var),
    Mean {
        x: Var,
        axes: Vec<usize>,
    },
    Std {
        x: Var,
        axes: Vec<usize>,
        mean: Vec<T>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    AttentiveMoments {
        h: Var,
        alpha: Var,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    AamSoftmax {
        cos: Var,
        labels: Vec<usize>,
        scale: T,
        probs: Vec<T>,
        target_slope: Vec<T>,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. One graph per forward pass; it is not `Sync` in
/// spirit (mutation from two contexts is not supported) but is `Send`.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn check_finite<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(Arc::new(t), false)
    }

    /// Trainable leaf.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(Arc::new(t), true)
    }

    /// Non-trainable leaf sharing storage with a parameter store.
    pub fn constant_shared(&mut self, t: Arc<Tensor<T>>) -> Var {
        self.push_leaf(t, false)
    }

    /// Trainable leaf sharing storage with a parameter store.
    pub fn param(&mut self, t: Arc<Tensor<T>>) -> Var {
        self.push_leaf(t, true)
    }

    fn push_leaf(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if `v` is a
    /// leaf that requires grad and was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Clears gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Populates `∂loss/∂v` for every trainable leaf reachable from `loss`.
    /// Gradients of leaves used several times accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this graph; call zero_grad first".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            let contributions = self.node_backward(i, &g)?;
            for (v, dv) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(dv.shape(), self.shape(v));
                match &mut self.grads[v.0] {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(dv.data()) {
                            *a += *d;
                        }
                    }
                    slot @ None => *slot = Some(dv),
                }
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let out = &self.nodes[i].value;
        let val = |v: Var| -> &Tensor<T> { &self.nodes[v.0].value };
        let mut res = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let grads = conv::conv2d_backward(
                    val(x),
                    val(w),
                    g,
                    stride,
                    padding,
                    self.needs(x),
                    self.needs(w),
                    b.is_some_and(|b| self.needs(b)),
                );
                if let Some(dx) = grads.dx {
                    res.push((x, dx));
                }
                if let Some(dw) = grads.dw {
                    res.push((w, dw));
                }
                if let (Some(b), Some(db)) = (b, grads.db) {
                    res.push((b, db));
                }
            }
            &Op::Linear { x, w, b } => {
                let (dx, dw, db) = linear::linear_backward(val(x), val(w), g, self.needs(x));
                if let Some(dx) = dx {
                    res.push((x, dx));
                }
                res.push((w, dw));
                if let Some(b) = b {
                    res.push((b, db));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let (dx, dg, db) =
                    norm::batch_norm_backward(val(*x), val(*gamma), mean, inv_std, g, *train);
                res.push((*x, dx));
                res.push((*gamma, dg));
                res.push((*beta, db));
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (dx, dg, db) =
                    norm::instance_norm_backward(val(*x), val(*gamma), mean, inv_std, g);
                res.push((*x, dx));
                res.push((*gamma, dg));
                res.push((*beta, db));
            }
            &Op::Relu(x) => res.push((x, elementwise::relu_backward(val(x), g))),
            &Op::Sigmoid(x) => res.push((x, elementwise::sigmoid_backward(out, g))),
            &Op::Tanh(x) => res.push((x, elementwise::tanh_backward(out, g))),
            &Op::Softmax { x, axis } => {
                res.push((x, elementwise::softmax_backward(out, g, axis)));
            }
            &Op::Add(a, b) => {
                res.push((a, g.clone()));
                res.push((b, g.clone()));
            }
            &Op::Sub(a, b) => {
                res.push((a, g.clone()));
                res.push((b, g.map(|v| -v)));
            }
            &Op::Mul(a, b) => {
                res.push((a, elementwise::zip_map(g, val(b), |g, b| g * b)));
                res.push((b, elementwise::zip_map(g, val(a), |g, a| g * a)));
            }
            &Op::BroadcastMul { x, w } => {
                let (dx, dw) = elementwise::broadcast_mul_backward(val(x), val(w), g);
                res.push((x, dx));
                res.push((w, dw));
            }
            &Op::Scale { x, factor } => res.push((x, g.map(|v| v * factor))),
            &Op::Sum(x) => res.push((x, Tensor::full(val(x).shape(), g.item()))),
            Op::Mean { x, axes } => res.push((*x, reduce::mean_backward(val(*x), axes, g))),
            Op::Std { x, axes, mean } => {
                res.push((*x, reduce::std_backward(val(*x), axes, mean, out, g)));
            }
            &Op::Reshape(x) => res.push((x, g.clone().reshape(val(x).shape())?)),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                res.push((*x, reduce::permute(g, &inverse)));
            }
            &Op::AttentiveMoments { h, alpha } => {
                let (dh, da) = reduce::attentive_moments_backward(val(h), val(alpha), out, g);
                res.push((h, dh));
                res.push((alpha, da));
            }
            Op::L2Normalize { x, norms } => {
                res.push((*x, linear::l2_normalize_backward(val(*x), norms, g)));
            }
            Op::AamSoftmax {
                cos,
                labels,
                scale,
                probs,
                target_slope,
            } => {
                let dcos = loss::aam_backward(
                    val(*cos).shape(),
                    labels,
                    *scale,
                    probs,
                    target_slope,
                    g.item(),
                );
                res.push((*cos, dcos));
            }
        }
        Ok(res)
    }
}
