//! Attention modules applied inside each residual block: squeeze-and-excitation
//! over channels (SE), over frequency bins (fwSE), and the channel-frequency
//! C2D-Att module, which pools the input over time into a `C x F` plane and
//! derives a weight per (channel, frequency) with two small 2D convolutions.

use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, BnMode, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    None,
    Se,
    Fwse,
    C2d,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::Se => "se",
            Variant::Fwse => "fwse",
            Variant::C2d => "c2d",
        }
    }
}

/// Statistic used to pool over time before computing the weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Avg,
    Std,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub variant: Variant,
    pub pooling: Pooling,
    /// SE bottleneck is `max(1, C / se_reduction)`.
    pub se_reduction: usize,
    pub fwse_bottleneck: usize,
    pub c2d_kernel: usize,
    pub c2d_mid_channels: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            variant: Variant::C2d,
            pooling: Pooling::Avg,
            se_reduction: 8,
            fwse_bottleneck: 16,
            c2d_kernel: 3,
            c2d_mid_channels: 8,
        }
    }
}

impl AttentionConfig {
    pub fn new(variant: Variant, pooling: Pooling) -> Self {
        Self {
            variant,
            pooling,
            ..Self::default()
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.se_reduction == 0 {
            p.push("attention.se_reduction must be at least 1".to_string());
        }
        if self.fwse_bottleneck == 0 {
            p.push("attention.fwse_bottleneck must be at least 1".to_string());
        }
        if self.c2d_kernel % 2 == 0 {
            p.push(format!("attention.c2d_kernel must be odd, got {}", self.c2d_kernel));
        }
        if self.c2d_mid_channels == 0 {
            p.push("attention.c2d_mid_channels must be at least 1".to_string());
        }
        p
    }

    pub fn se_bottleneck(&self, channels: usize) -> usize {
        (channels / self.se_reduction.max(1)).max(1)
    }
}

/// Role of an attention parameter for counting purposes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// FC or convolution weights.
    Weight,
    /// BN affine parameters.
    Affine,
    /// BN running statistics (not trainable).
    Buffer,
}

/// Parameter layout of one attention module at `channels x freq` resolution,
/// as `(name, shape, role)`. Buffers named `*.running_var` start at one.
pub fn attention_params(cfg: &AttentionConfig, channels: usize, freq: usize) -> Vec<(&'static str, Vec<usize>, ParamRole)> {
    use ParamRole::*;
    match cfg.variant {
        Variant::None => vec![],
        Variant::Se => {
            let d = cfg.se_bottleneck(channels);
            vec![("fc1", vec![d, channels], Weight), ("fc2", vec![channels, d], Weight)]
        }
        Variant::Fwse => {
            let d = cfg.fwse_bottleneck;
            vec![("fc1", vec![d, freq], Weight), ("fc2", vec![freq, d], Weight)]
        }
        Variant::C2d => {
            let (k, d) = (cfg.c2d_kernel, cfg.c2d_mid_channels);
            vec![
                ("conv1", vec![d, 1, k, k], Weight),
                ("bn.gamma", vec![d], Affine),
                ("bn.beta", vec![d], Affine),
                ("bn.running_mean", vec![d], Buffer),
                ("bn.running_var", vec![d], Buffer),
                ("conv2", vec![1, d, k, k], Weight),
            ]
        }
    }
}

/// Weight-only parameter count, excluding BN affine parameters.
pub fn attention_param_count(cfg: &AttentionConfig, channels: usize, freq: usize) -> usize {
    attention_params(cfg, channels, freq)
        .iter()
        .filter(|p| p.2 == ParamRole::Weight)
        .map(|p| p.1.iter().product::<usize>())
        .sum()
}

/// Graph handles for the parameters of one attention module.
#[derive(Clone, Copy, Debug)]
pub enum AttentionVars {
    None,
    Se { fc1: Var, fc2: Var },
    Fwse { fc1: Var, fc2: Var },
    C2d { conv1: Var, gamma: Var, beta: Var, conv2: Var },
}

pub struct AttentionOutput<T> {
    pub y: Var,
    /// `[N, C]` for SE, `[N, F]` for fwSE, `[N, C, F]` for C2D; `None` when
    /// attention is disabled.
    pub omega: Option<Var>,
    pub bn_stats: Option<BatchStats<T>>,
}

fn check_x<T: Real>(g: &Graph<T>, x: Var) -> Result<[usize; 4]> {
    match *g.shape(x) {
        [n, c, f, t] => Ok([n, c, f, t]),
        ref s => Err(Error::shape(format!("attention expects [N, C, F, T], got {s:?}"))),
    }
}

fn pool<T: Real>(g: &mut Graph<T>, x: Var, axes: &[usize], pooling: Pooling) -> Result<Var> {
    match pooling {
        Pooling::Avg => g.mean(x, axes),
        Pooling::Std => g.std(x, axes),
    }
}

/// Pools `[N, C, F, T]` over time into `[N, C, F]`.
pub fn time_pool<T: Real>(g: &mut Graph<T>, x: Var, pooling: Pooling) -> Result<Var> {
    let [.., t] = check_x(g, x)?;
    if pooling == Pooling::Std && t < 2 {
        return Err(Error::shape(format!("std pooling needs at least 2 frames, got {t}")));
    }
    pool(g, x, &[3], pooling)
}

fn expect_shape<T: Real>(g: &Graph<T>, v: Var, what: &str, shape: &[usize]) -> Result<()> {
    if g.shape(v) != shape {
        return Err(Error::shape(format!(
            "{what}: expected parameter shape {shape:?}, got {:?}",
            g.shape(v)
        )));
    }
    Ok(())
}

// Shared squeeze-excite body: pooled [N, D] -> sigmoid(fc2 relu(fc1 s)).
fn excite<T: Real>(g: &mut Graph<T>, s: Var, fc1: Var, fc2: Var, dim: usize, what: &str) -> Result<Var> {
    let d = g.shape(fc1)[0];
    expect_shape(g, fc1, what, &[d, dim])?;
    expect_shape(g, fc2, what, &[dim, d])?;
    let h = g.linear(s, fc1, None)?;
    let h = g.relu(h)?;
    let e = g.linear(h, fc2, None)?;
    g.sigmoid(e)
}

/// Channel attention: one weight per channel from statistics over `F x T`.
pub fn se_forward<T: Real>(g: &mut Graph<T>, x: Var, fc1: Var, fc2: Var, pooling: Pooling) -> Result<(Var, Var)> {
    let [n, c, ..] = check_x(g, x)?;
    let s = pool(g, x, &[2, 3], pooling)?;
    let omega = excite(g, s, fc1, fc2, c, "se")?;
    let w = g.reshape(omega, &[n, c, 1, 1])?;
    Ok((g.broadcast_mul(x, w)?, omega))
}

/// Frequency attention: one weight per frequency bin from statistics over
/// `C x T`.
pub fn fwse_forward<T: Real>(g: &mut Graph<T>, x: Var, fc1: Var, fc2: Var, pooling: Pooling) -> Result<(Var, Var)> {
    let [n, _, f, _] = check_x(g, x)?;
    let s = pool(g, x, &[1, 3], pooling)?;
    let omega = excite(g, s, fc1, fc2, f, "fwse")?;
    let w = g.reshape(omega, &[n, 1, f, 1])?;
    Ok((g.broadcast_mul(x, w)?, omega))
}

/// C2D-Att. The time-pooled plane enters the convolutions as a one-channel
/// image with channels as height and frequency as width; both convolutions
/// are bias-free with "same" padding.
pub fn c2d_forward<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    vars: (Var, Var, Var, Var),
    pooling: Pooling,
    bn: BnMode<'_, T>,
) -> Result<(Var, Var, Option<BatchStats<T>>)> {
    let (conv1, gamma, beta, conv2) = vars;
    let [n, c, f, _] = check_x(g, x)?;
    let ws = g.shape(conv1).to_vec();
    if ws.len() != 4 || ws[1] != 1 || ws[2] != ws[3] || ws[2] % 2 == 0 {
        return Err(Error::shape(format!("c2d: conv1 weight must be [d, 1, k, k] with odd k, got {ws:?}")));
    }
    let (d, k) = (ws[0], ws[2]);
    expect_shape(g, conv2, "c2d conv2", &[1, d, k, k])?;
    expect_shape(g, gamma, "c2d bn", &[d])?;
    expect_shape(g, beta, "c2d bn", &[d])?;
    let pad = (k - 1) / 2;
    let z = time_pool(g, x, pooling)?;
    let z = g.reshape(z, &[n, 1, c, f])?;
    let h = g.conv2d(z, conv1, None, 1, pad)?;
    let (h, stats) = g.batch_norm_2d(h, gamma, beta, bn)?;
    let h = g.relu(h)?;
    let e = g.conv2d(h, conv2, None, 1, pad)?;
    let w = g.sigmoid(e)?;
    let omega = g.reshape(w, &[n, c, f])?;
    let w4 = g.reshape(w, &[n, c, f, 1])?;
    Ok((g.broadcast_mul(x, w4)?, omega, stats))
}

/// Dispatches on the parameter set.
pub fn attention_forward<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    vars: AttentionVars,
    pooling: Pooling,
    bn: BnMode<'_, T>,
) -> Result<AttentionOutput<T>> {
    match vars {
        AttentionVars::None => Ok(AttentionOutput {
            y: x,
            omega: None,
            bn_stats: None,
        }),
        AttentionVars::Se { fc1, fc2 } => {
            let (y, omega) = se_forward(g, x, fc1, fc2, pooling)?;
            Ok(AttentionOutput {
                y,
                omega: Some(omega),
                bn_stats: None,
            })
        }
        AttentionVars::Fwse { fc1, fc2 } => {
            let (y, omega) = fwse_forward(g, x, fc1, fc2, pooling)?;
            Ok(AttentionOutput {
                y,
                omega: Some(omega),
                bn_stats: None,
            })
        }
        AttentionVars::C2d {
            conv1,
            gamma,
            beta,
            conv2,
        } => {
            let (y, omega, bn_stats) = c2d_forward(g, x, (conv1, gamma, beta, conv2), pooling, bn)?;
            Ok(AttentionOutput {
                y,
                omega: Some(omega),
                bn_stats,
            })
        }
    }
}
