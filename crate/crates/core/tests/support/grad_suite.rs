//! Central finite-difference checks of every differentiable operation and
//! of a complete small network, all in 64-bit precision. Shared by the
//! gradient tests and the acceptance suite.

#![allow(dead_code)]

use std::sync::Arc;

use c2datt::attention::{attention_forward, AttentionVars, Pooling};
use c2datt::autograd::gradcheck::{GradCheck, GRAD_FLOOR};
use c2datt::autograd::{BnMode, Graph, Var};
use c2datt::attention::{AttentionConfig, Variant};
use c2datt::model::{Mode, Model, ModelConfig};
use c2datt::rng;
use c2datt::Tensor;

/// Per-operation tolerance on the relative error.
pub const OP_TOL: f64 = 1e-4;
/// Tolerance for the composed network.
pub const NET_TOL: f64 = 1e-3;

/// Worst relative error of each named check.
pub type Reports = Vec<(String, f64)>;

fn check(out: &mut Reports, name: &str, shapes: &[&[usize]], build: impl Fn(&mut Graph<f64>, &[Var]) -> c2datt::Result<Var>) {
    let gc = GradCheck::new(name.len() as u64 * 7919).max_coords(40);
    let inputs = gc.random_inputs(shapes);
    let err = match gc.run(&inputs, build) {
        Ok(rep) if rep.coords_checked > 0 => rep.max_rel_error,
        _ => f64::INFINITY,
    };
    out.push((name.to_string(), err));
}

/// Inputs bounded away from zero so ReLU kinks are never straddled.
fn away_from_zero(t: &Tensor<f64>) -> Tensor<f64> {
    t.map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 })
}

pub fn elementwise_ops(out: &mut Reports) {
    let gc = GradCheck::new(3);
    let x = away_from_zero(&gc.random_inputs(&[&[3, 5]])[0]);
    let rep = gc.run(&[x], |g, v| g.relu(v[0])).unwrap();
    out.push(("relu".into(), rep.max_rel_error));
    check(out, "sigmoid", &[&[4, 3]], |g, v| g.sigmoid(v[0]));
    check(out, "tanh", &[&[2, 6]], |g, v| g.tanh(v[0]));
    check(out, "scale", &[&[7]], |g, v| g.scale(v[0], -2.5));
    check(out, "add", &[&[2, 3], &[2, 3]], |g, v| g.add(v[0], v[1]));
    check(out, "sub", &[&[2, 3], &[2, 3]], |g, v| g.sub(v[0], v[1]));
    check(out, "mul", &[&[2, 3], &[2, 3]], |g, v| g.mul(v[0], v[1]));
    check(out, "softmax0", &[&[4, 3]], |g, v| g.softmax(v[0], 0));
    check(out, "softmax_last", &[&[2, 3, 5]], |g, v| g.softmax(v[0], 2));
    check(out, "broadcast_mul_c", &[&[2, 3, 4, 5], &[2, 3, 1, 1]], |g, v| g.broadcast_mul(v[0], v[1]));
    check(out, "broadcast_mul_f", &[&[2, 3, 4, 5], &[2, 1, 4, 1]], |g, v| g.broadcast_mul(v[0], v[1]));
    check(out, "broadcast_mul_cf", &[&[2, 3, 4, 5], &[2, 3, 4, 1]], |g, v| g.broadcast_mul(v[0], v[1]));
}

pub fn reductions_and_layout(out: &mut Reports) {
    check(out, "sum", &[&[3, 4]], |g, v| Ok(g.sum(v[0])));
    check(out, "mean_t", &[&[2, 3, 4, 5]], |g, v| g.mean(v[0], &[3]));
    check(out, "mean_ft", &[&[2, 3, 4, 5]], |g, v| g.mean(v[0], &[2, 3]));
    check(out, "std_t", &[&[2, 3, 4, 5]], |g, v| g.std(v[0], &[3]));
    check(out, "std_ct", &[&[2, 3, 4, 5]], |g, v| g.std(v[0], &[1, 3]));
    check(out, "reshape", &[&[2, 6]], |g, v| {
        let r = g.reshape(v[0], &[3, 4])?;
        g.tanh(r)
    });
    check(out, "permute", &[&[2, 3, 4]], |g, v| {
        let p = g.permute(v[0], &[2, 0, 1])?;
        g.sigmoid(p)
    });
    check(out, "attentive_moments", &[&[2, 3, 6], &[2, 3, 6]], |g, v| {
        let a = g.softmax(v[1], 2)?;
        g.attentive_moments(v[0], a)
    });
}

pub fn linear_and_normalization(out: &mut Reports) {
    check(out, "linear_bias", &[&[4, 5], &[3, 5], &[3]], |g, v| g.linear(v[0], v[1], Some(v[2])));
    check(out, "linear", &[&[4, 5], &[3, 5]], |g, v| g.linear(v[0], v[1], None));
    check(out, "l2_normalize", &[&[3, 4]], |g, v| g.l2_normalize(v[0]));
    check(out, "batch_norm_train", &[&[3, 2, 3, 4], &[2], &[2]], |g, v| {
        Ok(g.batch_norm_2d(v[0], v[1], v[2], BnMode::Train)?.0)
    });
    let (rm, rv) = ([0.3, -0.2], [1.5, 0.7]);
    check(out, "batch_norm_eval", &[&[3, 2, 3, 4], &[2], &[2]], move |g, v| {
        Ok(g
            .batch_norm_2d(
                v[0],
                v[1],
                v[2],
                BnMode::Eval {
                    running_mean: &rm,
                    running_var: &rv,
                },
            )?
            .0)
    });
    check(out, "instance_norm_freq", &[&[2, 3, 7], &[3], &[3]], |g, v| g.instance_norm_freq(v[0], v[1], v[2]));
}

pub fn convolutions(out: &mut Reports) {
    check(out, "conv_s1_bias", &[&[2, 2, 5, 6], &[3, 2, 3, 3], &[3]], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1));
    check(out, "conv_s2", &[&[2, 2, 6, 7], &[3, 2, 3, 3]], |g, v| g.conv2d(v[0], v[1], None, 2, 1));
    check(out, "conv_1x1_s2", &[&[2, 3, 6, 6], &[4, 3, 1, 1]], |g, v| g.conv2d(v[0], v[1], None, 2, 0));
    check(out, "conv_7x7", &[&[1, 1, 8, 9], &[2, 1, 7, 7]], |g, v| g.conv2d(v[0], v[1], None, 1, 3));
}

pub fn aam_softmax_loss(out: &mut Reports) {
    for margin in [0.0, 0.2] {
        check(out, "aam", &[&[4, 5]], move |g, v| {
            let c = g.tanh(v[0])?;
            let c = g.scale(c, 0.9)?;
            g.aam_softmax(c, &[0, 3, 1, 4], margin, 30.0)
        });
    }
    check(out, "aam_normalized", &[&[3, 4], &[5, 4]], |g, v| {
        let e = g.l2_normalize(v[0])?;
        let w = g.l2_normalize(v[1])?;
        let c = g.linear(e, w, None)?;
        g.aam_softmax(c, &[1, 0, 4], 0.2, 30.0)
    });
}

pub fn attention_modules(out: &mut Reports) {
    for pooling in [Pooling::Avg, Pooling::Std] {
        check(out, "se", &[&[2, 4, 3, 5], &[2, 4], &[4, 2]], move |g, v| {
            Ok(attention_forward(g, v[0], AttentionVars::Se { fc1: v[1], fc2: v[2] }, pooling, BnMode::Train)?.y)
        });
        check(out, "fwse", &[&[2, 4, 3, 5], &[2, 3], &[3, 2]], move |g, v| {
            Ok(attention_forward(g, v[0], AttentionVars::Fwse { fc1: v[1], fc2: v[2] }, pooling, BnMode::Train)?.y)
        });
        check(out, "c2d", &[&[2, 4, 3, 5], &[2, 1, 3, 3], &[2], &[2], &[1, 2, 3, 3]], move |g, v| {
            let vars = AttentionVars::C2d {
                conv1: v[1],
                gamma: v[2],
                beta: v[3],
                conv2: v[4],
            };
            Ok(attention_forward(g, v[0], vars, pooling, BnMode::Train)?.y)
        });
    }
}

/// Loss `sum(embedding * R)` of the micro network in train mode, with the
/// analytic gradient of every trainable parameter.
fn micro_loss(model: &Model<f64>, feats: &Tensor<f64>, proj: &Tensor<f64>, grads: bool) -> (f64, Vec<Option<Tensor<f64>>>) {
    let mut g = Graph::new();
    let x = g.constant(feats.clone());
    let out = model.forward(&mut g, x, Mode::Train).unwrap();
    let p = g.constant(proj.clone());
    let prod = g.mul(out.embedding, p).unwrap();
    let loss = g.sum(prod);
    let value = g.value(loss).item();
    if !grads {
        return (value, Vec::new());
    }
    g.backward(loss).unwrap();
    let gs = out.param_vars.iter().map(|v| v.and_then(|v| g.grad(v).cloned())).collect();
    (value, gs)
}

/// Every operation check.
pub fn all_ops() -> Reports {
    let mut out = Reports::new();
    elementwise_ops(&mut out);
    reductions_and_layout(&mut out);
    linear_and_normalization(&mut out);
    convolutions(&mut out);
    aam_softmax_loss(&mut out);
    attention_modules(&mut out);
    out
}

/// Worst parameter and input relative errors of the micro network for one
/// attention variant, with the number of parameter coordinates probed.
pub fn micro_network(variant: Variant) -> (f64, f64, usize) {
    // Small enough that no ReLU in the deep stack changes side between the
    // two probes; f64 keeps the truncation error negligible.
    let step = 1e-6;
    let cfg = ModelConfig::new(34, 4, 16, 8, AttentionConfig::new(variant, Pooling::Std));
    let model = Model::<f64>::new(&cfg, 17).unwrap();
    let mut r = rng::seeded(99);
    let feats = Tensor::new(&[2, 16, 32], rng::normal_vec(&mut r, 2 * 16 * 32, 1.0)).unwrap();
    let proj = Tensor::new(&[2, 8], rng::normal_vec(&mut r, 16, 1.0)).unwrap();
    let (_, analytic) = micro_loss(&model, &feats, &proj, true);

    let mut worst = 0.0f64;
    let mut checked = 0;
    let trainable: Vec<usize> = (0..model.params().len()).filter(|&i| model.params()[i].trainable()).collect();
    // Every 5th trainable tensor, three coordinates each.
    for &i in trainable.iter().step_by(5) {
        let n = model.params()[i].value.numel();
        let Some(a) = analytic[i].as_ref() else {
            return (f64::INFINITY, f64::INFINITY, checked);
        };
        for c in [0, n / 2, n - 1] {
            let mut m = model.clone();
            let orig = m.params()[i].value.data()[c];
            m.param_mut_at(i).data_mut()[c] = orig + step;
            let (plus, _) = micro_loss(&m, &feats, &proj, false);
            m.param_mut_at(i).data_mut()[c] = orig - step;
            let (minus, _) = micro_loss(&m, &feats, &proj, false);
            let numeric = (plus - minus) / (2.0 * step);
            let an = a.data()[c];
            worst = worst.max((an - numeric).abs() / an.abs().max(numeric.abs()).max(GRAD_FLOOR));
            checked += 1;
        }
    }

    // Input gradient through the whole network.
    let mut gc = GradCheck::new(5).max_coords(30);
    gc.step = step;
    let m = Arc::new(model);
    let rep = gc
        .run(&[feats.clone()], |g, v| Ok(m.forward(g, v[0], Mode::Train)?.embedding))
        .unwrap();
    (worst, rep.max_rel_error, checked)
}
