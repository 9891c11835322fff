//! ResNet speaker embedding network.
//!
//! Layout for width `C`, `F` input mels and `T` frames:
//!
//! | layer   | output                 |
//! |---------|------------------------|
//! | IN      | `F x T`                |
//! | Conv1   | `C x F x T`            |
//! | Res1    | `C x F x T`            |
//! | Res2    | `2C x F/2 x T/2`       |
//! | Res3    | `4C x F/4 x T/4`       |
//! | Res4    | `8C x F/8 x T/8`       |
//! | Flatten | `CF x T/8`             |
//! | ASP     | `2CF`                  |
//! | FC      | `E`                    |
//!
//! Every residual block is `conv-BN-ReLU-conv-BN-attention`, added to the
//! shortcut and passed through ReLU. The first block of stages 2-4 uses a
//! strided 1x1 conv + BN shortcut.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{attention_forward, attention_params, AttentionConfig, AttentionVars, ParamRole, Variant};
use crate::autograd::{BatchStats, BnMode, Graph, Var};
use crate::checkpoint::TensorFile;
use crate::error::{Error, Result};
use crate::frontend::FeatureConfig;
use crate::rng;
use crate::tensor::{Real, Tensor};

/// Momentum of BN running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
/// Shortest input accepted by [`Model::embed`].
pub const MIN_FRAMES: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub in_mels: usize,
    pub embed_dim: usize,
    pub asp_bottleneck: usize,
    pub attention: AttentionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 34,
            width: 32,
            in_mels: 64,
            embed_dim: 256,
            asp_bottleneck: 128,
            attention: AttentionConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn new(depth: usize, width: usize, in_mels: usize, embed_dim: usize, attention: AttentionConfig) -> Self {
        Self {
            depth,
            width,
            in_mels,
            embed_dim,
            asp_bottleneck: 128,
            attention,
        }
    }

    /// Blocks per residual stage.
    pub fn block_counts(&self) -> Option<[usize; 4]> {
        match self.depth {
            34 => Some([3, 4, 6, 3]),
            52 => Some([5, 6, 9, 5]),
            _ => None,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.block_counts().is_none() {
            p.push(format!("model.depth must be 34 or 52, got {}", self.depth));
        }
        if self.width == 0 {
            p.push("model.width must be at least 1".to_string());
        }
        if self.in_mels == 0 || self.in_mels % 8 != 0 {
            p.push(format!("model.in_mels must be a positive multiple of 8, got {}", self.in_mels));
        }
        if self.embed_dim == 0 {
            p.push("model.embed_dim must be at least 1".to_string());
        }
        if self.asp_bottleneck == 0 {
            p.push("model.asp_bottleneck must be at least 1".to_string());
        }
        p.extend(self.attention.problems().into_iter().map(|s| format!("model.{s}")));
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Channel width of stage `s` (0-based).
    pub fn stage_channels(&self, s: usize) -> usize {
        self.width << s
    }

    /// Frequency extent at stage `s` (0-based) for the configured input.
    pub fn stage_freq(&self, s: usize) -> usize {
        let mut f = self.in_mels;
        for _ in 0..s {
            f = f.div_ceil(2);
        }
        f
    }

    /// Flattened feature dimension fed to ASP.
    pub fn flat_dim(&self) -> usize {
        self.stage_channels(3) * self.stage_freq(3)
    }
}

/// Metadata stored alongside model weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub epoch: u64,
    pub model: ModelConfig,
    pub features: FeatureConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Normalization scale or shift.
    Affine,
    /// Running statistics; saved but not trained.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Arc<Tensor<T>>,
}

impl<T: Real> Param<T> {
    pub fn trainable(&self) -> bool {
        self.kind != ParamKind::Buffer
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running-stat update produced by a train-mode BN: parameter indices of
/// the running mean and variance, and the batch statistics.
pub struct BnUpdate<T> {
    pub mean_index: usize,
    pub var_index: usize,
    pub stats: BatchStats<T>,
}

pub struct ForwardOutput<T> {
    /// `[N, E]`
    pub embedding: Var,
    /// Graph handle of every parameter used, aligned with [`Model::params`].
    /// Only trainable parameters in train mode require grad.
    pub param_vars: Vec<Option<Var>>,
    pub bn_updates: Vec<BnUpdate<T>>,
    /// Attention weights per block, keyed `res{stage}.{block}`.
    pub attention: Vec<(String, Var)>,
    /// Per-sample output shape of each layer.
    pub shapes: Vec<(String, Vec<usize>)>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    cfg: ModelConfig,
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

struct Layout {
    entries: Vec<(String, Vec<usize>, ParamKind)>,
}

impl Layout {
    fn add(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) {
        self.entries.push((name, shape, kind));
    }

    fn bn(&mut self, prefix: &str, c: usize) {
        self.add(format!("{prefix}.gamma"), vec![c], ParamKind::Affine);
        self.add(format!("{prefix}.beta"), vec![c], ParamKind::Affine);
        self.add(format!("{prefix}.running_mean"), vec![c], ParamKind::Buffer);
        self.add(format!("{prefix}.running_var"), vec![c], ParamKind::Buffer);
    }
}

fn layout(cfg: &ModelConfig) -> Layout {
    let mut l = Layout { entries: Vec::new() };
    let (c, f) = (cfg.width, cfg.in_mels);
    l.add("in.gamma".into(), vec![f], ParamKind::Affine);
    l.add("in.beta".into(), vec![f], ParamKind::Affine);
    l.add("conv1.weight".into(), vec![c, 1, 7, 7], ParamKind::Weight);
    l.bn("bn1", c);
    let blocks = cfg.block_counts().expect("validated depth");
    let mut cin = c;
    for (s, &nb) in blocks.iter().enumerate() {
        let cout = cfg.stage_channels(s);
        let freq = cfg.stage_freq(s);
        for b in 0..nb {
            let p = format!("res{}.{b}", s + 1);
            let ci = if b == 0 { cin } else { cout };
            l.add(format!("{p}.conv1.weight"), vec![cout, ci, 3, 3], ParamKind::Weight);
            l.bn(&format!("{p}.bn1"), cout);
            l.add(format!("{p}.conv2.weight"), vec![cout, cout, 3, 3], ParamKind::Weight);
            l.bn(&format!("{p}.bn2"), cout);
            for (name, shape, role) in attention_params(&cfg.attention, cout, freq) {
                let kind = match role {
                    ParamRole::Weight => ParamKind::Weight,
                    ParamRole::Affine => ParamKind::Affine,
                    ParamRole::Buffer => ParamKind::Buffer,
                };
                l.add(format!("{p}.att.{name}"), shape, kind);
            }
            if b == 0 && (s > 0 || ci != cout) {
                l.add(format!("{p}.short.weight"), vec![cout, ci, 1, 1], ParamKind::Weight);
                l.bn(&format!("{p}.short_bn"), cout);
            }
        }
        cin = cout;
    }
    let (d, a, e) = (cfg.flat_dim(), cfg.asp_bottleneck, cfg.embed_dim);
    l.add("asp.w1.weight".into(), vec![a, d], ParamKind::Weight);
    l.add("asp.w1.bias".into(), vec![a], ParamKind::Bias);
    l.add("asp.w2.weight".into(), vec![d, a], ParamKind::Weight);
    l.add("asp.w2.bias".into(), vec![d], ParamKind::Bias);
    l.add("fc.weight".into(), vec![e, 2 * d], ParamKind::Weight);
    l.add("fc.bias".into(), vec![e], ParamKind::Bias);
    l
}

fn init_value(name: &str, shape: &[usize], kind: ParamKind, seed: u64, index: usize) -> Vec<f64> {
    let n: usize = shape.iter().product();
    match kind {
        ParamKind::Weight => {
            let fan_in: usize = shape[1..].iter().product();
            let mut r = rng::seeded(rng::derive_seed(seed, &[index as u64]));
            rng::normal_vec(&mut r, n, (2.0 / fan_in as f64).sqrt())
        }
        ParamKind::Bias => vec![0.0; n],
        ParamKind::Affine | ParamKind::Buffer => {
            let one = name.ends_with(".gamma") || name.ends_with(".running_var");
            vec![if one { 1.0 } else { 0.0 }; n]
        }
    }
}

impl<T: Real> Model<T> {
    /// Builds a model with Kaiming-normal weights drawn from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = layout(cfg)
            .entries
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape, kind))| {
                let v = init_value(&name, &shape, kind, seed, i);
                Ok(Param {
                    value: Arc::new(Tensor::from_f64(&shape, &v)?),
                    name,
                    kind,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_params(cfg.clone(), params))
    }

    fn from_params(cfg: ModelConfig, params: Vec<Param<T>>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Self { cfg, params, index }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.param_index(name).map(|i| self.params[i].value.as_ref())
    }

    /// Mutable access; copies the storage if a graph still shares it.
    pub fn param_mut_at(&mut self, i: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[i].value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.param_index(name)?;
        Some(self.param_mut_at(i))
    }

    /// Mutable access to every trainable tensor, paired with its index.
    pub fn trainable_mut(&mut self) -> Vec<(usize, &mut Tensor<T>)> {
        self.params
            .iter_mut()
            .enumerate()
            .filter(|(_, p)| p.trainable())
            .map(|(i, p)| (i, Arc::make_mut(&mut p.value)))
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable()).map(|p| p.value.numel()).sum()
    }

    /// Trainable parameter count per layer, in construction order.
    pub fn param_report(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for p in self.params.iter().filter(|p| p.trainable()) {
            let layer = p.name.rsplit_once('.').map_or(p.name.as_str(), |(l, _)| l);
            match out.last_mut() {
                Some((l, n)) if l == layer => *n += p.value.numel(),
                _ => out.push((layer.to_string(), p.value.numel())),
            }
        }
        out
    }

    /// Attention weight count (excluding BN) and attention BN affine count
    /// per block.
    pub fn attention_report(&self) -> Vec<(String, usize, usize)> {
        let mut out: Vec<(String, usize, usize)> = Vec::new();
        for p in self.params.iter().filter(|p| p.trainable()) {
            let Some((block, _)) = p.name.split_once(".att.") else {
                continue;
            };
            if out.last().is_none_or(|(b, ..)| b != block) {
                out.push((block.to_string(), 0, 0));
            }
            let last = out.last_mut().unwrap();
            if p.kind == ParamKind::Weight {
                last.1 += p.value.numel();
            } else {
                last.2 += p.value.numel();
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let params = self
            .params
            .iter()
            .map(|p| Param {
                name: p.name.clone(),
                kind: p.kind,
                value: Arc::new(p.value.cast()),
            })
            .collect();
        Model::from_params(self.cfg.clone(), params)
    }

    /// Block identifiers `res{stage}.{block}` in forward order.
    pub fn block_ids(&self) -> Vec<String> {
        let blocks = self.cfg.block_counts().expect("validated depth");
        (0..4)
            .flat_map(|s| (0..blocks[s]).map(move |b| format!("res{}.{b}", s + 1)))
            .collect()
    }

    /// Full forward pass on `feats: [N, F, T]`.
    pub fn forward(&self, g: &mut Graph<T>, feats: Var, mode: Mode) -> Result<ForwardOutput<T>> {
        let s = g.shape(feats).to_vec();
        if s.len() != 3 || s[1] != self.cfg.in_mels {
            return Err(Error::shape(format!(
                "model expects features [N, {}, T], got {s:?}",
                self.cfg.in_mels
            )));
        }
        let mut ctx = Ctx {
            model: self,
            g,
            train: mode == Mode::Train,
            vars: vec![None; self.params.len()],
            bn_updates: Vec::new(),
            attention: Vec::new(),
            shapes: Vec::new(),
        };
        let embedding = ctx.run(feats)?;
        Ok(ForwardOutput {
            embedding,
            param_vars: ctx.vars,
            bn_updates: ctx.bn_updates,
            attention: ctx.attention,
            shapes: ctx.shapes,
        })
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        let m = T::from_f64(BN_MOMENTUM);
        let keep = T::one() - m;
        for u in updates {
            for (r, &b) in self.param_mut_at(u.mean_index).data_mut().iter_mut().zip(&u.stats.mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in self.param_mut_at(u.var_index).data_mut().iter_mut().zip(&u.stats.var) {
                *r = keep * *r + m * b;
            }
        }
    }

    /// Eval-mode embeddings of equally long feature matrices, `[N, E]`.
    pub fn embed_batch(&self, feats: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = feats.first().ok_or_else(|| Error::invalid("no features to embed"))?;
        let s = first.shape().to_vec();
        if s.len() != 2 || feats.iter().any(|f| f.shape() != s.as_slice()) {
            return Err(Error::shape("embed_batch needs [F, T] features of one shape"));
        }
        if s[1] < MIN_FRAMES {
            return Err(Error::invalid(format!(
                "input has {} frames; at least {MIN_FRAMES} are required",
                s[1]
            )));
        }
        let mut data = Vec::with_capacity(feats.len() * first.numel());
        for f in feats {
            data.extend_from_slice(f.data());
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[feats.len(), s[0], s[1]], data)?);
        let out = self.forward(&mut g, x, Mode::Eval)?;
        Ok(g.value(out.embedding).clone())
    }

    pub fn embed(&self, feats: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.embed_batch(std::slice::from_ref(feats))?.into_data())
    }
}

struct Ctx<'m, 'g, T: Real> {
    model: &'m Model<T>,
    g: &'g mut Graph<T>,
    train: bool,
    vars: Vec<Option<Var>>,
    bn_updates: Vec<BnUpdate<T>>,
    attention: Vec<(String, Var)>,
    shapes: Vec<(String, Vec<usize>)>,
}

impl<T: Real> Ctx<'_, '_, T> {
    fn idx(&self, name: &str) -> Result<usize> {
        self.model
            .param_index(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    fn var(&mut self, name: &str) -> Result<Var> {
        let i = self.idx(name)?;
        if let Some(v) = self.vars[i] {
            return Ok(v);
        }
        let p = &self.model.params[i];
        let v = if self.train && p.trainable() {
            self.g.param(p.value.clone())
        } else {
            self.g.constant_shared(p.value.clone())
        };
        self.vars[i] = Some(v);
        Ok(v)
    }

    fn record(&mut self, name: &str, v: Var) {
        self.shapes.push((name.to_string(), self.g.shape(v)[1..].to_vec()));
    }

    fn bn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.var(&format!("{prefix}.gamma"))?;
        let beta = self.var(&format!("{prefix}.beta"))?;
        let mi = self.idx(&format!("{prefix}.running_mean"))?;
        let vi = self.idx(&format!("{prefix}.running_var"))?;
        let model = self.model;
        let mode = if self.train {
            BnMode::Train
        } else {
            BnMode::Eval {
                running_mean: model.params[mi].value.data(),
                running_var: model.params[vi].value.data(),
            }
        };
        let (y, stats) = self.g.batch_norm_2d(x, gamma, beta, mode)?;
        if let Some(stats) = stats {
            self.bn_updates.push(BnUpdate {
                mean_index: mi,
                var_index: vi,
                stats,
            });
        }
        Ok(y)
    }

    fn conv_bn(&mut self, x: Var, conv: &str, bn: &str, stride: usize, padding: usize) -> Result<Var> {
        let w = self.var(&format!("{conv}.weight"))?;
        let h = self.g.conv2d(x, w, None, stride, padding)?;
        self.bn(h, bn)
    }

    fn attention(&mut self, x: Var, block: &str) -> Result<Var> {
        let cfg = &self.model.cfg.attention;
        let p = |n: &str| format!("{block}.att.{n}");
        let vars = match cfg.variant {
            Variant::None => AttentionVars::None,
            Variant::Se => AttentionVars::Se {
                fc1: self.var(&p("fc1"))?,
                fc2: self.var(&p("fc2"))?,
            },
            Variant::Fwse => AttentionVars::Fwse {
                fc1: self.var(&p("fc1"))?,
                fc2: self.var(&p("fc2"))?,
            },
            Variant::C2d => AttentionVars::C2d {
                conv1: self.var(&p("conv1"))?,
                gamma: self.var(&p("bn.gamma"))?,
                beta: self.var(&p("bn.beta"))?,
                conv2: self.var(&p("conv2"))?,
            },
        };
        let model = self.model;
        let mode = if self.train || cfg.variant != Variant::C2d {
            BnMode::Train
        } else {
            BnMode::Eval {
                running_mean: model.param(&p("bn.running_mean")).expect("layout").data(),
                running_var: model.param(&p("bn.running_var")).expect("layout").data(),
            }
        };
        let out = attention_forward(self.g, x, vars, cfg.pooling, mode)?;
        if let Some(stats) = out.bn_stats {
            self.bn_updates.push(BnUpdate {
                mean_index: self.idx(&p("bn.running_mean"))?,
                var_index: self.idx(&p("bn.running_var"))?,
                stats,
            });
        }
        if let Some(omega) = out.omega {
            self.attention.push((block.to_string(), omega));
        }
        Ok(out.y)
    }

    fn block(&mut self, x: Var, block: &str, stride: usize) -> Result<Var> {
        let h = self.conv_bn(x, &format!("{block}.conv1"), &format!("{block}.bn1"), stride, 1)?;
        let h = self.g.relu(h)?;
        let h = self.conv_bn(h, &format!("{block}.conv2"), &format!("{block}.bn2"), 1, 1)?;
        let h = self.attention(h, block)?;
        let short = if self.model.param_index(&format!("{block}.short.weight")).is_some() {
            self.conv_bn(x, &format!("{block}.short"), &format!("{block}.short_bn"), stride, 0)?
        } else {
            x
        };
        let y = self.g.add(h, short)?;
        self.g.relu(y)
    }

    fn run(&mut self, feats: Var) -> Result<Var> {
        let cfg = self.model.cfg.clone();
        let [n, f, t] = self.g.shape(feats).try_into().expect("checked rank");
        if t < 2 {
            return Err(Error::invalid(format!("need at least 2 frames, got {t}")));
        }
        let (ig, ib) = (self.var("in.gamma")?, self.var("in.beta")?);
        let x = self.g.instance_norm_freq(feats, ig, ib)?;
        self.record("in", x);
        let x = self.g.reshape(x, &[n, 1, f, t])?;
        let x = self.conv_bn(x, "conv1", "bn1", 1, 3)?;
        let mut x = self.g.relu(x)?;
        self.record("conv1", x);
        let blocks = cfg.block_counts().expect("validated depth");
        for (s, &nb) in blocks.iter().enumerate() {
            for b in 0..nb {
                let stride = if b == 0 && s > 0 { 2 } else { 1 };
                x = self.block(x, &format!("res{}.{b}", s + 1), stride)?;
            }
            self.record(&format!("res{}", s + 1), x);
        }
        let [_, c4, f4, t4] = self.g.shape(x).try_into().expect("rank 4");
        if t4 < 2 {
            return Err(Error::invalid(format!(
                "input of {t} frames leaves {t4} frame(s) for pooling; need at least 2"
            )));
        }
        let d = c4 * f4;
        let h = self.g.reshape(x, &[n, d, t4])?;
        self.record("flatten", h);
        let x = self.asp(h, n, d, t4)?;
        self.record("asp", x);
        let (w, b) = (self.var("fc.weight")?, self.var("fc.bias")?);
        let e = self.g.linear(x, w, Some(b))?;
        self.record("fc", e);
        Ok(e)
    }

    fn asp(&mut self, h: Var, n: usize, d: usize, t: usize) -> Result<Var> {
        let ht = self.g.permute(h, &[0, 2, 1])?;
        let ht = self.g.reshape(ht, &[n * t, d])?;
        let (w1, b1) = (self.var("asp.w1.weight")?, self.var("asp.w1.bias")?);
        let (w2, b2) = (self.var("asp.w2.weight")?, self.var("asp.w2.bias")?);
        let a = self.g.linear(ht, w1, Some(b1))?;
        let a = self.g.tanh(a)?;
        let e = self.g.linear(a, w2, Some(b2))?;
        let e = self.g.reshape(e, &[n, t, d])?;
        let e = self.g.permute(e, &[0, 2, 1])?;
        let alpha = self.g.softmax(e, 2)?;
        self.g.attentive_moments(h, alpha)
    }
}

impl Model<f32> {
    pub fn to_tensor_file(&self, features: &FeatureConfig, step: u64, epoch: u64) -> Result<TensorFile> {
        let meta = CheckpointMeta {
            step,
            epoch,
            model: self.cfg.clone(),
            features: features.clone(),
        };
        let text = toml::to_string(&meta).map_err(|e| Error::invalid(format!("serializing metadata: {e}")))?;
        let mut file = TensorFile::new(text);
        for p in &self.params {
            file.push(p.name.clone(), p.value.shape(), p.value.data().to_vec())?;
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path, features: &FeatureConfig, step: u64, epoch: u64) -> Result<()> {
        self.to_tensor_file(features, step, epoch)?.save(path)
    }

    /// Copies every parameter from `file`, checking names and shapes against
    /// this model's layout.
    pub fn load_state(&mut self, file: &TensorFile) -> Result<()> {
        if file.entries.len() != self.params.len() {
            for e in &file.entries {
                if self.param_index(&e.name).is_none() {
                    return Err(Error::CorruptCheckpoint(format!("unexpected tensor `{}`", e.name)));
                }
            }
        }
        for i in 0..self.params.len() {
            let name = self.params[i].name.clone();
            let e = file.get(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            let expected = self.params[i].value.shape().to_vec();
            if e.shape != expected {
                return Err(Error::ShapeMismatch {
                    name,
                    expected,
                    found: e.shape.clone(),
                });
            }
            self.params[i].value = Arc::new(Tensor::new(&e.shape, e.data.clone())?);
        }
        Ok(())
    }
}

pub fn parse_meta(file: &TensorFile) -> Result<CheckpointMeta> {
    let meta: CheckpointMeta =
        toml::from_str(&file.metadata).map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
    meta.model
        .validate()
        .map_err(|e| Error::CorruptCheckpoint(format!("stored model config: {e}")))?;
    Ok(meta)
}

/// Loads a checkpoint, building the model from its stored configuration.
pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
    let file = TensorFile::load(path)?;
    let meta = parse_meta(&file)?;
    let mut model = Model::new(&meta.model, 0)?;
    model.load_state(&file)?;
    Ok((model, meta))
}

/// Loads a checkpoint into a model of the requested configuration.
pub fn load_checkpoint_as(path: &Path, cfg: &ModelConfig) -> Result<(Model<f32>, CheckpointMeta)> {
    let file = TensorFile::load(path)?;
    let meta = parse_meta(&file)?;
    let mut model = Model::new(cfg, 0)?;
    model.load_state(&file)?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Pooling;

    fn micro(variant: Variant) -> ModelConfig {
        ModelConfig::new(34, 4, 16, 8, AttentionConfig::new(variant, Pooling::Avg))
    }

    #[test]
    fn validation_collects_all_problems() {
        let cfg = ModelConfig {
            depth: 50,
            in_mels: 20,
            embed_dim: 0,
            ..Default::default()
        };
        match cfg.validate() {
            Err(Error::Config(p)) => assert_eq!(p.len(), 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn equal_seeds_equal_parameters() {
        let a = Model::<f32>::new(&micro(Variant::C2d), 7).unwrap();
        let b = Model::<f32>::new(&micro(Variant::C2d), 7).unwrap();
        let c = Model::<f32>::new(&micro(Variant::C2d), 8).unwrap();
        for ((p, q), r) in a.params().iter().zip(b.params()).zip(c.params()) {
            assert_eq!(p.value, q.value);
            if p.kind == ParamKind::Weight {
                assert_ne!(p.value, r.value);
            }
        }
    }

    #[test]
    fn report_sums_to_total() {
        let m = Model::<f32>::new(&micro(Variant::Se), 1).unwrap();
        let total: usize = m.param_report().iter().map(|r| r.1).sum();
        assert_eq!(total, m.num_trainable());
    }

    #[test]
    fn micro_shapes() {
        let m = Model::<f32>::new(&micro(Variant::C2d), 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_f64(&[2, 16, 32], &(0..1024).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap());
        let out = m.forward(&mut g, x, Mode::Train).unwrap();
        assert_eq!(g.shape(out.embedding), &[2, 8]);
        let shapes: HashMap<_, _> = out.shapes.into_iter().collect();
        assert_eq!(shapes["res4"], vec![32, 2, 4]);
        assert_eq!(shapes["flatten"], vec![64, 4]);
        assert_eq!(shapes["asp"], vec![128]);
        assert_eq!(out.attention.len(), 16);
        // one update per BN: stem, 2 per block, 3 shortcuts, 1 per c2d
        assert_eq!(out.bn_updates.len(), 1 + 2 * 16 + 3 + 16);
    }

    #[test]
    fn short_input_rejected() {
        let m = Model::<f32>::new(&micro(Variant::None), 1).unwrap();
        assert!(m.embed(&Tensor::zeros(&[16, 15])).is_err());
        assert!(m.embed(&Tensor::zeros(&[8, 40])).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::<f32>::new(&micro(Variant::C2d), 3).unwrap();
        let feats = FeatureConfig::with_mels(16);
        m.save(&path, &feats, 12, 2).unwrap();
        let (back, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(meta.step, 12);
        assert_eq!(meta.features, feats);
        assert_eq!(back.config(), m.config());
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }

        let wider = ModelConfig { width: 5, ..micro(Variant::C2d) };
        match load_checkpoint_as(&path, &wider) {
            Err(Error::ShapeMismatch { name, .. }) => assert_eq!(name, "conv1.weight"),
            other => panic!("{other:?}"),
        }

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint(_))));
    }
}
