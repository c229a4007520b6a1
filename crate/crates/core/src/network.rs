//! A compact residual CNN that maps image batches to embeddings.
//!
//! The layout is a stem convolution followed by stages of residual blocks
//! (conv, norm, activation, conv, norm, plus a shortcut, then activation),
//! global average pooling, and a linear projection to the embedding space.
//! Shortcuts are the identity unless a block changes channel count or
//! stride, in which case a 1x1 projection with its own norm is used.
//!
//! Two presets cover the two working scales: [`NetworkConfig::desk`] trains
//! in seconds on 32x32 grayscale ridges, [`NetworkConfig::paper`] is the
//! full-resolution variant whose forward pass is exercised shape-only.

use crate::losses::ArcHead;
use crate::standard_normal;
use crate::tensor::{kernels, Activation, Graph, Tensor, VarId};
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// One stage: `blocks` residual blocks at `channels`, the first block
/// entering with `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub blocks: usize,
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Input as (channels, height, width).
    pub input: (usize, usize, usize),
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageSpec>,
    pub activation: Activation,
    pub negative_slope: f64,
    pub embedding_dim: usize,
    pub classes: usize,
}

impl NetworkConfig {
    /// Small grayscale preset used for end-to-end runs on one core.
    pub fn desk() -> Self {
        NetworkConfig {
            input: (1, 32, 32),
            stem_channels: 8,
            stem_kernel: 3,
            stem_stride: 1,
            stages: vec![
                StageSpec { blocks: 1, channels: 8, stride: 1 },
                StageSpec { blocks: 1, channels: 16, stride: 2 },
            ],
            activation: Activation::LeakyRelu,
            negative_slope: 0.01,
            embedding_dim: 16,
            classes: 2,
        }
    }

    /// Full-resolution preset: RGB 1024x1024 in, 512-channel feature map
    /// before pooling, 512-wide embeddings.
    pub fn full() -> Self {
        NetworkConfig {
            input: (3, 1024, 1024),
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 4,
            stages: vec![
                StageSpec { blocks: 2, channels: 64, stride: 1 },
                StageSpec { blocks: 2, channels: 128, stride: 2 },
                StageSpec { blocks: 2, channels: 256, stride: 2 },
                StageSpec { blocks: 2, channels: 512, stride: 2 },
            ],
            activation: Activation::LeakyRelu,
            negative_slope: 0.01,
            embedding_dim: 512,
            classes: 2,
        }
    }

    /// Validates the config and returns the pre-pool feature map shape as
    /// (channels, height, width).
    pub fn feature_shape(&self) -> Result<(usize, usize, usize)> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Usage(format!(
                "input shape ({c}, {h}, {w}) has a zero extent"
            )));
        }
        if self.stem_channels == 0 {
            return Err(Error::Usage("stem needs at least one channel".into()));
        }
        if self.stem_kernel % 2 == 0 || self.stem_kernel == 0 {
            return Err(Error::Usage(format!(
                "stem kernel must be odd, got {}",
                self.stem_kernel
            )));
        }
        if self.stem_stride == 0 {
            return Err(Error::Usage("stem stride must be at least 1".into()));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Usage("embedding dimension must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Usage(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if !(0.0..1.0).contains(&self.negative_slope) {
            return Err(Error::Usage(format!(
                "negative slope must lie in [0, 1), got {}",
                self.negative_slope
            )));
        }
        let pad = self.stem_kernel / 2;
        let mut hh = kernels::conv_out_dim(h, self.stem_kernel, self.stem_stride, pad)
            .filter(|&d| d > 0)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "stem kernel {} stride {} produces no output on a {h}x{w} input",
                    self.stem_kernel, self.stem_stride
                ))
            })?;
        let mut ww = kernels::conv_out_dim(w, self.stem_kernel, self.stem_stride, pad)
            .filter(|&d| d > 0)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "stem kernel {} stride {} produces no output on a {h}x{w} input",
                    self.stem_kernel, self.stem_stride
                ))
            })?;
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.blocks == 0 {
                return Err(Error::Usage(format!("stage {i} has zero blocks")));
            }
            if stage.channels == 0 {
                return Err(Error::Usage(format!("stage {i} has zero channels")));
            }
            if stage.stride == 0 || stage.stride > 2 {
                return Err(Error::Usage(format!(
                    "stage {i} stride must be 1 or 2, got {}",
                    stage.stride
                )));
            }
            if stage.stride > 1 && (hh == 1 || ww == 1) {
                return Err(Error::Usage(format!(
                    "stage {i} stride {} cannot reduce a {hh}x{ww} map",
                    stage.stride
                )));
            }
            // Blocks use 3x3 kernels with padding 1.
            hh = kernels::conv_out_dim(hh, 3, stage.stride, 1)
                .filter(|&d| d > 0)
                .ok_or_else(|| {
                    Error::Usage(format!("stage {i} produces an empty feature map"))
                })?;
            ww = kernels::conv_out_dim(ww, 3, stage.stride, 1)
                .filter(|&d| d > 0)
                .ok_or_else(|| {
                    Error::Usage(format!("stage {i} produces an empty feature map"))
                })?;
        }
        let cc = self.stages.last().map_or(self.stem_channels, |s| s.channels);
        Ok((cc, hh, ww))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], 1.0).with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    /// 1x1 projection when the block changes shape, otherwise identity.
    pub shortcut: Option<(Conv, BatchNorm)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub stem_conv: Conv,
    pub stem_bn: BatchNorm,
    pub stages: Vec<Vec<Block>>,
    /// Linear projection from pooled channels to the embedding space.
    pub embed: Tensor,
    /// Dense classification layer on top of the embedding; its softmax is
    /// the probability output of the forward pass.
    pub classify: Tensor,
}

/// Kaiming fan-in initialization for a conv or linear weight.
fn he_tensor(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut t = Tensor::from_fn(shape, |_| std * standard_normal(rng));
    t.requires_grad = true;
    t
}

fn he_conv(out_c: usize, in_c: usize, kernel: usize, stride: usize, rng: &mut ChaCha8Rng) -> Conv {
    Conv {
        weight: he_tensor(&[out_c, in_c, kernel, kernel], in_c * kernel * kernel, rng),
        stride,
        pad: kernel / 2,
    }
}

impl Network {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.feature_shape()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (in_c, _, _) = config.input;
        let stem_conv = he_conv(
            config.stem_channels,
            in_c,
            config.stem_kernel,
            config.stem_stride,
            &mut rng,
        );
        let stem_bn = BatchNorm::new(config.stem_channels);
        let mut stages = Vec::new();
        let mut channels = config.stem_channels;
        for stage in &config.stages {
            let mut blocks = Vec::new();
            for b in 0..stage.blocks {
                let stride = if b == 0 { stage.stride } else { 1 };
                let conv1 = he_conv(stage.channels, channels, 3, stride, &mut rng);
                let bn1 = BatchNorm::new(stage.channels);
                let conv2 = he_conv(stage.channels, stage.channels, 3, 1, &mut rng);
                let bn2 = BatchNorm::new(stage.channels);
                let shortcut = if stride != 1 || channels != stage.channels {
                    let proj = he_conv(stage.channels, channels, 1, stride, &mut rng);
                    Some((proj, BatchNorm::new(stage.channels)))
                } else {
                    None
                };
                blocks.push(Block { conv1, bn1, conv2, bn2, shortcut });
                channels = stage.channels;
            }
            stages.push(blocks);
        }
        let embed = he_tensor(&[channels, config.embedding_dim], channels, &mut rng);
        let classify = he_tensor(
            &[config.embedding_dim, config.classes],
            config.embedding_dim,
            &mut rng,
        );
        Ok(Network { config, stem_conv, stem_bn, stages, embed, classify })
    }

    /// Trainable parameters in a fixed order, paired with stable names.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("stem.conv.weight".into(), &mut self.stem_conv.weight),
            ("stem.bn.gamma".into(), &mut self.stem_bn.gamma),
            ("stem.bn.beta".into(), &mut self.stem_bn.beta),
        ];
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                let p = format!("stage{si}.block{bi}");
                out.push((format!("{p}.conv1.weight"), &mut block.conv1.weight));
                out.push((format!("{p}.bn1.gamma"), &mut block.bn1.gamma));
                out.push((format!("{p}.bn1.beta"), &mut block.bn1.beta));
                out.push((format!("{p}.conv2.weight"), &mut block.conv2.weight));
                out.push((format!("{p}.bn2.gamma"), &mut block.bn2.gamma));
                out.push((format!("{p}.bn2.beta"), &mut block.bn2.beta));
                if let Some((conv, bn)) = block.shortcut.as_mut() {
                    out.push((format!("{p}.shortcut.conv.weight"), &mut conv.weight));
                    out.push((format!("{p}.shortcut.bn.gamma"), &mut bn.gamma));
                    out.push((format!("{p}.shortcut.bn.beta"), &mut bn.beta));
                }
            }
        }
        out.push(("embed.weight".into(), &mut self.embed));
        out.push(("classify.weight".into(), &mut self.classify));
        out
    }

    pub fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Non-trainable state: the running batch-norm statistics, as tensors,
    /// in the same naming scheme as the parameters.
    pub fn buffers(&self) -> Vec<(String, Tensor)> {
        let as_tensor = |v: &Vec<f64>| Tensor::new(vec![v.len()], v.clone()).expect("valid");
        let mut out = vec![
            ("stem.bn.running_mean".into(), as_tensor(&self.stem_bn.running_mean)),
            ("stem.bn.running_var".into(), as_tensor(&self.stem_bn.running_var)),
        ];
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                let p = format!("stage{si}.block{bi}");
                for (tag, bn) in [("bn1", &block.bn1), ("bn2", &block.bn2)] {
                    out.push((format!("{p}.{tag}.running_mean"), as_tensor(&bn.running_mean)));
                    out.push((format!("{p}.{tag}.running_var"), as_tensor(&bn.running_var)));
                }
                if let Some((_, bn)) = block.shortcut.as_ref() {
                    out.push((
                        format!("{p}.shortcut.bn.running_mean"),
                        as_tensor(&bn.running_mean),
                    ));
                    out.push((
                        format!("{p}.shortcut.bn.running_var"),
                        as_tensor(&bn.running_var),
                    ));
                }
            }
        }
        out
    }

    /// Restores running statistics exported by [`Network::buffers`].
    pub fn set_buffers(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        for (name, tensor) in named {
            let slot = self.buffer_mut(name).ok_or_else(|| {
                Error::Usage(format!("unknown buffer name {name}"))
            })?;
            if slot.len() != tensor.data.len() {
                return Err(Error::Usage(format!(
                    "buffer {name} expects {} values, got {}",
                    slot.len(),
                    tensor.data.len()
                )));
            }
            slot.copy_from_slice(&tensor.data);
        }
        Ok(())
    }

    fn buffer_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        let (prefix, field) = name.rsplit_once('.')?;
        let bn: &mut BatchNorm = if prefix == "stem.bn" {
            &mut self.stem_bn
        } else {
            // stage{si}.block{bi}.bn1 | .bn2 | .shortcut.bn
            let mut parts = prefix.split('.');
            let si: usize = parts.next()?.strip_prefix("stage")?.parse().ok()?;
            let bi: usize = parts.next()?.strip_prefix("block")?.parse().ok()?;
            let block = self.stages.get_mut(si)?.get_mut(bi)?;
            match parts.collect::<Vec<_>>().join(".").as_str() {
                "bn1" => &mut block.bn1,
                "bn2" => &mut block.bn2,
                "shortcut.bn" => &mut block.shortcut.as_mut()?.1,
                _ => return None,
            }
        };
        match field {
            "running_mean" => Some(&mut bn.running_mean),
            "running_var" => Some(&mut bn.running_var),
            _ => None,
        }
    }

    /// Runs the network over one batch. Training mode records every
    /// parameter as a differentiable leaf (returned in `params` for gradient
    /// collection) and updates running statistics; eval mode freezes them
    /// and uses constants throughout.
    pub fn forward(&mut self, g: &mut Graph, x: Tensor, train: bool) -> Result<ForwardPass> {
        if x.shape.len() != 4
            || x.shape[1] != self.config.input.0
            || x.shape[2] != self.config.input.1
            || x.shape[3] != self.config.input.2
        {
            let (c, h, w) = self.config.input;
            return Err(Error::Usage(format!(
                "network expects [batch, {c}, {h}, {w}] input, got {:?}",
                x.shape
            )));
        }
        let mut params = Vec::new();
        let act = self.config.activation;
        let slope = self.config.negative_slope;
        let xid = g.constant(x)?;

        let mut cur = conv_bn_act(
            g,
            xid,
            &self.stem_conv,
            &mut self.stem_bn,
            "stem",
            act,
            slope,
            train,
            &mut params,
        )?;
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                let p = format!("stage{si}.block{bi}");
                let input = cur;

                let w1 = leaf(g, &block.conv1.weight, train, &mut params, format!("{p}.conv1.weight"))?;
                let c1 = g.conv2d(input, w1, block.conv1.stride, block.conv1.pad)?;
                let n1 = bn_node(g, c1, &mut block.bn1, train, &mut params, format!("{p}.bn1"))?;
                let a1 = g.activation(n1, act, slope)?;

                let w2 = leaf(g, &block.conv2.weight, train, &mut params, format!("{p}.conv2.weight"))?;
                let c2 = g.conv2d(a1, w2, block.conv2.stride, block.conv2.pad)?;
                let n2 = bn_node(g, c2, &mut block.bn2, train, &mut params, format!("{p}.bn2"))?;

                let short = match block.shortcut.as_mut() {
                    None => input,
                    Some((conv, bn)) => {
                        let ws = leaf(
                            g,
                            &conv.weight,
                            train,
                            &mut params,
                            format!("{p}.shortcut.conv.weight"),
                        )?;
                        let cs = g.conv2d(input, ws, conv.stride, conv.pad)?;
                        bn_node(g, cs, bn, train, &mut params, format!("{p}.shortcut.bn"))?
                    }
                };
                let sum = g.add(n2, short)?;
                cur = g.activation(sum, act, slope)?;
            }
        }
        let prepool = cur;
        let pooled = g.mean_spatial(prepool)?;
        let we = leaf(g, &self.embed, train, &mut params, "embed.weight".to_string())?;
        let embedding = g.matmul(pooled, we)?;
        let wc = leaf(g, &self.classify, train, &mut params, "classify.weight".to_string())?;
        let logits = g.matmul(embedding, wc)?;
        let probs = g.softmax(logits)?;
        Ok(ForwardPass { embedding, prepool, probs, params })
    }
}

/// Handles to the interesting nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `[batch, embedding_dim]`, not yet normalized.
    pub embedding: VarId,
    /// `[batch, channels, h, w]` feature map before pooling.
    pub prepool: VarId,
    /// `[batch, classes]` softmax probabilities from the dense classifier.
    pub probs: VarId,
    /// Name and leaf id of every parameter (training mode only).
    pub params: Vec<(String, VarId)>,
}

fn leaf(
    g: &mut Graph,
    t: &Tensor,
    train: bool,
    params: &mut Vec<(String, VarId)>,
    name: String,
) -> Result<VarId> {
    if train {
        let id = g.var(t.clone())?;
        params.push((name, id));
        Ok(id)
    } else {
        let mut frozen = t.clone();
        frozen.requires_grad = false;
        frozen.grad = None;
        g.constant(frozen)
    }
}

fn bn_node(
    g: &mut Graph,
    x: VarId,
    bn: &mut BatchNorm,
    train: bool,
    params: &mut Vec<(String, VarId)>,
    name: String,
) -> Result<VarId> {
    let gamma = leaf(g, &bn.gamma, train, params, format!("{name}.gamma"))?;
    let beta = leaf(g, &bn.beta, train, params, format!("{name}.beta"))?;
    if train {
        g.batch_norm_train(
            x,
            gamma,
            beta,
            Some((&mut bn.running_mean, &mut bn.running_var)),
            bn.eps,
            bn.momentum,
        )
    } else {
        g.batch_norm_eval(x, gamma, beta, &bn.running_mean, &bn.running_var, bn.eps)
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_bn_act(
    g: &mut Graph,
    x: VarId,
    conv: &Conv,
    bn: &mut BatchNorm,
    name: &str,
    act: Activation,
    slope: f64,
    train: bool,
    params: &mut Vec<(String, VarId)>,
) -> Result<VarId> {
    let w = leaf(g, &conv.weight, train, params, format!("{name}.conv.weight"))?;
    let c = g.conv2d(x, w, conv.stride, conv.pad)?;
    let n = bn_node(g, c, bn, train, params, format!("{name}.bn"))?;
    g.activation(n, act, slope)
}

/// Class probabilities from embeddings: softmax of scaled cosines against
/// the head's unit columns. Rows sum to one.
pub fn class_probs(embeddings: &Tensor, head: &ArcHead, scale: f64) -> Result<Tensor> {
    if embeddings.shape.len() != 2 || embeddings.shape[1] != head.dim {
        return Err(Error::Usage(format!(
            "expected [batch, {}] embeddings, got {:?}",
            head.dim, embeddings.shape
        )));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Usage(format!("scale must be positive, got {scale}")));
    }
    let (b, d, n) = (embeddings.shape[0], head.dim, head.classes);
    let mut probs = Tensor::zeros(&[b, n]);
    let mut logits = vec![0.0; n];
    for r in 0..b {
        let e = &embeddings.data[r * d..(r + 1) * d];
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Numeric(format!(
                "embedding row {r} has norm {norm:e}"
            )));
        }
        for (j, l) in logits.iter_mut().enumerate() {
            let mut wnorm = 0.0;
            let mut dot = 0.0;
            for i in 0..d {
                let wv = head.weight.data[i * n + j];
                wnorm += wv * wv;
                dot += e[i] * wv;
            }
            *l = scale * dot / (norm * wnorm.sqrt());
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (j, &l) in logits.iter().enumerate() {
            let ex = (l - max).exp();
            probs.data[r * n + j] = ex;
            denom += ex;
        }
        for j in 0..n {
            probs.data[r * n + j] /= denom;
        }
    }
    Ok(probs)
}

/// Liveness scores: the class-0 probability of each embedding.
pub fn live_scores(embeddings: &Tensor, head: &ArcHead, scale: f64) -> Result<Vec<f64>> {
    let probs = class_probs(embeddings, head, scale)?;
    let n = head.classes;
    Ok((0..probs.shape[0]).map(|r| probs.data[r * n]).collect())
}
