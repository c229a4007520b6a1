//! Adam optimization, the full training loop over live and synthetic
//! samples, and the lambda sweep that picks the center-loss weight from
//! validation ROC.
//!
//! Every random stream derives from the run seed: network and head
//! initialization, per-epoch shuffles, and per-lambda sweep runs each mix a
//! distinct salt, so training is bitwise reproducible given (seed, data,
//! config) and sweep arms are independent of each other.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelBundle;
use crate::dataio::{load_sample, Class, GeneratedCorpus, Manifest, SampleRecord, Split};
use crate::losses::{joint_loss, ArcHead, ArcParams, CenterBank};
use crate::metrics::{roc, select_threshold, RocCurve, ScoreSet, ThresholdPolicy};
use crate::network::{live_scores, Network, NetworkConfig};
use crate::tensor::{Graph, Tensor};
use crate::{derive_seed, hash_id, Error, Result};

/// Training hyperparameters. Defaults are the stock recipe: 20 epochs of
/// Adam at lr 0.001, margin 0.3 at scale 30, center weight 0.0411.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub scale: f64,
    pub margin: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr: 0.001,
            batch_size: 32,
            lambda: 0.0411,
            scale: 30.0,
            margin: 0.3,
            alpha: 0.5,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Usage("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Usage("batch size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Usage(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Usage(format!(
                "center weight must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Usage(format!("scale must be positive, got {}", self.scale)));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::Usage(format!(
                "margin must lie in [0, pi/2), got {}",
                self.margin
            )));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Usage(format!(
                "center update rate must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    pub fn arc_params(&self) -> ArcParams {
        ArcParams { scale: self.scale, margin: self.margin }
    }
}

/// Adam moment buffers keyed by parameter name. Betas and epsilon are the
/// stock values; only the learning rate is exposed in config.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new() -> AdamState {
        AdamState::default()
    }
}

/// One bias-corrected Adam update across all named parameters. Parameters
/// without an entry in `grads` decay their moments as if the gradient were
/// zero, so untouched parameters stay put from a fresh state.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [(String, &mut Tensor)],
    grads: &BTreeMap<String, Vec<f64>>,
    lr: f64,
) -> Result<()> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::Usage(format!("learning rate must be positive, got {lr}")));
    }
    state.step += 1;
    let t = state.step;
    let bias1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bias2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for (name, tensor) in params.iter_mut() {
        let n = tensor.data.len();
        if let Some(g) = grads.get(name) {
            if g.len() != n {
                return Err(Error::Usage(format!(
                    "gradient for {name} has {} elements, parameter has {n}",
                    g.len()
                )));
            }
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "parameter {name} received non-finite gradient {bad} at step {t}"
                )));
            }
        }
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        if m.len() != n {
            return Err(Error::Usage(format!(
                "optimizer state for {name} has {} elements, parameter has {n}",
                m.len()
            )));
        }
        let zero = vec![0.0; 0];
        let g = grads.get(name).map(Vec::as_slice).unwrap_or(&zero);
        for i in 0..n {
            let gi = if g.is_empty() { 0.0 } else { g[i] };
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = m[i] / bias1;
            let vhat = v[i] / bias2;
            tensor.data[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Images and class labels for the classifier: live = 0, synthetic = 1.
#[derive(Debug, Clone)]
pub struct ClassifierData {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

fn classifier_label(record: &SampleRecord, split: Split) -> Result<usize> {
    match record.class {
        Class::Live => Ok(0),
        Class::Synthetic => Ok(1),
        Class::Attack => Err(Error::Protocol(format!(
            "attack record {} found in the {split:?} split; the classifier trains on live and synthetic samples only",
            record.id
        ))),
    }
}

impl ClassifierData {
    pub fn from_manifest(root: &Path, manifest: &Manifest, split: Split) -> Result<Self> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for record in manifest.records.iter().filter(|r| r.split == split) {
            labels.push(classifier_label(record, split)?);
            images.push(load_sample(root, record)?);
        }
        Ok(ClassifierData { images, labels })
    }

    pub fn from_corpus(corpus: &GeneratedCorpus, split: Split) -> Result<Self> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (record, image) in corpus.manifest.records.iter().zip(&corpus.images) {
            if record.split != split {
                continue;
            }
            labels.push(classifier_label(record, split)?);
            images.push(image.clone());
        }
        Ok(ClassifierData { images, labels })
    }
}

/// Records plus images in manifest order, for splits that are scored rather
/// than trained on (any class allowed).
#[derive(Debug, Clone)]
pub struct ScoringData {
    pub records: Vec<SampleRecord>,
    pub images: Vec<Tensor>,
}

impl ScoringData {
    pub fn from_manifest(root: &Path, manifest: &Manifest, split: Split) -> Result<Self> {
        let mut records = Vec::new();
        let mut images = Vec::new();
        for record in manifest.records.iter().filter(|r| r.split == split) {
            records.push(record.clone());
            images.push(load_sample(root, record)?);
        }
        Ok(ScoringData { records, images })
    }

    pub fn from_corpus(corpus: &GeneratedCorpus, split: Split) -> Result<Self> {
        let mut records = Vec::new();
        let mut images = Vec::new();
        for (record, image) in corpus.manifest.records.iter().zip(&corpus.images) {
            if record.split == split {
                records.push(record.clone());
                images.push(image.clone());
            }
        }
        Ok(ScoringData { records, images })
    }
}

/// Per-epoch loss means over batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub joint: f64,
    pub arcface: f64,
    pub center: f64,
}

/// Tab-separated loss log, one line per epoch after the column header.
pub fn render_loss_log(log: &[EpochLoss]) -> String {
    let mut out = String::from("epoch\tjoint\tarcface\tcenter\n");
    for e in log {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", e.epoch, e.joint, e.arcface, e.center));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub log: Vec<EpochLoss>,
}

fn stack_batch(images: &[Tensor], idx: &[usize]) -> Result<Tensor> {
    let first = &images[idx[0]];
    let mut data = Vec::with_capacity(idx.len() * first.numel());
    for &i in idx {
        if images[i].shape != first.shape {
            return Err(Error::Usage(format!(
                "image {} has shape {:?}, batch expects {:?}",
                i, images[i].shape, first.shape
            )));
        }
        data.extend_from_slice(&images[i].data);
    }
    let mut shape = vec![idx.len()];
    shape.extend_from_slice(&first.shape);
    Tensor::new(shape, data)
}

fn check_input_shape(arch: &NetworkConfig, images: &[Tensor]) -> Result<()> {
    let want = vec![arch.input.0, arch.input.1, arch.input.2];
    match images.iter().find(|img| img.shape != want) {
        None => Ok(()),
        Some(img) => Err(Error::Usage(format!(
            "network expects {:?} input images, data holds {:?}",
            want, img.shape
        ))),
    }
}

/// Trains a fresh network on the given data. Per batch: forward, joint
/// loss, backward, Adam, center update, head column renormalization.
pub fn train(arch: &NetworkConfig, cfg: &TrainConfig, data: &ClassifierData) -> Result<TrainOutcome> {
    cfg.validate()?;
    arch.feature_shape()?;
    if data.images.is_empty() {
        return Err(Error::Usage("training data is empty".into()));
    }
    if data.images.len() != data.labels.len() {
        return Err(Error::Usage(format!(
            "{} images for {} labels",
            data.images.len(),
            data.labels.len()
        )));
    }
    if let Some(&bad) = data.labels.iter().find(|&&y| y >= arch.classes) {
        return Err(Error::Usage(format!(
            "label {bad} out of range for {} classes",
            arch.classes
        )));
    }
    check_input_shape(arch, &data.images)?;

    let mut network = Network::new(arch.clone(), derive_seed(cfg.seed, hash_id("init:network")))?;
    let mut head = ArcHead::new(
        arch.embedding_dim,
        arch.classes,
        derive_seed(cfg.seed, hash_id("init:head")),
    )?;
    let mut bank = CenterBank::new(arch.classes, arch.embedding_dim, cfg.alpha)?;
    let mut adam = AdamState::new();
    let arc_params = cfg.arc_params();

    let n = data.images.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, hash_id(&format!("shuffle:{epoch}"))));
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for (batch_no, idx) in order.chunks(cfg.batch_size).enumerate() {
            let context = |e: Error| match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("epoch {epoch} batch {batch_no}: {msg}"))
                }
                other => other,
            };
            let batch = stack_batch(&data.images, idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();

            let mut g = Graph::new();
            let out = network.forward(&mut g, batch, true).map_err(context)?;
            let w = g.var(head.weight.clone())?;
            let nodes =
                joint_loss(&mut g, out.embedding, w, &bank, &labels, arc_params, cfg.lambda)
                    .map_err(context)?;
            let (joint, arc, center) = (
                g.tensor(nodes.total).item(),
                g.tensor(nodes.arc).item(),
                g.tensor(nodes.center).item(),
            );
            if !joint.is_finite() {
                return Err(Error::Numeric(format!(
                    "epoch {epoch} batch {batch_no}: joint loss {joint} (arcface {arc}, center {center})"
                )));
            }
            g.backward(nodes.total).map_err(context)?;

            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for (name, id) in &out.params {
                if let Some(grad) = g.grad(*id) {
                    grads.insert(name.clone(), grad.to_vec());
                }
            }
            if let Some(grad) = g.grad(w) {
                grads.insert("head.weight".into(), grad.to_vec());
            }
            let mut params = network.params_mut();
            params.push(("head.weight".into(), &mut head.weight));
            adam_step(&mut adam, &mut params, &grads, cfg.lr).map_err(context)?;

            let embeddings = g.tensor(nodes.normalized).clone();
            bank.update(&embeddings, &labels).map_err(context)?;
            head.renormalize_columns(1e-9).map_err(context)?;

            sums.0 += joint;
            sums.1 += arc;
            sums.2 += center;
            batches += 1;
        }
        let b = batches as f64;
        log.push(EpochLoss {
            epoch,
            joint: sums.0 / b,
            arcface: sums.1 / b,
            center: sums.2 / b,
        });
    }

    let bundle = ModelBundle {
        network,
        head,
        bank,
        arc: arc_params,
        lambda: cfg.lambda,
    };
    Ok(TrainOutcome { bundle, log })
}

/// Scores images with a trained model: live-class softmax probability of
/// the margin-free scaled cosine logits, batched, in input order.
pub fn score_images(
    network: &mut Network,
    head: &ArcHead,
    scale: f64,
    images: &[Tensor],
    batch_size: usize,
) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(Error::Usage("batch size must be at least 1".into()));
    }
    let mut scores = Vec::with_capacity(images.len());
    let idx: Vec<usize> = (0..images.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let batch = stack_batch(images, chunk)?;
        let mut g = Graph::new();
        let out = network.forward(&mut g, batch, false)?;
        let embeddings = g.tensor(out.embedding);
        scores.extend(live_scores(embeddings, head, scale)?);
    }
    Ok(scores)
}

/// Builds a score set from records and their scores: live records are bona
/// fide, synthetic records count as the "synthetic" attack species, real
/// attacks keep their own species.
pub fn score_set(records: &[SampleRecord], scores: &[f64]) -> Result<ScoreSet> {
    if records.len() != scores.len() {
        return Err(Error::Usage(format!(
            "{} records for {} scores",
            records.len(),
            scores.len()
        )));
    }
    let mut set = ScoreSet::new();
    for (record, &score) in records.iter().zip(scores) {
        match record.class {
            Class::Live => set.push_bona(score)?,
            Class::Synthetic => set.push_attack("synthetic", score)?,
            Class::Attack => {
                let species = record.pai_species.as_deref().ok_or_else(|| {
                    Error::Usage(format!("attack record {} has no pai_species", record.id))
                })?;
                set.push_attack(species, score)?;
            }
        }
    }
    Ok(set)
}

/// One sweep arm: the lambda value, its validation curve, and the min-ACER
/// threshold on validation.
#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub lambda: f64,
    pub auc: f64,
    pub roc: RocCurve,
    pub threshold: f64,
    pub outcome: TrainOutcome,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub entries: Vec<SweepEntry>,
    /// Index into `entries` of the selected lambda.
    pub selected: usize,
}

impl SweepResult {
    pub fn selected_entry(&self) -> &SweepEntry {
        &self.entries[self.selected]
    }

    /// Summary CSV `lambda,auc,selected` in grid order, selected as 0/1.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("lambda,auc,selected\n");
        for (i, e) in self.entries.iter().enumerate() {
            let mark = if i == self.selected { 1 } else { 0 };
            out.push_str(&format!("{},{},{}\n", e.lambda, e.auc, mark));
        }
        out
    }
}

/// The default lambda grid swept when none is given.
pub const DEFAULT_LAMBDA_GRID: &[f64] = &[0.0, 0.001, 0.00411, 0.01, 0.0411, 0.1, 0.411, 1.0];

/// Highest AUC wins; ties break toward the smaller lambda.
fn best_entry(entries: &[(f64, f64)]) -> usize {
    let mut best = 0;
    for (i, &(lambda, auc)) in entries.iter().enumerate().skip(1) {
        let (best_lambda, best_auc) = entries[best];
        if auc > best_auc || (auc == best_auc && lambda < best_lambda) {
            best = i;
        }
    }
    best
}

fn sweep_arm(
    arch: &NetworkConfig,
    base: &TrainConfig,
    lambda: f64,
    train_data: &ClassifierData,
    val_data: &ScoringData,
) -> Result<SweepEntry> {
    let cfg = TrainConfig {
        lambda,
        seed: derive_seed(base.seed, lambda.to_bits()),
        ..*base
    };
    let mut outcome = train(arch, &cfg, train_data)?;
    let scores = score_images(
        &mut outcome.bundle.network,
        &outcome.bundle.head,
        cfg.scale,
        &val_data.images,
        cfg.batch_size,
    )?;
    let set = score_set(&val_data.records, &scores)?;
    let curve = roc(&set)?;
    let auc = curve.auc();
    let threshold = select_threshold(&set, ThresholdPolicy::MinAcer)?;
    Ok(SweepEntry { lambda, auc, roc: curve, threshold, outcome })
}

/// Trains one model per lambda, scores validation, and selects the lambda
/// with the highest validation AUC. Arms run on worker threads; each arm
/// seeds its own streams from (base seed, lambda), so the result does not
/// depend on the worker count or scheduling.
pub fn sweep_lambda(
    arch: &NetworkConfig,
    base: &TrainConfig,
    grid: &[f64],
    train_data: &ClassifierData,
    val_data: &ScoringData,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::Usage("lambda grid must not be empty".into()));
    }
    for &l in grid {
        if !(l.is_finite() && l >= 0.0) {
            return Err(Error::Usage(format!(
                "lambda grid values must be finite and non-negative, got {l}"
            )));
        }
    }
    let has_bona = val_data.records.iter().any(|r| r.class.is_bona_fide());
    let has_attack = val_data.records.iter().any(|r| !r.class.is_bona_fide());
    if !has_bona || !has_attack {
        return Err(Error::Usage(
            "validation split must contain both bona fide samples and an attack source".into(),
        ));
    }

    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(grid.len());
    let mut slots: Vec<Option<Result<SweepEntry>>> = (0..grid.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    let mut done = Vec::new();
                    let mut i = w;
                    while i < grid.len() {
                        done.push((i, sweep_arm(arch, base, grid[i], train_data, val_data)));
                        i += workers;
                    }
                    done
                })
            })
            .collect();
        for handle in handles {
            for (i, entry) in handle.join().expect("sweep worker panicked") {
                slots[i] = Some(entry);
            }
        }
    });
    let mut entries = Vec::with_capacity(grid.len());
    for slot in slots {
        entries.push(slot.expect("every arm ran")?);
    }
    let selected = best_entry(
        &entries.iter().map(|e| (e.lambda, e.auc)).collect::<Vec<_>>(),
    );
    Ok(SweepResult { entries, selected })
}
