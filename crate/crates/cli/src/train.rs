//! `padkit train`: fit the classifier on a manifest's train split, then
//! write the checkpoint, the loss log, and (when validation is usable) the
//! validation-selected operating threshold.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use padkit::checkpoint::{model_to_checkpoint, Checkpoint};
use padkit::dataio::{Manifest, Split};
use padkit::metrics::{roc, select_threshold, ThresholdPolicy};
use padkit::network::NetworkConfig;
use padkit::tensor::Activation;
use padkit::training::{
    render_loss_log, score_images, score_set, train, ClassifierData, ScoringData, TrainConfig,
    TrainOutcome,
};
use padkit::{Error, Result};

use crate::common::{
    echo_config, log, manifest_root, prepare_out_dir, value_of, Common, FileConfig,
};

/// Training knobs shared verbatim by `train` and `sweep`.
#[derive(clap::Args, Debug)]
pub struct TrainKnobs {
    /// Manifest describing the corpus; sample paths resolve relative to it.
    #[arg(long)]
    pub manifest: PathBuf,

    #[arg(long)]
    pub epochs: Option<usize>,

    #[arg(long)]
    pub lr: Option<f64>,

    #[arg(long)]
    pub batch_size: Option<usize>,

    /// Center-loss weight in the joint objective.
    #[arg(long)]
    pub lambda: Option<f64>,

    /// Scale applied to cosine logits.
    #[arg(long)]
    pub scale: Option<f64>,

    /// Additive angular margin in radians.
    #[arg(long)]
    pub margin: Option<f64>,

    /// Center update rate.
    #[arg(long)]
    pub alpha: Option<f64>,

    /// Activation function: relu or leaky_relu.
    #[arg(long)]
    pub activation: Option<String>,

    /// Negative slope of leaky_relu.
    #[arg(long)]
    pub negative_slope: Option<f64>,
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,

    #[command(flatten)]
    pub knobs: TrainKnobs,
}

pub struct ResolvedTraining {
    pub cfg: TrainConfig,
    pub arch: NetworkConfig,
    pub manifest_path: PathBuf,
    pub root: PathBuf,
}

/// Applies flag-over-file-over-default resolution for everything `train`
/// and `sweep` share, and echoes it into the config map.
pub fn resolve_training(
    common: &Common,
    knobs: &TrainKnobs,
    file: &FileConfig,
    entries: &mut BTreeMap<String, serde_json::Value>,
) -> Result<ResolvedTraining> {
    let base = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: knobs.epochs.or(file.epochs).unwrap_or(base.epochs),
        lr: knobs.lr.or(file.lr).unwrap_or(base.lr),
        batch_size: knobs.batch_size.or(file.batch_size).unwrap_or(base.batch_size),
        lambda: knobs.lambda.or(file.lambda).unwrap_or(base.lambda),
        scale: knobs.scale.or(file.scale).unwrap_or(base.scale),
        margin: knobs.margin.or(file.margin).unwrap_or(base.margin),
        alpha: knobs.alpha.or(file.alpha).unwrap_or(base.alpha),
        seed: common.seed.or(file.seed).unwrap_or(base.seed),
    };
    cfg.validate()?;

    let mut arch = NetworkConfig::desk();
    if let Some(name) = knobs.activation.as_deref().or(file.activation.as_deref()) {
        arch.activation = Activation::parse(name)?;
    }
    if let Some(slope) = knobs.negative_slope.or(file.negative_slope) {
        arch.negative_slope = slope;
    }
    arch.feature_shape()?;

    entries.insert("manifest".into(), value_of(&knobs.manifest.display().to_string()));
    entries.insert("epochs".into(), value_of(&cfg.epochs));
    entries.insert("lr".into(), value_of(&cfg.lr));
    entries.insert("batch_size".into(), value_of(&cfg.batch_size));
    entries.insert("lambda".into(), value_of(&cfg.lambda));
    entries.insert("scale".into(), value_of(&cfg.scale));
    entries.insert("margin".into(), value_of(&cfg.margin));
    entries.insert("alpha".into(), value_of(&cfg.alpha));
    entries.insert("seed".into(), value_of(&cfg.seed));
    entries.insert("activation".into(), value_of(&arch.activation.name()));
    entries.insert("negative_slope".into(), value_of(&arch.negative_slope));

    Ok(ResolvedTraining {
        cfg,
        arch,
        manifest_path: knobs.manifest.clone(),
        root: manifest_root(&knobs.manifest),
    })
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let parsed = Manifest::load(path)?;
    for warning in &parsed.warnings {
        log(&format!("warning: {warning}"));
    }
    Ok(parsed.manifest)
}

/// Scores the validation split and stores the min-ACER threshold and AUC in
/// the checkpoint. Skipped with a log line when validation lacks bona fide
/// or attack-like samples.
pub fn store_validation_threshold(
    ckpt: &mut Checkpoint,
    outcome: &mut TrainOutcome,
    manifest: &Manifest,
    root: &Path,
    batch_size: usize,
) -> Result<Option<f64>> {
    let val = ScoringData::from_manifest(root, manifest, Split::Val)?;
    let has_bona = val.records.iter().any(|r| r.class.is_bona_fide());
    let has_attack = val.records.iter().any(|r| !r.class.is_bona_fide());
    if !has_bona || !has_attack {
        log("validation split lacks bona fide or attack-like samples; no threshold stored");
        return Ok(None);
    }
    let scores = score_images(
        &mut outcome.bundle.network,
        &outcome.bundle.head,
        outcome.bundle.arc.scale,
        &val.images,
        batch_size,
    )?;
    let set = score_set(&val.records, &scores)?;
    let threshold = select_threshold(&set, ThresholdPolicy::MinAcer)?;
    let auc = roc(&set)?.auc();
    ckpt.set("val.threshold", threshold)?;
    ckpt.set("val.auc", auc)?;
    log(&format!("validation threshold {threshold} (auc {auc})"));
    Ok(Some(threshold))
}

pub fn run(args: TrainArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let mut entries = BTreeMap::new();
    let resolved = resolve_training(&args.common, &args.knobs, &file, &mut entries)?;
    let out = prepare_out_dir(args.common.out.as_deref(), args.common.force)?;
    entries.insert("out".into(), value_of(&out.display().to_string()));
    echo_config("train", Some(&out), entries)?;

    let manifest = load_manifest(&resolved.manifest_path)?;
    let data = ClassifierData::from_manifest(&resolved.root, &manifest, Split::Train)?;
    log(&format!(
        "training on {} samples for {} epochs",
        data.images.len(),
        resolved.cfg.epochs
    ));
    let mut outcome = train(&resolved.arch, &resolved.cfg, &data)?;

    let mut ckpt = model_to_checkpoint(&outcome.bundle)?;
    store_validation_threshold(
        &mut ckpt,
        &mut outcome,
        &manifest,
        &resolved.root,
        resolved.cfg.batch_size,
    )?;
    let ckpt_path = out.join("model.ckpt");
    ckpt.save(&ckpt_path)?;
    let log_path = out.join("loss_log.tsv");
    std::fs::write(&log_path, render_loss_log(&outcome.log))
        .map_err(|e| Error::io(&log_path, e))?;

    let last = outcome.log.last().expect("at least one epoch");
    log(&format!(
        "epoch {} joint {} arcface {} center {}",
        last.epoch, last.joint, last.arcface, last.center
    ));
    log(&format!("checkpoint {}", ckpt_path.display()));
    Ok(())
}
