//! `padkit eval`: score a manifest split with a checkpoint, write the
//! score CSV and ROC curve, and render the PAD metrics report.
//!
//! Threshold precedence: the --threshold flag, then the threshold stored in
//! the checkpoint at train time, then min-ACER on the evaluated scores
//! (logged, since that choice peeks at the data it reports on).

use std::collections::BTreeMap;
use std::path::PathBuf;

use padkit::checkpoint::{checkpoint_to_model, Checkpoint};
use padkit::metrics::{evaluate, roc, select_threshold, ThresholdPolicy};
use padkit::training::{score_images, score_set, ScoringData};
use padkit::{Error, Result};

use crate::common::{
    echo_config, log, manifest_root, parse_split, prepare_out_dir, value_of, Common, FileConfig,
};
use crate::scores;
use crate::train::load_manifest;

#[derive(clap::Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,

    /// Checkpoint produced by train or sweep.
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Manifest describing the corpus; sample paths resolve relative to it.
    #[arg(long)]
    pub manifest: PathBuf,

    /// Split to score: train, val, or test.
    #[arg(long)]
    pub split: Option<String>,

    /// Accept-at-or-above decision threshold.
    #[arg(long)]
    pub threshold: Option<f64>,

    /// Comma-separated APCER targets for BPCER-at-APCER operating points.
    #[arg(long, value_delimiter = ',')]
    pub bpcer_at: Option<Vec<f64>>,

    #[arg(long)]
    pub batch_size: Option<usize>,
}

pub fn run(args: EvalArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let split_name = args
        .split
        .or(file.split.clone())
        .unwrap_or_else(|| "test".to_string());
    let split = parse_split(&split_name)?;
    let bpcer_targets = args.bpcer_at.or(file.bpcer_at.clone()).unwrap_or(vec![0.10]);
    let batch_size = args.batch_size.or(file.batch_size).unwrap_or(32);
    if batch_size == 0 {
        return Err(Error::Usage("batch size must be at least 1".into()));
    }
    let out = prepare_out_dir(args.common.out.as_deref(), args.common.force)?;

    let mut entries = BTreeMap::new();
    entries.insert("checkpoint".into(), value_of(&args.checkpoint.display().to_string()));
    entries.insert("manifest".into(), value_of(&args.manifest.display().to_string()));
    entries.insert("split".into(), value_of(&split_name));
    entries.insert("bpcer_at".into(), value_of(&bpcer_targets));
    entries.insert("batch_size".into(), value_of(&batch_size));
    entries.insert("out".into(), value_of(&out.display().to_string()));
    if let Some(t) = args.threshold.or(file.threshold) {
        entries.insert("threshold".into(), value_of(&t));
    }
    echo_config("eval", Some(&out), entries)?;

    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut bundle = checkpoint_to_model(&ckpt)?;
    let manifest = load_manifest(&args.manifest)?;
    let root = manifest_root(&args.manifest);
    let data = ScoringData::from_manifest(&root, &manifest, split)?;
    if data.records.is_empty() {
        return Err(Error::Usage(format!(
            "split {split_name} of {} has no records",
            args.manifest.display()
        )));
    }
    log(&format!("scoring {} samples from split {split_name}", data.records.len()));
    let raw_scores = score_images(
        &mut bundle.network,
        &bundle.head,
        bundle.arc.scale,
        &data.images,
        batch_size,
    )?;
    let set = score_set(&data.records, &raw_scores)?;
    if set.attacks.is_empty() {
        return Err(Error::Usage(format!(
            "split {split_name} has no attack or synthetic samples to report APCER on"
        )));
    }

    let threshold = match args.threshold.or(file.threshold) {
        Some(t) => t,
        None => match ckpt.get("val.threshold") {
            Ok(text) => {
                let t: f64 = text.parse().map_err(|_| {
                    Error::Io(format!("checkpoint holds unreadable val.threshold {text}"))
                })?;
                log(&format!("using stored validation threshold {t}"));
                t
            }
            Err(_) => {
                let t = select_threshold(&set, ThresholdPolicy::MinAcer)?;
                log(&format!(
                    "no stored threshold; using min-ACER threshold {t} from the evaluated scores"
                ));
                t
            }
        },
    };

    let report = evaluate(&set, threshold, &bpcer_targets)?;
    let rows = scores::rows_from_records(&data.records, &raw_scores)?;
    let scores_path = out.join("scores.csv");
    std::fs::write(&scores_path, scores::render(&rows)?)
        .map_err(|e| Error::io(&scores_path, e))?;
    let roc_path = out.join("roc.csv");
    std::fs::write(&roc_path, roc(&set)?.render_csv()).map_err(|e| Error::io(&roc_path, e))?;
    let report_path = out.join("report.txt");
    std::fs::write(&report_path, report.render_machine())
        .map_err(|e| Error::io(&report_path, e))?;
    let human_path = out.join("report_human.txt");
    std::fs::write(&human_path, report.render_human())
        .map_err(|e| Error::io(&human_path, e))?;

    print!("{}", report.render_human());
    log(&format!("scores {}", scores_path.display()));
    Ok(())
}
