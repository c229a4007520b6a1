//! `padkit sweep`: train one model per lambda, score validation, select
//! the best by AUC, and persist the selected model plus per-arm curves.

use std::collections::BTreeMap;

use padkit::checkpoint::model_to_checkpoint;
use padkit::dataio::Split;
use padkit::training::{
    render_loss_log, sweep_lambda, ClassifierData, ScoringData, DEFAULT_LAMBDA_GRID,
};
use padkit::{Error, Result};

use crate::common::{echo_config, log, prepare_out_dir, value_of, Common, FileConfig};
use crate::train::{load_manifest, resolve_training, TrainKnobs};

#[derive(clap::Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,

    #[command(flatten)]
    pub knobs: TrainKnobs,

    /// Comma-separated lambda grid; defaults to the stock grid.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
}

pub fn run(args: SweepArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let mut entries = BTreeMap::new();
    let resolved = resolve_training(&args.common, &args.knobs, &file, &mut entries)?;
    let grid = args
        .grid
        .or(file.grid)
        .unwrap_or_else(|| DEFAULT_LAMBDA_GRID.to_vec());
    let out = prepare_out_dir(args.common.out.as_deref(), args.common.force)?;
    entries.insert("grid".into(), value_of(&grid));
    entries.insert("out".into(), value_of(&out.display().to_string()));
    echo_config("sweep", Some(&out), entries)?;

    let manifest = load_manifest(&resolved.manifest_path)?;
    let train_data = ClassifierData::from_manifest(&resolved.root, &manifest, Split::Train)?;
    let val_data = ScoringData::from_manifest(&resolved.root, &manifest, Split::Val)?;
    log(&format!(
        "sweeping {} lambda values over {} train and {} val samples",
        grid.len(),
        train_data.images.len(),
        val_data.images.len()
    ));

    let result = sweep_lambda(&resolved.arch, &resolved.cfg, &grid, &train_data, &val_data)?;

    let summary_path = out.join("sweep.csv");
    std::fs::write(&summary_path, result.summary_csv())
        .map_err(|e| Error::io(&summary_path, e))?;
    for entry in &result.entries {
        let path = out.join(format!("roc_lambda_{}.csv", entry.lambda));
        std::fs::write(&path, entry.roc.render_csv()).map_err(|e| Error::io(&path, e))?;
    }

    let selected = result.selected_entry();
    let mut ckpt = model_to_checkpoint(&selected.outcome.bundle)?;
    ckpt.set("val.threshold", selected.threshold)?;
    ckpt.set("val.auc", selected.auc)?;
    let ckpt_path = out.join("model.ckpt");
    ckpt.save(&ckpt_path)?;
    let log_path = out.join("loss_log.tsv");
    std::fs::write(&log_path, render_loss_log(&selected.outcome.log))
        .map_err(|e| Error::io(&log_path, e))?;

    for entry in &result.entries {
        println!("lambda {} auc {}", entry.lambda, entry.auc);
    }
    log(&format!(
        "selected lambda {} with validation auc {}",
        selected.lambda, selected.auc
    ));
    log(&format!("checkpoint {}", ckpt_path.display()));
    Ok(())
}
