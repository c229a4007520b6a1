//! `padkit report`: rebuild the metrics report from a stored score CSV,
//! with no model or corpus required.

use std::collections::BTreeMap;
use std::path::PathBuf;

use padkit::metrics::{evaluate, roc, select_threshold, ThresholdPolicy};
use padkit::{Error, Result};

use crate::common::{echo_config, log, prepare_out_dir, value_of, Common, FileConfig};
use crate::scores;

#[derive(clap::Args, Debug)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,

    /// Score CSV written by eval.
    #[arg(long)]
    pub scores: PathBuf,

    /// Accept-at-or-above decision threshold; min-ACER over the stored
    /// scores when omitted.
    #[arg(long)]
    pub threshold: Option<f64>,

    /// Comma-separated APCER targets for BPCER-at-APCER operating points.
    #[arg(long, value_delimiter = ',')]
    pub bpcer_at: Option<Vec<f64>>,
}

pub fn run(args: ReportArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let bpcer_targets = args.bpcer_at.or(file.bpcer_at.clone()).unwrap_or(vec![0.10]);
    // Output directory is optional here; without one the report is only
    // printed.
    let out = match args.common.out.as_deref() {
        Some(path) => Some(prepare_out_dir(Some(path), args.common.force)?),
        None => None,
    };

    let mut entries = BTreeMap::new();
    entries.insert("scores".into(), value_of(&args.scores.display().to_string()));
    entries.insert("bpcer_at".into(), value_of(&bpcer_targets));
    if let Some(t) = args.threshold.or(file.threshold) {
        entries.insert("threshold".into(), value_of(&t));
    }
    if let Some(out) = &out {
        entries.insert("out".into(), value_of(&out.display().to_string()));
    }
    echo_config("report", out.as_deref(), entries)?;

    let text = std::fs::read_to_string(&args.scores).map_err(|e| Error::io(&args.scores, e))?;
    let rows = scores::parse(&text)?;
    let set = scores::to_score_set(&rows)?;
    let threshold = match args.threshold.or(file.threshold) {
        Some(t) => t,
        None => {
            let t = select_threshold(&set, ThresholdPolicy::MinAcer)?;
            log(&format!("no threshold given; using min-ACER threshold {t}"));
            t
        }
    };
    let report = evaluate(&set, threshold, &bpcer_targets)?;

    if let Some(out) = &out {
        let report_path = out.join("report.txt");
        std::fs::write(&report_path, report.render_machine())
            .map_err(|e| Error::io(&report_path, e))?;
        let human_path = out.join("report_human.txt");
        std::fs::write(&human_path, report.render_human())
            .map_err(|e| Error::io(&human_path, e))?;
        let roc_path = out.join("roc.csv");
        std::fs::write(&roc_path, roc(&set)?.render_csv())
            .map_err(|e| Error::io(&roc_path, e))?;
    }
    print!("{}", report.render_human());
    Ok(())
}
