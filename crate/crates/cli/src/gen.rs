//! `padkit gen`: produce a seeded corpus on disk with subject-disjoint
//! splits and the manifest describing it.

use std::collections::BTreeMap;

use padkit::dataio::{generate_corpus, make_splits, write_corpus, GenSpec, SplitPlan};
use padkit::Result;

use crate::common::{echo_config, log, prepare_out_dir, value_of, Common, FileConfig};

#[derive(clap::Args, Debug)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,

    /// Number of live subjects.
    #[arg(long)]
    pub subjects: Option<usize>,

    /// Live samples per subject.
    #[arg(long)]
    pub per_subject: Option<usize>,

    /// Total synthetic samples.
    #[arg(long)]
    pub synthetic: Option<usize>,

    /// Attack samples generated per species.
    #[arg(long)]
    pub attacks_per_species: Option<usize>,

    /// Comma-separated attack species list.
    #[arg(long, value_delimiter = ',')]
    pub species: Option<Vec<String>>,

    #[arg(long)]
    pub height: Option<usize>,

    #[arg(long)]
    pub width: Option<usize>,

    /// Additive pixel noise applied to every class.
    #[arg(long)]
    pub noise_sigma: Option<f64>,

    /// Grid displacement of the synthetic class.
    #[arg(long)]
    pub warp_amplitude: Option<f64>,

    /// Amplitude modulation depth of the synthetic class.
    #[arg(long)]
    pub modulation_depth: Option<f64>,

    /// Global multiplier on attack corruption strength.
    #[arg(long)]
    pub corruption_strength: Option<f64>,

    /// Fraction of live subjects assigned to train.
    #[arg(long)]
    pub live_train: Option<f64>,

    /// Fraction of held-out subjects routed to val.
    #[arg(long)]
    pub holdout_val: Option<f64>,

    /// Fraction of synthetic samples assigned to train.
    #[arg(long)]
    pub synthetic_train: Option<f64>,
}

pub fn run(args: GenArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let base = GenSpec::default();
    let spec = GenSpec {
        subjects: args.subjects.or(file.subjects).unwrap_or(base.subjects),
        per_subject: args.per_subject.or(file.per_subject).unwrap_or(base.per_subject),
        synthetic: args.synthetic.or(file.synthetic).unwrap_or(base.synthetic),
        attacks_per_species: args
            .attacks_per_species
            .or(file.attacks_per_species)
            .unwrap_or(base.attacks_per_species),
        species: args.species.or(file.species).unwrap_or(base.species),
        height: args.height.or(file.height).unwrap_or(base.height),
        width: args.width.or(file.width).unwrap_or(base.width),
        noise_sigma: args.noise_sigma.or(file.noise_sigma).unwrap_or(base.noise_sigma),
        warp_amplitude: args
            .warp_amplitude
            .or(file.warp_amplitude)
            .unwrap_or(base.warp_amplitude),
        modulation_depth: args
            .modulation_depth
            .or(file.modulation_depth)
            .unwrap_or(base.modulation_depth),
        corruption_strength: args
            .corruption_strength
            .or(file.corruption_strength)
            .unwrap_or(base.corruption_strength),
    };
    spec.validate()?;
    let plan_base = SplitPlan::default();
    let plan = SplitPlan {
        live_train: args.live_train.or(file.live_train).unwrap_or(plan_base.live_train),
        holdout_val: args.holdout_val.or(file.holdout_val).unwrap_or(plan_base.holdout_val),
        synthetic_train: args
            .synthetic_train
            .or(file.synthetic_train)
            .unwrap_or(plan_base.synthetic_train),
    };
    let seed = args.common.seed.or(file.seed).unwrap_or(7);
    let out = prepare_out_dir(args.common.out.as_deref(), args.common.force)?;

    let mut entries = BTreeMap::new();
    entries.insert("seed".to_string(), value_of(&seed));
    entries.insert("spec".to_string(), value_of(&spec));
    entries.insert("live_train".to_string(), value_of(&plan.live_train));
    entries.insert("holdout_val".to_string(), value_of(&plan.holdout_val));
    entries.insert("synthetic_train".to_string(), value_of(&plan.synthetic_train));
    entries.insert("out".to_string(), value_of(&out.display().to_string()));
    echo_config("gen", Some(&out), entries)?;

    let mut corpus = generate_corpus(&spec, seed)?;
    make_splits(&mut corpus.manifest, &plan, seed)?;
    write_corpus(&out, &corpus)?;
    log(&format!(
        "wrote {} records under {}",
        corpus.manifest.records.len(),
        out.display()
    ));
    print!("{}", corpus.manifest.summary().render());
    Ok(())
}
