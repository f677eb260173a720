//! Lesion-segmentation study: Dice on a fixed test set after training on
//! real records, synthetic records, and their union.

use std::path::PathBuf;

use clap::Args;
use macdm::eval::RunProvenance;
use macdm::Result;

use crate::config::{set, RunConfig};
use crate::manifest::{dataset_fingerprint, with_atomic_dir, Runner};

use super::{load_dataset_input, segment_conditions, write_reports};

#[derive(Args, Debug)]
pub struct EvalSegmentArgs {
    /// Real training dataset directory.
    #[arg(long)]
    pub train: PathBuf,

    /// Held-out test dataset directory.
    #[arg(long)]
    pub test: PathBuf,

    /// Optional synthetic dataset; adds "augmented" (synthetic only) and
    /// "real-plus-augmented" conditions.
    #[arg(long)]
    pub augment: Option<PathBuf>,

    /// Output directory; must not already exist.
    #[arg(long)]
    pub out: PathBuf,

    /// TOML config file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Root seed (overrides config).
    #[arg(long)]
    pub seed: Option<u64>,

    /// Training iterations per segmenter fit.
    #[arg(long)]
    pub iterations: Option<usize>,
}

pub fn run(args: EvalSegmentArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    set(&mut cfg.seed, args.seed);
    set(&mut cfg.eval.segmenter_iterations, args.iterations);
    cfg.validate()?;

    with_atomic_dir(&args.out, |tmp| {
        let mut runner = Runner::new("eval-segment", &cfg);
        let (_, train) = load_dataset_input(&mut runner, "train-data", &args.train)?;
        let (_, test) = load_dataset_input(&mut runner, "test-data", &args.test)?;
        let synthetic = match &args.augment {
            Some(dir) => Some(load_dataset_input(&mut runner, "synthetic-data", dir)?.1),
            None => None,
        };

        let mut provenance = RunProvenance {
            seed: cfg.seed,
            ..RunProvenance::default()
        };
        provenance
            .dataset_sha256
            .insert("train".into(), dataset_fingerprint(&args.train)?);
        provenance
            .dataset_sha256
            .insert("test".into(), dataset_fingerprint(&args.test)?);
        if let Some(dir) = &args.augment {
            provenance
                .dataset_sha256
                .insert("synthetic".into(), dataset_fingerprint(dir)?);
        }

        let reports = segment_conditions(&train, synthetic.as_deref(), &test, &cfg, &provenance)?;
        write_reports(&mut runner, tmp, &reports)?;
        Ok(runner)
    })
}
