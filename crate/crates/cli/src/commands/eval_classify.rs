//! Downstream classification study: cross-validated and independent-test
//! metrics with and without synthetic augmentation.

use std::path::PathBuf;

use clap::Args;
use macdm::eval::RunProvenance;
use macdm::Result;

use crate::config::{set, RunConfig};
use crate::manifest::{dataset_fingerprint, with_atomic_dir, Runner};

use super::{classify_conditions, load_dataset_input, write_reports};

#[derive(Args, Debug)]
pub struct EvalClassifyArgs {
    /// Real training dataset directory.
    #[arg(long)]
    pub train: PathBuf,

    /// Held-out test dataset directory.
    #[arg(long)]
    pub test: PathBuf,

    /// Optional synthetic dataset; adds an "augmented" condition whose
    /// records join every training split but never a validation fold.
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

    /// Cross-validation fold count (ignored when the training manifest
    /// already assigns folds).
    #[arg(long)]
    pub folds: Option<usize>,

    /// Training iterations per classifier fit.
    #[arg(long)]
    pub iterations: Option<usize>,
}

pub fn run(args: EvalClassifyArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    set(&mut cfg.seed, args.seed);
    set(&mut cfg.eval.folds, args.folds);
    set(&mut cfg.eval.iterations, args.iterations);
    cfg.validate()?;

    with_atomic_dir(&args.out, |tmp| {
        let mut runner = Runner::new("eval-classify", &cfg);
        let (train_manifest, train) = load_dataset_input(&mut runner, "train-data", &args.train)?;
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

        let reports = classify_conditions(
            &train,
            &train_manifest,
            synthetic.as_deref(),
            &test,
            &cfg,
            &provenance,
        )?;
        write_reports(&mut runner, tmp, &reports)?;
        Ok(runner)
    })
}
