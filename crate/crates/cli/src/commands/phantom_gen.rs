//! `phantom-gen`: generates a labeled phantom corpus and writes it as a
//! dataset directory, optionally with stratified cross-validation folds.

use std::fs;
use std::path::PathBuf;

use clap::Args;

use macdm::phantom::generator::generate_corpus;
use macdm::phantom::split_folds;
use macdm::Result;

use crate::config::{set, RunConfig};
use crate::manifest::{dataset_fingerprint, with_atomic_dir, Runner};

#[derive(Debug, Args)]
pub struct PhantomGenArgs {
    /// Output dataset directory (must not exist).
    #[arg(long)]
    pub out: PathBuf,
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Normal records to generate.
    #[arg(long)]
    pub normal: Option<usize>,
    /// CML records to generate.
    #[arg(long)]
    pub cml: Option<usize>,
    /// Square image edge length in pixels.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Stratified folds to assign (0 = none).
    #[arg(long)]
    pub folds: Option<usize>,
}

pub fn run(args: PhantomGenArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    set(&mut cfg.seed, args.seed);
    set(&mut cfg.phantom.normal, args.normal);
    set(&mut cfg.phantom.cml, args.cml);
    set(&mut cfg.phantom.resolution, args.resolution);
    set(&mut cfg.phantom.folds, args.folds);
    cfg.validate()?;

    with_atomic_dir(&args.out, |tmp| {
        let mut runner = Runner::new("phantom-gen", cfg.clone());
        let p = &cfg.phantom;
        eprintln!(
            "generating {} normal + {} CML phantoms at {}x{}",
            p.normal, p.cml, p.resolution, p.resolution
        );
        let records = generate_corpus(p.normal, p.cml, p.resolution, cfg.seed)?;
        let manifest = macdm::phantom::save_dataset(tmp, &records, p.resolution, cfg.seed)?;
        if p.folds >= 2 {
            let with_folds = split_folds(&manifest, p.folds, cfg.seed)?;
            fs::write(
                tmp.join("manifest.json"),
                serde_json::to_string_pretty(&with_folds)?,
            )?;
        }
        runner.record_output("dataset", "manifest.json", dataset_fingerprint(tmp)?);
        println!(
            "wrote {} records to {}",
            records.len(),
            args.out.display()
        );
        Ok(runner)
    })
}
