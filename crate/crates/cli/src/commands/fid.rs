//! Fréchet distance between the feature distributions of two datasets.
//! Without an explicit extractor checkpoint, a fresh feature extractor is
//! trained on dataset A and saved beside the report so the number stays
//! attributable.

use std::path::PathBuf;

use clap::Args;
use macdm::eval::{fid_images, train_downstream_classifier, FidSummary, RunProvenance};
use macdm::models::DOWNSTREAM_CLASSIFIER_KIND;
use macdm::{MetricsReport, Result};

use crate::config::{set, RunConfig};
use crate::manifest::{dataset_fingerprint, with_atomic_dir, Runner};

use super::{
    load_classifier_input, load_dataset_input, save_extractor_checkpoint, write_reports,
};

#[derive(Args, Debug)]
pub struct FidArgs {
    /// Reference dataset directory (also the extractor's training data
    /// when no --extractor is given).
    #[arg(long)]
    pub a: PathBuf,

    /// Comparison dataset directory.
    #[arg(long)]
    pub b: PathBuf,

    /// Output directory; must not already exist.
    #[arg(long)]
    pub out: PathBuf,

    /// Feature-extractor checkpoint; trained on dataset A when absent.
    #[arg(long)]
    pub extractor: Option<PathBuf>,

    /// TOML config file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Root seed (overrides config).
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(args: FidArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    set(&mut cfg.seed, args.seed);
    cfg.validate()?;

    with_atomic_dir(&args.out, |tmp| {
        let mut runner = Runner::new("fid", &cfg);
        let (_, records_a) = load_dataset_input(&mut runner, "dataset-a", &args.a)?;
        let (_, records_b) = load_dataset_input(&mut runner, "dataset-b", &args.b)?;

        let (head, params, extractor_sha) = match &args.extractor {
            Some(path) => {
                let (head, params, _) = load_classifier_input(
                    &mut runner,
                    "extractor",
                    path,
                    DOWNSTREAM_CLASSIFIER_KIND,
                )?;
                (head, params, crate::manifest::sha256_file(path)?)
            }
            None => {
                eprintln!("no --extractor given; training one on dataset A");
                let ecfg = cfg.eval_classifier_config("fid/extractor");
                let trained = train_downstream_classifier(&records_a, &ecfg)?;
                let (_, sha) =
                    save_extractor_checkpoint(tmp, &trained.head, &trained.params, &ecfg)?;
                runner.record_output("extractor", "downstream-classifier.ckpt", sha.clone());
                (trained.head, trained.params, sha)
            }
        };

        let images_a: Vec<_> = records_a.iter().map(|r| r.image.clone()).collect();
        let images_b: Vec<_> = records_b.iter().map(|r| r.image.clone()).collect();
        let value = fid_images(&images_a, &images_b, &head, &params)?;

        let mut provenance = RunProvenance {
            seed: cfg.seed,
            ..RunProvenance::default()
        };
        provenance
            .dataset_sha256
            .insert("a".into(), dataset_fingerprint(&args.a)?);
        provenance
            .dataset_sha256
            .insert("b".into(), dataset_fingerprint(&args.b)?);
        provenance
            .checkpoint_sha256
            .insert("extractor".into(), extractor_sha.clone());

        let mut row = MetricsReport::new("fid", provenance);
        row.fid = Some(FidSummary {
            value,
            extractor_sha256: extractor_sha,
        });
        write_reports(&mut runner, tmp, &[row])?;
        println!("fid = {value:.6}");
        Ok(runner)
    })
}
