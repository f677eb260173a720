//! `train-guidance-classifier`: trains the noisy-input classifier used for
//! gradient guidance, writing the checkpoint and loss curve.

use std::path::PathBuf;

use clap::Args;

use macdm::training::train_classifier;
use macdm::Result;

use crate::config::{set, RunConfig};
use crate::manifest::{sha256_file, with_atomic_dir, Runner};

use super::load_dataset_input;

#[derive(Debug, Args)]
pub struct TrainGuidanceArgs {
    /// Training dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoint and loss curve (must not exist).
    #[arg(long)]
    pub out: PathBuf,
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optimizer iterations.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Diffusion chain length T (must match the denoiser this classifier
    /// will guide).
    #[arg(long)]
    pub t_max: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub emb_dim: Option<usize>,
}

pub fn run(args: TrainGuidanceArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    set(&mut cfg.seed, args.seed);
    set(&mut cfg.guidance_classifier.iterations, args.iterations);
    set(&mut cfg.guidance_classifier.batch_size, args.batch_size);
    set(&mut cfg.guidance_classifier.learning_rate, args.learning_rate);
    set(&mut cfg.diffusion.t_max, args.t_max);
    set(&mut cfg.guidance_classifier.base_channels, args.base_channels);
    set(&mut cfg.guidance_classifier.emb_dim, args.emb_dim);
    cfg.validate()?;

    with_atomic_dir(&args.out, |tmp| {
        let mut runner = Runner::new("train-guidance-classifier", cfg.clone());
        let (manifest, records) = load_dataset_input(&mut runner, "train-data", &args.data)?;
        let arch = cfg.classifier_arch(manifest.resolution);
        let train = cfg.classifier_train();
        eprintln!(
            "training guidance classifier: {} records, {} iterations, T={}",
            records.len(),
            train.iterations,
            train.schedule.t_max
        );
        let out = train_classifier(&records, &arch, &train, Some(tmp))?;
        runner.record_output(
            "classifier",
            "classifier.ckpt",
            sha256_file(&tmp.join("classifier.ckpt"))?,
        );
        runner.record_output(
            "loss-curve",
            "classifier-loss.csv",
            sha256_file(&tmp.join("classifier-loss.csv"))?,
        );
        let last = out.history.last().map(|r| r.loss).unwrap_or(f64::NAN);
        println!(
            "trained guidance classifier ({} parameters), final loss {last:.6}",
            out.params.len()
        );
        Ok(runner)
    })
}
