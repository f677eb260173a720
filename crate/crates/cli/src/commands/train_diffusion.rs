//! `train-diffusion`: trains the masked-triplet denoiser on a dataset
//! directory, writing the checkpoint and loss curve.

use std::path::PathBuf;

use clap::Args;

use macdm::training::train_denoiser;
use macdm::Result;

use crate::config::{set, RunConfig};
use crate::manifest::{sha256_file, with_atomic_dir, Runner};

use super::load_dataset_input;

#[derive(Debug, Args)]
pub struct TrainDiffusionArgs {
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
    /// Diffusion chain length T.
    #[arg(long)]
    pub t_max: Option<usize>,
    /// Weight of the variational term in the hybrid objective.
    #[arg(long)]
    pub lambda_vlb: Option<f64>,
    /// Intermediate checkpoint cadence in iterations (0 = final only).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub emb_dim: Option<usize>,
}

pub fn run(args: TrainDiffusionArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    set(&mut cfg.seed, args.seed);
    set(&mut cfg.diffusion.iterations, args.iterations);
    set(&mut cfg.diffusion.batch_size, args.batch_size);
    set(&mut cfg.diffusion.learning_rate, args.learning_rate);
    set(&mut cfg.diffusion.t_max, args.t_max);
    set(&mut cfg.diffusion.lambda_vlb, args.lambda_vlb);
    set(&mut cfg.diffusion.checkpoint_every, args.checkpoint_every);
    set(&mut cfg.diffusion.base_channels, args.base_channels);
    set(&mut cfg.diffusion.emb_dim, args.emb_dim);
    cfg.validate()?;

    with_atomic_dir(&args.out, |tmp| {
        let mut runner = Runner::new("train-diffusion", cfg.clone());
        let (manifest, records) = load_dataset_input(&mut runner, "train-data", &args.data)?;
        let arch = cfg.denoiser_arch(manifest.resolution);
        let train = cfg.diffusion_train();
        eprintln!(
            "training denoiser: {} records, {} iterations, T={}",
            records.len(),
            train.iterations,
            train.schedule.t_max
        );
        let out = train_denoiser(&records, &arch, &train, Some(tmp))?;
        runner.record_output(
            "denoiser",
            "denoiser.ckpt",
            sha256_file(&tmp.join("denoiser.ckpt"))?,
        );
        runner.record_output(
            "loss-curve",
            "denoiser-loss.csv",
            sha256_file(&tmp.join("denoiser-loss.csv"))?,
        );
        let last = out.history.last().map(|r| r.total).unwrap_or(f64::NAN);
        println!(
            "trained denoiser ({} parameters), final loss {last:.6}",
            out.params.len()
        );
        Ok(runner)
    })
}
