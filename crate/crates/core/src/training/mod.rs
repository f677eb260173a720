//! Training loops for the masked-triplet denoiser and the noisy-input
//! guidance classifier.
//!
//! Both loops draw every random decision (batch indices, timesteps, noise)
//! from a single deterministic stream derived from the config seed, update
//! parameters with Adam under a global gradient-norm clip, track the last
//! parameter state that produced a finite loss, and abort on divergence
//! after persisting that state. Masks travel as state channels: they are
//! mapped {0,1} -> {-1,+1} and noised with independent Gaussian noise
//! exactly like the image channel; channel weights scale the model input
//! only, never the training targets.

pub mod losses;

pub use losses::{
    hybrid_loss, simple_loss, simple_loss_grad, simple_loss_per_channel, vlb_term, VlbOutput,
};

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{s, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{
    save_checkpoint, split_raw_output, ChannelWeights, CheckpointInfo, ClassifierConfig,
    ClassifierHead, Denoiser, DenoiserConfig, DENOISER_KIND, GUIDANCE_CLASSIFIER_KIND,
    NUM_CLASSES, OUTPUT_CHANNELS, STATE_CHANNELS,
};
use crate::nn::{clip_grad_norm, log_softmax, Adam};
use crate::phantom::LabeledTriplet;
use crate::rng::{derive_seed, rng_from};
use crate::schedule::{NoiseSchedule, ScheduleSpec};

/// Global gradient-norm ceiling; a blunt divergence guard, not a tuning knob.
pub const GRAD_CLIP_NORM: f64 = 1.0;

/// Hyperparameters shared by both training loops.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the variational term in the hybrid objective.
    pub lambda_vlb: f64,
    pub weights: ChannelWeights,
    pub schedule: ScheduleSpec,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many iterations (when an
    /// output directory is given). `None` keeps only the final checkpoint.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    /// Desk-scale denoiser defaults: 3k iterations, batch 8, lr 1e-4.
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            batch_size: 8,
            learning_rate: 1e-4,
            lambda_vlb: 0.001,
            weights: ChannelWeights::default(),
            schedule: ScheduleSpec::linear(200),
            seed: 0,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    /// Desk-scale classifier defaults: shorter run, same optimizer settings.
    pub fn desk_classifier() -> Self {
        TrainConfig {
            iterations: 2000,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.lambda_vlb >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_vlb must be non-negative, got {}",
                self.lambda_vlb
            )));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        self.weights.validate()?;
        Ok(())
    }

    /// Content hash of the configuration, stored in checkpoint sidecars so
    /// a checkpoint can be traced back to the exact settings that made it.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One row of the denoiser loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: usize,
    pub simple: f64,
    pub vlb: f64,
    pub total: f64,
}

/// Writes the denoiser loss curve as CSV (`iteration,simple,vlb,total`).
pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "iteration,simple,vlb,total")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.iteration, r.simple, r.vlb, r.total)?;
    }
    Ok(())
}

/// One row of the classifier loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierLossRow {
    pub iteration: usize,
    pub loss: f64,
}

/// Writes the classifier loss curve as CSV (`iteration,loss`).
pub fn write_classifier_loss_csv(path: &Path, rows: &[ClassifierLossRow]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "iteration,loss")?;
    for r in rows {
        writeln!(f, "{},{}", r.iteration, r.loss)?;
    }
    Ok(())
}

/// A trained denoiser with its parameters and loss history.
#[derive(Debug, Clone)]
pub struct TrainedDenoiser {
    pub denoiser: Denoiser,
    pub params: Vec<f64>,
    pub history: Vec<LossRow>,
}

/// A trained guidance classifier with its parameters and loss history.
#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub classifier: ClassifierHead,
    pub params: Vec<f64>,
    pub history: Vec<ClassifierLossRow>,
}

/// One noised training batch in unweighted symmetric-range state space.
pub(crate) struct NoisedBatch {
    pub x0: Array4<f64>,
    pub xt: Array4<f64>,
    pub eps: Array4<f64>,
    pub ts: Vec<usize>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

/// Draws a batch with replacement. Per item, the stream is consumed in a
/// fixed order — dataset index, timestep, then the noise elements — so runs
/// are reproducible bit for bit.
pub(crate) fn sample_noised_batch(
    dataset: &[LabeledTriplet],
    batch_size: usize,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> NoisedBatch {
    let (h, w) = {
        let img = &dataset[0].image;
        (img.height(), img.width())
    };
    let t_max = schedule.t_max();
    let mut x0 = Array4::<f64>::zeros((batch_size, STATE_CHANNELS, h, w));
    let mut xt = Array4::<f64>::zeros((batch_size, STATE_CHANNELS, h, w));
    let mut eps = Array4::<f64>::zeros((batch_size, STATE_CHANNELS, h, w));
    let mut ts = Vec::with_capacity(batch_size);
    let mut labels = Vec::with_capacity(batch_size);
    let mut ids = Vec::with_capacity(batch_size);

    for i in 0..batch_size {
        let idx = rng.gen_range(0..dataset.len());
        let t = rng.gen_range(1..=t_max);
        let item = &dataset[idx];
        let state = item.to_symmetric_state();
        x0.slice_mut(s![i, .., .., ..]).assign(&state);
        let mut e = eps.slice_mut(s![i, .., .., ..]);
        e.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
        let ab = schedule.alpha_bar(t);
        let (ca, ce) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut xt_i = xt.slice_mut(s![i, .., .., ..]);
        xt_i.assign(&(&state * ca + &(&eps.slice(s![i, .., .., ..]) * ce)));
        ts.push(t);
        labels.push(item.label.index());
        ids.push(item.id.clone());
    }
    NoisedBatch {
        x0,
        xt,
        eps,
        ts,
        labels,
        ids,
    }
}

/// Shared pre-flight checks for both loops.
pub(crate) fn check_dataset(dataset: &[LabeledTriplet], image_size: usize) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Dataset("training dataset is empty".into()));
    }
    for item in dataset {
        let (h, w) = (item.image.height(), item.image.width());
        if h != image_size || w != image_size {
            return Err(Error::ShapeMismatch {
                expected: format!("{image_size}x{image_size} (network input)"),
                got: format!("{h}x{w} (record \"{}\")", item.id),
            });
        }
    }
    Ok(())
}

/// Persists a checkpoint into `dir` under `name`, returning its path.
fn write_checkpoint<A: Serialize + Clone>(
    dir: &Path,
    name: &str,
    info: &CheckpointInfo<A>,
    params: &[f64],
) -> Result<PathBuf> {
    let path = dir.join(name);
    save_checkpoint(&path, info.clone(), params)?;
    Ok(path)
}

/// Trains the masked-triplet denoiser with the hybrid objective.
///
/// When `out_dir` is given, writes `denoiser.ckpt` (final), periodic
/// `denoiser-iter-NNNNNN.ckpt` files if configured, and the loss curve as
/// `denoiser-loss.csv`. On divergence the last parameters that produced a
/// finite loss are saved as `denoiser-last-good.ckpt` and an error is
/// returned.
pub fn train_denoiser(
    dataset: &[LabeledTriplet],
    arch: &DenoiserConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainedDenoiser> {
    config.validate()?;
    arch.validate()?;
    check_dataset(dataset, arch.image_size)?;
    if arch.in_channels != STATE_CHANNELS || arch.out_channels != OUTPUT_CHANNELS {
        return Err(Error::Config(format!(
            "denoiser training needs a {STATE_CHANNELS}-in/{OUTPUT_CHANNELS}-out network, \
             got {}-in/{}-out",
            arch.in_channels, arch.out_channels
        )));
    }
    if config.schedule.t_max != arch.t_max {
        return Err(Error::Config(format!(
            "schedule covers t in [1, {}] but the network embeds t in [1, {}]",
            config.schedule.t_max, arch.t_max
        )));
    }
    let schedule = config.schedule.build()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }

    let mut rng = rng_from(derive_seed(config.seed, "train-denoiser"));
    let (denoiser, mut params) = Denoiser::new(arch.clone(), &mut rng)?;
    let mut adam = Adam::new(config.learning_rate, params.len());
    let mut grads = vec![0.0; params.len()];
    let mut last_good = params.clone();
    let mut history = Vec::with_capacity(config.iterations);

    let info = CheckpointInfo {
        kind: DENOISER_KIND.to_string(),
        arch: arch.clone(),
        schedule: config.schedule,
        channel_weights: config.weights,
        train_config_hash: config.hash(),
        seed: config.seed,
        param_count: 0,
        param_sha256: String::new(),
    };

    let diverged = |iter: usize,
                    detail: String,
                    last_good: &[f64],
                    history: &[LossRow]|
     -> Error {
        let mut msg = format!("denoiser training diverged at iteration {iter}: {detail}");
        if let Some(dir) = out_dir {
            match write_checkpoint(dir, "denoiser-last-good.ckpt", &info, last_good) {
                Ok(path) => msg.push_str(&format!("; last good checkpoint at {}", path.display())),
                Err(e) => msg.push_str(&format!("; failed to save last good checkpoint: {e}")),
            }
            let _ = write_loss_csv(&dir.join("denoiser-loss.csv"), history);
        }
        Error::Numeric(msg)
    };

    for iter in 1..=config.iterations {
        let batch = sample_noised_batch(dataset, config.batch_size, &schedule, &mut rng);
        let mut input = batch.xt.clone();
        config.weights.apply_batch(&mut input);

        let step = (|| -> Result<(f64, f64, Array4<f64>, crate::models::denoiser::DenoiserCache)> {
            let (raw, cache) = denoiser.forward_cached(&params, &input, &batch.ts)?;
            let (eps_hat, v_raw) = split_raw_output(&raw);
            let (simple, g_eps) = simple_loss_grad(&eps_hat, &batch.eps)?;
            let vlb = vlb_term(&batch.x0, &batch.xt, &eps_hat, &v_raw, &batch.ts, &schedule)?;
            let mut g_raw = Array4::<f64>::zeros(raw.raw_dim());
            g_raw.slice_mut(s![.., 0..STATE_CHANNELS, .., ..]).assign(&g_eps);
            g_raw
                .slice_mut(s![.., STATE_CHANNELS.., .., ..])
                .assign(&(&vlb.grad_v_raw * config.lambda_vlb));
            Ok((simple, vlb.value, g_raw, cache))
        })();
        let (simple, vlb_value, g_raw, cache) = match step {
            Ok(v) => v,
            Err(Error::Numeric(detail)) => {
                let detail = format!("{detail} (records {:?}, timesteps {:?})", batch.ids, batch.ts);
                return Err(diverged(iter, detail, &last_good, &history));
            }
            Err(e) => return Err(e),
        };
        let total = hybrid_loss(simple, vlb_value, config.lambda_vlb);
        if !total.is_finite() {
            let detail = format!(
                "non-finite loss {total} (records {:?}, timesteps {:?})",
                batch.ids, batch.ts
            );
            return Err(diverged(iter, detail, &last_good, &history));
        }

        // These parameters just produced a finite loss; they are what a
        // divergence abort should preserve, not the post-update state.
        last_good.copy_from_slice(&params);
        grads.fill(0.0);
        denoiser.backward(&params, &cache, &g_raw, Some(&mut grads));
        let norm = clip_grad_norm(&mut grads, GRAD_CLIP_NORM);
        if !norm.is_finite() {
            let detail = format!("non-finite gradient norm {norm}");
            return Err(diverged(iter, detail, &last_good, &history));
        }
        adam.step(&mut params, &grads);
        history.push(LossRow {
            iteration: iter,
            simple,
            vlb: vlb_value,
            total,
        });

        if let (Some(dir), Some(every)) = (out_dir, config.checkpoint_every) {
            if iter % every == 0 && iter != config.iterations {
                write_checkpoint(dir, &format!("denoiser-iter-{iter:06}.ckpt"), &info, &params)?;
            }
        }
    }

    if let Some(dir) = out_dir {
        write_checkpoint(dir, "denoiser.ckpt", &info, &params)?;
        write_loss_csv(&dir.join("denoiser-loss.csv"), &history)?;
    }
    Ok(TrainedDenoiser {
        denoiser,
        params,
        history,
    })
}

/// Trains the guidance classifier on noisy weighted triplets with uniformly
/// sampled timesteps, mirroring the denoiser's input distribution.
///
/// File layout under `out_dir` mirrors [`train_denoiser`] with a
/// `classifier` prefix.
pub fn train_classifier(
    dataset: &[LabeledTriplet],
    arch: &ClassifierConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainedClassifier> {
    config.validate()?;
    arch.validate()?;
    check_dataset(dataset, arch.image_size)?;
    if arch.in_channels != STATE_CHANNELS {
        return Err(Error::Config(format!(
            "guidance classifier consumes the full {STATE_CHANNELS}-channel state, got in_channels {}",
            arch.in_channels
        )));
    }
    if config.schedule.t_max != arch.t_max {
        return Err(Error::Config(format!(
            "schedule covers t in [1, {}] but the network embeds t in [1, {}]",
            config.schedule.t_max, arch.t_max
        )));
    }
    let classes: std::collections::BTreeSet<usize> =
        dataset.iter().map(|d| d.label.index()).collect();
    if classes.len() < NUM_CLASSES {
        return Err(Error::Dataset(format!(
            "classifier training needs both classes, dataset has only {:?}",
            dataset[0].label
        )));
    }
    let schedule = config.schedule.build()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }

    let mut rng = rng_from(derive_seed(config.seed, "train-classifier"));
    let (classifier, mut params) = ClassifierHead::new(arch.clone(), &mut rng)?;
    let mut adam = Adam::new(config.learning_rate, params.len());
    let mut grads = vec![0.0; params.len()];
    let mut last_good = params.clone();
    let mut history = Vec::with_capacity(config.iterations);

    let info = CheckpointInfo {
        kind: GUIDANCE_CLASSIFIER_KIND.to_string(),
        arch: arch.clone(),
        schedule: config.schedule,
        channel_weights: config.weights,
        train_config_hash: config.hash(),
        seed: config.seed,
        param_count: 0,
        param_sha256: String::new(),
    };

    let diverged = |iter: usize,
                    detail: String,
                    last_good: &[f64],
                    history: &[ClassifierLossRow]|
     -> Error {
        let mut msg = format!("classifier training diverged at iteration {iter}: {detail}");
        if let Some(dir) = out_dir {
            match write_checkpoint(dir, "classifier-last-good.ckpt", &info, last_good) {
                Ok(path) => msg.push_str(&format!("; last good checkpoint at {}", path.display())),
                Err(e) => msg.push_str(&format!("; failed to save last good checkpoint: {e}")),
            }
            let _ = write_classifier_loss_csv(&dir.join("classifier-loss.csv"), history);
        }
        Error::Numeric(msg)
    };

    for iter in 1..=config.iterations {
        let batch = sample_noised_batch(dataset, config.batch_size, &schedule, &mut rng);
        let mut input = batch.xt.clone();
        config.weights.apply_batch(&mut input);

        let (logits, cache) = match classifier.forward_logits_cached(&params, &input, &batch.ts) {
            Ok(v) => v,
            Err(Error::Numeric(detail)) => {
                return Err(diverged(iter, detail, &last_good, &history));
            }
            Err(e) => return Err(e),
        };
        let ls = log_softmax(&logits);
        let n = config.batch_size as f64;
        let mut loss = 0.0;
        let mut g_logits = ls.mapv(f64::exp);
        for (i, &y) in batch.labels.iter().enumerate() {
            loss -= ls[[i, y]] / n;
            g_logits[[i, y]] -= 1.0;
        }
        g_logits /= n;
        if !loss.is_finite() {
            let detail = format!(
                "non-finite loss {loss} (records {:?}, timesteps {:?})",
                batch.ids, batch.ts
            );
            return Err(diverged(iter, detail, &last_good, &history));
        }

        last_good.copy_from_slice(&params);
        grads.fill(0.0);
        classifier.backward_from_logits(&params, &cache, &g_logits, Some(&mut grads));
        let norm = clip_grad_norm(&mut grads, GRAD_CLIP_NORM);
        if !norm.is_finite() {
            return Err(diverged(iter, format!("non-finite gradient norm {norm}"), &last_good, &history));
        }
        adam.step(&mut params, &grads);
        history.push(ClassifierLossRow { iteration: iter, loss });

        if let (Some(dir), Some(every)) = (out_dir, config.checkpoint_every) {
            if iter % every == 0 && iter != config.iterations {
                write_checkpoint(dir, &format!("classifier-iter-{iter:06}.ckpt"), &info, &params)?;
            }
        }
    }

    if let Some(dir) = out_dir {
        write_checkpoint(dir, "classifier.ckpt", &info, &params)?;
        write_classifier_loss_csv(&dir.join("classifier-loss.csv"), &history)?;
    }
    Ok(TrainedClassifier {
        classifier,
        params,
        history,
    })
}
