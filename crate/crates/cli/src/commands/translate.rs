//! Image-to-image translation: re-noise source phantoms to an intermediate
//! timestep and run the guided reverse chain back down, emitting a synthetic
//! dataset (images plus masks) alongside a per-sample trajectory summary.

use std::path::PathBuf;

use clap::Args;
use macdm::models::checkpoint::GUIDANCE_CLASSIFIER_KIND;
use macdm::phantom::Label;
use macdm::sampling::translate_batch;
use macdm::{Error, Result};
use serde::Serialize;

use crate::config::{parse_label, set, RunConfig};
use crate::manifest::{with_atomic_dir, Runner};

use super::{
    check_weight_compatibility, load_classifier_input, load_dataset_input, load_denoiser_input,
    save_dataset_output,
};

#[derive(Args, Debug)]
pub struct TranslateArgs {
    /// Source dataset directory (reads manifest.json and referenced PNGs).
    #[arg(long)]
    pub data: PathBuf,

    /// Trained denoiser checkpoint. Its sidecar fixes the noise schedule
    /// and channel weights for sampling; config values are ignored.
    #[arg(long)]
    pub denoiser: PathBuf,

    /// Optional guidance classifier checkpoint; required when
    /// gradient-scale is positive.
    #[arg(long)]
    pub classifier: Option<PathBuf>,

    /// Output dataset directory; must not already exist.
    #[arg(long)]
    pub out: PathBuf,

    /// TOML config file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Root seed (overrides config).
    #[arg(long)]
    pub seed: Option<u64>,

    /// Target class for the synthetic records: "normal" or "cml".
    #[arg(long)]
    pub target: Option<String>,

    /// Intermediate timestep the sources are re-noised to (1..=t_max).
    #[arg(long)]
    pub start_step: Option<usize>,

    /// Classifier-guidance strength; 0 disables guidance.
    #[arg(long)]
    pub gradient_scale: Option<f64>,

    /// Number of deterministic sampling steps across the full schedule.
    #[arg(long)]
    pub ddim_steps: Option<usize>,

    /// Stochasticity knob in [0, 1]; 0 is fully deterministic.
    #[arg(long)]
    pub eta: Option<f64>,

    /// Translate only the first N eligible sources (0 = all).
    #[arg(long)]
    pub count: Option<usize>,

    /// Accept sources of any class, not just the non-target class.
    #[arg(long)]
    pub allow_any_source: bool,

    /// Disable clamping of the predicted clean state during sampling.
    #[arg(long)]
    pub no_clip_x0: bool,
}

/// One row of the trajectory summary written next to the synthetic dataset.
#[derive(Serialize)]
struct SampleSummary {
    id: String,
    source_id: String,
    steps: usize,
    max_guidance_norm: f64,
}

#[derive(Serialize)]
struct TranslateSummary {
    target: Label,
    start_step: usize,
    gradient_scale: f64,
    ddim_steps: usize,
    eta: f64,
    seed: u64,
    source_count: usize,
    samples: Vec<SampleSummary>,
}

pub fn run(args: TranslateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    set(&mut cfg.seed, args.seed);
    set(&mut cfg.translate.target, args.target.clone());
    set(&mut cfg.translate.start_step, args.start_step);
    set(&mut cfg.translate.gradient_scale, args.gradient_scale);
    set(&mut cfg.translate.ddim_steps, args.ddim_steps);
    set(&mut cfg.translate.eta, args.eta);
    set(&mut cfg.translate.count, args.count);
    if args.no_clip_x0 {
        cfg.translate.clip_x0 = false;
    }
    cfg.validate()?;

    let target = parse_label(&cfg.translate.target)?;
    if cfg.translate.gradient_scale > 0.0 && args.classifier.is_none() {
        return Err(Error::Config(
            "gradient-scale is positive but no --classifier was given; \
             pass one or set --gradient-scale 0"
                .into(),
        ));
    }

    with_atomic_dir(&args.out, |tmp| {
        let mut runner = Runner::new("translate", &cfg);
        let (manifest, records) = load_dataset_input(&mut runner, "source-data", &args.data)?;
        let (denoiser, d_params, d_info) =
            load_denoiser_input(&mut runner, "denoiser", &args.denoiser)?;

        let classifier = match &args.classifier {
            Some(path) => {
                let (head, c_params, c_info) = load_classifier_input(
                    &mut runner,
                    "classifier",
                    path,
                    GUIDANCE_CLASSIFIER_KIND,
                )?;
                check_weight_compatibility(&d_info, &c_info)?;
                Some((head, c_params))
            }
            None => None,
        };

        // The checkpoint sidecar, not the config, is the source of truth for
        // the schedule and channel weights the denoiser was trained under.
        let schedule = d_info.schedule.build()?;
        let spec = cfg.guidance_spec(d_info.channel_weights)?;

        let mut sources: Vec<_> = if args.allow_any_source {
            records.iter().collect()
        } else {
            records.iter().filter(|r| r.label != target).collect()
        };
        if sources.is_empty() {
            return Err(Error::Dataset(format!(
                "no eligible source records for target {target:?} in {}",
                args.data.display()
            )));
        }
        if cfg.translate.count > 0 {
            sources.truncate(cfg.translate.count);
        }

        let inputs: Vec<_> = sources.iter().map(|r| (*r).clone()).collect();
        let results = translate_batch(
            &inputs,
            &denoiser,
            &d_params,
            classifier
                .as_ref()
                .map(|(h, p)| (h, p.as_slice())),
            &spec,
            &schedule,
            args.allow_any_source,
        )?;

        let tag = cfg.translate.target.to_lowercase();
        let mut out_records = Vec::with_capacity(results.len());
        let mut samples = Vec::with_capacity(results.len());
        for (i, (result, source)) in results.into_iter().zip(&inputs).enumerate() {
            let id = format!("syn-{tag}-{i:04}");
            samples.push(SampleSummary {
                id: id.clone(),
                source_id: source.id.clone(),
                steps: result.trajectory.steps.len(),
                max_guidance_norm: result
                    .trajectory
                    .steps
                    .iter()
                    .map(|s| s.guidance_norm)
                    .fold(0.0, f64::max),
            });
            out_records.push(result.into_labeled_triplet(id)?);
        }

        save_dataset_output(
            &mut runner,
            "dataset",
            tmp,
            "",
            &out_records,
            manifest.resolution,
            cfg.seed,
        )?;

        let summary = TranslateSummary {
            target,
            start_step: spec.start_step,
            gradient_scale: spec.gradient_scale,
            ddim_steps: spec.ddim_steps,
            eta: spec.eta,
            seed: spec.seed,
            source_count: inputs.len(),
            samples,
        };
        let summary_path = tmp.join("translate-summary.json");
        std::fs::write(&summary_path, serde_json::to_vec_pretty(&summary)?)?;
        let sha = crate::manifest::sha256_file(&summary_path)?;
        runner.record_output("translate-summary", "translate-summary.json", sha);

        println!(
            "translated {} source(s) to {} synthetic record(s) targeting {tag}",
            inputs.len(),
            out_records.len()
        );
        Ok(runner)
    })
}
