//! Run configuration with three precedence layers: built-in defaults,
//! overridden by an optional TOML file, overridden by command-line flags.
//! The resolved result is echoed verbatim into the run manifest, so a
//! manifest is always sufficient to re-execute the run.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use macdm::models::{ChannelWeights, ClassifierConfig, DenoiserConfig};
use macdm::rng::derive_seed;
use macdm::training::TrainConfig;
use macdm::{Error, EvalTrainConfig, GuidanceSpec, Label, Result, ScheduleKind, ScheduleSpec};

/// Phantom corpus generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    /// Normal records to generate.
    pub normal: usize,
    /// CML records to generate.
    pub cml: usize,
    /// Held-out test corpus sizes; only the full pipeline command uses
    /// them (single-corpus generation takes `normal`/`cml`).
    pub test_normal: usize,
    pub test_cml: usize,
    /// Square image edge length in pixels.
    pub resolution: usize,
    /// Stratified cross-validation folds to assign at generation time;
    /// 0 leaves records unassigned.
    pub folds: usize,
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection {
            normal: 100,
            cml: 100,
            test_normal: 50,
            test_cml: 50,
            resolution: 32,
            folds: 0,
        }
    }
}

/// Denoiser architecture and training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    /// Diffusion chain length T.
    pub t_max: usize,
    /// Schedule family: "linear" or "cosine".
    pub schedule: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub emb_dim: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_vlb: f64,
    /// Intermediate checkpoint cadence in iterations; 0 keeps only the
    /// final checkpoint.
    pub checkpoint_every: usize,
    /// Mask-channel conditioning weights applied at model inputs.
    pub weights: ChannelWeights,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        let spec = ScheduleSpec::linear(200);
        let train = TrainConfig::default();
        let arch = DenoiserConfig::default();
        DiffusionSection {
            t_max: spec.t_max,
            schedule: spec.kind,
            beta_start: spec.beta_start,
            beta_end: spec.beta_end,
            base_channels: arch.base_channels,
            channel_mults: arch.channel_mults,
            emb_dim: arch.emb_dim,
            iterations: train.iterations,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            lambda_vlb: train.lambda_vlb,
            checkpoint_every: 0,
            weights: ChannelWeights::default(),
        }
    }
}

/// Guidance classifier architecture and training settings. The noise
/// schedule and channel weights are shared with the `[diffusion]` section,
/// since both networks must see identically constructed inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceClassifierSection {
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub emb_dim: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for GuidanceClassifierSection {
    fn default() -> Self {
        let arch = ClassifierConfig::default();
        let train = TrainConfig::desk_classifier();
        GuidanceClassifierSection {
            base_channels: arch.base_channels,
            channel_mults: arch.channel_mults,
            emb_dim: arch.emb_dim,
            iterations: train.iterations,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
        }
    }
}

/// Image-to-image translation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslateSection {
    /// Target class: "cml" or "normal".
    pub target: String,
    /// Forward-noising depth Z; must not exceed the chain length.
    pub start_step: usize,
    /// Guidance strength g; 0 disables the classifier.
    pub gradient_scale: f64,
    /// Implicit sampling steps across [1, Z].
    pub ddim_steps: usize,
    /// Sampler stochasticity in [0, 1]; 0 is deterministic.
    pub eta: f64,
    /// Clamp the decoded clean state to [-1, 1] at each step.
    pub clip_x0: bool,
    /// Source records to translate; 0 means every normal record.
    pub count: usize,
}

impl Default for TranslateSection {
    fn default() -> Self {
        TranslateSection {
            target: "cml".to_string(),
            start_step: 160,
            gradient_scale: 40.0,
            ddim_steps: 50,
            eta: 0.0,
            clip_x0: true,
            count: 0,
        }
    }
}

/// Downstream evaluation settings: the clean-image classifier and the
/// lesion segmenter trained to score augmentation conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub emb_dim: usize,
    pub segmenter_iterations: usize,
    pub segmenter_learning_rate: f64,
    /// Cross-validation folds for classification evaluation.
    pub folds: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let base = EvalTrainConfig::default();
        EvalSection {
            iterations: 600,
            batch_size: base.batch_size,
            learning_rate: base.learning_rate,
            base_channels: base.base_channels,
            channel_mults: base.channel_mults,
            emb_dim: base.emb_dim,
            segmenter_iterations: 600,
            segmenter_learning_rate: 5e-4,
            folds: 5,
        }
    }
}

/// The complete resolved configuration for one run. Every stage derives
/// its randomness from the single root `seed` via keyed hashing, so two
/// runs with equal configs are bitwise-identical in deterministic mode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every stage fans out from it by purpose label.
    pub seed: u64,
    pub phantom: PhantomSection,
    pub diffusion: DiffusionSection,
    pub guidance_classifier: GuidanceClassifierSection,
    pub translate: TranslateSection,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Defaults, optionally overridden by a TOML file. Unknown keys are
    /// rejected so typos cannot silently fall back to defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(p) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", p.display())))
    }

    /// Cross-field validation. Collects every violation into one error so
    /// a bad config is fixed in one round trip, not one field at a time.
    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<String> = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                bad.push(msg);
            }
        };

        let p = &self.phantom;
        check(
            p.resolution >= macdm::phantom::generator::MIN_SIZE,
            format!(
                "phantom.resolution {} is below the minimum {}",
                p.resolution,
                macdm::phantom::generator::MIN_SIZE
            ),
        );
        check(
            p.normal + p.cml > 0,
            "phantom.normal + phantom.cml must be positive".into(),
        );
        check(
            p.test_normal >= 1 && p.test_cml >= 1,
            "phantom.test_normal and phantom.test_cml must each be at least 1".into(),
        );
        check(p.folds != 1, "phantom.folds must be 0 (none) or >= 2".into());

        let d = &self.diffusion;
        check(d.t_max >= 1, "diffusion.t_max must be at least 1".into());
        check(
            d.iterations >= 1,
            "diffusion.iterations must be positive".into(),
        );
        check(
            d.batch_size >= 1,
            "diffusion.batch_size must be positive".into(),
        );
        check(
            d.learning_rate > 0.0,
            format!(
                "diffusion.learning_rate must be positive, got {}",
                d.learning_rate
            ),
        );
        check(
            d.lambda_vlb >= 0.0,
            format!(
                "diffusion.lambda_vlb must be non-negative, got {}",
                d.lambda_vlb
            ),
        );
        check(
            !d.channel_mults.is_empty(),
            "diffusion.channel_mults must be non-empty".into(),
        );
        check(
            d.base_channels >= 1 && d.emb_dim >= 2 && d.emb_dim % 2 == 0,
            "diffusion.base_channels must be positive and emb_dim positive and even".into(),
        );
        for (name, w) in [
            ("w1", d.weights.w1),
            ("w2", d.weights.w2),
            ("w3", d.weights.w3),
        ] {
            check(
                w > 0.0 && w <= 1.0,
                format!("diffusion.weights.{name}={w} must be in (0, 1]"),
            );
        }
        let down = 1usize << d.channel_mults.len().saturating_sub(1);
        check(
            p.resolution % down == 0,
            format!(
                "phantom.resolution {} must be a multiple of the denoiser downsampling factor {down}",
                p.resolution
            ),
        );

        let g = &self.guidance_classifier;
        check(
            g.iterations >= 1 && g.batch_size >= 1,
            "guidance_classifier.iterations and batch_size must be positive".into(),
        );
        check(
            g.learning_rate > 0.0,
            format!(
                "guidance_classifier.learning_rate must be positive, got {}",
                g.learning_rate
            ),
        );
        check(
            !g.channel_mults.is_empty(),
            "guidance_classifier.channel_mults must be non-empty".into(),
        );

        let t = &self.translate;
        check(
            parse_label(&t.target).is_ok(),
            format!(
                "translate.target \"{}\" must be \"normal\" or \"cml\"",
                t.target
            ),
        );
        check(
            t.start_step <= d.t_max,
            format!(
                "translate.start_step {} exceeds diffusion.t_max {}",
                t.start_step, d.t_max
            ),
        );
        check(
            t.start_step == 0 || t.ddim_steps >= 1,
            "translate.ddim_steps must be positive when start_step > 0".into(),
        );
        check(
            (0.0..=1.0).contains(&t.eta),
            format!("translate.eta {} must be in [0, 1]", t.eta),
        );
        check(
            t.gradient_scale >= 0.0,
            format!(
                "translate.gradient_scale {} must be non-negative",
                t.gradient_scale
            ),
        );

        let e = &self.eval;
        check(
            e.iterations >= 1 && e.segmenter_iterations >= 1 && e.batch_size >= 1,
            "eval iteration and batch counts must be positive".into(),
        );
        check(
            e.learning_rate > 0.0 && e.segmenter_learning_rate > 0.0,
            "eval learning rates must be positive".into(),
        );
        check(e.folds >= 2, "eval.folds must be at least 2".into());
        check(
            !e.channel_mults.is_empty(),
            "eval.channel_mults must be non-empty".into(),
        );

        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn schedule_spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            kind: self.diffusion.schedule,
            t_max: self.diffusion.t_max,
            beta_start: self.diffusion.beta_start,
            beta_end: self.diffusion.beta_end,
        }
    }

    pub fn denoiser_arch(&self, resolution: usize) -> DenoiserConfig {
        DenoiserConfig {
            image_size: resolution,
            base_channels: self.diffusion.base_channels,
            channel_mults: self.diffusion.channel_mults.clone(),
            emb_dim: self.diffusion.emb_dim,
            t_max: self.diffusion.t_max,
            ..DenoiserConfig::default()
        }
    }

    pub fn diffusion_train(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.diffusion.iterations,
            batch_size: self.diffusion.batch_size,
            learning_rate: self.diffusion.learning_rate,
            lambda_vlb: self.diffusion.lambda_vlb,
            weights: self.diffusion.weights,
            schedule: self.schedule_spec(),
            seed: self.seed,
            checkpoint_every: match self.diffusion.checkpoint_every {
                0 => None,
                n => Some(n),
            },
        }
    }

    pub fn classifier_arch(&self, resolution: usize) -> ClassifierConfig {
        ClassifierConfig {
            in_channels: 3,
            image_size: resolution,
            base_channels: self.guidance_classifier.base_channels,
            channel_mults: self.guidance_classifier.channel_mults.clone(),
            emb_dim: self.guidance_classifier.emb_dim,
            t_max: self.diffusion.t_max,
        }
    }

    pub fn classifier_train(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.guidance_classifier.iterations,
            batch_size: self.guidance_classifier.batch_size,
            learning_rate: self.guidance_classifier.learning_rate,
            ..self.diffusion_train()
        }
    }

    /// Downstream-classifier training config; `label` namespaces the seed
    /// so distinct conditions and folds draw independent streams.
    pub fn eval_classifier_config(&self, label: &str) -> EvalTrainConfig {
        EvalTrainConfig {
            iterations: self.eval.iterations,
            batch_size: self.eval.batch_size,
            learning_rate: self.eval.learning_rate,
            base_channels: self.eval.base_channels,
            channel_mults: self.eval.channel_mults.clone(),
            emb_dim: self.eval.emb_dim,
            seed: derive_seed(self.seed, label),
        }
    }

    /// Segmenter training config, seed-namespaced like
    /// [`Self::eval_classifier_config`].
    pub fn eval_segmenter_config(&self, label: &str) -> EvalTrainConfig {
        EvalTrainConfig {
            iterations: self.eval.segmenter_iterations,
            learning_rate: self.eval.segmenter_learning_rate,
            ..self.eval_classifier_config(label)
        }
    }

    /// Sampling spec from the `[translate]` section. `weights` come from
    /// the denoiser checkpoint, never the config file, so sampling always
    /// matches the conditioning the network was trained with.
    pub fn guidance_spec(&self, weights: ChannelWeights) -> Result<GuidanceSpec> {
        let t = &self.translate;
        Ok(GuidanceSpec {
            target_class: parse_label(&t.target)?,
            gradient_scale: t.gradient_scale,
            start_step: t.start_step,
            ddim_steps: t.ddim_steps,
            eta: t.eta,
            weights,
            clip_x0: t.clip_x0,
            seed: self.seed,
        })
    }
}

/// Parses a class name as written in configs and flags.
pub fn parse_label(s: &str) -> Result<Label> {
    match s.to_ascii_lowercase().as_str() {
        "normal" => Ok(Label::Normal),
        "cml" => Ok(Label::Cml),
        other => Err(Error::Config(format!(
            "unknown class \"{other}\" (expected \"normal\" or \"cml\")"
        ))),
    }
}

/// Overwrites `dst` when a flag was given; the precedence glue between
/// config files and command lines.
pub fn set<T>(dst: &mut T, src: Option<T>) {
    if let Some(v) = src {
        *dst = v;
    }
}
