//! Guided reverse-process sampling: classifier-corrected noise prediction,
//! ancestral and implicit (DDIM) stepping, intermediate-step translation of
//! labeled triplets, and full-chain generation from pure noise.
//!
//! The sampler state is the *unweighted* three-channel triplet in symmetric
//! range; channel weights are applied only when a network consumes the
//! state. The classifier gradient is taken with respect to that weighted
//! input and applied to all three channels as-is.

use ndarray::{s, Array2, Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, ValueRange};
use crate::models::{
    split_raw_output, ChannelWeights, ClassifierHead, Denoiser, DenoiserOutput, STATE_CHANNELS,
};
use crate::phantom::{Label, LabeledTriplet};
use crate::rng::{derive_seed, rng_from};
use crate::schedule::NoiseSchedule;

/// Desk-scale defaults for the implicit sampler.
pub const DEFAULT_DDIM_STEPS: usize = 50;

/// Everything a guided sampling request needs besides the networks.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GuidanceSpec {
    /// Class the gradient correction steers toward.
    pub target_class: Label,
    /// Guidance strength g; 0 disables the classifier entirely.
    pub gradient_scale: f64,
    /// Forward-noising depth Z: translation injects noise to this step and
    /// denoises back. 0 is a pass-through; t_max is a full chain.
    pub start_step: usize,
    /// Number of implicit sampling steps across [1, Z].
    pub ddim_steps: usize,
    /// DDIM stochasticity in [0, 1]; 0 is deterministic.
    pub eta: f64,
    pub weights: ChannelWeights,
    /// Clamp the decoded clean state to [-1, 1] each step.
    pub clip_x0: bool,
    pub seed: u64,
}

impl GuidanceSpec {
    /// Deterministic unguided defaults toward `target_class`.
    pub fn new(target_class: Label, start_step: usize) -> Self {
        GuidanceSpec {
            target_class,
            gradient_scale: 0.0,
            start_step,
            ddim_steps: DEFAULT_DDIM_STEPS,
            eta: 0.0,
            weights: ChannelWeights::default(),
            clip_x0: true,
            seed: 0,
        }
    }

    pub fn validate(&self, t_max: usize) -> Result<()> {
        if self.start_step > t_max {
            return Err(Error::Config(format!(
                "start_step {} exceeds schedule range {t_max}",
                self.start_step
            )));
        }
        if self.start_step >= 1 && self.ddim_steps == 0 {
            return Err(Error::Config(
                "ddim_steps must be at least 1 when start_step >= 1".into(),
            ));
        }
        if !(self.gradient_scale >= 0.0) {
            return Err(Error::Config(format!(
                "gradient_scale must be non-negative, got {}",
                self.gradient_scale
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!(
                "eta must lie in [0, 1], got {}",
                self.eta
            )));
        }
        self.weights.validate()
    }
}

/// Per-step trajectory record: the step pair and the L2 norm of the
/// guidance correction applied to the noise prediction.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub t_prev: usize,
    pub guidance_norm: f64,
}

/// How a sample came to be: enough to replay or audit the trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryMetadata {
    pub target_class: Label,
    pub gradient_scale: f64,
    pub start_step: usize,
    pub eta: f64,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
}

/// One generated triplet: unit-range image, binary masks, and the
/// trajectory that produced them.
#[derive(Debug, Clone)]
pub struct SampleResult {
    pub image: ImageTensor,
    pub bone_mask: Array2<f64>,
    pub lesion_mask: Array2<f64>,
    pub target_class: Label,
    pub trajectory: TrajectoryMetadata,
}

impl SampleResult {
    /// Repackages the sample as a dataset record with synthetic provenance.
    /// Fails for a normal-targeted sample whose lesion mask came out
    /// non-empty (the record invariant "normal implies no lesion" holds for
    /// datasets, not for raw sampler output).
    pub fn into_labeled_triplet(self, id: String) -> Result<LabeledTriplet> {
        LabeledTriplet::new(
            self.image,
            self.bone_mask,
            self.lesion_mask,
            self.target_class,
            id,
            crate::phantom::Provenance::Synthetic,
        )
    }
}

fn check_channel_shape(name: &str, a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?} ({name})", a.dim()),
            got: format!("{:?}", b.dim()),
        });
    }
    Ok(())
}

/// Classifier-guided noise correction:
/// `eps_bar = eps_hat - sqrt(1 - alpha_bar_t) * g * grad`.
pub fn guided_eps(
    eps_hat: &Array3<f64>,
    grad: &Array3<f64>,
    t: usize,
    gradient_scale: f64,
    schedule: &NoiseSchedule,
) -> Result<Array3<f64>> {
    schedule.check_t(t)?;
    check_channel_shape("grad vs eps_hat", eps_hat, grad)?;
    if !(gradient_scale >= 0.0) {
        return Err(Error::Config(format!(
            "gradient_scale must be non-negative, got {gradient_scale}"
        )));
    }
    if gradient_scale == 0.0 {
        return Ok(eps_hat.clone());
    }
    let coeff = guidance_coefficient(t, gradient_scale, schedule);
    let out = eps_hat + &(grad * coeff);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "non-finite guided noise prediction".into(),
        ));
    }
    Ok(out)
}

/// The scalar multiplying the classifier gradient at step t (negative:
/// guidance pushes the noise estimate against the class gradient).
fn guidance_coefficient(t: usize, gradient_scale: f64, schedule: &NoiseSchedule) -> f64 {
    -(1.0 - schedule.alpha_bar(t)).sqrt() * gradient_scale
}

/// One ancestral reverse step t -> t-1 with learned per-pixel variance.
///
/// The mean is the noise-parameterized posterior mean
/// `(xt - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)`; the
/// standard deviation interpolates between beta_t (v = 1) and the clipped
/// posterior variance (v = 0) in log space. At t = 1 the mean is returned
/// with no noise.
pub fn ddpm_step(
    xt: &Array3<f64>,
    output: &DenoiserOutput,
    t: usize,
    noise: &Array3<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array3<f64>> {
    schedule.check_t(t)?;
    check_channel_shape("eps_hat vs xt", xt, &output.eps_hat)?;
    check_channel_shape("v vs xt", xt, &output.v)?;
    check_channel_shape("noise vs xt", xt, noise)?;

    let ab = schedule.alpha_bar(t);
    let beta = schedule.beta(t);
    let mean_eps_coeff = beta / (1.0 - ab).sqrt();
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let mut out = (xt - &(&output.eps_hat * mean_eps_coeff)) * inv_sqrt_alpha;
    if t > 1 {
        let log_beta = beta.ln();
        let log_tilde = schedule.log_posterior_variance_clipped(t);
        ndarray::Zip::from(&mut out)
            .and(&output.v)
            .and(noise)
            .for_each(|o, &v, &z| {
                let sigma = (0.5 * (v * log_beta + (1.0 - v) * log_tilde)).exp();
                *o += sigma * z;
            });
    }
    Ok(out)
}

/// Scalar coefficients (x0, eps, sigma) of a DDIM step from t to t_prev.
fn ddim_coefficients(
    t: usize,
    t_prev: usize,
    eta: f64,
    schedule: &NoiseSchedule,
) -> Result<(f64, f64, f64)> {
    schedule.check_t(t)?;
    if t_prev >= t {
        return Err(Error::Config(format!(
            "implicit step requires t_prev < t, got {t_prev} >= {t}"
        )));
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let sigma = eta
        * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt()
        * (1.0 - ab_t / ab_prev).max(0.0).sqrt();
    let eps_coeff = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    Ok((ab_prev.sqrt(), eps_coeff, sigma))
}

/// One implicit reverse step t -> t_prev:
/// `sqrt(ab_prev) * x0_hat + sqrt(1 - ab_prev - sigma^2) * eps + sigma * z`
/// with `sigma = eta * sqrt((1-ab_prev)/(1-ab_t)) * sqrt(1 - ab_t/ab_prev)`.
///
/// `noise` is only consumed (and only required) when `eta > 0` and
/// `t_prev > 0`. With `clip_x0` the decoded clean state is clamped to
/// [-1, 1] and the noise direction re-derived from the clamped state.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    xt: &Array3<f64>,
    output: &DenoiserOutput,
    t: usize,
    t_prev: usize,
    eta: f64,
    noise: Option<&Array3<f64>>,
    clip_x0: bool,
    schedule: &NoiseSchedule,
) -> Result<Array3<f64>> {
    check_channel_shape("eps_hat vs xt", xt, &output.eps_hat)?;
    let (c_x0, c_eps, sigma) = ddim_coefficients(t, t_prev, eta, schedule)?;
    let ab_t = schedule.alpha_bar(t);
    let (sq_ab, sq_om) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());

    let mut x0_hat = (xt - &(&output.eps_hat * sq_om)) / sq_ab;
    let eps_dir = if clip_x0 {
        x0_hat.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        (xt - &(&x0_hat * sq_ab)) / sq_om
    } else {
        output.eps_hat.clone()
    };

    let mut out = &x0_hat * c_x0 + &(&eps_dir * c_eps);
    if sigma > 0.0 && t_prev > 0 {
        let z = noise.ok_or_else(|| {
            Error::Config("stochastic implicit step needs a noise sample".into())
        })?;
        check_channel_shape("noise vs xt", xt, z)?;
        out += &(z * sigma);
    }
    Ok(out)
}

/// Uniform-stride step subset over [1, z], ascending and deduplicated.
/// `z = 0` yields an empty sequence (nothing to denoise).
pub fn ddim_step_sequence(z: usize, steps: usize) -> Vec<usize> {
    if z == 0 || steps == 0 {
        return Vec::new();
    }
    if steps >= z {
        return (1..=z).collect();
    }
    if steps == 1 {
        return vec![z];
    }
    let mut seq = Vec::with_capacity(steps);
    for i in 0..steps {
        let f = 1.0 + (z - 1) as f64 * i as f64 / (steps - 1) as f64;
        let t = f.round() as usize;
        if seq.last() != Some(&t) {
            seq.push(t);
        }
    }
    seq
}

/// Guard that a denoiser/classifier pair can legally share a sampling run.
fn check_model_pair(
    denoiser: &Denoiser,
    classifier: Option<&ClassifierHead>,
    schedule: &NoiseSchedule,
) -> Result<()> {
    if denoiser.config.in_channels != STATE_CHANNELS
        || denoiser.config.out_channels != 2 * STATE_CHANNELS
    {
        return Err(Error::Config(format!(
            "sampling needs a {STATE_CHANNELS}-in/{}-out denoiser, got {}-in/{}-out",
            2 * STATE_CHANNELS,
            denoiser.config.in_channels,
            denoiser.config.out_channels
        )));
    }
    if denoiser.config.t_max != schedule.t_max() {
        return Err(Error::Config(format!(
            "denoiser embeds t in [1, {}] but the schedule covers [1, {}]",
            denoiser.config.t_max,
            schedule.t_max()
        )));
    }
    if let Some(c) = classifier {
        if c.config.image_size != denoiser.config.image_size {
            return Err(Error::Config(format!(
                "resolution mismatch: denoiser {}, classifier {}",
                denoiser.config.image_size, c.config.image_size
            )));
        }
        if c.config.t_max != denoiser.config.t_max {
            return Err(Error::Config(format!(
                "timestep range mismatch: denoiser {}, classifier {}",
                denoiser.config.t_max, c.config.t_max
            )));
        }
        if c.config.in_channels != STATE_CHANNELS {
            return Err(Error::Config(format!(
                "guidance classifier must consume {STATE_CHANNELS} channels, has {}",
                c.config.in_channels
            )));
        }
    }
    Ok(())
}

/// Runs the guided implicit chain on a batch of unweighted states starting
/// at `start_step`, consuming `rng` for any stochastic noise. Returns the
/// final states (nominally clean, symmetric range) and per-step records.
#[allow(clippy::too_many_arguments)]
fn guided_ddim_chain(
    denoiser: &Denoiser,
    d_params: &[f64],
    classifier: Option<(&ClassifierHead, &[f64])>,
    mut state: Array4<f64>,
    spec: &GuidanceSpec,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(Array4<f64>, Vec<StepRecord>)> {
    let n = state.dim().0;
    let seq = ddim_step_sequence(spec.start_step, spec.ddim_steps);
    let mut records = Vec::with_capacity(seq.len());
    let y = spec.target_class.index();

    for k in (0..seq.len()).rev() {
        let t = seq[k];
        let t_prev = if k == 0 { 0 } else { seq[k - 1] };
        let ts = vec![t; n];

        let mut input = state.clone();
        spec.weights.apply_batch(&mut input);
        let raw = denoiser.forward_raw(d_params, &input, &ts)?;
        let (mut eps_hat, _) = split_raw_output(&raw);

        let mut guidance_norm = 0.0;
        if spec.gradient_scale > 0.0 {
            let (head, c_params) = classifier.ok_or_else(|| {
                Error::Config("guidance requested but no classifier supplied".into())
            })?;
            let grad = head.input_gradient_batch(c_params, &input, &ts, &vec![y; n])?;
            let coeff = guidance_coefficient(t, spec.gradient_scale, schedule);
            let correction = &grad * coeff;
            guidance_norm = correction.iter().map(|v| v * v).sum::<f64>().sqrt();
            eps_hat += &correction;
            if eps_hat.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite guided noise prediction at t={t}"
                )));
            }
        }

        let (c_x0, c_eps, sigma) = ddim_coefficients(t, t_prev, spec.eta, schedule)?;
        let ab_t = schedule.alpha_bar(t);
        let (sq_ab, sq_om) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
        let mut x0_hat = (&state - &(&eps_hat * sq_om)) / sq_ab;
        let eps_dir = if spec.clip_x0 {
            x0_hat.mapv_inplace(|v| v.clamp(-1.0, 1.0));
            (&state - &(&x0_hat * sq_ab)) / sq_om
        } else {
            eps_hat
        };
        state = &x0_hat * c_x0 + &(&eps_dir * c_eps);
        if sigma > 0.0 && t_prev > 0 {
            let z = Array4::from_shape_fn(state.raw_dim(), |_| {
                rng.sample::<f64, _>(StandardNormal)
            });
            state += &(&z * sigma);
        }
        records.push(StepRecord {
            t,
            t_prev,
            guidance_norm,
        });
    }
    Ok((state, records))
}

/// Converts one final chain state into a sample: image channel mapped back
/// to [0, 1] (clamped), mask channels binarized at the symmetric midpoint.
fn state_to_sample(
    state: ndarray::ArrayView3<f64>,
    spec: &GuidanceSpec,
    steps: Vec<StepRecord>,
) -> SampleResult {
    let image = state
        .slice(s![0, .., ..])
        .mapv(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0));
    let binarize = |ch: usize| -> Array2<f64> {
        state
            .slice(s![ch, .., ..])
            .mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })
    };
    SampleResult {
        image: ImageTensor::from_parts(image, ValueRange::UNIT),
        bone_mask: binarize(1),
        lesion_mask: binarize(2),
        target_class: spec.target_class,
        trajectory: TrajectoryMetadata {
            target_class: spec.target_class,
            gradient_scale: spec.gradient_scale,
            start_step: spec.start_step,
            eta: spec.eta,
            seed: spec.seed,
            steps,
        },
    }
}

/// Intermediate-step translation of a batch of records: forward-noise the
/// triplets to `start_step`, then run the guided implicit chain back to 0.
/// All inputs must be class-normal unless `allow_any_source` is set. With
/// `start_step = 0` each record passes through untouched.
#[allow(clippy::too_many_arguments)]
pub fn translate_batch(
    inputs: &[LabeledTriplet],
    denoiser: &Denoiser,
    d_params: &[f64],
    classifier: Option<(&ClassifierHead, &[f64])>,
    spec: &GuidanceSpec,
    schedule: &NoiseSchedule,
    allow_any_source: bool,
) -> Result<Vec<SampleResult>> {
    let t_max = schedule.t_max();
    spec.validate(t_max)?;
    check_model_pair(denoiser, classifier.map(|(c, _)| c), schedule)?;
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    for item in inputs {
        if !allow_any_source && item.label != Label::Normal {
            return Err(Error::Config(format!(
                "translation source \"{}\" is {} (only normal inputs are translated by default)",
                item.id, item.label
            )));
        }
        let (h, w) = (item.image.height(), item.image.width());
        if h != denoiser.config.image_size || w != denoiser.config.image_size {
            return Err(Error::ShapeMismatch {
                expected: format!(
                    "{0}x{0} (network input, record \"{1}\")",
                    denoiser.config.image_size, item.id
                ),
                got: format!("{h}x{w}"),
            });
        }
    }

    // Degenerate pass-through: no noise in, no steps run.
    if spec.start_step == 0 {
        return Ok(inputs
            .iter()
            .map(|item| SampleResult {
                image: item.image.clone(),
                bone_mask: item.bone_mask.clone(),
                lesion_mask: item.lesion_mask.clone(),
                target_class: spec.target_class,
                trajectory: TrajectoryMetadata {
                    target_class: spec.target_class,
                    gradient_scale: spec.gradient_scale,
                    start_step: 0,
                    eta: spec.eta,
                    seed: spec.seed,
                    steps: Vec::new(),
                },
            })
            .collect());
    }

    let n = inputs.len();
    let size = denoiser.config.image_size;
    let mut rng = rng_from(derive_seed(spec.seed, "translate"));

    // Forward-noise every channel to the start step via the closed form.
    let z = spec.start_step;
    let ab = schedule.alpha_bar(z);
    let (ca, ce) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut state = Array4::<f64>::zeros((n, STATE_CHANNELS, size, size));
    for (i, item) in inputs.iter().enumerate() {
        let x0 = item.to_symmetric_state();
        let eps = Array3::from_shape_fn(x0.raw_dim(), |_| rng.sample::<f64, _>(StandardNormal));
        state
            .slice_mut(s![i, .., .., ..])
            .assign(&(&x0 * ca + &(&eps * ce)));
    }

    let (finals, records) = guided_ddim_chain(
        denoiser, d_params, classifier, state, spec, schedule, &mut rng,
    )?;
    Ok((0..n)
        .map(|i| state_to_sample(finals.index_axis(ndarray::Axis(0), i), spec, records.clone()))
        .collect())
}

/// Single-record convenience wrapper over [`translate_batch`].
#[allow(clippy::too_many_arguments)]
pub fn translate(
    input: &LabeledTriplet,
    denoiser: &Denoiser,
    d_params: &[f64],
    classifier: Option<(&ClassifierHead, &[f64])>,
    spec: &GuidanceSpec,
    schedule: &NoiseSchedule,
    allow_any_source: bool,
) -> Result<SampleResult> {
    let mut out = translate_batch(
        std::slice::from_ref(input),
        denoiser,
        d_params,
        classifier,
        spec,
        schedule,
        allow_any_source,
    )?;
    Ok(out.pop().expect("one input yields one sample"))
}

/// Full-chain generation from pure noise: requires `start_step == t_max`
/// so the chain covers the whole schedule. Guidance applies when
/// `gradient_scale > 0` and a classifier is supplied.
pub fn generate_unconditional(
    n: usize,
    denoiser: &Denoiser,
    d_params: &[f64],
    classifier: Option<(&ClassifierHead, &[f64])>,
    spec: &GuidanceSpec,
    schedule: &NoiseSchedule,
) -> Result<Vec<SampleResult>> {
    let t_max = schedule.t_max();
    spec.validate(t_max)?;
    if spec.start_step != t_max {
        return Err(Error::Config(format!(
            "full-chain generation requires start_step == {t_max}, got {}",
            spec.start_step
        )));
    }
    check_model_pair(denoiser, classifier.map(|(c, _)| c), schedule)?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let size = denoiser.config.image_size;
    let mut rng = rng_from(derive_seed(spec.seed, "generate"));
    let state = Array4::from_shape_fn((n, STATE_CHANNELS, size, size), |_| {
        rng.sample::<f64, _>(StandardNormal)
    });
    let (finals, records) = guided_ddim_chain(
        denoiser, d_params, classifier, state, spec, schedule, &mut rng,
    )?;
    Ok((0..n)
        .map(|i| state_to_sample(finals.index_axis(ndarray::Axis(0), i), spec, records.clone()))
        .collect())
}

#[cfg(test)]
mod tests;
