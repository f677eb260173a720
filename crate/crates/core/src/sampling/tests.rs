//! Sampler tests: analytic identities for the ancestral and implicit steps
//! (oracle noise predictions make both exactly invertible), guidance
//! neutrality and linearity, pass-through translation, seed reproducibility,
//! and the rejection paths for mismatched models and bad specs.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::diffusion::posterior_coefficients;
use crate::models::{ClassifierConfig, DenoiserConfig};
use crate::phantom::Provenance;
use crate::rng::{derive_seed, rng_from};
use crate::schedule::ScheduleSpec;

const T_MAX: usize = 10;
const SIZE: usize = 8;

fn schedule() -> NoiseSchedule {
    ScheduleSpec::linear(T_MAX).build().unwrap()
}

fn tiny_denoiser(seed: u64) -> (Denoiser, Vec<f64>) {
    let mut rng = rng_from(derive_seed(seed, "st-denoiser"));
    Denoiser::new(
        DenoiserConfig {
            image_size: SIZE,
            base_channels: 4,
            channel_mults: vec![1, 2],
            emb_dim: 8,
            t_max: T_MAX,
            ..DenoiserConfig::default()
        },
        &mut rng,
    )
    .unwrap()
}

fn tiny_classifier(seed: u64) -> (ClassifierHead, Vec<f64>) {
    let mut rng = rng_from(derive_seed(seed, "st-classifier"));
    ClassifierHead::new(
        ClassifierConfig {
            in_channels: STATE_CHANNELS,
            image_size: SIZE,
            base_channels: 4,
            channel_mults: vec![1, 2],
            emb_dim: 8,
            t_max: T_MAX,
        },
        &mut rng,
    )
    .unwrap()
}

fn randn3(rng: &mut impl Rng, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

/// Hand-built normal record with a plain two-band image and a box bone mask.
fn normal_record(id: &str) -> LabeledTriplet {
    let image = Array2::from_shape_fn((SIZE, SIZE), |(r, c)| {
        0.125 + 0.0625 * r as f64 + 0.015625 * c as f64
    });
    let bone = Array2::from_shape_fn((SIZE, SIZE), |(r, c)| {
        if (2..6).contains(&r) && (2..6).contains(&c) {
            1.0
        } else {
            0.0
        }
    });
    LabeledTriplet::new(
        ImageTensor::new(image, ValueRange::UNIT).unwrap(),
        bone,
        Array2::zeros((SIZE, SIZE)),
        Label::Normal,
        id.to_string(),
        Provenance::Phantom,
    )
    .unwrap()
}

fn cml_record(id: &str) -> LabeledTriplet {
    let base = normal_record(id);
    let mut lesion = Array2::zeros((SIZE, SIZE));
    lesion[[3, 3]] = 1.0;
    lesion[[3, 4]] = 1.0;
    LabeledTriplet::new(
        base.image,
        base.bone_mask,
        lesion,
        Label::Cml,
        id.to_string(),
        Provenance::Phantom,
    )
    .unwrap()
}

// ---------------------------------------------------------------- guided_eps

#[test]
fn zero_scale_or_zero_gradient_leaves_the_prediction_unchanged() {
    let mut rng = rng_from(derive_seed(1, "st-ge0"));
    let sched = schedule();
    let eps_hat = randn3(&mut rng, (3, SIZE, SIZE));
    let grad = randn3(&mut rng, (3, SIZE, SIZE));

    let out = guided_eps(&eps_hat, &grad, 5, 0.0, &sched).unwrap();
    assert_eq!(out, eps_hat);

    let out = guided_eps(&eps_hat, &Array3::zeros((3, SIZE, SIZE)), 5, 40.0, &sched).unwrap();
    assert_eq!(out, eps_hat);
}

#[test]
fn guidance_correction_is_linear_in_scale_and_matches_the_closed_form() {
    let mut rng = rng_from(derive_seed(2, "st-ge1"));
    let sched = schedule();
    let eps_hat = randn3(&mut rng, (3, SIZE, SIZE));
    let grad = randn3(&mut rng, (3, SIZE, SIZE));
    let t = 7;

    let g1 = guided_eps(&eps_hat, &grad, t, 1.5, &sched).unwrap();
    let g2 = guided_eps(&eps_hat, &grad, t, 3.0, &sched).unwrap();
    let d1 = &g1 - &eps_hat;
    let d2 = &g2 - &eps_hat;
    for (a, b) in d1.iter().zip(d2.iter()) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }

    let coeff = -(1.0 - sched.alpha_bar(t)).sqrt() * 1.5;
    let expected = &eps_hat + &(&grad * coeff);
    for (a, b) in g1.iter().zip(expected.iter()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn guided_eps_rejects_bad_arguments() {
    let mut rng = rng_from(derive_seed(3, "st-ge2"));
    let sched = schedule();
    let eps_hat = randn3(&mut rng, (3, SIZE, SIZE));
    let grad = randn3(&mut rng, (3, SIZE, SIZE));
    let small = randn3(&mut rng, (3, 4, 4));

    assert!(matches!(
        guided_eps(&eps_hat, &grad, 5, -1.0, &sched),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        guided_eps(&eps_hat, &small, 5, 1.0, &sched),
        Err(Error::ShapeMismatch { .. })
    ));
    assert!(guided_eps(&eps_hat, &grad, 0, 1.0, &sched).is_err());
    assert!(guided_eps(&eps_hat, &grad, T_MAX + 1, 1.0, &sched).is_err());
}

// ----------------------------------------------------------------- ddpm_step

#[test]
fn ancestral_step_at_the_final_step_is_noise_free() {
    let mut rng = rng_from(derive_seed(4, "st-dp0"));
    let sched = schedule();
    let xt = randn3(&mut rng, (3, SIZE, SIZE));
    let out = DenoiserOutput {
        eps_hat: randn3(&mut rng, (3, SIZE, SIZE)),
        v: Array3::from_elem((3, SIZE, SIZE), 0.5),
    };
    let noise = randn3(&mut rng, (3, SIZE, SIZE));

    let with_noise = ddpm_step(&xt, &out, 1, &noise, &sched).unwrap();
    let without = ddpm_step(&xt, &out, 1, &Array3::zeros((3, SIZE, SIZE)), &sched).unwrap();
    assert_eq!(with_noise, without);
}

#[test]
fn ancestral_mean_equals_the_posterior_mean_under_the_true_noise() {
    // With eps_hat equal to the actual forward noise, the noise-form mean
    // (xt - beta/sqrt(1-ab) eps)/sqrt(alpha) and the x0-form posterior mean
    // c0 x0 + ct xt are algebraically identical.
    let mut rng = rng_from(derive_seed(5, "st-dp1"));
    let sched = schedule();
    for t in [2usize, 5, T_MAX] {
        let x0 = randn3(&mut rng, (3, SIZE, SIZE)).mapv(|v| v.tanh());
        let eps = randn3(&mut rng, (3, SIZE, SIZE));
        let ab = sched.alpha_bar(t);
        let xt = &x0 * ab.sqrt() + &(&eps * (1.0 - ab).sqrt());

        let out = DenoiserOutput {
            eps_hat: eps.clone(),
            v: Array3::zeros((3, SIZE, SIZE)),
        };
        let got = ddpm_step(&xt, &out, t, &Array3::zeros((3, SIZE, SIZE)), &sched).unwrap();

        let (c0, ct, _) = posterior_coefficients(t, &sched).unwrap();
        let mean = &x0 * c0 + &(&xt * ct);
        for (a, b) in got.iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-10, "t={t}: {a} vs {b}");
        }
    }
}

#[test]
fn ancestral_variance_interpolates_between_posterior_and_beta() {
    let mut rng = rng_from(derive_seed(6, "st-dp2"));
    let sched = schedule();
    let t = 6;
    let xt = randn3(&mut rng, (3, SIZE, SIZE));
    let eps_hat = randn3(&mut rng, (3, SIZE, SIZE));
    let z = randn3(&mut rng, (3, SIZE, SIZE));
    let zero = Array3::zeros((3, SIZE, SIZE));

    for (v, expected_sigma) in [
        (0.0, sched.log_posterior_variance_clipped(t).exp().sqrt()),
        (1.0, sched.beta(t).sqrt()),
    ] {
        let out = DenoiserOutput {
            eps_hat: eps_hat.clone(),
            v: Array3::from_elem((3, SIZE, SIZE), v),
        };
        let stepped = ddpm_step(&xt, &out, t, &z, &sched).unwrap();
        let mean = ddpm_step(&xt, &out, t, &zero, &sched).unwrap();
        let diff = &stepped - &mean;
        for (d, n) in diff.iter().zip(z.iter()) {
            assert!((d - expected_sigma * n).abs() < 1e-12);
        }
    }
}

// ----------------------------------------------------------------- ddim_step

#[test]
fn implicit_step_to_zero_returns_the_decoded_state() {
    let mut rng = rng_from(derive_seed(7, "st-di0"));
    let sched = schedule();
    let t = 4;
    let xt = randn3(&mut rng, (3, SIZE, SIZE));
    let out = DenoiserOutput {
        eps_hat: randn3(&mut rng, (3, SIZE, SIZE)),
        v: Array3::zeros((3, SIZE, SIZE)),
    };
    let got = ddim_step(&xt, &out, t, 0, 0.0, None, false, &sched).unwrap();
    let ab = sched.alpha_bar(t);
    let x0_hat = (&xt - &(&out.eps_hat * (1.0 - ab).sqrt())) / ab.sqrt();
    for (a, b) in got.iter().zip(x0_hat.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn implicit_single_step_recovers_the_source_under_oracle_noise() {
    // If the prediction is the exact forward noise, one deterministic step
    // from any t straight to 0 inverts the noising in closed form.
    let mut rng = rng_from(derive_seed(8, "st-di1"));
    let sched = schedule();
    for t in [1usize, 4, 7, T_MAX] {
        let x0 = randn3(&mut rng, (3, SIZE, SIZE)).mapv(|v| v.tanh());
        let eps = randn3(&mut rng, (3, SIZE, SIZE));
        let ab = sched.alpha_bar(t);
        let xt = &x0 * ab.sqrt() + &(&eps * (1.0 - ab).sqrt());
        let out = DenoiserOutput {
            eps_hat: eps,
            v: Array3::zeros((3, SIZE, SIZE)),
        };
        // clip_x0 must not disturb the identity: the source lives in [-1,1].
        for clip in [false, true] {
            let got = ddim_step(&xt, &out, t, 0, 0.0, None, clip, &sched).unwrap();
            let err = got
                .iter()
                .zip(x0.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(err < 1e-8, "t={t} clip={clip}: max err {err}");
        }
    }
}

#[test]
fn deterministic_implicit_steps_never_draw_noise() {
    let mut rng = rng_from(derive_seed(9, "st-di2"));
    let sched = schedule();
    let xt = randn3(&mut rng, (3, SIZE, SIZE));
    let out = DenoiserOutput {
        eps_hat: randn3(&mut rng, (3, SIZE, SIZE)),
        v: Array3::zeros((3, SIZE, SIZE)),
    };
    // eta = 0: no noise needed for an interior step.
    assert!(ddim_step(&xt, &out, 6, 3, 0.0, None, false, &sched).is_ok());
    // eta > 0 on an interior step: noise is mandatory.
    assert!(matches!(
        ddim_step(&xt, &out, 6, 3, 0.5, None, false, &sched),
        Err(Error::Config(_))
    ));
    let z = randn3(&mut rng, (3, SIZE, SIZE));
    assert!(ddim_step(&xt, &out, 6, 3, 0.5, Some(&z), false, &sched).is_ok());
    // The final step is noise-free even at eta = 1.
    assert!(ddim_step(&xt, &out, 6, 0, 1.0, None, false, &sched).is_ok());
}

#[test]
fn implicit_step_rejects_non_descending_pairs() {
    let mut rng = rng_from(derive_seed(10, "st-di3"));
    let sched = schedule();
    let xt = randn3(&mut rng, (3, SIZE, SIZE));
    let out = DenoiserOutput {
        eps_hat: xt.clone(),
        v: Array3::zeros((3, SIZE, SIZE)),
    };
    assert!(matches!(
        ddim_step(&xt, &out, 4, 4, 0.0, None, false, &sched),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        ddim_step(&xt, &out, 4, 6, 0.0, None, false, &sched),
        Err(Error::Config(_))
    ));
    assert!(ddim_step(&xt, &out, 0, 0, 0.0, None, false, &sched).is_err());
}

#[test]
fn step_sequence_is_uniform_deduplicated_and_covers_the_endpoints() {
    assert!(ddim_step_sequence(0, 50).is_empty());
    assert!(ddim_step_sequence(9, 0).is_empty());
    assert_eq!(ddim_step_sequence(5, 5), vec![1, 2, 3, 4, 5]);
    assert_eq!(ddim_step_sequence(5, 99), vec![1, 2, 3, 4, 5]);
    assert_eq!(ddim_step_sequence(5, 1), vec![5]);

    let seq = ddim_step_sequence(200, 50);
    assert_eq!(seq.len(), 50);
    assert_eq!(seq[0], 1);
    assert_eq!(*seq.last().unwrap(), 200);
    assert!(seq.windows(2).all(|w| w[0] < w[1]));

    // Strides stay within one step of each other (uniform placement).
    let strides: Vec<usize> = seq.windows(2).map(|w| w[1] - w[0]).collect();
    let (lo, hi) = (
        strides.iter().min().unwrap(),
        strides.iter().max().unwrap(),
    );
    assert!(hi - lo <= 1, "strides {lo}..{hi}");
}

// --------------------------------------------------------------- translation

#[test]
fn zero_depth_translation_is_an_exact_pass_through() {
    let (net, params) = tiny_denoiser(11);
    let sched = schedule();
    let record = normal_record("pt-0");
    let spec = GuidanceSpec::new(Label::Cml, 0);

    let got = translate(&record, &net, &params, None, &spec, &sched, false).unwrap();
    assert_eq!(got.image.data(), record.image.data());
    assert_eq!(got.bone_mask, record.bone_mask);
    assert_eq!(got.lesion_mask, record.lesion_mask);
    assert_eq!(got.target_class, Label::Cml);
    assert!(got.trajectory.steps.is_empty());
}

#[test]
fn zero_scale_guidance_is_bitwise_neutral() {
    let (net, d_params) = tiny_denoiser(12);
    let (head, c_params) = tiny_classifier(12);
    let sched = schedule();
    let record = normal_record("gn-0");
    let mut spec = GuidanceSpec::new(Label::Cml, 8);
    spec.ddim_steps = 4;

    let without = translate(&record, &net, &d_params, None, &spec, &sched, false).unwrap();
    let with = translate(
        &record,
        &net,
        &d_params,
        Some((&head, &c_params)),
        &spec,
        &sched,
        false,
    )
    .unwrap();
    assert_eq!(without.image.data(), with.image.data());
    assert_eq!(without.bone_mask, with.bone_mask);
    assert_eq!(without.lesion_mask, with.lesion_mask);
    assert!(with.trajectory.steps.iter().all(|s| s.guidance_norm == 0.0));
}

#[test]
fn translation_emits_unit_range_images_and_binary_masks() {
    let (net, d_params) = tiny_denoiser(13);
    let (head, c_params) = tiny_classifier(13);
    let sched = schedule();
    let records = vec![normal_record("br-0"), normal_record("br-1")];
    let mut spec = GuidanceSpec::new(Label::Cml, 8);
    spec.ddim_steps = 4;
    spec.gradient_scale = 5.0;
    spec.eta = 0.3;
    spec.seed = 99;

    let got = translate_batch(
        &records,
        &net,
        &d_params,
        Some((&head, &c_params)),
        &spec,
        &sched,
        false,
    )
    .unwrap();
    assert_eq!(got.len(), 2);
    for s in &got {
        assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(s.bone_mask.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(s.lesion_mask.iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn translation_rejects_lesioned_sources_unless_allowed() {
    let (net, params) = tiny_denoiser(14);
    let sched = schedule();
    let record = cml_record("src-cml");
    let mut spec = GuidanceSpec::new(Label::Normal, 4);
    spec.ddim_steps = 2;

    let err = translate(&record, &net, &params, None, &spec, &sched, false).unwrap_err();
    assert!(err.to_string().contains("src-cml"), "{err}");
    assert!(translate(&record, &net, &params, None, &spec, &sched, true).is_ok());
}

#[test]
fn translation_is_reproducible_by_seed() {
    let (net, params) = tiny_denoiser(15);
    let sched = schedule();
    let record = normal_record("rp-0");
    let mut spec = GuidanceSpec::new(Label::Cml, 8);
    spec.ddim_steps = 4;
    spec.eta = 0.5;
    spec.seed = 7;

    let a = translate(&record, &net, &params, None, &spec, &sched, false).unwrap();
    let b = translate(&record, &net, &params, None, &spec, &sched, false).unwrap();
    assert_eq!(a.image.data(), b.image.data());
    assert_eq!(a.bone_mask, b.bone_mask);
    assert_eq!(a.lesion_mask, b.lesion_mask);

    spec.seed = 8;
    let c = translate(&record, &net, &params, None, &spec, &sched, false).unwrap();
    assert_ne!(a.image.data(), c.image.data());
}

#[test]
fn guided_chains_record_their_trajectory() {
    let (net, d_params) = tiny_denoiser(16);
    let (head, c_params) = tiny_classifier(16);
    let sched = schedule();
    let record = normal_record("tr-0");
    let mut spec = GuidanceSpec::new(Label::Cml, 8);
    spec.ddim_steps = 4;
    spec.gradient_scale = 5.0;

    let got = translate(
        &record,
        &net,
        &d_params,
        Some((&head, &c_params)),
        &spec,
        &sched,
        false,
    )
    .unwrap();
    let steps = &got.trajectory.steps;
    assert_eq!(steps.len(), 4);
    assert_eq!(steps[0].t, 8);
    assert_eq!(steps.last().unwrap().t_prev, 0);
    assert!(steps.windows(2).all(|w| w[1].t == w[0].t_prev));
    assert!(steps.iter().all(|s| s.guidance_norm.is_finite()));
    assert!(steps.iter().any(|s| s.guidance_norm > 0.0));
    assert_eq!(got.trajectory.gradient_scale, 5.0);
    assert_eq!(got.trajectory.start_step, 8);
}

#[test]
fn guidance_without_a_classifier_is_rejected() {
    let (net, params) = tiny_denoiser(17);
    let sched = schedule();
    let record = normal_record("nc-0");
    let mut spec = GuidanceSpec::new(Label::Cml, 4);
    spec.ddim_steps = 2;
    spec.gradient_scale = 10.0;

    let err = translate(&record, &net, &params, None, &spec, &sched, false).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

// ---------------------------------------------------------------- generation

#[test]
fn generation_requires_a_full_length_chain() {
    let (net, params) = tiny_denoiser(18);
    let sched = schedule();
    let mut spec = GuidanceSpec::new(Label::Normal, T_MAX - 1);
    spec.ddim_steps = 3;
    assert!(matches!(
        generate_unconditional(1, &net, &params, None, &spec, &sched),
        Err(Error::Config(_))
    ));

    spec.start_step = T_MAX;
    let got = generate_unconditional(2, &net, &params, None, &spec, &sched).unwrap();
    assert_eq!(got.len(), 2);
    for s in &got {
        assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(s.bone_mask.iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(s.trajectory.start_step, T_MAX);
    }
    assert!(generate_unconditional(0, &net, &params, None, &spec, &sched)
        .unwrap()
        .is_empty());
}

// ----------------------------------------------------------------- rejection

#[test]
fn mismatched_model_pairs_are_rejected() {
    let sched = schedule();
    let record = normal_record("mm-0");
    let mut spec = GuidanceSpec::new(Label::Cml, 4);
    spec.ddim_steps = 2;

    // Denoiser trained for a different schedule length.
    let (net, params) = {
        let mut rng = rng_from(derive_seed(19, "st-mm"));
        Denoiser::new(
            DenoiserConfig {
                image_size: SIZE,
                base_channels: 4,
                channel_mults: vec![1, 2],
                emb_dim: 8,
                t_max: T_MAX + 5,
                ..DenoiserConfig::default()
            },
            &mut rng,
        )
        .unwrap()
    };
    let err = translate(&record, &net, &params, None, &spec, &sched, false).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");

    // Classifier at the wrong resolution.
    let (net, d_params) = tiny_denoiser(19);
    let (head, c_params) = {
        let mut rng = rng_from(derive_seed(19, "st-mm-c"));
        ClassifierHead::new(
            ClassifierConfig {
                in_channels: STATE_CHANNELS,
                image_size: SIZE * 2,
                base_channels: 4,
                channel_mults: vec![1, 2],
                emb_dim: 8,
                t_max: T_MAX,
            },
            &mut rng,
        )
        .unwrap()
    };
    let err = translate(
        &record,
        &net,
        &d_params,
        Some((&head, &c_params)),
        &spec,
        &sched,
        false,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");

    // Single-channel classifier cannot guide the three-channel state.
    let (head, c_params) = {
        let mut rng = rng_from(derive_seed(19, "st-mm-c1"));
        ClassifierHead::new(
            ClassifierConfig {
                in_channels: 1,
                image_size: SIZE,
                base_channels: 4,
                channel_mults: vec![1, 2],
                emb_dim: 8,
                t_max: T_MAX,
            },
            &mut rng,
        )
        .unwrap()
    };
    let err = translate(
        &record,
        &net,
        &d_params,
        Some((&head, &c_params)),
        &spec,
        &sched,
        false,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");

    // Record at the wrong resolution for the network.
    let big = {
        let image = Array2::from_elem((SIZE * 2, SIZE * 2), 0.5);
        LabeledTriplet::new(
            ImageTensor::new(image, ValueRange::UNIT).unwrap(),
            Array2::zeros((SIZE * 2, SIZE * 2)),
            Array2::zeros((SIZE * 2, SIZE * 2)),
            Label::Normal,
            "mm-big".to_string(),
            Provenance::Phantom,
        )
        .unwrap()
    };
    let err = translate(&big, &net, &d_params, None, &spec, &sched, false).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { .. }), "{err}");
}

#[test]
fn spec_validation_rejects_out_of_range_parameters() {
    let ok = GuidanceSpec::new(Label::Cml, 4);
    assert!(ok.validate(T_MAX).is_ok());

    let mut s = ok;
    s.start_step = T_MAX + 1;
    assert!(s.validate(T_MAX).is_err());

    let mut s = ok;
    s.ddim_steps = 0;
    assert!(s.validate(T_MAX).is_err());
    s.start_step = 0;
    // Nothing to denoise, so a zero step budget is fine.
    assert!(s.validate(T_MAX).is_ok());

    let mut s = ok;
    s.gradient_scale = -0.5;
    assert!(s.validate(T_MAX).is_err());

    let mut s = ok;
    s.eta = 1.5;
    assert!(s.validate(T_MAX).is_err());
    s.eta = f64::NAN;
    assert!(s.validate(T_MAX).is_err());
}

#[test]
fn samples_convert_into_dataset_records_when_consistent() {
    let (net, params) = tiny_denoiser(20);
    let sched = schedule();
    let record = normal_record("cv-0");
    let mut spec = GuidanceSpec::new(Label::Cml, 6);
    spec.ddim_steps = 3;

    let sample = translate(&record, &net, &params, None, &spec, &sched, false).unwrap();
    let lesioned = sample.lesion_mask.sum() > 0.0;
    let converted = sample.into_labeled_triplet("cv-out".to_string());
    // A lesion-targeted sample converts cleanly; the Cml label places no
    // constraint on the mask either way.
    assert!(converted.is_ok(), "{converted:?}");
    let rec = converted.unwrap();
    assert_eq!(rec.label, Label::Cml);
    assert_eq!(rec.provenance, Provenance::Synthetic);
    assert_eq!(rec.id, "cv-out");
    assert_eq!(rec.lesion_mask.sum() > 0.0, lesioned);
}
