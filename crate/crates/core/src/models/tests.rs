//! Model-level tests: shape/range/determinism probes, whole-network
//! gradient checks against finite differences, and checkpoint round-trips.

use ndarray::{Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use tempfile::tempdir;

use super::checkpoint::{load_checkpoint, save_checkpoint, CheckpointInfo};
use super::classifier::{ClassifierConfig, ClassifierHead};
use super::denoiser::{Denoiser, DenoiserConfig, OUTPUT_CHANNELS, STATE_CHANNELS};
use super::embed::sinusoidal_embedding;
use super::{ChannelWeights, NoisyTriplet};
use crate::image::{ImageTensor, ValueRange};
use crate::rng::{derive_seed, rng_from};
use crate::schedule::ScheduleSpec;

fn tiny_denoiser_config() -> DenoiserConfig {
    DenoiserConfig {
        image_size: 8,
        base_channels: 4,
        channel_mults: vec![1, 2],
        emb_dim: 8,
        t_max: 10,
        ..DenoiserConfig::default()
    }
}

fn tiny_classifier_config() -> ClassifierConfig {
    ClassifierConfig {
        in_channels: 3,
        image_size: 8,
        base_channels: 4,
        channel_mults: vec![1, 2],
        emb_dim: 8,
        t_max: 10,
    }
}

fn randn4(rng: &mut impl Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

fn triplet_from_batch(x: &Array4<f64>, t: usize) -> NoisyTriplet {
    let ch = |c: usize| {
        ImageTensor::from_parts(
            x.index_axis(ndarray::Axis(0), 0)
                .index_axis(ndarray::Axis(0), c)
                .to_owned(),
            ValueRange::SYMMETRIC,
        )
    };
    NoisyTriplet::new(ch(0), ch(1), ch(2), t).unwrap()
}

#[test]
fn untrained_denoiser_output_is_finite_and_bounded() {
    let mut rng = rng_from(derive_seed(30, "mt-untrained"));
    let (net, params) = Denoiser::new(DenoiserConfig::default(), &mut rng).unwrap();
    let x = randn4(&mut rng, (2, STATE_CHANNELS, 32, 32));
    let tri = triplet_from_batch(&x, 7);
    let out = net.denoiser_forward(&params, &tri).unwrap();
    assert_eq!(out.eps_hat.dim(), (3, 32, 32));
    assert_eq!(out.v.dim(), (3, 32, 32));
    assert!(out.eps_hat.iter().all(|v| v.is_finite()));
    assert!(out.v.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn denoiser_inference_is_deterministic_and_matches_cached_path() {
    let mut rng = rng_from(derive_seed(31, "mt-det"));
    let (net, params) = Denoiser::new(tiny_denoiser_config(), &mut rng).unwrap();
    let x = randn4(&mut rng, (2, STATE_CHANNELS, 8, 8));
    let a = net.forward_raw(&params, &x, &[3, 9]).unwrap();
    let b = net.forward_raw(&params, &x, &[3, 9]).unwrap();
    assert_eq!(a, b, "two inference calls must agree bitwise");
    let (c, _) = net.forward_cached(&params, &x, &[3, 9]).unwrap();
    assert_eq!(a, c, "cached and plain forward must agree bitwise");
}

#[test]
fn denoiser_output_depends_on_every_input_pixel_probe() {
    let mut rng = rng_from(derive_seed(32, "mt-sens"));
    let (net, params) = Denoiser::new(tiny_denoiser_config(), &mut rng).unwrap();
    let x = randn4(&mut rng, (1, STATE_CHANNELS, 8, 8));
    let base = net.forward_raw(&params, &x, &[5]).unwrap();
    for &(c, i, j) in &[(0usize, 0usize, 0usize), (1, 3, 4), (2, 7, 7)] {
        let mut xp = x.clone();
        xp[[0, c, i, j]] += 0.37;
        let out = net.forward_raw(&params, &xp, &[5]).unwrap();
        assert!(
            (&out - &base).iter().any(|d| d.abs() > 1e-9),
            "perturbing input ({c},{i},{j}) left the output unchanged"
        );
    }
}

#[test]
fn denoiser_rejects_bad_shapes_and_timesteps() {
    let mut rng = rng_from(derive_seed(33, "mt-errs"));
    let (net, params) = Denoiser::new(tiny_denoiser_config(), &mut rng).unwrap();
    let x = randn4(&mut rng, (1, STATE_CHANNELS, 4, 4));
    assert!(net.forward_raw(&params, &x, &[1]).is_err(), "wrong size");
    let x = randn4(&mut rng, (1, STATE_CHANNELS, 8, 8));
    assert!(net.forward_raw(&params, &x, &[0]).is_err(), "t too small");
    assert!(net.forward_raw(&params, &x, &[11]).is_err(), "t too large");
    assert!(net.forward_raw(&params, &x, &[1, 2]).is_err(), "t count");
}

#[test]
fn denoiser_gradients_match_finite_differences() {
    let mut rng = rng_from(derive_seed(34, "mt-dngrad"));
    let (net, mut params) = Denoiser::new(tiny_denoiser_config(), &mut rng).unwrap();
    let x = randn4(&mut rng, (2, STATE_CHANNELS, 8, 8));
    let ts = [2usize, 8];
    let c = randn4(&mut rng, (2, OUTPUT_CHANNELS, 8, 8));

    let (_, cache) = net.forward_cached(&params, &x, &ts).unwrap();
    let mut grads = vec![0.0; net.param_count];
    let gx = net.backward(&params, &cache, &c, Some(&mut grads));

    let eps = 1e-5;
    // Parameter gradients on a random subset (the tiny net still has a few
    // thousand parameters; a spread of 200 indices covers every layer).
    let stride = (params.len() / 200).max(1);
    let mut worst = 0.0_f64;
    for i in (0..params.len()).step_by(stride) {
        let saved = params[i];
        params[i] = saved + eps;
        let lp = (&net.forward_raw(&params, &x, &ts).unwrap() * &c).sum();
        params[i] = saved - eps;
        let lm = (&net.forward_raw(&params, &x, &ts).unwrap() * &c).sum();
        params[i] = saved;
        let fd = (lp - lm) / (2.0 * eps);
        worst = worst.max((grads[i] - fd).abs() / grads[i].abs().max(fd.abs()).max(1.0));
    }
    assert!(worst < 1e-6, "worst parameter-gradient relative error {worst}");

    // Input gradients on a pixel subset.
    let mut xm = x.clone();
    let mut worst_x = 0.0_f64;
    for &(n, ch, i, j) in &[
        (0usize, 0usize, 1usize, 2usize),
        (0, 1, 5, 5),
        (0, 2, 7, 0),
        (1, 0, 3, 3),
        (1, 2, 0, 7),
    ] {
        let saved = xm[[n, ch, i, j]];
        xm[[n, ch, i, j]] = saved + eps;
        let lp = (&net.forward_raw(&params, &xm, &ts).unwrap() * &c).sum();
        xm[[n, ch, i, j]] = saved - eps;
        let lm = (&net.forward_raw(&params, &xm, &ts).unwrap() * &c).sum();
        xm[[n, ch, i, j]] = saved;
        let fd = (lp - lm) / (2.0 * eps);
        let g = gx[[n, ch, i, j]];
        worst_x = worst_x.max((g - fd).abs() / g.abs().max(fd.abs()).max(1.0));
    }
    assert!(worst_x < 1e-6, "worst input-gradient relative error {worst_x}");
}

#[test]
fn classifier_log_probabilities_normalize() {
    let mut rng = rng_from(derive_seed(35, "mt-clsnorm"));
    let (net, params) = ClassifierHead::new(ClassifierConfig::default(), &mut rng).unwrap();
    for trial in 0..5 {
        let x = randn4(&mut rng, (1, 3, 32, 32));
        let tri = triplet_from_batch(&x, 1 + trial * 37);
        let lp = net.classifier_forward(&params, &tri).unwrap();
        let total = lp[0].exp() + lp[1].exp();
        assert!((total - 1.0).abs() < 1e-6, "probabilities sum to {total}");
    }
}

#[test]
fn zero_weight_head_has_zero_input_gradient() {
    let mut rng = rng_from(derive_seed(36, "mt-zerohead"));
    let (net, mut params) = ClassifierHead::new(tiny_classifier_config(), &mut rng).unwrap();
    for p in net.head_slot.slice_mut(&mut params) {
        *p = 0.0;
    }
    let x = randn4(&mut rng, (1, 3, 8, 8));
    let tri = triplet_from_batch(&x, 4);
    let g = net.classifier_input_gradient(&params, &tri, 1).unwrap();
    assert!(
        g.iter().all(|&v| v == 0.0),
        "constant-output classifier must have an all-zero input gradient"
    );
}

#[test]
fn classifier_input_gradient_matches_finite_differences() {
    let mut rng = rng_from(derive_seed(37, "mt-clsgrad"));
    let cfg = ClassifierConfig {
        image_size: 16,
        base_channels: 8,
        ..tiny_classifier_config()
    };
    let (net, params) = ClassifierHead::new(cfg, &mut rng).unwrap();
    let eps = 1e-5;
    let mut checked = 0usize;
    for trial in 0..10 {
        let mut x = randn4(&mut rng, (1, 3, 16, 16));
        let t = 1 + (trial % 10);
        let y = trial % 2;
        let g = net
            .input_gradient_batch(&params, &x, &[t], &[y])
            .unwrap();
        for _ in 0..10 {
            let c = rng.gen_range(0..3);
            let i = rng.gen_range(0..16);
            let j = rng.gen_range(0..16);
            let saved = x[[0, c, i, j]];
            let logp = |xa: &Array4<f64>| -> f64 {
                let tri = triplet_from_batch(xa, t);
                net.classifier_forward(&params, &tri).unwrap()[y]
            };
            x[[0, c, i, j]] = saved + eps;
            let lp = logp(&x);
            x[[0, c, i, j]] = saved - eps;
            let lm = logp(&x);
            x[[0, c, i, j]] = saved;
            let fd = (lp - lm) / (2.0 * eps);
            let an = g[[0, c, i, j]];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-12);
            assert!(
                rel < 1e-3,
                "pixel ({c},{i},{j}) t={t} y={y}: analytic {an}, finite-difference {fd}"
            );
            checked += 1;
        }
    }
    assert_eq!(checked, 100);
}

#[test]
fn stepping_along_input_gradient_raises_target_probability() {
    let mut rng = rng_from(derive_seed(38, "mt-linesearch"));
    let (net, params) = ClassifierHead::new(tiny_classifier_config(), &mut rng).unwrap();
    for trial in 0..6 {
        let x = randn4(&mut rng, (1, 3, 8, 8));
        let t = 1 + trial;
        let y = trial % 2;
        let g = net.input_gradient_batch(&params, &x, &[t], &[y]).unwrap();
        let p0 = net.classifier_forward(&params, &triplet_from_batch(&x, t)).unwrap()[y].exp();
        let stepped = &x + &(1e-3 * &g);
        let p1 = net
            .classifier_forward(&params, &triplet_from_batch(&stepped, t))
            .unwrap()[y]
            .exp();
        assert!(
            p1 > p0,
            "ascent step lowered the target probability ({p0} -> {p1})"
        );
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise_identical() {
    let mut rng = rng_from(derive_seed(39, "mt-ckpt"));
    let cfg = tiny_denoiser_config();
    let (net, params) = Denoiser::new(cfg.clone(), &mut rng).unwrap();
    let dir = tempdir().unwrap();
    let path = dir.path().join("denoiser.ckpt");
    let info = CheckpointInfo {
        kind: "denoiser".to_string(),
        arch: cfg.clone(),
        schedule: ScheduleSpec::linear(10),
        channel_weights: ChannelWeights::default(),
        train_config_hash: "test".to_string(),
        seed: 7,
        param_count: 0,
        param_sha256: String::new(),
    };
    save_checkpoint(&path, info, &params).unwrap();

    let (loaded_info, loaded) = load_checkpoint::<DenoiserConfig>(&path, "denoiser").unwrap();
    assert_eq!(loaded_info.arch, cfg);
    assert_eq!(loaded_info.param_count, params.len());
    assert!(
        params
            .iter()
            .zip(&loaded)
            .all(|(a, b)| a.to_bits() == b.to_bits()),
        "parameters must survive a save/load round trip bitwise"
    );

    let rebuilt = Denoiser::from_config(loaded_info.arch).unwrap();
    let mut rng2 = rng_from(derive_seed(39, "mt-ckpt-x"));
    let x = randn4(&mut rng2, (1, 3, 8, 8));
    let a = net.forward_raw(&params, &x, &[5]).unwrap();
    let b = rebuilt.forward_raw(&loaded, &x, &[5]).unwrap();
    assert_eq!(a, b, "loaded model must reproduce forward outputs bitwise");

    // Wrong-kind and corrupted-blob loads must fail loudly.
    assert!(load_checkpoint::<DenoiserConfig>(&path, "guidance-classifier").is_err());
    let mut blob = std::fs::read(&path).unwrap();
    blob[20] ^= 0xff;
    std::fs::write(&path, &blob).unwrap();
    assert!(load_checkpoint::<DenoiserConfig>(&path, "denoiser").is_err());
}

#[test]
fn triplet_and_weight_validation() {
    let a = ImageTensor::from_parts(Array2::zeros((8, 8)), ValueRange::SYMMETRIC);
    let b = ImageTensor::from_parts(Array2::zeros((8, 8)), ValueRange::SYMMETRIC);
    let small = ImageTensor::from_parts(Array2::zeros((4, 8)), ValueRange::SYMMETRIC);
    assert!(NoisyTriplet::new(a.clone(), b.clone(), small, 3).is_err());
    assert!(NoisyTriplet::new(a.clone(), b.clone(), a.clone(), 0).is_err());
    assert!(NoisyTriplet::new(a.clone(), b.clone(), a.clone(), 3).is_ok());

    assert!(ChannelWeights::default().validate().is_ok());
    for bad in [
        ChannelWeights { w1: 0.0, w2: 0.8, w3: 0.8 },
        ChannelWeights { w1: 1.0, w2: 1.2, w3: 0.8 },
        ChannelWeights { w1: 1.0, w2: 0.8, w3: -0.5 },
    ] {
        assert!(bad.validate().is_err(), "{bad:?} should be rejected");
    }

    let mut x = Array4::<f64>::ones((1, 3, 2, 2));
    let w = ChannelWeights::default();
    w.apply_batch(&mut x);
    assert_eq!(x[[0, 0, 0, 0]], 1.0);
    assert_eq!(x[[0, 1, 0, 0]], 0.8);
    assert_eq!(x[[0, 2, 1, 1]], 0.8);
    w.remove_batch(&mut x);
    assert!(x.iter().all(|&v| (v - 1.0).abs() < 1e-15));
}

#[test]
fn sinusoidal_embedding_separates_timesteps() {
    let e = sinusoidal_embedding(&[1, 2, 50, 199], 64);
    assert_eq!(e.dim(), (4, 64));
    for i in 0..4 {
        for j in (i + 1)..4 {
            let d: f64 = (&e.row(i) - &e.row(j)).iter().map(|v| v * v).sum();
            assert!(d > 1e-6, "rows {i} and {j} are indistinguishable");
        }
    }
    assert!(e.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
}
