//! Forward-process sampling, closed-form marginals, and posterior moments.
//!
//! All operations are pure functions of their inputs and safe to call
//! concurrently. None of them clip values; samplers that want x0 clipping
//! apply it themselves.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::schedule::NoiseSchedule;

/// Numeric floor below which alpha_bar is considered degenerate for division.
const ALPHA_BAR_FLOOR: f64 = 1e-300;

fn check_same_shape(a: &ImageTensor, b: &ImageTensor, what: &str) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            expected: format!("{}x{} ({what})", a.height(), a.width()),
            got: format!("{}x{}", b.height(), b.width()),
        })
    }
}

/// Draws x_t from the closed-form marginal q(x_t | x_0):
/// sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.
pub fn forward_marginal_sample(
    x0: &ImageTensor,
    t: usize,
    eps: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    schedule.check_t(t)?;
    check_same_shape(x0, eps, "eps vs x0")?;
    let ab = schedule.alpha_bar(t);
    let (c0, ce) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = c0 * x0.data() + ce * eps.data();
    Ok(ImageTensor::from_parts(data, x0.value_range()))
}

/// Draws x_t from one forward step q(x_t | x_{t-1}):
/// sqrt(1 - beta_t) * x_prev + sqrt(beta_t) * eps.
pub fn forward_step_sample(
    x_prev: &ImageTensor,
    t: usize,
    eps: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    schedule.check_t(t)?;
    check_same_shape(x_prev, eps, "eps vs x_prev")?;
    let b = schedule.beta(t);
    let data = (1.0 - b).sqrt() * x_prev.data() + b.sqrt() * eps.data();
    Ok(ImageTensor::from_parts(data, x_prev.value_range()))
}

/// Mean and variance of the forward-process posterior q(x_{t-1} | x_t, x0).
pub fn posterior_moments(
    x0: &ImageTensor,
    xt: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<(ImageTensor, f64)> {
    schedule.check_t(t)?;
    check_same_shape(x0, xt, "xt vs x0")?;
    let (mean, var) = posterior_moments_raw(x0.data(), xt.data(), t, schedule)?;
    Ok((ImageTensor::from_parts(mean, x0.value_range()), var))
}

/// Scalar coefficients (c0, ct, variance) of the forward-process posterior
/// mean `c0 * x0 + ct * xt`, shared by the image API, the variational loss,
/// and the samplers.
pub(crate) fn posterior_coefficients(t: usize, schedule: &NoiseSchedule) -> Result<(f64, f64, f64)> {
    schedule.check_t(t)?;
    let ab_t = schedule.alpha_bar(t);
    if t > 1 && 1.0 - ab_t < 1e-15 {
        return Err(Error::Numeric(format!(
            "posterior undefined: alpha_bar_{t} = 1 with t > 1"
        )));
    }
    let ab_prev = schedule.alpha_bar(t - 1);
    let beta_t = schedule.beta(t);
    let alpha_t = schedule.alpha(t);
    let c0 = ab_prev.sqrt() * beta_t / (1.0 - ab_t);
    let ct = alpha_t.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    Ok((c0, ct, schedule.posterior_variance(t)))
}

/// Array-level posterior moments shared by the image API and the samplers.
pub(crate) fn posterior_moments_raw(
    x0: &Array2<f64>,
    xt: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<(Array2<f64>, f64)> {
    let (c0, ct, var) = posterior_coefficients(t, schedule)?;
    let mean = c0 * x0 + ct * xt;
    Ok((mean, var))
}

/// Inverts the closed-form marginal: x0_hat = (xt - sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_bar_t).
pub fn predict_x0_from_eps(
    xt: &ImageTensor,
    t: usize,
    eps_hat: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    schedule.check_t(t)?;
    check_same_shape(xt, eps_hat, "eps_hat vs xt")?;
    let data = predict_x0_raw(xt.data(), t, eps_hat.data(), schedule)?;
    Ok(ImageTensor::from_parts(data, xt.value_range()))
}

pub(crate) fn predict_x0_raw(
    xt: &Array2<f64>,
    t: usize,
    eps_hat: &Array2<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    let ab = schedule.alpha_bar(t);
    if ab <= ALPHA_BAR_FLOOR {
        return Err(Error::Numeric(format!(
            "alpha_bar_{t} = {ab} below numeric floor"
        )));
    }
    Ok((xt - &(eps_hat * (1.0 - ab).sqrt())) / ab.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ValueRange;
    use crate::schedule::{build_schedule, NoiseSchedule, ScheduleKind};
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn img(data: Array2<f64>) -> ImageTensor {
        ImageTensor::from_parts(data, ValueRange::SYMMETRIC)
    }

    fn randn(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
        img(Array2::from_shape_fn((h, w), |_| {
            rng.sample::<f64, _>(StandardNormal)
        }))
    }

    #[test]
    fn marginal_identity_when_alpha_bar_one() {
        // beta tiny => alpha_bar_1 ~ 1: output ~ x0 regardless of eps
        let s = NoiseSchedule::from_betas(ScheduleKind::Linear, vec![1e-30]).unwrap();
        let x0 = img(array![[1.0, -0.5]]);
        let eps = img(array![[3.0, 7.0]]);
        let xt = forward_marginal_sample(&x0, 1, &eps, &s).unwrap();
        for (a, b) in xt.data().iter().zip(x0.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn marginal_zero_eps_scales_by_sqrt_alpha_bar() {
        // alpha_bar_2 = 0.25 with beta = (0.5, 0.5)
        let s = NoiseSchedule::from_betas(ScheduleKind::Linear, vec![0.5, 0.5]).unwrap();
        let x0 = img(array![[2.0, -4.0]]);
        let eps = img(Array2::zeros((1, 2)));
        let xt = forward_marginal_sample(&x0, 2, &eps, &s).unwrap();
        assert_eq!(xt.data()[[0, 0]], 1.0);
        assert_eq!(xt.data()[[0, 1]], -2.0);
    }

    #[test]
    fn step_sample_hand_values() {
        let s = NoiseSchedule::from_betas(ScheduleKind::Linear, vec![0.19]).unwrap();
        let x = img(array![[1.0, -2.0]]);
        let zero = img(Array2::zeros((1, 2)));
        let y = forward_step_sample(&x, 1, &zero, &s).unwrap();
        assert!((y.data()[[0, 0]] - 0.9).abs() < 1e-15);
        assert!((y.data()[[0, 1]] + 1.8).abs() < 1e-15);
    }

    #[test]
    fn noiseless_step_composition_equals_marginal() {
        let s = build_schedule(ScheduleKind::Linear, 50, 1e-3, 0.1).unwrap();
        let x0 = img(array![[0.7, -0.3], [0.1, 0.9]]);
        let zero = img(Array2::zeros((2, 2)));
        let mut x = x0.clone();
        for t in 1..=50 {
            x = forward_step_sample(&x, t, &zero, &s).unwrap();
            let marg = forward_marginal_sample(&x0, t, &zero, &s).unwrap();
            for (a, b) in x.data().iter().zip(marg.data().iter()) {
                assert!((a - b).abs() < 1e-12, "t={t}");
            }
        }
    }

    #[test]
    fn posterior_degenerates_to_x0_at_t1() {
        let s = build_schedule(ScheduleKind::Linear, 10, 1e-4, 0.02).unwrap();
        let x0 = img(array![[0.3, -0.8]]);
        let xt = img(array![[5.0, -5.0]]);
        let (mean, var) = posterior_moments(&x0, &xt, 1, &s).unwrap();
        assert_eq!(var, 0.0);
        for (a, b) in mean.data().iter().zip(x0.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_hand_value() {
        let s = NoiseSchedule::from_betas(ScheduleKind::Linear, vec![0.5, 0.5]).unwrap();
        let x0 = img(array![[1.0]]);
        let xt = img(array![[0.5]]);
        let (mean, var) = posterior_moments(&x0, &xt, 2, &s).unwrap();
        // both coefficients equal sqrt(0.5)*0.5/0.75; mean = c*(1 + 0.5) = sqrt(0.5)
        assert!((mean.data()[[0, 0]] - 0.7071067811865475).abs() < 1e-12);
        assert!((var - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn posterior_mean_matches_eps_parameterization() {
        // substituting xt = sqrt(ab)x0 + sqrt(1-ab)eps must reproduce the
        // eps-form mean (1/sqrt(alpha_t)) (xt - beta_t/sqrt(1-ab_t) eps)
        let s = build_schedule(ScheduleKind::Linear, 100, 1e-4, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let t = rng.gen_range(1..=100);
            let x0 = randn(&mut rng, 2, 3);
            let eps = randn(&mut rng, 2, 3);
            let xt = forward_marginal_sample(&x0, t, &eps, &s).unwrap();
            let (mean, _) = posterior_moments(&x0, &xt, t, &s).unwrap();
            let ab = s.alpha_bar(t);
            let eps_form = (xt.data() - &(eps.data() * (s.beta(t) / (1.0 - ab).sqrt())))
                / s.alpha(t).sqrt();
            for (a, b) in mean.data().iter().zip(eps_form.iter()) {
                assert!((a - b).abs() < 1e-10, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn predict_x0_inverts_marginal() {
        let s = build_schedule(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut max_err: f64 = 0.0;
        for _ in 0..1000 {
            let t = rng.gen_range(1..=1000);
            let x0 = randn(&mut rng, 2, 2);
            let eps = randn(&mut rng, 2, 2);
            let xt = forward_marginal_sample(&x0, t, &eps, &s).unwrap();
            let rec = predict_x0_from_eps(&xt, t, &eps, &s).unwrap();
            for (a, b) in rec.data().iter().zip(x0.data().iter()) {
                max_err = max_err.max((a - b).abs());
            }
        }
        assert!(max_err < 1e-8, "max_err={max_err}");
    }

    #[test]
    fn predict_x0_zero_eps_rescales() {
        let s = NoiseSchedule::from_betas(ScheduleKind::Linear, vec![0.5, 0.5]).unwrap();
        let xt = img(array![[0.4, -1.0]]);
        let zero = img(Array2::zeros((1, 2)));
        let x0 = predict_x0_from_eps(&xt, 2, &zero, &s).unwrap();
        assert!((x0.data()[[0, 0]] - 0.8).abs() < 1e-15);
        assert!((x0.data()[[0, 1]] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_and_shape_errors() {
        let s = build_schedule(ScheduleKind::Linear, 10, 1e-4, 0.02).unwrap();
        let a = img(Array2::zeros((2, 2)));
        let b = img(Array2::zeros((2, 3)));
        assert!(forward_marginal_sample(&a, 0, &a, &s).is_err());
        assert!(forward_marginal_sample(&a, 11, &a, &s).is_err());
        assert!(forward_marginal_sample(&a, 1, &b, &s).is_err());
        assert!(forward_step_sample(&a, 11, &a, &s).is_err());
        assert!(posterior_moments(&a, &b, 1, &s).is_err());
    }
}
