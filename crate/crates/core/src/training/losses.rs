//! Loss terms for denoiser training: the noise-prediction MSE, the
//! variational bound term with learned per-pixel variances, and their
//! weighted combination.
//!
//! All terms are plain functions of arrays so they can be exercised with
//! hand-built predictions; the training loop wires them to the network.

use ndarray::{Array4, Zip};

use crate::diffusion::posterior_coefficients;
use crate::error::{Error, Result};
use crate::models::STATE_CHANNELS;
use crate::schedule::NoiseSchedule;
use crate::stats::{discretized_gaussian_log_likelihood_grad, gaussian_kl};

fn check_batch_shapes(name_a: &str, a: &Array4<f64>, name_b: &str, b: &Array4<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{name_b} with shape {:?} ({name_a})", a.dim()),
            got: format!("{:?}", b.dim()),
        });
    }
    Ok(())
}

/// Mean squared error between predicted and true noise over every element
/// of the batch (all three state channels).
pub fn simple_loss(eps_hat: &Array4<f64>, eps: &Array4<f64>) -> Result<f64> {
    let (loss, _) = simple_loss_grad(eps_hat, eps)?;
    Ok(loss)
}

/// [`simple_loss`] plus its gradient with respect to `eps_hat`.
pub fn simple_loss_grad(eps_hat: &Array4<f64>, eps: &Array4<f64>) -> Result<(f64, Array4<f64>)> {
    check_batch_shapes("eps_hat", eps_hat, "eps", eps)?;
    if eps.is_empty() {
        return Err(Error::Config("noise-prediction loss on an empty batch".into()));
    }
    let count = eps.len() as f64;
    let diff = eps_hat - eps;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / count;
    if !loss.is_finite() {
        let bad = eps_hat.iter().position(|v| !v.is_finite());
        return Err(Error::Numeric(format!(
            "non-finite noise-prediction loss (first bad prediction at flat index {bad:?})"
        )));
    }
    Ok((loss, diff * (2.0 / count)))
}

/// Per-channel mean squared errors `[image, bone, lesion]`. Their mean is
/// exactly [`simple_loss`]; the image entry is the single-channel objective
/// one would compute with the masks dropped entirely.
pub fn simple_loss_per_channel(
    eps_hat: &Array4<f64>,
    eps: &Array4<f64>,
) -> Result<[f64; STATE_CHANNELS]> {
    check_batch_shapes("eps_hat", eps_hat, "eps", eps)?;
    let (n, c, h, w) = eps.dim();
    if n == 0 || c != STATE_CHANNELS {
        return Err(Error::ShapeMismatch {
            expected: format!("(N>0, {STATE_CHANNELS}, H, W)"),
            got: format!("{:?}", eps.dim()),
        });
    }
    let count = (n * h * w) as f64;
    let mut out = [0.0; STATE_CHANNELS];
    for (ch, slot) in out.iter_mut().enumerate() {
        let a = eps_hat.index_axis(ndarray::Axis(1), ch);
        let b = eps.index_axis(ndarray::Axis(1), ch);
        *slot = Zip::from(&a).and(&b).fold(0.0, |acc, x, y| acc + (x - y) * (x - y)) / count;
    }
    Ok(out)
}

/// Value and variance-channel gradient of the variational term.
#[derive(Debug, Clone)]
pub struct VlbOutput {
    /// Mean over the batch of the per-sample, per-pixel-mean bound term, in
    /// nats.
    pub value: f64,
    /// Gradient with respect to the raw (pre-sigmoid) variance channels.
    /// The mean prediction is held fixed — only the variance channels learn
    /// from this term, so the noise-prediction objective stays undistorted.
    pub grad_v_raw: Array4<f64>,
}

/// Variational bound term for a noised batch: for t > 1 the Gaussian KL
/// between the forward-process posterior and the model's reverse step, and
/// at t = 1 the negative discretized log-likelihood of the clean state
/// under the model's final step.
///
/// The model's reverse variance per pixel interpolates between beta_t and
/// the clipped posterior variance in log space, driven by `sigmoid(v_raw)`.
/// All inputs are unweighted symmetric-range states.
pub fn vlb_term(
    x0: &Array4<f64>,
    xt: &Array4<f64>,
    eps_hat: &Array4<f64>,
    v_raw: &Array4<f64>,
    ts: &[usize],
    schedule: &NoiseSchedule,
) -> Result<VlbOutput> {
    check_batch_shapes("x0", x0, "xt", xt)?;
    check_batch_shapes("x0", x0, "eps_hat", eps_hat)?;
    check_batch_shapes("x0", x0, "v_raw", v_raw)?;
    let (n, c, h, w) = x0.dim();
    if n == 0 {
        return Err(Error::Config("variational term on an empty batch".into()));
    }
    if ts.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} timesteps"),
            got: format!("{}", ts.len()),
        });
    }

    let per_pixel = 1.0 / ((c * h * w) as f64 * n as f64);
    let mut value = 0.0;
    let mut grad = Array4::<f64>::zeros(x0.raw_dim());

    for (i, &t) in ts.iter().enumerate() {
        let (c0, ct, var_q) = posterior_coefficients(t, schedule)?;
        let ab = schedule.alpha_bar(t);
        let sq_ab = ab.sqrt();
        let sq_om = (1.0 - ab).sqrt();
        let log_beta = schedule.beta(t).ln();
        let log_tilde = schedule.log_posterior_variance_clipped(t);
        if t > 1 && var_q <= 0.0 {
            return Err(Error::Numeric(format!(
                "degenerate posterior variance {var_q} at t={t}"
            )));
        }
        let log_var_q = if t > 1 { var_q.ln() } else { 0.0 };

        let x0_i = x0.index_axis(ndarray::Axis(0), i);
        let xt_i = xt.index_axis(ndarray::Axis(0), i);
        let eh_i = eps_hat.index_axis(ndarray::Axis(0), i);
        let vr_i = v_raw.index_axis(ndarray::Axis(0), i);
        let mut g_i = grad.index_axis_mut(ndarray::Axis(0), i);

        Zip::from(&x0_i)
            .and(&xt_i)
            .and(&eh_i)
            .and(&vr_i)
            .and(&mut g_i)
            .for_each(|&x0p, &xtp, &ehp, &vrp, gp| {
                // Mean of the model's reverse step, via the predicted clean
                // state; held fixed for this term's gradient.
                let x0_hat = (xtp - sq_om * ehp) / sq_ab;
                let mu_p = c0 * x0_hat + ct * xtp;
                let v = 1.0 / (1.0 + (-vrp).exp());
                let log_var_p = v * log_beta + (1.0 - v) * log_tilde;
                let dlvp_dvraw = (log_beta - log_tilde) * v * (1.0 - v);
                let (term, dterm_dlvp) = if t > 1 {
                    let mu_q = c0 * x0p + ct * xtp;
                    let kl = gaussian_kl(mu_q, log_var_q, mu_p, log_var_p);
                    let d = mu_q - mu_p;
                    let dkl = 0.5 * (1.0 - (var_q + d * d) / log_var_p.exp());
                    (kl, dkl)
                } else {
                    let (ll, dll) = discretized_gaussian_log_likelihood_grad(x0p, mu_p, log_var_p);
                    (-ll, -dll)
                };
                value += term * per_pixel;
                *gp = dterm_dlvp * dlvp_dvraw * per_pixel;
            });
    }

    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite variational term {value} (timesteps {ts:?})"
        )));
    }
    Ok(VlbOutput {
        value,
        grad_v_raw: grad,
    })
}

/// Weighted combination of the two training terms.
pub fn hybrid_loss(simple: f64, vlb: f64, lambda_vlb: f64) -> f64 {
    simple + lambda_vlb * vlb
}
