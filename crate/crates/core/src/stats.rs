//! Scalar special functions and Gaussian helpers used by the variational
//! loss term and the discretized image likelihood.
//!
//! The standard library has no `erf`, so a double-precision implementation
//! lives here: a Maclaurin series on the central range and a continued
//! fraction for the complementary function in the tails. Accuracy is a few
//! ulps over the whole line, which is far tighter than anything the loss
//! terms need.

/// Crossover between the series (below) and the continued fraction (above).
/// The fraction is fully converged from 2.0 up, and using it directly for
/// the complementary function avoids the `1 - erf` cancellation that costs
/// relative precision in the tail.
const ERF_SERIES_LIMIT: f64 = 2.0;

/// 2 / sqrt(pi).
const FRAC_2_SQRT_PI: f64 = 1.128_379_167_095_512_6;

/// Error function, accurate to ~1e-15 relative over the central range and
/// ~1e-12 absolute near the series/fraction crossover.
pub fn erf(x: f64) -> f64 {
    if x < 0.0 {
        return -erf(-x);
    }
    if x <= ERF_SERIES_LIMIT {
        erf_series(x)
    } else {
        1.0 - erfc_fraction(x)
    }
}

/// Complementary error function `1 - erf(x)`, computed directly in the
/// upper tail so small values keep full relative precision.
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x <= ERF_SERIES_LIMIT {
        1.0 - erf_series(x)
    } else {
        erfc_fraction(x)
    }
}

/// Maclaurin series `erf(x) = 2/sqrt(pi) * sum (-1)^n x^(2n+1) / (n! (2n+1))`.
/// Alternating with term ratio `x^2 / n`, so it converges quickly once
/// `n > x^2`; at the crossover the largest term is ~2.4, costing only a few
/// ulps to cancellation.
fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 1.0_f64;
    loop {
        term *= -x2 / n;
        let contrib = term / (2.0 * n + 1.0);
        sum += contrib;
        if contrib.abs() < 1e-18 * sum.abs() {
            break;
        }
        n += 1.0;
        if n > 200.0 {
            break;
        }
    }
    FRAC_2_SQRT_PI * sum
}

/// Legendre continued fraction for the upper tail:
/// `erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))`
/// with partial numerators k/2. Evaluated bottom-up at fixed depth, which is
/// fully converged for x >= 2.5.
fn erfc_fraction(x: f64) -> f64 {
    const DEPTH: usize = 60;
    let mut f = x;
    for k in (1..=DEPTH).rev() {
        f = x + (k as f64 / 2.0) / f;
    }
    (-x * x).exp() / (f64::sqrt(std::f64::consts::PI) * f)
}

/// Standard normal cumulative distribution function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// KL divergence in nats between two univariate Gaussians given as
/// (mean, log variance): `KL(N(mu_q, var_q) || N(mu_p, var_p))`.
pub fn gaussian_kl(mu_q: f64, log_var_q: f64, mu_p: f64, log_var_p: f64) -> f64 {
    let var_ratio = (log_var_q - log_var_p).exp();
    let d = mu_q - mu_p;
    0.5 * (log_var_p - log_var_q + var_ratio + d * d / log_var_p.exp() - 1.0)
}

/// Floor applied to bin masses before taking logs, matching the usual
/// practice for discretized Gaussian likelihoods: keeps the loss finite when
/// a predicted density places essentially no mass on the observed bin.
const MIN_BIN_MASS: f64 = 1e-12;

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Log-likelihood of a pixel value `x` in [-1, 1] under `N(mu, var)`
/// discretized into 256 bins of half-width 1/255. The extreme bins absorb
/// the corresponding Gaussian tail, so the 256 masses sum to one.
pub fn discretized_gaussian_log_likelihood(x: f64, mu: f64, log_var: f64) -> f64 {
    discretized_gaussian_log_likelihood_grad(x, mu, log_var).0
}

/// As [`discretized_gaussian_log_likelihood`], also returning the partial
/// derivative with respect to `log_var` (the only parameter the training
/// loss differentiates the likelihood against — the mean is held fixed).
/// The derivative is zero on the floored-mass branch, where the value is
/// constant.
pub fn discretized_gaussian_log_likelihood_grad(x: f64, mu: f64, log_var: f64) -> (f64, f64) {
    let inv_stdv = (-0.5 * log_var).exp();
    let centered = x - mu;
    let plus_in = inv_stdv * (centered + 1.0 / 255.0);
    let min_in = inv_stdv * (centered - 1.0 / 255.0);
    // d(plus_in)/d(log_var) = -plus_in / 2, likewise for min_in.
    let (mass, dmass) = if x > 0.999 {
        (1.0 - normal_cdf(min_in), 0.5 * normal_pdf(min_in) * min_in)
    } else if x < -0.999 {
        (normal_cdf(plus_in), -0.5 * normal_pdf(plus_in) * plus_in)
    } else {
        (
            normal_cdf(plus_in) - normal_cdf(min_in),
            0.5 * (normal_pdf(min_in) * min_in - normal_pdf(plus_in) * plus_in),
        )
    };
    if mass <= MIN_BIN_MASS {
        (MIN_BIN_MASS.ln(), 0.0)
    } else {
        (mass.ln(), dmass / mass)
    }
}
