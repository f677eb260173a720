//! Noise schedules: per-timestep beta/alpha tables and posterior variances.
//!
//! Timesteps are 1-based: `beta(t)` is defined for `t` in `[1, T]` and
//! `alpha_bar(t)` for `t` in `[0, T]` with `alpha_bar(0) = 1`, so the
//! posterior at `t = 1` is well-defined (zero variance, mean pinned to x0).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Schedule family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Betas linearly spaced from `beta_start` to `beta_end`, endpoints included.
    Linear,
    /// Squared-cosine alpha-bar profile; ignores the beta endpoints.
    Cosine,
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScheduleKind::Linear => write!(f, "linear"),
            ScheduleKind::Cosine => write!(f, "cosine"),
        }
    }
}

/// Precomputed diffusion tables. Immutable after construction.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    /// beta[t-1] = beta_t, t in [1, T]
    beta: Vec<f64>,
    /// alpha[t-1] = 1 - beta_t
    alpha: Vec<f64>,
    /// alpha_bar[t] for t in [0, T], alpha_bar[0] = 1
    alpha_bar: Vec<f64>,
    /// posterior_variance[t-1] = beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)
    posterior_variance: Vec<f64>,
    /// log posterior variance with the t=1 entry replaced by the t=2 value,
    /// so the learned-variance interpolation never sees log(0)
    log_posterior_variance_clipped: Vec<f64>,
}

/// Default linear-schedule endpoints.
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Serializable recipe for rebuilding a [`NoiseSchedule`], carried in
/// checkpoints and run manifests so every consumer reconstructs the exact
/// same tables.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleSpec {
    pub fn linear(t_max: usize) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Linear,
            t_max,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.kind, self.t_max, self.beta_start, self.beta_end)
    }
}

const COSINE_OFFSET: f64 = 0.008;
const COSINE_BETA_MAX: f64 = 0.999;

/// Builds a schedule of `t_max` steps.
///
/// For the linear kind, betas are spaced from `beta_start` to `beta_end`
/// inclusive (a single step uses `beta_start`). The cosine kind derives betas
/// from the squared-cosine alpha-bar profile and ignores both endpoints.
pub fn build_schedule(
    kind: ScheduleKind,
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(Error::Schedule("T must be at least 1".into()));
    }
    let beta = match kind {
        ScheduleKind::Linear => {
            if !(beta_start > 0.0 && beta_start < 1.0) || !(beta_end > 0.0 && beta_end < 1.0) {
                return Err(Error::Schedule(format!(
                    "beta endpoints must lie in (0, 1), got [{beta_start}, {beta_end}]"
                )));
            }
            if beta_start > beta_end {
                return Err(Error::Schedule(format!(
                    "beta_start {beta_start} exceeds beta_end {beta_end}"
                )));
            }
            if t_max == 1 {
                vec![beta_start]
            } else {
                let step = (beta_end - beta_start) / (t_max as f64 - 1.0);
                (0..t_max).map(|i| beta_start + step * i as f64).collect()
            }
        }
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                let x = (t / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
            };
            // alpha_bar_t = f(t)/f(0), so beta_t = 1 - f(t)/f(t-1); the f(0)
            // normalization cancels in the ratio
            (1..=t_max)
                .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).min(COSINE_BETA_MAX))
                .collect::<Vec<_>>()
        }
    };
    NoiseSchedule::from_betas(kind, beta)
}

impl NoiseSchedule {
    /// Builds every derived table from a beta vector, validating invariants.
    pub fn from_betas(kind: ScheduleKind, beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Schedule("empty beta vector".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Schedule(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(1.0);
        for a in &alpha {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * a);
        }
        let posterior_variance: Vec<f64> = (1..=beta.len())
            .map(|t| beta[t - 1] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]))
            .collect();
        let mut log_posterior_variance_clipped: Vec<f64> =
            posterior_variance.iter().map(|v| v.ln()).collect();
        if posterior_variance.len() > 1 {
            log_posterior_variance_clipped[0] = posterior_variance[1].ln();
        } else {
            // single-step schedule: fall back to log beta_1
            log_posterior_variance_clipped[0] = beta[0].ln();
        }
        Ok(NoiseSchedule {
            kind,
            beta,
            alpha,
            alpha_bar,
            posterior_variance,
            log_posterior_variance_clipped,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps T.
    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    /// Validates `t` in `[1, T]`.
    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= 1 && t <= self.t_max() {
            Ok(())
        } else {
            Err(Error::TimestepOutOfRange {
                t,
                max: self.t_max(),
            })
        }
    }

    /// beta_t, t in [1, T]. Panics on out-of-range t; use `check_t` at entry points.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// alpha_t = 1 - beta_t.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// alpha_bar_t, t in [0, T]; alpha_bar_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Posterior variance beta-tilde_t; zero at t = 1.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_variance[t - 1]
    }

    /// log beta-tilde_t with the degenerate t=1 entry clipped to the t=2 value.
    pub fn log_posterior_variance_clipped(&self, t: usize) -> f64 {
        self.log_posterior_variance_clipped[t - 1]
    }

    /// Signal-to-noise ratio alpha_bar_t / (1 - alpha_bar_t).
    pub fn snr(&self, t: usize) -> f64 {
        self.alpha_bar[t] / (1.0 - self.alpha_bar[t])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Compensated (double-double) running product, the independent oracle
    /// for the alpha-bar table.
    fn alpha_bar_oracle(betas: &[f64]) -> Vec<f64> {
        // (hi, lo) accumulator via Dekker/Veltkamp two-product
        fn two_product(a: f64, b: f64) -> (f64, f64) {
            let p = a * b;
            let e = a.mul_add(b, -p);
            (p, e)
        }
        let mut hi = 1.0f64;
        let mut lo = 0.0f64;
        let mut out = Vec::with_capacity(betas.len());
        for &b in betas {
            let a = 1.0 - b;
            let (p, e) = two_product(hi, a);
            lo = lo * a + e;
            hi = p;
            // renormalize
            let s = hi + lo;
            lo -= s - hi;
            hi = s;
            out.push(hi + lo);
        }
        out
    }

    #[test]
    fn linear_t1000_matches_high_precision_product() {
        let s = build_schedule(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap();
        let betas: Vec<f64> = (1..=1000).map(|t| s.beta(t)).collect();
        let oracle = alpha_bar_oracle(&betas);
        for t in 1..=1000 {
            let rel = (s.alpha_bar(t) - oracle[t - 1]).abs() / oracle[t - 1];
            assert!(rel < 1e-12, "t={t}: rel={rel}");
        }
        // frozen endpoint from an independent high-precision evaluation
        assert!((s.alpha_bar(1000) - 4.035829765375683e-5).abs() / 4.035829765375683e-5 < 1e-10);
    }

    #[test]
    fn single_step_low_beta_is_nearly_noiseless() {
        let s = build_schedule(ScheduleKind::Linear, 1, 1e-12, 1e-12).unwrap();
        assert!((s.alpha_bar(1) - 1.0).abs() < 1e-11);
    }

    #[test]
    fn constant_half_beta_hand_arithmetic() {
        let s = NoiseSchedule::from_betas(ScheduleKind::Linear, vec![0.5, 0.5]).unwrap();
        assert!((s.alpha_bar(1) - 0.5).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.25).abs() < 1e-15);
        assert!((s.posterior_variance(2) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.posterior_variance(1), 0.0);
    }

    #[test]
    fn cosine_schedule_satisfies_invariants() {
        let s = build_schedule(ScheduleKind::Cosine, 200, 0.0, 0.0).unwrap();
        for t in 1..=200 {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.posterior_variance(t) >= 0.0);
            assert!(s.posterior_variance(t) <= s.beta(t) + 1e-15);
        }
    }

    #[test]
    fn construction_errors() {
        assert!(build_schedule(ScheduleKind::Linear, 0, 1e-4, 0.02).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 10, 0.0, 0.02).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 10, 1e-4, 1.0).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 10, 0.02, 1e-4).is_err());
    }

    #[test]
    fn snr_strictly_decreasing() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = build_schedule(kind, 300, 1e-4, 0.02).unwrap();
            for t in 2..=300 {
                assert!(s.snr(t) < s.snr(t - 1), "{kind} t={t}");
            }
        }
    }
}
