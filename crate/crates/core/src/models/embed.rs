//! Sinusoidal timestep embedding and the shared time MLP.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::nn::act::{silu2, silu2_backward};
use crate::nn::linear::{Linear, LinearCache};
use crate::nn::store::StoreBuilder;

/// Transformer-style sinusoidal features of the (integer) timestep.
/// `dim` must be even; row n is [sin(t_n f_0).. sin(t_n f_{h-1}),
/// cos(t_n f_0).. cos(t_n f_{h-1})] with geometrically spaced frequencies.
pub fn sinusoidal_embedding(ts: &[usize], dim: usize) -> Array2<f64> {
    assert!(dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
    let mut out = Array2::<f64>::zeros((ts.len(), dim));
    for (n, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000.0_f64.ln()) * i as f64 / denom).exp();
            let arg = t as f64 * freq;
            out[[n, i]] = arg.sin();
            out[[n, half + i]] = arg.cos();
        }
    }
    out
}

/// Two-layer MLP (Linear -> SiLU -> Linear) applied to the sinusoidal
/// features; its output is the conditioning vector every residual block
/// projects from.
#[derive(Debug, Clone)]
pub struct TimeMlp {
    l1: Linear,
    l2: Linear,
    pub dim: usize,
}

pub struct TimeMlpCache {
    c1: LinearCache,
    u: Array2<f64>,
    c2: LinearCache,
}

impl TimeMlp {
    pub fn new(sb: &mut StoreBuilder, rng: &mut ChaCha8Rng, dim: usize) -> Self {
        let l1 = Linear::new(sb, rng, dim, dim, 1.0);
        let l2 = Linear::new(sb, rng, dim, dim, 1.0);
        TimeMlp { l1, l2, dim }
    }

    pub fn forward(&self, ps: &[f64], temb: &Array2<f64>) -> Array2<f64> {
        let u = self.l1.forward(ps, temb);
        self.l2.forward(ps, &silu2(&u))
    }

    pub fn forward_cached(&self, ps: &[f64], temb: &Array2<f64>) -> (Array2<f64>, TimeMlpCache) {
        let (u, c1) = self.l1.forward_cached(ps, temb);
        let su = silu2(&u);
        let (e, c2) = self.l2.forward_cached(ps, &su);
        (e, TimeMlpCache { c1, u, c2 })
    }

    /// Parameter gradients only; the gradient with respect to the sinusoid
    /// features is discarded (timesteps are inputs, not parameters).
    pub fn backward(
        &self,
        ps: &[f64],
        cache: &TimeMlpCache,
        ge: &Array2<f64>,
        grads: &mut [f64],
    ) {
        let gsu = self.l2.backward(ps, &cache.c2, ge, Some(grads));
        let gu = silu2_backward(&cache.u, &gsu);
        let _ = self.l1.backward(ps, &cache.c1, &gu, Some(grads));
    }
}
