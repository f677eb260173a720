//! Time-conditioned residual block, the building unit of both networks.

use ndarray::{Array2, Array4, Axis};
use rand_chacha::ChaCha8Rng;

use crate::nn::act::{silu, silu_backward};
use crate::nn::conv::{Conv2d, ConvCache};
use crate::nn::linear::{Linear, LinearCache};
use crate::nn::norm::{GnCache, GroupNorm};
use crate::nn::store::StoreBuilder;

/// norm -> SiLU -> conv, add projected time embedding, norm -> SiLU -> conv,
/// plus a (possibly 1x1-projected) shortcut. The second conv is zero-
/// initialized so a fresh block is the identity plus shortcut projection,
/// which keeps early training stable.
#[derive(Debug, Clone)]
pub struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    emb_proj: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
    pub in_ch: usize,
    pub out_ch: usize,
}

pub struct ResBlockCache {
    gn1: GnCache,
    a: Array4<f64>,
    conv1: ConvCache,
    emb: LinearCache,
    gn2: GnCache,
    b: Array4<f64>,
    conv2: ConvCache,
    shortcut: Option<ConvCache>,
}

impl ResBlock {
    pub fn new(
        sb: &mut StoreBuilder,
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        emb_dim: usize,
    ) -> Self {
        let gn1 = GroupNorm::new(sb, in_ch);
        let conv1 = Conv2d::new(sb, rng, in_ch, out_ch, 3, 1, 1, 1.0);
        let emb_proj = Linear::new(sb, rng, emb_dim, out_ch, 1.0);
        let gn2 = GroupNorm::new(sb, out_ch);
        let conv2 = Conv2d::new(sb, rng, out_ch, out_ch, 3, 1, 1, 0.0);
        let shortcut = if in_ch != out_ch {
            Some(Conv2d::new(sb, rng, in_ch, out_ch, 1, 1, 0, 1.0))
        } else {
            None
        };
        ResBlock {
            gn1,
            conv1,
            emb_proj,
            gn2,
            conv2,
            shortcut,
            in_ch,
            out_ch,
        }
    }

    /// `ea` is the SiLU-activated time embedding, shared across blocks.
    pub fn forward(&self, ps: &[f64], x: &Array4<f64>, ea: &Array2<f64>) -> Array4<f64> {
        let s1 = silu(&self.gn1.forward(ps, x));
        let mut h = self.conv1.forward(ps, &s1);
        add_channel_bias(&mut h, &self.emb_proj.forward(ps, ea));
        let s2 = silu(&self.gn2.forward(ps, &h));
        let h3 = self.conv2.forward(ps, &s2);
        let base = match &self.shortcut {
            Some(sc) => sc.forward(ps, x),
            None => x.clone(),
        };
        base + &h3
    }

    pub fn forward_cached(
        &self,
        ps: &[f64],
        x: &Array4<f64>,
        ea: &Array2<f64>,
    ) -> (Array4<f64>, ResBlockCache) {
        let (a, gn1c) = self.gn1.forward_cached(ps, x);
        let s1 = silu(&a);
        let (mut h, conv1c) = self.conv1.forward_cached(ps, &s1);
        let (p, embc) = self.emb_proj.forward_cached(ps, ea);
        add_channel_bias(&mut h, &p);
        let (b, gn2c) = self.gn2.forward_cached(ps, &h);
        let s2 = silu(&b);
        let (h3, conv2c) = self.conv2.forward_cached(ps, &s2);
        let (base, scc) = match &self.shortcut {
            Some(sc) => {
                let (y, c) = sc.forward_cached(ps, x);
                (y, Some(c))
            }
            None => (x.clone(), None),
        };
        let y = base + &h3;
        (
            y,
            ResBlockCache {
                gn1: gn1c,
                a,
                conv1: conv1c,
                emb: embc,
                gn2: gn2c,
                b,
                conv2: conv2c,
                shortcut: scc,
            },
        )
    }

    /// Returns the input gradient; adds the time-embedding gradient into
    /// `g_ea`. `grads: None` skips all parameter-gradient work.
    pub fn backward(
        &self,
        ps: &[f64],
        cache: &ResBlockCache,
        gy: &Array4<f64>,
        mut grads: Option<&mut [f64]>,
        g_ea: &mut Array2<f64>,
    ) -> Array4<f64> {
        let gs2 = self
            .conv2
            .backward(ps, &cache.conv2, gy, grads.as_deref_mut());
        let gb = silu_backward(&cache.b, &gs2);
        let gh = self.gn2.backward(ps, &cache.gn2, &gb, grads.as_deref_mut());

        // The embedding enters as a per-(sample, channel) bias, so its
        // gradient is the spatial sum of gh.
        let gp = gh.sum_axis(Axis(3)).sum_axis(Axis(2));
        let gea_part = self
            .emb_proj
            .backward(ps, &cache.emb, &gp, grads.as_deref_mut());
        *g_ea += &gea_part;

        let gs1 = self
            .conv1
            .backward(ps, &cache.conv1, &gh, grads.as_deref_mut());
        let ga = silu_backward(&cache.a, &gs1);
        let mut gx = self.gn1.backward(ps, &cache.gn1, &ga, grads.as_deref_mut());

        match (&self.shortcut, &cache.shortcut) {
            (Some(sc), Some(scc)) => {
                gx += &sc.backward(ps, scc, gy, grads);
            }
            _ => {
                gx += gy;
            }
        }
        gx
    }
}

/// h[n, c, :, :] += p[n, c]
fn add_channel_bias(h: &mut Array4<f64>, p: &Array2<f64>) {
    let (n, c, hh, ww) = h.dim();
    let hs = h.as_slice_mut().expect("contiguous");
    for ni in 0..n {
        for ci in 0..c {
            let bias = p[[ni, ci]];
            let base = (ni * c + ci) * hh * ww;
            for v in &mut hs[base..base + hh * ww] {
                *v += bias;
            }
        }
    }
}
