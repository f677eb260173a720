//! Group normalization with affine parameters.

use ndarray::{Array2, Array4};

use super::store::{Slot, StoreBuilder};

/// Picks the largest group count from {8, 4, 2, 1} dividing the channel count.
pub fn group_count(channels: usize) -> usize {
    for g in [8, 4, 2, 1] {
        if channels % g == 0 {
            return g;
        }
    }
    1
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Slot,
    beta: Slot,
    pub channels: usize,
    pub groups: usize,
    eps: f64,
}

pub struct GnCache {
    xhat: Array4<f64>,
    /// inverse std per (sample, group)
    inv_std: Array2<f64>,
}

impl GroupNorm {
    pub fn new(sb: &mut StoreBuilder, channels: usize) -> Self {
        let groups = group_count(channels);
        GroupNorm {
            gamma: sb.alloc_const(channels, 1.0),
            beta: sb.alloc_const(channels, 0.0),
            channels,
            groups,
            eps: 1e-5,
        }
    }

    fn normalize(&self, x: &Array4<f64>) -> (Array4<f64>, Array2<f64>) {
        let (n, c, h, w) = x.dim();
        debug_assert_eq!(c, self.channels);
        let cg = c / self.groups;
        let m = (cg * h * w) as f64;
        let xs = x.as_slice().expect("contiguous");
        let mut xhat = Array4::<f64>::zeros((n, c, h, w));
        let xh = xhat.as_slice_mut().unwrap();
        let mut inv_std = Array2::<f64>::zeros((n, self.groups));
        let hw = h * w;
        for ni in 0..n {
            for gi in 0..self.groups {
                let start = (ni * c + gi * cg) * hw;
                let seg = &xs[start..start + cg * hw];
                let mean = seg.iter().sum::<f64>() / m;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                let istd = 1.0 / (var + self.eps).sqrt();
                inv_std[[ni, gi]] = istd;
                for (dst, src) in xh[start..start + cg * hw].iter_mut().zip(seg) {
                    *dst = (src - mean) * istd;
                }
            }
        }
        (xhat, inv_std)
    }

    fn affine(&self, ps: &[f64], xhat: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = xhat.dim();
        let gamma = self.gamma.slice(ps);
        let beta = self.beta.slice(ps);
        let hw = h * w;
        let mut y = xhat.clone();
        let ys = y.as_slice_mut().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let (g, b) = (gamma[ci], beta[ci]);
                for v in &mut ys[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                    *v = *v * g + b;
                }
            }
        }
        y
    }

    pub fn forward(&self, ps: &[f64], x: &Array4<f64>) -> Array4<f64> {
        let (xhat, _) = self.normalize(x);
        self.affine(ps, &xhat)
    }

    pub fn forward_cached(&self, ps: &[f64], x: &Array4<f64>) -> (Array4<f64>, GnCache) {
        let (xhat, inv_std) = self.normalize(x);
        let y = self.affine(ps, &xhat);
        (y, GnCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        ps: &[f64],
        cache: &GnCache,
        gy: &Array4<f64>,
        grads: Option<&mut [f64]>,
    ) -> Array4<f64> {
        let (n, c, h, w) = cache.xhat.dim();
        let cg = c / self.groups;
        let hw = h * w;
        let m = (cg * hw) as f64;
        let gamma = self.gamma.slice(ps);
        let gys = gy.as_slice().expect("contiguous");
        let xh = cache.xhat.as_slice().unwrap();

        if let Some(gs) = grads {
            // per-channel sums over samples and space
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let mut sg = 0.0;
                    let mut sb = 0.0;
                    for p in 0..hw {
                        sg += gys[base + p] * xh[base + p];
                        sb += gys[base + p];
                    }
                    ggamma[ci] += sg;
                    gbeta[ci] += sb;
                }
            }
            let gg = self.gamma.slice_mut(gs);
            for (d, s) in gg.iter_mut().zip(&ggamma) {
                *d += s;
            }
            let gb = self.beta.slice_mut(gs);
            for (d, s) in gb.iter_mut().zip(&gbeta) {
                *d += s;
            }
        }

        let mut gx = Array4::<f64>::zeros((n, c, h, w));
        let gxs = gx.as_slice_mut().unwrap();
        for ni in 0..n {
            for gi in 0..self.groups {
                let istd = cache.inv_std[[ni, gi]];
                let start = (ni * c + gi * cg) * hw;
                // dxhat = gy * gamma (channel-wise)
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for ci in 0..cg {
                    let g = gamma[gi * cg + ci];
                    let base = start + ci * hw;
                    for p in 0..hw {
                        let dxh = gys[base + p] * g;
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xh[base + p];
                    }
                }
                for ci in 0..cg {
                    let g = gamma[gi * cg + ci];
                    let base = start + ci * hw;
                    for p in 0..hw {
                        let dxh = gys[base + p] * g;
                        gxs[base + p] = istd / m
                            * (m * dxh - sum_dxhat - xh[base + p] * sum_dxhat_xhat);
                    }
                }
            }
        }
        gx
    }
}
