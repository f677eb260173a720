//! Spatial resampling and pooling.

use ndarray::{Array1, Array2, Array4};
use rand_chacha::ChaCha8Rng;

use super::conv::{Conv2d, ConvCache};
use super::store::StoreBuilder;

/// Nearest-neighbor 2x upsampling.
pub fn upsample_nearest2x(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::<f64>::zeros((n, c, h * 2, w * 2));
    let xs = x.as_slice().unwrap();
    let ys = y.as_slice_mut().unwrap();
    for nc in 0..n * c {
        for i in 0..h {
            let src = &xs[(nc * h + i) * w..(nc * h + i + 1) * w];
            for di in 0..2 {
                let dst =
                    &mut ys[(nc * 2 * h + 2 * i + di) * 2 * w..(nc * 2 * h + 2 * i + di + 1) * 2 * w];
                for (j, &v) in src.iter().enumerate() {
                    dst[2 * j] = v;
                    dst[2 * j + 1] = v;
                }
            }
        }
    }
    y
}

/// Gradient of nearest 2x upsampling: each source pixel collects its 2x2 block.
pub fn upsample_nearest2x_backward(gy: &Array4<f64>) -> Array4<f64> {
    let (n, c, h2, w2) = gy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::<f64>::zeros((n, c, h, w));
    let gys = gy.as_slice().unwrap();
    let gxs = gx.as_slice_mut().unwrap();
    for nc in 0..n * c {
        for i in 0..h {
            let dst = &mut gxs[(nc * h + i) * w..(nc * h + i + 1) * w];
            for di in 0..2 {
                let src = &gys[(nc * h2 + 2 * i + di) * w2..(nc * h2 + 2 * i + di + 1) * w2];
                for j in 0..w {
                    dst[j] += src[2 * j] + src[2 * j + 1];
                }
            }
        }
    }
    gx
}

/// Global average pooling (N, C, H, W) -> (N, C).
pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let m = (h * w) as f64;
    let mut y = Array2::<f64>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            y[[ni, ci]] = x
                .index_axis(ndarray::Axis(0), ni)
                .index_axis(ndarray::Axis(0), ci)
                .sum()
                / m;
        }
    }
    y
}

pub fn global_avg_pool_backward(gy: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (n, c) = gy.dim();
    let m = (h * w) as f64;
    let mut gx = Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let g = gy[[ni, ci]] / m;
            gx.index_axis_mut(ndarray::Axis(0), ni)
                .index_axis_mut(ndarray::Axis(0), ci)
                .fill(g);
        }
    }
    gx
}

/// Attention pooling: a 1x1 conv scores each pixel, softmax over space,
/// features are the attention-weighted spatial average.
#[derive(Debug, Clone)]
pub struct AttnPool {
    score: Conv2d,
}

pub struct AttnPoolCache {
    x: Array4<f64>,
    /// softmax weights per (sample, pixel)
    alpha: Array2<f64>,
    conv: ConvCache,
}

impl AttnPool {
    pub fn new(sb: &mut StoreBuilder, rng: &mut ChaCha8Rng, channels: usize) -> Self {
        AttnPool {
            score: Conv2d::new(sb, rng, channels, 1, 1, 1, 0, 1.0),
        }
    }

    fn weights(&self, scores: &Array4<f64>) -> Array2<f64> {
        let (n, _, h, w) = scores.dim();
        let hw = h * w;
        let ss = scores.as_slice().unwrap();
        let mut alpha = Array2::<f64>::zeros((n, hw));
        for ni in 0..n {
            let seg = &ss[ni * hw..(ni + 1) * hw];
            let max = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            let row = alpha.row_mut(ni).into_slice().unwrap();
            for (d, &s) in row.iter_mut().zip(seg) {
                *d = (s - max).exp();
                denom += *d;
            }
            for d in row {
                *d /= denom;
            }
        }
        alpha
    }

    fn pool(x: &Array4<f64>, alpha: &Array2<f64>) -> Array2<f64> {
        let (n, c, h, w) = x.dim();
        let hw = h * w;
        let xs = x.as_slice().unwrap();
        let mut y = Array2::<f64>::zeros((n, c));
        for ni in 0..n {
            let a = alpha.row(ni);
            let a = a.as_slice().unwrap();
            for ci in 0..c {
                let seg = &xs[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                y[[ni, ci]] = seg.iter().zip(a).map(|(v, w)| v * w).sum();
            }
        }
        y
    }

    pub fn forward(&self, ps: &[f64], x: &Array4<f64>) -> Array2<f64> {
        let scores = self.score.forward(ps, x);
        let alpha = self.weights(&scores);
        Self::pool(x, &alpha)
    }

    pub fn forward_cached(&self, ps: &[f64], x: &Array4<f64>) -> (Array2<f64>, AttnPoolCache) {
        let (scores, conv) = self.score.forward_cached(ps, x);
        let alpha = self.weights(&scores);
        let y = Self::pool(x, &alpha);
        (
            y,
            AttnPoolCache {
                x: x.clone(),
                alpha,
                conv,
            },
        )
    }

    pub fn backward(
        &self,
        ps: &[f64],
        cache: &AttnPoolCache,
        gy: &Array2<f64>,
        grads: Option<&mut [f64]>,
    ) -> Array4<f64> {
        let (n, c, h, w) = cache.x.dim();
        let hw = h * w;
        let xs = cache.x.as_slice().unwrap();

        // direct path: gx[c,p] += gy[c] * alpha[p]
        let mut gx = Array4::<f64>::zeros((n, c, h, w));
        {
            let gxs = gx.as_slice_mut().unwrap();
            for ni in 0..n {
                let a = cache.alpha.row(ni);
                let a = a.as_slice().unwrap();
                for ci in 0..c {
                    let g = gy[[ni, ci]];
                    let seg = &mut gxs[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                    for (d, &ap) in seg.iter_mut().zip(a) {
                        *d += g * ap;
                    }
                }
            }
        }

        // attention path: galpha[p] = sum_c gy[c] x[c,p], then softmax backward
        let mut gscores = Array4::<f64>::zeros((n, 1, h, w));
        {
            let gss = gscores.as_slice_mut().unwrap();
            let mut galpha = Array1::<f64>::zeros(hw);
            for ni in 0..n {
                galpha.fill(0.0);
                for ci in 0..c {
                    let g = gy[[ni, ci]];
                    let seg = &xs[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                    for (d, &v) in galpha.iter_mut().zip(seg) {
                        *d += g * v;
                    }
                }
                let a = cache.alpha.row(ni);
                let a = a.as_slice().unwrap();
                let dot: f64 = a.iter().zip(galpha.iter()).map(|(x, y)| x * y).sum();
                let seg = &mut gss[ni * hw..(ni + 1) * hw];
                for ((d, &ap), &ga) in seg.iter_mut().zip(a).zip(galpha.iter()) {
                    *d = ap * (ga - dot);
                }
            }
        }
        let gx_scores = self.score.backward(ps, &cache.conv, &gscores, grads);
        gx + gx_scores
    }
}
