//! Fully connected layer on (N, features) matrices.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Axis};
use rand_chacha::ChaCha8Rng;

use super::store::{Slot, StoreBuilder};

#[derive(Debug, Clone)]
pub struct Linear {
    w: Slot,
    b: Slot,
    pub in_dim: usize,
    pub out_dim: usize,
}

pub struct LinearCache {
    x: Array2<f64>,
}

impl Linear {
    pub fn new(
        sb: &mut StoreBuilder,
        rng: &mut ChaCha8Rng,
        in_dim: usize,
        out_dim: usize,
        init_scale: f64,
    ) -> Self {
        let std = (1.0 / in_dim as f64).sqrt() * init_scale;
        let w = if init_scale == 0.0 {
            sb.alloc_const(out_dim * in_dim, 0.0)
        } else {
            sb.alloc_normal(out_dim * in_dim, std, rng)
        };
        let b = sb.alloc_const(out_dim, 0.0);
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, ps: &[f64], x: &Array2<f64>) -> Array2<f64> {
        let n = x.nrows();
        debug_assert_eq!(x.ncols(), self.in_dim);
        let w = self.w.mat(ps, self.out_dim, self.in_dim);
        let bias = self.b.slice(ps);
        let mut y = Array2::<f64>::zeros((n, self.out_dim));
        general_mat_mul(1.0, x, &w.t(), 0.0, &mut y);
        for mut row in y.axis_iter_mut(Axis(0)) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        y
    }

    pub fn forward_cached(&self, ps: &[f64], x: &Array2<f64>) -> (Array2<f64>, LinearCache) {
        let y = self.forward(ps, x);
        (y, LinearCache { x: x.clone() })
    }

    pub fn backward(
        &self,
        ps: &[f64],
        cache: &LinearCache,
        gy: &Array2<f64>,
        grads: Option<&mut [f64]>,
    ) -> Array2<f64> {
        if let Some(gs) = grads {
            {
                let mut gw = self.w.mat_mut(gs, self.out_dim, self.in_dim);
                general_mat_mul(1.0, &gy.t(), &cache.x, 1.0, &mut gw);
            }
            let gb = self.b.slice_mut(gs);
            for row in gy.axis_iter(Axis(0)) {
                for (d, g) in gb.iter_mut().zip(row) {
                    *d += g;
                }
            }
        }
        let w = self.w.mat(ps, self.out_dim, self.in_dim);
        let mut gx = Array2::<f64>::zeros(cache.x.dim());
        general_mat_mul(1.0, gy, &w, 0.0, &mut gx);
        gx
    }
}
