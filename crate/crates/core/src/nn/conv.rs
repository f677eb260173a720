//! 2-D convolution via im2col and GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView3, ArrayViewMut3, Axis};
use rand_chacha::ChaCha8Rng;

use super::store::{Slot, StoreBuilder};

/// Convolution layer with square kernel, symmetric zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    w: Slot,
    b: Slot,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Saved forward state: the input batch (im2col is recomputed in backward).
pub struct ConvCache {
    x: Array4<f64>,
}

impl Conv2d {
    /// Kaiming-normal initialization scaled by `init_scale` (1.0 for hidden
    /// layers; small or zero for output-adjacent layers).
    pub fn new(
        sb: &mut StoreBuilder,
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init_scale: f64,
    ) -> Self {
        let fan_in = (in_ch * k * k) as f64;
        let std = (2.0 / fan_in).sqrt() * init_scale;
        let w = if init_scale == 0.0 {
            sb.alloc_const(out_ch * in_ch * k * k, 0.0)
        } else {
            sb.alloc_normal(out_ch * in_ch * k * k, std, rng)
        };
        let b = sb.alloc_const(out_ch, 0.0);
        Conv2d {
            w,
            b,
            in_ch,
            out_ch,
            k,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn forward(&self, ps: &[f64], x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let (ho, wo) = self.out_hw(h, w);
        let ckk = self.in_ch * self.k * self.k;
        let w_mat = self.w.mat(ps, self.out_ch, ckk);
        let bias = self.b.slice(ps);
        let mut cols = Array2::<f64>::zeros((ckk, ho * wo));
        let mut y = Array4::<f64>::zeros((n, self.out_ch, ho, wo));
        for ni in 0..n {
            im2col(
                &x.index_axis(Axis(0), ni),
                self.k,
                self.stride,
                self.pad,
                &mut cols,
            );
            let ys = y.index_axis_mut(Axis(0), ni);
            let mut y_mat = ys.into_shape_with_order((self.out_ch, ho * wo)).unwrap();
            general_mat_mul(1.0, &w_mat, &cols, 0.0, &mut y_mat);
            for (oc, mut row) in y_mat.axis_iter_mut(Axis(0)).enumerate() {
                row += bias[oc];
            }
        }
        y
    }

    pub fn forward_cached(&self, ps: &[f64], x: &Array4<f64>) -> (Array4<f64>, ConvCache) {
        let y = self.forward(ps, x);
        (y, ConvCache { x: x.clone() })
    }

    /// Backpropagates `gy`; accumulates parameter gradients into `grads`
    /// when provided (skip for input-gradient-only passes).
    pub fn backward(
        &self,
        ps: &[f64],
        cache: &ConvCache,
        gy: &Array4<f64>,
        mut grads: Option<&mut [f64]>,
    ) -> Array4<f64> {
        let (n, _, h, w) = cache.x.dim();
        let (ho, wo) = self.out_hw(h, w);
        let ckk = self.in_ch * self.k * self.k;
        let w_mat = self.w.mat(ps, self.out_ch, ckk);
        let mut cols = Array2::<f64>::zeros((ckk, ho * wo));
        let mut gcols = Array2::<f64>::zeros((ckk, ho * wo));
        let mut gx = Array4::<f64>::zeros(cache.x.dim());
        for ni in 0..n {
            let gys = gy.index_axis(Axis(0), ni);
            let gy_mat = gys.into_shape_with_order((self.out_ch, ho * wo)).unwrap();
            if let Some(gs) = grads.as_deref_mut() {
                im2col(
                    &cache.x.index_axis(Axis(0), ni),
                    self.k,
                    self.stride,
                    self.pad,
                    &mut cols,
                );
                let mut gw_mat = self.w.mat_mut(gs, self.out_ch, ckk);
                general_mat_mul(1.0, &gy_mat, &cols.t(), 1.0, &mut gw_mat);
                let gb = self.b.slice_mut(gs);
                for (oc, row) in gy_mat.axis_iter(Axis(0)).enumerate() {
                    gb[oc] += row.sum();
                }
            }
            general_mat_mul(1.0, &w_mat.t(), &gy_mat, 0.0, &mut gcols);
            col2im_add(
                &gcols,
                self.k,
                self.stride,
                self.pad,
                &mut gx.index_axis_mut(Axis(0), ni),
            );
        }
        gx
    }
}

/// Unrolls one (C, H, W) sample into a (C*k*k, Ho*Wo) column matrix.
fn im2col(x: &ArrayView3<f64>, k: usize, stride: usize, pad: usize, cols: &mut Array2<f64>) {
    let (c, h, w) = x.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let xs = x.as_slice().expect("contiguous input sample");
    let cs = cols.as_slice_mut().expect("contiguous col buffer");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cs[((ci * k + ki) * k + kj) * ho * wo..][..ho * wo];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    let seg = &mut row[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= h as isize {
                        seg.fill(0.0);
                        continue;
                    }
                    let base = (ci * h + ii as usize) * w;
                    for (oj, slot) in seg.iter_mut().enumerate() {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        *slot = if jj < 0 || jj >= w as isize {
                            0.0
                        } else {
                            xs[base + jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column-matrix gradient back onto the (C, H, W) input grid.
fn col2im_add(
    gcols: &Array2<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    gx: &mut ArrayViewMut3<f64>,
) {
    let (c, h, w) = gx.dim();
    let total = gcols.ncols();
    let wo = {
        // recover (ho, wo) from the forward geometry
        (w + 2 * pad - k) / stride + 1
    };
    let ho = total / wo;
    let gs = gcols.as_slice().expect("contiguous col grads");
    let out = gx.as_slice_mut().expect("contiguous grad sample");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = &gs[((ci * k + ki) * k + kj) * ho * wo..][..ho * wo];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let base = (ci * h + ii as usize) * w;
                    let seg = &row[oi * wo..(oi + 1) * wo];
                    for (oj, g) in seg.iter().enumerate() {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            out[base + jj as usize] += *g;
                        }
                    }
                }
            }
        }
    }
}
