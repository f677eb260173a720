//! Finite-difference gradient checks for every layer.
//!
//! Each check builds a scalar loss `L = sum(y * c)` with fixed random
//! coefficients `c`, so the upstream gradient is exactly `c`. Analytic
//! gradients from `backward` are then compared entry-by-entry against
//! central differences in `f64`, which resolves roughly 10 significant
//! digits on these well-conditioned toy shapes.

use ndarray::{Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::conv::Conv2d;
use super::linear::Linear;
use super::norm::GroupNorm;
use super::pool::{upsample_nearest2x, upsample_nearest2x_backward, AttnPool};
use super::store::StoreBuilder;
use crate::rng::{derive_seed, rng_from};

const FD_EPS: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn randn4(rng: &mut impl Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

fn randn2(rng: &mut impl Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

/// max |a-b| / max(1, max|a|, max|b|) over two gradient buffers.
fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric.iter())
        .fold(1.0_f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs() / scale))
}

/// Central-difference gradient of `loss` with respect to `buf`.
fn fd_grad(buf: &mut [f64], mut loss: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut grad = vec![0.0; buf.len()];
    for i in 0..buf.len() {
        let saved = buf[i];
        buf[i] = saved + FD_EPS;
        let lp = loss(buf);
        buf[i] = saved - FD_EPS;
        let lm = loss(buf);
        buf[i] = saved;
        grad[i] = (lp - lm) / (2.0 * FD_EPS);
    }
    grad
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    for &(stride, pad, k) in &[(1usize, 1usize, 3usize), (2, 1, 3), (1, 0, 1)] {
        let mut rng = rng_from(derive_seed(11, "gc-conv"));
        let mut b = StoreBuilder::new();
        let conv = Conv2d::new(&mut b, &mut rng, 3, 4, k, stride, pad, 1.0);
        let mut params = b.finish();
        let x = randn4(&mut rng, (2, 3, 5, 5));
        let (oh, ow) = conv.out_hw(5, 5);
        let c = randn4(&mut rng, (2, 4, oh, ow));

        let (y, cache) = conv.forward_cached(&params, &x);
        let mut grads = vec![0.0; params.len()];
        let gx = conv.backward(&params, &cache, &c, Some(&mut grads));
        let loss_y = (&y * &c).sum();
        assert!(loss_y.is_finite());

        let fd_p = fd_grad(&mut params, |p| (&conv.forward(p, &x) * &c).sum());
        assert!(
            max_rel_err(&grads, &fd_p) < TOL,
            "param grad mismatch at stride={stride} pad={pad} k={k}: {}",
            max_rel_err(&grads, &fd_p)
        );

        let mut xb = x.as_slice().unwrap().to_vec();
        let fd_x = fd_grad(&mut xb, |xv| {
            let xa = Array4::from_shape_vec((2, 3, 5, 5), xv.to_vec()).unwrap();
            (&conv.forward(&params, &xa) * &c).sum()
        });
        assert!(
            max_rel_err(gx.as_slice().unwrap(), &fd_x) < TOL,
            "input grad mismatch at stride={stride} pad={pad} k={k}"
        );
    }
}

#[test]
fn conv2d_backward_without_param_grads_matches() {
    let mut rng = rng_from(derive_seed(12, "gc-conv-nograd"));
    let mut b = StoreBuilder::new();
    let conv = Conv2d::new(&mut b, &mut rng, 2, 3, 3, 1, 1, 1.0);
    let params = b.finish();
    let x = randn4(&mut rng, (1, 2, 4, 4));
    let c = randn4(&mut rng, (1, 3, 4, 4));
    let (_, cache) = conv.forward_cached(&params, &x);
    let mut grads = vec![0.0; params.len()];
    let gx_full = conv.backward(&params, &cache, &c, Some(&mut grads));
    let gx_skip = conv.backward(&params, &cache, &c, None);
    assert_eq!(gx_full, gx_skip);
}

#[test]
fn group_norm_gradients_match_finite_differences() {
    let mut rng = rng_from(derive_seed(13, "gc-gn"));
    let mut b = StoreBuilder::new();
    // 6 channels -> 2 groups of 3? group_count picks largest of {8,4,2,1}
    // dividing 6, i.e. 2.
    let gn = GroupNorm::new(&mut b, 6);
    let mut params = b.finish();
    // Nudge gamma/beta off their (1, 0) init so their gradients are generic.
    for (i, p) in params.iter_mut().enumerate() {
        *p += 0.1 * ((i % 5) as f64 - 2.0);
    }
    let x = randn4(&mut rng, (2, 6, 3, 3));
    let c = randn4(&mut rng, (2, 6, 3, 3));

    let (y, cache) = gn.forward_cached(&params, &x);
    let mut grads = vec![0.0; params.len()];
    let gx = gn.backward(&params, &cache, &c, Some(&mut grads));
    assert!((&y * &c).sum().is_finite());

    let fd_p = fd_grad(&mut params, |p| (&gn.forward(p, &x) * &c).sum());
    assert!(max_rel_err(&grads, &fd_p) < TOL, "gamma/beta grad mismatch");

    let mut xb = x.as_slice().unwrap().to_vec();
    let fd_x = fd_grad(&mut xb, |xv| {
        let xa = Array4::from_shape_vec((2, 6, 3, 3), xv.to_vec()).unwrap();
        (&gn.forward(&params, &xa) * &c).sum()
    });
    assert!(
        max_rel_err(gx.as_slice().unwrap(), &fd_x) < TOL,
        "input grad mismatch: {}",
        max_rel_err(gx.as_slice().unwrap(), &fd_x)
    );
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut rng = rng_from(derive_seed(14, "gc-linear"));
    let mut b = StoreBuilder::new();
    let lin = Linear::new(&mut b, &mut rng, 5, 3, 1.0);
    let mut params = b.finish();
    let x = randn2(&mut rng, (4, 5));
    let c = randn2(&mut rng, (4, 3));

    let (_, cache) = lin.forward_cached(&params, &x);
    let mut grads = vec![0.0; params.len()];
    let gx = lin.backward(&params, &cache, &c, Some(&mut grads));

    let fd_p = fd_grad(&mut params, |p| (&lin.forward(p, &x) * &c).sum());
    assert!(max_rel_err(&grads, &fd_p) < TOL);

    let mut xb = x.as_slice().unwrap().to_vec();
    let fd_x = fd_grad(&mut xb, |xv| {
        let xa = Array2::from_shape_vec((4, 5), xv.to_vec()).unwrap();
        (&lin.forward(&params, &xa) * &c).sum()
    });
    assert!(max_rel_err(gx.as_slice().unwrap(), &fd_x) < TOL);
}

#[test]
fn attn_pool_gradients_match_finite_differences() {
    let mut rng = rng_from(derive_seed(15, "gc-attnpool"));
    let mut b = StoreBuilder::new();
    let pool = AttnPool::new(&mut b, &mut rng, 4);
    let mut params = b.finish();
    let x = randn4(&mut rng, (2, 4, 3, 3));
    let c = randn2(&mut rng, (2, 4));

    let (_, cache) = pool.forward_cached(&params, &x);
    let mut grads = vec![0.0; params.len()];
    let gx = pool.backward(&params, &cache, &c, Some(&mut grads));

    let fd_p = fd_grad(&mut params, |p| (&pool.forward(p, &x) * &c).sum());
    assert!(
        max_rel_err(&grads, &fd_p) < TOL,
        "score conv grad mismatch: {}",
        max_rel_err(&grads, &fd_p)
    );

    let mut xb = x.as_slice().unwrap().to_vec();
    let fd_x = fd_grad(&mut xb, |xv| {
        let xa = Array4::from_shape_vec((2, 4, 3, 3), xv.to_vec()).unwrap();
        (&pool.forward(&params, &xa) * &c).sum()
    });
    assert!(
        max_rel_err(gx.as_slice().unwrap(), &fd_x) < TOL,
        "input grad mismatch: {}",
        max_rel_err(gx.as_slice().unwrap(), &fd_x)
    );
}

#[test]
fn silu_gradients_match_finite_differences() {
    let mut rng = rng_from(derive_seed(16, "gc-silu"));
    let x = randn4(&mut rng, (1, 2, 3, 3));
    let c = randn4(&mut rng, (1, 2, 3, 3));
    let gx = super::act::silu_backward(&x, &c);
    let mut xb = x.as_slice().unwrap().to_vec();
    let fd_x = fd_grad(&mut xb, |xv| {
        let xa = Array4::from_shape_vec((1, 2, 3, 3), xv.to_vec()).unwrap();
        (&super::act::silu(&xa) * &c).sum()
    });
    assert!(max_rel_err(gx.as_slice().unwrap(), &fd_x) < TOL);
}

#[test]
fn upsample_backward_is_adjoint_of_forward() {
    // For a linear map U, <Ux, y> == <x, U^T y> for all x, y.
    let mut rng = rng_from(derive_seed(17, "gc-upsample"));
    let x = randn4(&mut rng, (2, 3, 4, 4));
    let y = randn4(&mut rng, (2, 3, 8, 8));
    let lhs = (&upsample_nearest2x(&x) * &y).sum();
    let rhs = (&x * &upsample_nearest2x_backward(&y)).sum();
    assert!((lhs - rhs).abs() < 1e-10);
}

#[test]
fn log_softmax_rows_sum_to_one_after_exp() {
    let mut rng = rng_from(derive_seed(18, "gc-lsm"));
    let x = randn2(&mut rng, (3, 7));
    let ls = super::act::log_softmax(&x);
    for row in ls.rows() {
        let total: f64 = row.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
    // Invariant under constant row shifts.
    let shifted = &x + 100.0;
    let ls2 = super::act::log_softmax(&shifted);
    for (a, b) in ls.iter().zip(ls2.iter()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn global_avg_pool_backward_is_adjoint() {
    let mut rng = rng_from(derive_seed(19, "gc-gap"));
    let x = randn4(&mut rng, (2, 3, 4, 4));
    let y = randn2(&mut rng, (2, 3));
    let lhs = (&super::pool::global_avg_pool(&x) * &y).sum();
    let rhs = (&x * &super::pool::global_avg_pool_backward(&y, 4, 4)).sum();
    assert!((lhs - rhs).abs() < 1e-10);
}
