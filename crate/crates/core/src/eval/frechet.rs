//! Feature-space distribution distance between two sample sets, modeling
//! each set as a Gaussian:
//! `d = ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
//!
//! The matrix square root is taken through the symmetric form
//! `Tr((S_a S_b)^{1/2}) = Tr((B S_a B)^{1/2})` with `B = S_b^{1/2}`, so
//! only symmetric eigendecompositions are needed. Covariances get a small
//! diagonal shrinkage so few-sample sets stay well conditioned.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array4, Axis};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::models::ClassifierHead;

use super::downstream::EVAL_T;

/// Diagonal mass added to every covariance estimate.
pub const COVARIANCE_SHRINKAGE: f64 = 1e-6;

/// Eigenvalues of a nominally PSD matrix may round slightly negative; below
/// this (relative to the largest eigenvalue) they indicate a real failure.
const PSD_TOLERANCE: f64 = 1e-8;

/// Unbiased mean and covariance (rows are samples), with shrinkage already
/// applied to the diagonal.
fn mean_and_covariance(x: &Array2<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let mut cov = DMatrix::zeros(d, d);
    let scale = 1.0 / (n - 1) as f64;
    for row in x.axis_iter(Axis(0)) {
        for i in 0..d {
            let ci = row[i] - mean[i];
            for j in 0..=i {
                cov[(i, j)] += scale * ci * (row[j] - mean[j]);
            }
        }
    }
    // The loop fills only the lower triangle; mirror it.
    for i in 0..d {
        for j in (i + 1)..d {
            cov[(i, j)] = cov[(j, i)];
        }
        cov[(i, i)] += COVARIANCE_SHRINKAGE;
    }
    (mean, cov)
}

/// Symmetric PSD square root via eigendecomposition, clamping roundoff
/// negatives to zero and rejecting genuinely indefinite inputs.
fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let floor = -PSD_TOLERANCE * max_eig.max(1.0);
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if !v.is_finite() || *v < floor {
            return Err(Error::Numeric(format!(
                "covariance square root failed: eigenvalue {v} after shrinkage"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// Gaussian-model distance between two feature sets (rows are samples).
/// Symmetric, non-negative, zero on identical inputs.
pub fn frechet_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    let (na, da) = a.dim();
    let (nb, db) = b.dim();
    if da != db || da == 0 {
        return Err(Error::ShapeMismatch {
            expected: format!("matching non-empty feature dims, first set has {da}"),
            got: format!("{db}"),
        });
    }
    for (name, set, n) in [("first", a, na), ("second", b, nb)] {
        if n < 2 {
            return Err(Error::Config(format!(
                "{name} feature set needs at least 2 samples for a covariance, has {n}"
            )));
        }
        if set.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{name} feature set contains non-finite entries"
            )));
        }
    }

    let (mu_a, cov_a) = mean_and_covariance(a);
    let (mu_b, cov_b) = mean_and_covariance(b);

    let root_b = sym_sqrt(&cov_b)?;
    let inner = &root_b * &cov_a * &root_b;
    // Symmetrize against accumulation roundoff before the second root.
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = inner.symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let floor = -PSD_TOLERANCE * max_eig.max(1.0);
    let mut trace_sqrt = 0.0;
    for &v in eig.eigenvalues.iter() {
        if !v.is_finite() || v < floor {
            return Err(Error::Numeric(format!(
                "covariance product square root failed: eigenvalue {v}"
            )));
        }
        trace_sqrt += v.max(0.0).sqrt();
    }

    let mean_term = (&mu_a - &mu_b).norm_squared();
    let d = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * trace_sqrt;
    if !d.is_finite() {
        return Err(Error::Numeric(format!("non-finite distance {d}")));
    }
    // Identical inputs cancel to zero only up to roundoff.
    Ok(d.max(0.0))
}

/// Distribution distance between two image sets in the embedding space of
/// a trained clean-image classifier (its pooled penultimate features).
pub fn fid_images(
    real: &[ImageTensor],
    synthetic: &[ImageTensor],
    extractor: &ClassifierHead,
    params: &[f64],
) -> Result<f64> {
    if extractor.config.in_channels != 1 {
        return Err(Error::Config(format!(
            "feature extractor must consume bare images (1 channel), has {}",
            extractor.config.in_channels
        )));
    }
    let fa = extract_image_features(real, extractor, params)?;
    let fb = extract_image_features(synthetic, extractor, params)?;
    frechet_distance(&fa, &fb)
}

/// Runs unit-range images through the extractor in batches; rows of the
/// result are per-image feature vectors.
pub(super) fn extract_image_features(
    images: &[ImageTensor],
    extractor: &ClassifierHead,
    params: &[f64],
) -> Result<Array2<f64>> {
    if images.is_empty() {
        return Err(Error::Dataset("no images to extract features from".into()));
    }
    let size = extractor.config.image_size;
    for img in images {
        if img.height() != size || img.width() != size {
            return Err(Error::ShapeMismatch {
                expected: format!("{size}x{size} (extractor input)"),
                got: format!("{}x{}", img.height(), img.width()),
            });
        }
    }
    const BATCH: usize = 64;
    let mut rows: Option<Array2<f64>> = None;
    let mut written = 0;
    for chunk in images.chunks(BATCH) {
        let mut x = Array4::<f64>::zeros((chunk.len(), 1, size, size));
        for (i, img) in chunk.iter().enumerate() {
            x.index_axis_mut(Axis(0), i)
                .index_axis_mut(Axis(0), 0)
                .assign(&img.data().mapv(|v| 2.0 * v - 1.0));
        }
        let f = extractor.features(params, &x, &vec![EVAL_T; chunk.len()])?;
        let out = rows.get_or_insert_with(|| Array2::zeros((images.len(), f.dim().1)));
        out.slice_mut(ndarray::s![written..written + chunk.len(), ..])
            .assign(&f);
        written += chunk.len();
    }
    Ok(rows.expect("at least one batch"))
}
