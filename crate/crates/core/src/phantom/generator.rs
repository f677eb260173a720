//! Procedural bone-phantom renderer.
//!
//! Each phantom is a randomized vertically oriented rounded shaft with a
//! flared metaphysis near one image edge. The grayscale render layers a
//! smooth background gradient, a brighter bone interior with a faint
//! cortical rim, optional corner defects, Gaussian blur, sensor noise, and
//! a random contrast/gamma transfer — so images vary in brightness,
//! contrast, and sharpness while the masks stay clean geometry.
//!
//! CML-labeled phantoms carry one or two crescent-shaped low-intensity
//! defects hugging the corners of the flared end. The defect pixels are
//! chosen from a thin band straddling the bone boundary (nearest band
//! pixels to each corner), which both yields the crescent shape and
//! guarantees the lesion stays on the metaphyseal margin. Lesion area is
//! clamped to 0.5%–5% of bone area by construction.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, ValueRange};
use crate::phantom::{Label, LabeledTriplet, Provenance};
use crate::rng::{derive_seed, rng_from};

/// Smallest supported phantom edge length.
pub const MIN_SIZE: usize = 16;

/// Deterministically renders one phantom; identical arguments give
/// bitwise-identical triplets.
pub fn generate_phantom(seed: u64, label: Label, size: usize) -> Result<LabeledTriplet> {
    if size < MIN_SIZE {
        return Err(Error::Config(format!(
            "phantom size {size} is below the minimum {MIN_SIZE}"
        )));
    }
    let mut rng = rng_from(seed);
    let s = size as f64;

    // Shaft geometry (canonical orientation: flare at the bottom; the whole
    // render is flipped vertically at the end for half the draws).
    let cx0 = s * rng.gen_range(0.42..0.58);
    let tilt: f64 = rng.gen_range(-0.08..0.08);
    let hw = s * rng.gen_range(0.10..0.15);
    let flare_len = s * rng.gen_range(0.18..0.28);
    let flare_scale = rng.gen_range(1.7..2.4);
    let top_inset = s * rng.gen_range(0.08..0.16);
    let cap_len = hw * rng.gen_range(0.8..1.2);
    let flip = rng.gen_bool(0.5);

    // Render parameters.
    let bg0 = rng.gen_range(0.18..0.30);
    let gx = rng.gen_range(-0.12..0.12);
    let gy = rng.gen_range(-0.12..0.12);
    let bone_level = rng.gen_range(0.45..0.60);
    let rim_gain = rng.gen_range(0.04..0.09);
    let defect_depth = rng.gen_range(0.35..0.55);
    let blur_sigma = rng.gen_range(0.5..0.9);
    let noise_sigma = rng.gen_range(0.008..0.025);
    let contrast = rng.gen_range(0.85..1.15);
    let gamma = rng.gen_range(0.8..1.25);

    // Lesion parameters are always drawn so normal and CML phantoms share
    // the same stream layout for everything else.
    let n_lesions = 1 + rng.gen_range(0..2usize);
    let lesion_frac = rng.gen_range(0.012..0.045);

    let y_bot = size - 2;
    let y_top = top_inset.round() as usize;
    let half_width = |y: usize| -> f64 {
        if y < y_top || y > y_bot {
            return 0.0;
        }
        let mut h = hw;
        let from_bot = (y_bot - y) as f64;
        if from_bot < flare_len {
            let u = 1.0 - from_bot / flare_len;
            h *= 1.0 + (flare_scale - 1.0) * u * u;
        }
        let from_top = (y - y_top) as f64;
        if from_top < cap_len {
            let u = (cap_len - from_top) / cap_len;
            h *= (1.0 - u * u).max(0.0).sqrt();
        }
        h
    };
    let center = |y: usize| cx0 + tilt * (y as f64 - s / 2.0);

    let mut bone = Array2::<f64>::zeros((size, size));
    for y in 0..size {
        let h = half_width(y);
        if h <= 0.0 {
            continue;
        }
        let c = center(y);
        for x in 0..size {
            if (x as f64 - c).abs() <= h {
                bone[[y, x]] = 1.0;
            }
        }
    }
    let bone_area = bone.sum();
    if bone_area < 4.0 {
        // Unreachable for the parameter ranges above; guards degenerate
        // geometry if they are ever widened.
        return Err(Error::Numeric("degenerate phantom geometry".into()));
    }

    // Boundary: bone pixels with a non-bone 4-neighbour (or on the frame).
    let boundary = boundary_of(&bone);
    // Band straddling the boundary: every pixel within 2.0 of a boundary
    // pixel, inside or outside the bone.
    let band = dilate(&boundary, 2.0);

    // Corner defects for CML phantoms.
    let mut lesion = Array2::<f64>::zeros((size, size));
    if label == Label::Cml {
        let yc = y_bot;
        let c = center(yc);
        let h = half_width(yc);
        let corners: Vec<(f64, f64)> = if n_lesions == 2 {
            vec![(yc as f64, c - h), (yc as f64, c + h)]
        } else {
            // One lesion: pick a side with the next coin flip.
            let side = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
            vec![(yc as f64, c + side * h)]
        };
        let lo = (0.005 * bone_area).ceil() as usize;
        let hi = (0.05 * bone_area).floor() as usize;
        let k = ((lesion_frac * bone_area).round() as usize).clamp(lo.max(1), hi.max(1));

        // Nearest band pixels to any corner, deterministic tie-break on
        // index: a crescent along the corner margin.
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for y in 0..size {
            for x in 0..size {
                if band[[y, x]] > 0.0 {
                    let d = corners
                        .iter()
                        .map(|&(cy, cx)| {
                            let dy = y as f64 - cy;
                            let dx = x as f64 - cx;
                            dy * dy + dx * dx
                        })
                        .fold(f64::INFINITY, f64::min);
                    candidates.push((d, y, x));
                }
            }
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for &(_, y, x) in candidates.iter().take(k) {
            lesion[[y, x]] = 1.0;
        }
    }

    // Grayscale render.
    let mut img = Array2::<f64>::zeros((size, size));
    for y in 0..size {
        for x in 0..size {
            let mut v = bg0 + gx * (x as f64 / s - 0.5) + gy * (y as f64 / s - 0.5);
            if bone[[y, x]] > 0.0 {
                v += bone_level;
                if boundary[[y, x]] > 0.0 {
                    v += rim_gain;
                }
            }
            if lesion[[y, x]] > 0.0 {
                v -= defect_depth;
            }
            img[[y, x]] = v;
        }
    }
    gaussian_blur(&mut img, blur_sigma);
    for v in img.iter_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v += noise_sigma * n;
        *v = 0.5 + (*v - 0.5) * contrast;
        *v = v.clamp(0.0, 1.0).powf(gamma);
    }

    if flip {
        img = flip_rows(&img);
        bone = flip_rows(&bone);
        lesion = flip_rows(&lesion);
    }

    LabeledTriplet::new(
        ImageTensor::new(img, ValueRange::UNIT)?,
        bone,
        lesion,
        label,
        format!("seed-{seed}"),
        Provenance::Phantom,
    )
}

/// Generates `n_normal` normal and `n_cml` CML phantoms with ids
/// `ph-normal-0000`… / `ph-cml-0000`…; per-record seeds are derived by
/// hashing (seed, id), so records are independent of generation order.
pub fn generate_corpus(
    n_normal: usize,
    n_cml: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<LabeledTriplet>> {
    let mut out = Vec::with_capacity(n_normal + n_cml);
    for (count, label, tag) in [(n_normal, Label::Normal, "normal"), (n_cml, Label::Cml, "cml")] {
        for i in 0..count {
            let id = format!("ph-{tag}-{i:04}");
            let mut t = generate_phantom(derive_seed(seed, &id), label, size)?;
            t.id = id;
            out.push(t);
        }
    }
    Ok(out)
}

fn boundary_of(mask: &Array2<f64>) -> Array2<f64> {
    let (h, w) = mask.dim();
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] == 0.0 {
                continue;
            }
            let on_frame = y == 0 || y == h - 1 || x == 0 || x == w - 1;
            let edge = on_frame
                || mask[[y - 1, x]] == 0.0
                || mask[[y + 1, x]] == 0.0
                || mask[[y, x - 1]] == 0.0
                || mask[[y, x + 1]] == 0.0;
            if edge {
                out[[y, x]] = 1.0;
            }
        }
    }
    out
}

fn dilate(mask: &Array2<f64>, radius: f64) -> Array2<f64> {
    let (h, w) = mask.dim();
    let r = radius.ceil() as isize;
    let r2 = radius * radius;
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h as isize {
        for x in 0..w as isize {
            if mask[[y as usize, x as usize]] == 0.0 {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    if (dy * dy + dx * dx) as f64 <= r2 {
                        out[[ny as usize, nx as usize]] = 1.0;
                    }
                }
            }
        }
    }
    out
}

/// Separable Gaussian blur with replicated edges; radius 2 covers the
/// sigma range used by the generator.
fn gaussian_blur(img: &mut Array2<f64>, sigma: f64) {
    let r = 2i64;
    let mut kernel = [0.0; 5];
    let mut total = 0.0;
    for (i, k) in kernel.iter_mut().enumerate() {
        let d = i as f64 - r as f64;
        *k = (-d * d / (2.0 * sigma * sigma)).exp();
        total += *k;
    }
    for k in kernel.iter_mut() {
        *k /= total;
    }
    let (h, w) = img.dim();
    let clampi = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * img[[y, clampi(x as i64 + i as i64 - r, w)]];
            }
            tmp[[y, x]] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * tmp[[clampi(y as i64 + i as i64 - r, h), x]];
            }
            img[[y, x]] = acc;
        }
    }
}

fn flip_rows(a: &Array2<f64>) -> Array2<f64> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(y, x)| a[[h - 1 - y, x]])
}
