//! Generator and dataset-format tests.

use tempfile::tempdir;

use super::*;
use crate::rng::derive_seed;

#[test]
fn same_seed_gives_bitwise_identical_phantoms() {
    for label in [Label::Normal, Label::Cml] {
        let a = generate_phantom(97, label, 32).unwrap();
        let b = generate_phantom(97, label, 32).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.bone_mask, b.bone_mask);
        assert_eq!(a.lesion_mask, b.lesion_mask);
    }
    let a = generate_phantom(97, Label::Cml, 32).unwrap();
    let b = generate_phantom(98, Label::Cml, 32).unwrap();
    assert_ne!(a.image.data(), b.image.data(), "seeds must matter");
}

#[test]
fn normal_phantoms_have_empty_lesion_masks() {
    for seed in 0..50 {
        let t = generate_phantom(seed, Label::Normal, 32).unwrap();
        assert_eq!(t.lesion_mask.sum(), 0.0, "seed {seed}");
    }
}

#[test]
fn rejects_too_small_size() {
    assert!(generate_phantom(1, Label::Normal, 15).is_err());
    assert!(generate_phantom(1, Label::Normal, 16).is_ok());
}

#[test]
fn cml_lesion_area_always_within_bounds_sweep() {
    // 1,000 phantoms: the lesion fraction of bone area must be inside
    // [0.5%, 5%] every single time, and lesions must hug the bone margin.
    for seed in 0..1000u64 {
        let t = generate_phantom(derive_seed(1234, &format!("sweep-{seed}")), Label::Cml, 32)
            .unwrap();
        let bone_area = t.bone_mask.sum();
        let lesion_area = t.lesion_mask.sum();
        let frac = lesion_area / bone_area;
        assert!(
            (0.005..=0.05).contains(&frac),
            "seed {seed}: lesion fraction {frac}"
        );
        // Every lesion pixel is within a few pixels of a bone-boundary
        // pixel (the corner margin band).
        let (h, w) = t.bone_mask.dim();
        for y in 0..h {
            for x in 0..w {
                if t.lesion_mask[[y, x]] == 0.0 {
                    continue;
                }
                let mut near_boundary = false;
                'scan: for dy in -3i64..=3 {
                    for dx in -3i64..=3 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if t.bone_mask[[ny, nx]] == 1.0 {
                            let on_edge = ny == 0
                                || ny == h - 1
                                || nx == 0
                                || nx == w - 1
                                || t.bone_mask[[ny - 1, nx]] == 0.0
                                || t.bone_mask[[ny + 1, nx]] == 0.0
                                || t.bone_mask[[ny, nx - 1]] == 0.0
                                || t.bone_mask[[ny, nx + 1]] == 0.0;
                            if on_edge {
                                near_boundary = true;
                                break 'scan;
                            }
                        }
                    }
                }
                assert!(near_boundary, "seed {seed}: lesion pixel ({y},{x}) far from bone margin");
            }
        }
    }
}

#[test]
fn cml_lesions_darken_the_image() {
    // The defect must be visible: mean intensity under the lesion clearly
    // below the mean intensity of the rest of the bone.
    let mut visible = 0;
    for seed in 0..40u64 {
        let t = generate_phantom(derive_seed(77, &format!("dark-{seed}")), Label::Cml, 32).unwrap();
        let img = t.image.data();
        let (mut lesion_sum, mut lesion_n) = (0.0, 0.0);
        let (mut bone_sum, mut bone_n) = (0.0, 0.0);
        for ((y, x), &v) in img.indexed_iter() {
            if t.lesion_mask[[y, x]] == 1.0 {
                lesion_sum += v;
                lesion_n += 1.0;
            } else if t.bone_mask[[y, x]] == 1.0 {
                bone_sum += v;
                bone_n += 1.0;
            }
        }
        if lesion_sum / lesion_n < bone_sum / bone_n - 0.1 {
            visible += 1;
        }
    }
    assert!(visible >= 38, "only {visible}/40 lesions were clearly darker");
}

#[test]
fn corpus_counts_ids_and_reproducibility() {
    let a = generate_corpus(7, 3, 32, 42).unwrap();
    assert_eq!(a.len(), 10);
    assert_eq!(a.iter().filter(|t| t.label == Label::Normal).count(), 7);
    assert_eq!(a.iter().filter(|t| t.label == Label::Cml).count(), 3);
    let ids: std::collections::HashSet<_> = a.iter().map(|t| t.id.clone()).collect();
    assert_eq!(ids.len(), 10, "ids must be unique");

    let b = generate_corpus(7, 3, 32, 42).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.image.data(), y.image.data());
        assert_eq!(x.bone_mask, y.bone_mask);
        assert_eq!(x.lesion_mask, y.lesion_mask);
    }
}

#[test]
fn dataset_round_trip_and_checksums() {
    let dir = tempdir().unwrap();
    let records = generate_corpus(4, 2, 32, 9).unwrap();
    let manifest = save_dataset(dir.path(), &records, 32, 9).unwrap();
    assert_eq!(manifest.records.len(), 6);

    let (loaded_manifest, loaded) = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded_manifest.records.len(), 6);
    for (orig, got) in records.iter().zip(&loaded) {
        assert_eq!(orig.id, got.id);
        assert_eq!(orig.label, got.label);
        assert_eq!(orig.bone_mask, got.bone_mask, "masks are stored losslessly");
        assert_eq!(orig.lesion_mask, got.lesion_mask);
        let max_err = (orig.image.data() - got.image.data())
            .iter()
            .fold(0.0_f64, |m, d| m.max(d.abs()));
        assert!(max_err <= 1.0 / 255.0 + 1e-12, "quantization error {max_err}");
    }

    // Saving the same records twice produces byte-identical files.
    let dir2 = tempdir().unwrap();
    let manifest2 = save_dataset(dir2.path(), &records, 32, 9).unwrap();
    for (a, b) in manifest.records.iter().zip(&manifest2.records) {
        assert_eq!(a.image_sha256, b.image_sha256);
        assert_eq!(a.bone_sha256, b.bone_sha256);
        assert_eq!(a.lesion_sha256, b.lesion_sha256);
    }

    // Corrupting one file makes the load fail and name the record.
    let victim = &manifest.records[3];
    let path = dir.path().join(&victim.image_path);
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(
        err.contains(&victim.id),
        "error should name record {}: {err}",
        victim.id
    );
}

#[test]
fn empty_dataset_round_trips() {
    let dir = tempdir().unwrap();
    let manifest = save_dataset(dir.path(), &[], 32, 0).unwrap();
    assert!(manifest.records.is_empty());
    let (m, records) = load_dataset(dir.path()).unwrap();
    assert!(m.records.is_empty());
    assert!(records.is_empty());
}

#[test]
fn fold_split_is_stratified_and_complete() {
    let dir = tempdir().unwrap();
    let records = generate_corpus(25, 10, 32, 5).unwrap();
    let manifest = save_dataset(dir.path(), &records, 32, 5).unwrap();

    for seed in 0..20u64 {
        let split = split_folds(&manifest, 5, seed).unwrap();
        let mut per_fold_normal = [0usize; 5];
        let mut per_fold_cml = [0usize; 5];
        for r in &split.records {
            let f = r.fold.expect("every record gets a fold");
            match r.label {
                Label::Normal => per_fold_normal[f] += 1,
                Label::Cml => per_fold_cml[f] += 1,
            }
        }
        assert_eq!(per_fold_normal.iter().sum::<usize>(), 25);
        assert_eq!(per_fold_cml.iter().sum::<usize>(), 10);
        assert!(per_fold_normal.iter().all(|&n| n == 5), "{per_fold_normal:?}");
        assert!(per_fold_cml.iter().all(|&n| n == 2), "{per_fold_cml:?}");
    }

    // Uneven counts: per-fold class counts differ by at most one.
    let records = generate_corpus(23, 9, 32, 6).unwrap();
    let manifest = save_dataset(&tempdir().unwrap().path().join("d"), &records, 32, 6).unwrap();
    let split = split_folds(&manifest, 5, 3).unwrap();
    let mut per_fold = vec![[0usize; 2]; 5];
    for r in &split.records {
        per_fold[r.fold.unwrap()][r.label.index()] += 1;
    }
    for class in 0..2 {
        let counts: Vec<usize> = per_fold.iter().map(|f| f[class]).collect();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "class {class} fold counts {counts:?}");
    }
}

#[test]
fn fold_split_rejects_small_classes() {
    let dir = tempdir().unwrap();
    let records = generate_corpus(10, 3, 32, 5).unwrap();
    let manifest = save_dataset(dir.path(), &records, 32, 5).unwrap();
    assert!(split_folds(&manifest, 5, 0).is_err(), "3 CMLs cannot fill 5 folds");
    assert!(split_folds(&manifest, 1, 0).is_err(), "k must be at least 2");
}

#[test]
fn triplet_invariants_are_enforced() {
    let t = generate_phantom(3, Label::Cml, 32).unwrap();
    // Forged normal label on a record with lesions must be rejected.
    let forged = LabeledTriplet::new(
        t.image.clone(),
        t.bone_mask.clone(),
        t.lesion_mask.clone(),
        Label::Normal,
        "forged".into(),
        Provenance::Phantom,
    );
    assert!(forged.is_err());

    // Non-binary mask rejected.
    let mut bad = t.bone_mask.clone();
    bad[[0, 0]] = 0.5;
    assert!(LabeledTriplet::new(
        t.image.clone(),
        bad,
        t.lesion_mask.clone(),
        Label::Cml,
        "bad".into(),
        Provenance::Phantom,
    )
    .is_err());
}

#[test]
fn symmetric_state_maps_ranges() {
    let t = generate_phantom(11, Label::Cml, 32).unwrap();
    let s = t.to_symmetric_state();
    assert_eq!(s.dim(), (3, 32, 32));
    // Mask channels are exactly {-1, +1}; image stays inside [-1, 1].
    for &v in s.index_axis(ndarray::Axis(0), 1).iter() {
        assert!(v == -1.0 || v == 1.0);
    }
    for &v in s.index_axis(ndarray::Axis(0), 0).iter() {
        assert!((-1.0..=1.0).contains(&v));
    }
}
