//! Subcommand implementations and the plumbing they share: checkpoint
//! loading, dataset hashing, evaluation-condition runners, and report
//! files.

pub mod eval_classify;
pub mod eval_segment;
pub mod fid;
pub mod phantom_gen;
pub mod repro_all;
pub mod train_diffusion;
pub mod train_guidance;
pub mod translate;

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use macdm::eval::{
    eval_downstream_classifier, reports_csv, reports_table, train_downstream_classifier,
    train_eval_segmenter, ClassificationSummary, RunProvenance,
};
use macdm::models::{
    load_checkpoint, save_checkpoint, ChannelWeights, CheckpointInfo, ClassifierConfig,
    ClassifierHead, Denoiser, DenoiserConfig, DENOISER_KIND, DOWNSTREAM_CLASSIFIER_KIND,
    GUIDANCE_CLASSIFIER_KIND,
};
use macdm::phantom::{load_dataset, save_dataset, split_folds, DatasetManifest};
use macdm::rng::{derive_seed, rng_from};
use macdm::{
    ConfusionCounts, Error, EvalTrainConfig, LabeledTriplet, MetricsReport, Result, ScheduleSpec,
};

use crate::config::RunConfig;
use crate::manifest::{dataset_fingerprint, sha256_file, Runner};

/// Loads a dataset directory and records its fingerprint as a run input.
pub fn load_dataset_input(
    runner: &mut Runner,
    role: &str,
    dir: &Path,
) -> Result<(DatasetManifest, Vec<LabeledTriplet>)> {
    let loaded = load_dataset(dir)?;
    runner.record_input(role, dir, dataset_fingerprint(dir)?);
    Ok(loaded)
}

/// Writes `records` as a dataset under `root/rel` and records it as a run
/// output.
pub fn save_dataset_output(
    runner: &mut Runner,
    role: &str,
    root: &Path,
    rel: &str,
    records: &[LabeledTriplet],
    resolution: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    let dir = root.join(rel);
    let manifest = save_dataset(&dir, records, resolution, seed)?;
    let rel_manifest = if rel.is_empty() {
        "manifest.json".to_string()
    } else {
        format!("{rel}/manifest.json")
    };
    runner.record_output(role, &rel_manifest, dataset_fingerprint(&dir)?);
    Ok(manifest)
}

fn rebuild_rng() -> rand_chacha::ChaCha8Rng {
    // Throwaway stream: the freshly initialized parameters are replaced by
    // the checkpoint's, so the seed only has to be fixed.
    rng_from(derive_seed(0, "checkpoint-rebuild"))
}

fn check_param_count(path: &Path, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Checkpoint(format!(
            "{}: architecture expects {expected} parameters, checkpoint holds {got}",
            path.display()
        )));
    }
    Ok(())
}

/// Loads a denoiser checkpoint, rebuilding the network from the sidecar's
/// architecture and recording the blob hash as a run input.
pub fn load_denoiser_input(
    runner: &mut Runner,
    role: &str,
    path: &Path,
) -> Result<(Denoiser, Vec<f64>, CheckpointInfo<DenoiserConfig>)> {
    let (info, params) = load_checkpoint::<DenoiserConfig>(path, DENOISER_KIND)?;
    let (net, init) = Denoiser::new(info.arch.clone(), &mut rebuild_rng())?;
    check_param_count(path, init.len(), params.len())?;
    runner.record_input(role, path, sha256_file(path)?);
    Ok((net, params, info))
}

/// Loads a classifier checkpoint of the given role tag, rebuilding the
/// network and recording the blob hash as a run input.
pub fn load_classifier_input(
    runner: &mut Runner,
    role: &str,
    path: &Path,
    expected_kind: &str,
) -> Result<(ClassifierHead, Vec<f64>, CheckpointInfo<ClassifierConfig>)> {
    let (info, params) = load_checkpoint::<ClassifierConfig>(path, expected_kind)?;
    let (net, init) = ClassifierHead::new(info.arch.clone(), &mut rebuild_rng())?;
    check_param_count(path, init.len(), params.len())?;
    runner.record_input(role, path, sha256_file(path)?);
    Ok((net, params, info))
}

/// Persists a trained downstream classifier (the feature extractor) and
/// returns its checkpoint path and blob hash.
pub fn save_extractor_checkpoint(
    dir: &Path,
    head: &ClassifierHead,
    params: &[f64],
    config: &EvalTrainConfig,
) -> Result<(PathBuf, String)> {
    fs::create_dir_all(dir)?;
    let path = dir.join("downstream-classifier.ckpt");
    let info = CheckpointInfo {
        kind: DOWNSTREAM_CLASSIFIER_KIND.to_string(),
        arch: head.config.clone(),
        schedule: ScheduleSpec::linear(head.config.t_max),
        channel_weights: ChannelWeights::default(),
        train_config_hash: config.hash(),
        seed: config.seed,
        param_count: 0,
        param_sha256: String::new(),
    };
    save_checkpoint(&path, info, params)?;
    let sha = sha256_file(&path)?;
    Ok((path, sha))
}

/// Guidance checkpoints are only interchangeable when both networks were
/// trained against the same conditioning weights; refuse mixed pairs.
pub fn check_weight_compatibility(
    denoiser: &CheckpointInfo<DenoiserConfig>,
    classifier: &CheckpointInfo<ClassifierConfig>,
) -> Result<()> {
    if denoiser.channel_weights != classifier.channel_weights {
        return Err(Error::Config(format!(
            "checkpoint weight mismatch: denoiser trained with {:?}, classifier with {:?}",
            denoiser.channel_weights, classifier.channel_weights
        )));
    }
    if denoiser.schedule != classifier.schedule {
        return Err(Error::Config(format!(
            "checkpoint schedule mismatch: denoiser trained with {:?}, classifier with {:?}",
            denoiser.schedule, classifier.schedule
        )));
    }
    Ok(())
}

/// Per-record fold assignments for cross-validation: reuses the manifest's
/// labels when every record carries one, otherwise assigns stratified
/// folds. Returns the assignments (index-aligned with the records) and the
/// fold count.
pub fn resolve_folds(
    manifest: &DatasetManifest,
    k: usize,
    seed: u64,
) -> Result<(Vec<usize>, usize)> {
    if !manifest.records.is_empty() && manifest.records.iter().all(|r| r.fold.is_some()) {
        let folds: Vec<usize> = manifest.records.iter().map(|r| r.fold.unwrap()).collect();
        let count = folds.iter().max().copied().unwrap_or(0) + 1;
        if count < 2 {
            return Err(Error::Dataset(
                "manifest fold labels define fewer than 2 folds".into(),
            ));
        }
        return Ok((folds, count));
    }
    let split = split_folds(manifest, k, derive_seed(seed, "cv-folds"))?;
    let folds = split
        .records
        .iter()
        .map(|r| r.fold.expect("split_folds assigns every record"))
        .collect();
    Ok((folds, k))
}

fn add_counts(a: ConfusionCounts, b: ConfusionCounts) -> ConfusionCounts {
    ConfusionCounts {
        true_positives: a.true_positives + b.true_positives,
        false_positives: a.false_positives + b.false_positives,
        true_negatives: a.true_negatives + b.true_negatives,
        false_negatives: a.false_negatives + b.false_negatives,
    }
}

/// Cross-validated confusion counts: for each fold, trains on the
/// remaining real records plus all `extra` records and evaluates on the
/// held-out fold. Synthetic records never enter a validation fold.
fn cv_counts(
    real: &[LabeledTriplet],
    folds: &[usize],
    fold_count: usize,
    extra: Option<&[LabeledTriplet]>,
    cfg: &RunConfig,
    label: &str,
) -> Result<ConfusionCounts> {
    let mut total = ConfusionCounts::default();
    for f in 0..fold_count {
        let mut train: Vec<LabeledTriplet> = real
            .iter()
            .zip(folds)
            .filter(|(_, &rf)| rf != f)
            .map(|(r, _)| r.clone())
            .collect();
        if let Some(extra) = extra {
            train.extend(extra.iter().cloned());
        }
        let held: Vec<LabeledTriplet> = real
            .iter()
            .zip(folds)
            .filter(|(_, &rf)| rf == f)
            .map(|(r, _)| r.clone())
            .collect();
        let ecfg = cfg.eval_classifier_config(&format!("{label}/fold-{f}"));
        let trained = train_downstream_classifier(&train, &ecfg)?;
        let counts = eval_downstream_classifier(&trained.head, &trained.params, &held)?;
        total = add_counts(total, counts);
    }
    Ok(total)
}

/// Classification rows for one or two augmentation conditions: a
/// cross-validation row and an independent-test row per condition.
#[allow(clippy::too_many_arguments)]
pub fn classify_conditions(
    real: &[LabeledTriplet],
    real_manifest: &DatasetManifest,
    synthetic: Option<&[LabeledTriplet]>,
    test: &[LabeledTriplet],
    cfg: &RunConfig,
    provenance: &RunProvenance,
) -> Result<Vec<MetricsReport>> {
    let (folds, fold_count) = resolve_folds(real_manifest, cfg.eval.folds, cfg.seed)?;
    let mut conditions: Vec<(&str, Option<&[LabeledTriplet]>)> = vec![("baseline", None)];
    if let Some(syn) = synthetic {
        conditions.push(("augmented", Some(syn)));
    }

    let mut reports = Vec::new();
    for (name, extra) in conditions {
        let label = format!("eval-classify/{name}");
        eprintln!("  condition {name}: {fold_count}-fold cross-validation");
        let cv = cv_counts(real, &folds, fold_count, extra, cfg, &label)?;
        let mut row = MetricsReport::new(format!("{name}-cv"), provenance.clone());
        row.classification = Some(ClassificationSummary::from_counts(cv)?);
        reports.push(row);

        eprintln!("  condition {name}: independent test");
        let mut train: Vec<LabeledTriplet> = real.to_vec();
        if let Some(extra) = extra {
            train.extend(extra.iter().cloned());
        }
        let ecfg = cfg.eval_classifier_config(&format!("{label}/test"));
        let trained = train_downstream_classifier(&train, &ecfg)?;
        let counts = eval_downstream_classifier(&trained.head, &trained.params, test)?;
        let mut row = MetricsReport::new(format!("{name}-test"), provenance.clone());
        row.classification = Some(ClassificationSummary::from_counts(counts)?);
        reports.push(row);
    }
    Ok(reports)
}

/// Segmentation rows: Dice on the fixed test set after training on real
/// records, synthetic records, and their union.
pub fn segment_conditions(
    real: &[LabeledTriplet],
    synthetic: Option<&[LabeledTriplet]>,
    test: &[LabeledTriplet],
    cfg: &RunConfig,
    provenance: &RunProvenance,
) -> Result<Vec<MetricsReport>> {
    let mut conditions: Vec<(&str, Vec<LabeledTriplet>)> = vec![("real", real.to_vec())];
    if let Some(syn) = synthetic {
        conditions.push(("augmented", syn.to_vec()));
        let mut both = real.to_vec();
        both.extend(syn.iter().cloned());
        conditions.push(("real-plus-augmented", both));
    }

    let mut reports = Vec::new();
    for (name, train) in conditions {
        eprintln!("  condition {name}: training segmenter on {} records", train.len());
        let ecfg = cfg.eval_segmenter_config(&format!("eval-segment/{name}"));
        let dice = train_eval_segmenter(&train, test, &ecfg)?;
        let mut row = MetricsReport::new(name.to_string(), provenance.clone());
        row.dice = Some(dice);
        reports.push(row);
    }
    Ok(reports)
}

fn sha256_str(s: &str) -> String {
    let mut h = Sha256::new();
    h.update(s.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Validates and writes `metrics.json` + `metrics.csv` under `dir`,
/// records them as outputs, and prints the table to stdout.
pub fn write_reports(runner: &mut Runner, dir: &Path, reports: &[MetricsReport]) -> Result<()> {
    for r in reports {
        r.validate()?;
    }
    let json = serde_json::to_string_pretty(reports)?;
    fs::write(dir.join("metrics.json"), &json)?;
    runner.record_output("metrics-json", "metrics.json", sha256_str(&json));
    let csv = reports_csv(reports);
    fs::write(dir.join("metrics.csv"), &csv)?;
    runner.record_output("metrics-csv", "metrics.csv", sha256_str(&csv));
    println!("{}", reports_table(reports));
    Ok(())
}
