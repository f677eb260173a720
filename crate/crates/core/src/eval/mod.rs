//! Downstream value measurement: binary classification metrics, lesion
//! segmentation overlap, and feature-space distribution distance, plus the
//! report types the comparison harness serializes.
//!
//! Everything here is either a pure metric (exact rational arithmetic on
//! counts, closed-form matrix expressions) or a small supervised training
//! loop following the same determinism contract as the diffusion trainers:
//! one seed, one stream, bitwise-reproducible runs.

pub mod downstream;
pub mod frechet;
pub mod segmenter;

pub use downstream::{
    eval_downstream_classifier, extract_features, train_downstream_classifier,
    train_eval_downstream_classifier, EvalTrainConfig, TrainedDownstream, EVAL_T,
};
pub use frechet::{fid_images, frechet_distance, COVARIANCE_SHRINKAGE};
pub use segmenter::{
    eval_segmenter, train_eval_segmenter, train_segmenter, Segmenter, TrainedSegmenter,
    SEGMENTATION_THRESHOLD,
};

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::Label;

/// Binary confusion counts with the lesioned class as positive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.true_positives + self.false_positives + self.true_negatives + self.false_negatives
    }

    /// Tallies predictions against ground truth.
    pub fn from_predictions(predicted: &[Label], truth: &[Label]) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} predictions", truth.len()),
                got: format!("{}", predicted.len()),
            });
        }
        let mut c = ConfusionCounts::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (t, p) {
                (Label::Cml, Label::Cml) => c.true_positives += 1,
                (Label::Cml, Label::Normal) => c.false_negatives += 1,
                (Label::Normal, Label::Normal) => c.true_negatives += 1,
                (Label::Normal, Label::Cml) => c.false_positives += 1,
            }
        }
        Ok(c)
    }
}

/// The three headline classification fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Exact ratios from confusion counts. Any metric whose denominator is
/// zero is an error, never a silent zero: accuracy needs a non-empty set,
/// sensitivity needs positives, specificity needs negatives.
pub fn classification_metrics(counts: &ConfusionCounts) -> Result<ClassificationMetrics> {
    let n = counts.total();
    if n == 0 {
        return Err(Error::UndefinedMetric(
            "accuracy over an empty evaluation set".into(),
        ));
    }
    let positives = counts.true_positives + counts.false_negatives;
    if positives == 0 {
        return Err(Error::UndefinedMetric(
            "sensitivity without any positive-class items".into(),
        ));
    }
    let negatives = counts.true_negatives + counts.false_positives;
    if negatives == 0 {
        return Err(Error::UndefinedMetric(
            "specificity without any negative-class items".into(),
        ));
    }
    Ok(ClassificationMetrics {
        accuracy: (counts.true_positives + counts.true_negatives) as f64 / n as f64,
        sensitivity: counts.true_positives as f64 / positives as f64,
        specificity: counts.true_negatives as f64 / negatives as f64,
    })
}

/// Overlap coefficient 2|A∩B| / (|A|+|B|) between two binary masks.
/// Two empty masks agree perfectly: 1.
pub fn dice(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.dim()),
            got: format!("{:?}", b.dim()),
        });
    }
    for (name, m) in [("first", a), ("second", b)] {
        if m.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Dataset(format!("{name} mask is not binary")));
        }
    }
    let size_a = a.sum();
    let size_b = b.sum();
    if size_a == 0.0 && size_b == 0.0 {
        return Ok(1.0);
    }
    let inter: f64 = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum();
    Ok(2.0 * inter / (size_a + size_b))
}

/// Mean ± sample standard deviation of per-item Dice scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiceSummary {
    pub mean: f64,
    pub stdev: f64,
    /// Number of evaluated (lesioned) test items.
    pub n: usize,
}

impl DiceSummary {
    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::UndefinedMetric(
                "overlap summary over zero evaluated items".into(),
            ));
        }
        let n = scores.len();
        let mean = scores.iter().sum::<f64>() / n as f64;
        let stdev = if n > 1 {
            (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Ok(DiceSummary { mean, stdev, n })
    }
}

/// Classification section of a report: the raw counts plus their ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSummary {
    pub counts: ConfusionCounts,
    pub metrics: ClassificationMetrics,
}

impl ClassificationSummary {
    pub fn from_counts(counts: ConfusionCounts) -> Result<Self> {
        Ok(ClassificationSummary {
            counts,
            metrics: classification_metrics(&counts)?,
        })
    }
}

/// Distribution-distance section: the value plus the identity of the
/// feature extractor that produced it. Values are only comparable between
/// runs sharing the same extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidSummary {
    pub value: f64,
    pub extractor_sha256: String,
}

/// Where a report's numbers came from: the run seed plus content hashes of
/// every dataset and checkpoint involved, keyed by role name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunProvenance {
    pub seed: u64,
    pub dataset_sha256: BTreeMap<String, String>,
    pub checkpoint_sha256: BTreeMap<String, String>,
}

/// One evaluated condition's metrics. Sections are optional because the
/// single-purpose commands produce partial reports; validation bounds
/// whatever is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Human-readable condition label, e.g. "real" or "real+synthetic".
    pub condition: String,
    pub classification: Option<ClassificationSummary>,
    pub dice: Option<DiceSummary>,
    pub fid: Option<FidSummary>,
    pub provenance: RunProvenance,
}

impl MetricsReport {
    pub fn new(condition: impl Into<String>, provenance: RunProvenance) -> Self {
        MetricsReport {
            condition: condition.into(),
            classification: None,
            dice: None,
            fid: None,
            provenance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_fraction = |name: &str, v: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "report field {name}={v} outside [0, 1]"
                )));
            }
            Ok(())
        };
        if let Some(c) = &self.classification {
            check_fraction("accuracy", c.metrics.accuracy)?;
            check_fraction("sensitivity", c.metrics.sensitivity)?;
            check_fraction("specificity", c.metrics.specificity)?;
        }
        if let Some(d) = &self.dice {
            check_fraction("dice mean", d.mean)?;
            if !(d.stdev >= 0.0) {
                return Err(Error::Config(format!(
                    "report field dice stdev={} negative or non-finite",
                    d.stdev
                )));
            }
        }
        if let Some(f) = &self.fid {
            if !(f.value >= 0.0) {
                return Err(Error::Config(format!(
                    "report field fid={} negative or non-finite",
                    f.value
                )));
            }
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// CSV over a set of condition reports, one row per condition, blank cells
/// for absent sections.
pub fn reports_csv(reports: &[MetricsReport]) -> String {
    let mut out =
        String::from("condition,accuracy,sensitivity,specificity,dice_mean,dice_stdev,fid\n");
    for r in reports {
        let c = r.classification.as_ref().map(|c| c.metrics);
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.condition,
            fmt_opt(c.map(|m| m.accuracy)),
            fmt_opt(c.map(|m| m.sensitivity)),
            fmt_opt(c.map(|m| m.specificity)),
            fmt_opt(r.dice.map(|d| d.mean)),
            fmt_opt(r.dice.map(|d| d.stdev)),
            fmt_opt(r.fid.as_ref().map(|f| f.value)),
        ));
    }
    out
}

/// Fixed-width text table over a set of condition reports, for terminal
/// output. Absent sections render as dashes.
pub fn reports_table(reports: &[MetricsReport]) -> String {
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    let dice_cell = |d: Option<DiceSummary>| {
        d.map(|d| format!("{:.4} ± {:.4}", d.mean, d.stdev))
            .unwrap_or_else(|| "-".into())
    };
    let name_w = reports
        .iter()
        .map(|r| r.condition.len())
        .chain(["condition".len()])
        .max()
        .unwrap_or(9);

    let mut out = format!(
        "{:<name_w$}  {:>8}  {:>11}  {:>11}  {:>17}  {:>10}\n",
        "condition", "accuracy", "sensitivity", "specificity", "dice", "fid"
    );
    out.push_str(&"-".repeat(name_w + 2 + 8 + 2 + 11 + 2 + 11 + 2 + 17 + 2 + 10));
    out.push('\n');
    for r in reports {
        let c = r.classification.as_ref().map(|c| c.metrics);
        out.push_str(&format!(
            "{:<name_w$}  {:>8}  {:>11}  {:>11}  {:>17}  {:>10}\n",
            r.condition,
            cell(c.map(|m| m.accuracy)),
            cell(c.map(|m| m.sensitivity)),
            cell(c.map(|m| m.specificity)),
            dice_cell(r.dice),
            cell(r.fid.as_ref().map(|f| f.value)),
        ));
    }
    out
}
