//! Clean-image binary classifier for downstream evaluation. Reuses the
//! guidance classifier architecture with a single input channel and a
//! constant timestep, so its pooled penultimate features double as the
//! embedding space for distribution-distance scoring.

use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{ClassifierConfig, ClassifierHead, NUM_CLASSES};
use crate::nn::{clip_grad_norm, log_softmax, Adam};
use crate::phantom::{Label, LabeledTriplet};
use crate::rng::{derive_seed, rng_from};
use crate::training::{check_dataset, GRAD_CLIP_NORM};

use super::ConfusionCounts;

/// Fixed timestep fed to clean-image networks: the embedding becomes a
/// constant bias, carrying no schedule semantics.
pub const EVAL_T: usize = 1;

/// Hyperparameters for the small supervised evaluation networks (the
/// downstream classifier and the segmenter share this shape).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub emb_dim: usize,
    pub seed: u64,
}

impl Default for EvalTrainConfig {
    /// Desk-scale classifier defaults.
    fn default() -> Self {
        EvalTrainConfig {
            iterations: 300,
            batch_size: 8,
            learning_rate: 1e-3,
            base_channels: 8,
            channel_mults: vec![1, 2],
            emb_dim: 16,
            seed: 0,
        }
    }
}

impl EvalTrainConfig {
    /// Desk-scale segmenter defaults: dense per-pixel supervision needs a
    /// slightly longer run at a gentler rate.
    pub fn desk_segmenter() -> Self {
        EvalTrainConfig {
            iterations: 400,
            learning_rate: 5e-4,
            ..EvalTrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.base_channels == 0 || self.channel_mults.is_empty() {
            return Err(Error::Config(
                "base_channels and channel_mults must be non-empty".into(),
            ));
        }
        Ok(())
    }

    /// Content hash, recorded in checkpoint sidecars and reports.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A trained downstream classifier with its parameters and loss history.
#[derive(Debug, Clone)]
pub struct TrainedDownstream {
    pub head: ClassifierHead,
    pub params: Vec<f64>,
    pub history: Vec<f64>,
}

/// Stacks the image channels of `items` (mapped to model range) into a
/// (N, 1, H, W) batch.
fn image_batch(items: &[&LabeledTriplet], size: usize) -> Array4<f64> {
    let mut x = Array4::<f64>::zeros((items.len(), 1, size, size));
    for (i, item) in items.iter().enumerate() {
        x.index_axis_mut(Axis(0), i)
            .index_axis_mut(Axis(0), 0)
            .assign(&item.image.data().mapv(|v| 2.0 * v - 1.0));
    }
    x
}

/// Mirrors a (N, C, H, W) batch in place along the chosen spatial axes,
/// per-sample. The phantom distribution is symmetric under both mirrorings
/// (orientation and lesion side are fair coin flips), so this is
/// label-preserving augmentation that slows memorization on small corpora.
pub(super) fn flip_augment(x: &mut Array4<f64>, flips: &[(bool, bool)]) {
    for (i, &(fv, fh)) in flips.iter().enumerate() {
        let mut view = x.index_axis_mut(Axis(0), i);
        if fv {
            let mut rev = view.to_owned();
            rev.invert_axis(Axis(1));
            view.assign(&rev);
        }
        if fh {
            let mut rev = view.to_owned();
            rev.invert_axis(Axis(2));
            view.assign(&rev);
        }
    }
}

/// Trains a binary classifier on clean images with cross-entropy.
/// Deterministic for a fixed config; both classes must be present.
pub fn train_downstream_classifier(
    train: &[LabeledTriplet],
    config: &EvalTrainConfig,
) -> Result<TrainedDownstream> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("training dataset is empty".into()));
    }
    let size = train[0].image.height();
    check_dataset(train, size)?;
    let classes: std::collections::BTreeSet<usize> =
        train.iter().map(|d| d.label.index()).collect();
    if classes.len() < NUM_CLASSES {
        return Err(Error::Dataset(format!(
            "classifier training needs both classes, dataset has only {:?}",
            train[0].label
        )));
    }

    let arch = ClassifierConfig {
        in_channels: 1,
        image_size: size,
        base_channels: config.base_channels,
        channel_mults: config.channel_mults.clone(),
        emb_dim: config.emb_dim,
        t_max: EVAL_T,
    };
    let mut rng = rng_from(derive_seed(config.seed, "train-downstream-classifier"));
    let (head, mut params) = ClassifierHead::new(arch, &mut rng)?;
    let mut adam = Adam::new(config.learning_rate, params.len());
    let mut grads = vec![0.0; params.len()];
    let mut history = Vec::with_capacity(config.iterations);

    for iter in 1..=config.iterations {
        let picks: Vec<&LabeledTriplet> = (0..config.batch_size)
            .map(|_| &train[rng.gen_range(0..train.len())])
            .collect();
        let flips: Vec<(bool, bool)> = (0..picks.len())
            .map(|_| (rng.gen_bool(0.5), rng.gen_bool(0.5)))
            .collect();
        let mut x = image_batch(&picks, size);
        flip_augment(&mut x, &flips);
        let ts = vec![EVAL_T; picks.len()];
        let (logits, cache) = head.forward_logits_cached(&params, &x, &ts)?;
        let ls = log_softmax(&logits);
        let n = config.batch_size as f64;
        let mut loss = 0.0;
        let mut g_logits = ls.mapv(f64::exp);
        for (i, item) in picks.iter().enumerate() {
            let y = item.label.index();
            loss -= ls[[i, y]] / n;
            g_logits[[i, y]] -= 1.0;
        }
        g_logits /= n;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "downstream classifier training diverged at iteration {iter}: loss {loss}"
            )));
        }
        grads.fill(0.0);
        head.backward_from_logits(&params, &cache, &g_logits, Some(&mut grads));
        let norm = clip_grad_norm(&mut grads, GRAD_CLIP_NORM);
        if !norm.is_finite() {
            return Err(Error::Numeric(format!(
                "downstream classifier training diverged at iteration {iter}: gradient norm {norm}"
            )));
        }
        adam.step(&mut params, &grads);
        history.push(loss);
    }
    Ok(TrainedDownstream {
        head,
        params,
        history,
    })
}

/// Batched class predictions on clean images; ties break toward normal.
fn predict_labels(
    head: &ClassifierHead,
    params: &[f64],
    items: &[LabeledTriplet],
) -> Result<Vec<Label>> {
    let size = head.config.image_size;
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(64) {
        let refs: Vec<&LabeledTriplet> = chunk.iter().collect();
        let x = image_batch(&refs, size);
        let logits = head.forward_logits(params, &x, &vec![EVAL_T; chunk.len()])?;
        for row in logits.axis_iter(Axis(0)) {
            out.push(if row[1] > row[0] {
                Label::Cml
            } else {
                Label::Normal
            });
        }
    }
    Ok(out)
}

/// Confusion counts of a trained classifier on a test set.
pub fn eval_downstream_classifier(
    head: &ClassifierHead,
    params: &[f64],
    test: &[LabeledTriplet],
) -> Result<ConfusionCounts> {
    if test.is_empty() {
        return Err(Error::Dataset("evaluation dataset is empty".into()));
    }
    check_dataset(test, head.config.image_size)?;
    let predicted = predict_labels(head, params, test)?;
    let truth: Vec<Label> = test.iter().map(|t| t.label).collect();
    ConfusionCounts::from_predictions(&predicted, &truth)
}

/// Train on one set, evaluate on another, return the confusion counts.
pub fn train_eval_downstream_classifier(
    train: &[LabeledTriplet],
    test: &[LabeledTriplet],
    config: &EvalTrainConfig,
) -> Result<ConfusionCounts> {
    let trained = train_downstream_classifier(train, config)?;
    eval_downstream_classifier(&trained.head, &trained.params, test)
}

/// Feature matrix (rows = items) of a record set's images in the trained
/// classifier's embedding space.
pub fn extract_features(
    head: &ClassifierHead,
    params: &[f64],
    items: &[LabeledTriplet],
) -> Result<Array2<f64>> {
    let images: Vec<crate::image::ImageTensor> =
        items.iter().map(|t| t.image.clone()).collect();
    super::frechet::extract_image_features(&images, head, params)
}
