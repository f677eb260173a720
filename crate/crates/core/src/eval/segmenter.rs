//! Lesion segmentation network for downstream evaluation: the denoiser's
//! encoder-decoder backbone with one input channel (clean image) and one
//! output channel (lesion logit map), trained with a combined
//! binary-cross-entropy + soft-overlap objective.

use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::{Denoiser, DenoiserConfig};
use crate::nn::{clip_grad_norm, sigmoid, Adam};
use crate::phantom::LabeledTriplet;
use crate::rng::{derive_seed, rng_from};
use crate::training::{check_dataset, GRAD_CLIP_NORM};

use super::{dice, DiceSummary, EvalTrainConfig, EVAL_T};

/// Probability cut turning the sigmoid output into a binary mask.
pub const SEGMENTATION_THRESHOLD: f64 = 0.5;

/// Laplace-style smoothing inside the soft-overlap loss so empty masks
/// produce a finite, informative gradient.
const DICE_SMOOTH: f64 = 1.0;

/// Single-logit-map segmentation network over clean images.
#[derive(Debug, Clone)]
pub struct Segmenter {
    pub net: Denoiser,
}

impl Segmenter {
    pub fn new(
        image_size: usize,
        config: &EvalTrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Self, Vec<f64>)> {
        let arch = DenoiserConfig {
            image_size,
            base_channels: config.base_channels,
            channel_mults: config.channel_mults.clone(),
            emb_dim: config.emb_dim,
            t_max: EVAL_T,
            in_channels: 1,
            out_channels: 1,
        };
        let (net, params) = Denoiser::new(arch, rng)?;
        Ok((Segmenter { net }, params))
    }

    /// Rebuilds the layer layout for loaded parameters.
    pub fn from_arch(arch: DenoiserConfig) -> Result<Self> {
        if arch.in_channels != 1 || arch.out_channels != 1 {
            return Err(Error::Config(format!(
                "segmenter needs a 1-in/1-out network, got {}-in/{}-out",
                arch.in_channels, arch.out_channels
            )));
        }
        Ok(Segmenter {
            net: Denoiser::from_config(arch)?,
        })
    }

    pub fn arch(&self) -> &DenoiserConfig {
        &self.net.config
    }

    /// Per-pixel lesion logits for a (N, 1, H, W) clean-image batch.
    pub fn forward_logits(&self, params: &[f64], x: &Array4<f64>) -> Result<Array4<f64>> {
        self.net.forward_raw(params, x, &vec![EVAL_T; x.dim().0])
    }

    /// Thresholded binary lesion mask for one unit-range image.
    pub fn predict_mask(&self, params: &[f64], image: &Array2<f64>) -> Result<Array2<f64>> {
        let (h, w) = image.dim();
        let mut x = Array4::<f64>::zeros((1, 1, h, w));
        x.index_axis_mut(Axis(0), 0)
            .index_axis_mut(Axis(0), 0)
            .assign(&image.mapv(|v| 2.0 * v - 1.0));
        let z = self.forward_logits(params, &x)?;
        Ok(z.index_axis(Axis(0), 0)
            .index_axis(Axis(0), 0)
            .mapv(|v| if sigmoid(v) > SEGMENTATION_THRESHOLD {
                1.0
            } else {
                0.0
            }))
    }
}

/// A trained segmenter with its parameters and loss history.
#[derive(Debug, Clone)]
pub struct TrainedSegmenter {
    pub segmenter: Segmenter,
    pub params: Vec<f64>,
    pub history: Vec<f64>,
}

/// Combined objective on a logit batch: per-pixel binary cross-entropy plus
/// per-sample soft-overlap loss, both averaged over the batch. Returns the
/// loss and its gradient with respect to the logits.
pub(super) fn bce_dice_loss(z: &Array4<f64>, y: &Array4<f64>) -> (f64, Array4<f64>) {
    let (n, _, h, w) = z.dim();
    let per_pixel = 1.0 / (n * h * w) as f64;
    let mut loss = 0.0;
    let mut grad = Array4::<f64>::zeros(z.raw_dim());

    // Stable BCE-with-logits: max(z,0) - z*y + ln(1 + e^{-|z|}).
    ndarray::Zip::from(&mut grad).and(z).and(y).for_each(|g, &zi, &yi| {
        loss += (zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p()) * per_pixel;
        *g = (sigmoid(zi) - yi) * per_pixel;
    });

    // Soft overlap per sample on probabilities p = sigmoid(z):
    // 1 - (2*sum(p*y)+s) / (sum(p)+sum(y)+s), gradient chained through p.
    let per_sample = 1.0 / n as f64;
    for i in 0..n {
        let zi = z.index_axis(Axis(0), i);
        let yi = y.index_axis(Axis(0), i);
        let p = zi.mapv(sigmoid);
        let num = 2.0 * (&p * &yi).sum() + DICE_SMOOTH;
        let den = p.sum() + yi.sum() + DICE_SMOOTH;
        loss += (1.0 - num / den) * per_sample;
        let mut gi = grad.index_axis_mut(Axis(0), i);
        ndarray::Zip::from(&mut gi).and(&p).and(&yi).for_each(|g, &pi, &ti| {
            let d_num_d_p = 2.0 * ti;
            let d_loss_d_p = -(d_num_d_p * den - num) / (den * den);
            *g += d_loss_d_p * pi * (1.0 - pi) * per_sample;
        });
    }
    (loss, grad)
}

/// Trains the segmenter on (image, lesion mask) pairs. The train set must
/// contain at least one lesioned item; pure-normal training carries no
/// positive signal and is rejected.
pub fn train_segmenter(
    train: &[LabeledTriplet],
    config: &EvalTrainConfig,
) -> Result<TrainedSegmenter> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("training dataset is empty".into()));
    }
    let size = train[0].image.height();
    check_dataset(train, size)?;
    if train.iter().all(|t| t.lesion_mask.sum() == 0.0) {
        return Err(Error::Dataset(
            "segmenter training needs lesioned items; every lesion mask is empty".into(),
        ));
    }

    let mut rng = rng_from(derive_seed(config.seed, "train-segmenter"));
    let (segmenter, mut params) = Segmenter::new(size, config, &mut rng)?;
    let mut adam = Adam::new(config.learning_rate, params.len());
    let mut grads = vec![0.0; params.len()];
    let mut history = Vec::with_capacity(config.iterations);

    for iter in 1..=config.iterations {
        let mut x = Array4::<f64>::zeros((config.batch_size, 1, size, size));
        let mut y = Array4::<f64>::zeros((config.batch_size, 1, size, size));
        for i in 0..config.batch_size {
            let item = &train[rng.gen_range(0..train.len())];
            x.index_axis_mut(Axis(0), i)
                .index_axis_mut(Axis(0), 0)
                .assign(&item.image.data().mapv(|v| 2.0 * v - 1.0));
            y.index_axis_mut(Axis(0), i)
                .index_axis_mut(Axis(0), 0)
                .assign(&item.lesion_mask);
        }
        let flips: Vec<(bool, bool)> = (0..config.batch_size)
            .map(|_| (rng.gen_bool(0.5), rng.gen_bool(0.5)))
            .collect();
        super::downstream::flip_augment(&mut x, &flips);
        super::downstream::flip_augment(&mut y, &flips);
        let ts = vec![EVAL_T; config.batch_size];
        let (z, cache) = segmenter.net.forward_cached(&params, &x, &ts)?;
        let (loss, g_z) = bce_dice_loss(&z, &y);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "segmenter training diverged at iteration {iter}: loss {loss}"
            )));
        }
        grads.fill(0.0);
        segmenter.net.backward(&params, &cache, &g_z, Some(&mut grads));
        let norm = clip_grad_norm(&mut grads, GRAD_CLIP_NORM);
        if !norm.is_finite() {
            return Err(Error::Numeric(format!(
                "segmenter training diverged at iteration {iter}: gradient norm {norm}"
            )));
        }
        adam.step(&mut params, &grads);
        history.push(loss);
    }
    Ok(TrainedSegmenter {
        segmenter,
        params,
        history,
    })
}

/// Per-item Dice of thresholded predictions over the lesioned test items
/// (items with an empty true mask carry no overlap signal and are skipped).
pub fn eval_segmenter(
    segmenter: &Segmenter,
    params: &[f64],
    test: &[LabeledTriplet],
) -> Result<DiceSummary> {
    if test.is_empty() {
        return Err(Error::Dataset("evaluation dataset is empty".into()));
    }
    check_dataset(test, segmenter.arch().image_size)?;
    let mut scores = Vec::new();
    for item in test {
        if item.lesion_mask.sum() == 0.0 {
            continue;
        }
        let pred = segmenter.predict_mask(params, item.image.data())?;
        scores.push(dice(&pred, &item.lesion_mask)?);
    }
    if scores.is_empty() {
        return Err(Error::UndefinedMetric(
            "overlap evaluation needs lesioned test items; every true mask is empty".into(),
        ));
    }
    DiceSummary::from_scores(&scores)
}

/// Train on one set, evaluate on another, return the overlap summary.
pub fn train_eval_segmenter(
    train: &[LabeledTriplet],
    test: &[LabeledTriplet],
    config: &EvalTrainConfig,
) -> Result<DiceSummary> {
    let trained = train_segmenter(train, config)?;
    eval_segmenter(&trained.segmenter, &trained.params, test)
}
