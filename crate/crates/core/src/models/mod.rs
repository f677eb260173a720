//! The two trainable networks and their shared input/output types: a
//! mask-conditioned denoiser over (image, bone mask, lesion mask) triplets
//! and a noisy-input binary classifier used for guidance.

pub mod checkpoint;
pub mod classifier;
pub mod denoiser;
pub mod embed;
pub mod resblock;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointInfo, DENOISER_KIND,
    DOWNSTREAM_CLASSIFIER_KIND, GUIDANCE_CLASSIFIER_KIND, SEGMENTER_KIND,
};
pub use classifier::{ClassifierConfig, ClassifierHead, NUM_CLASSES};
pub use denoiser::{split_raw_output, Denoiser, DenoiserConfig, OUTPUT_CHANNELS, STATE_CHANNELS};

/// Per-channel input scaling: the image keeps full weight while the two
/// mask channels are attenuated so they condition generation without
/// dominating it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl Default for ChannelWeights {
    fn default() -> Self {
        ChannelWeights {
            w1: 1.0,
            w2: 0.8,
            w3: 0.8,
        }
    }
}

impl ChannelWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w1", self.w1), ("w2", self.w2), ("w3", self.w3)] {
            if !(w > 0.0 && w <= 1.0) {
                return Err(Error::Config(format!(
                    "channel weight {name}={w} must be in (0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.w1, self.w2, self.w3]
    }

    /// Scales each channel of a (N, 3, H, W) batch in place.
    pub fn apply_batch(&self, x: &mut Array4<f64>) {
        for (c, w) in self.as_array().into_iter().enumerate() {
            x.index_axis_mut(ndarray::Axis(1), c).mapv_inplace(|v| v * w);
        }
    }

    /// Undoes [`apply_batch`](Self::apply_batch).
    pub fn remove_batch(&self, x: &mut Array4<f64>) {
        for (c, w) in self.as_array().into_iter().enumerate() {
            x.index_axis_mut(ndarray::Axis(1), c).mapv_inplace(|v| v / w);
        }
    }
}

/// A weighted, noised model input: the three channels concatenated for the
/// networks, at diffusion step `t`.
#[derive(Debug, Clone)]
pub struct NoisyTriplet {
    pub image_channel: ImageTensor,
    pub bone_channel: ImageTensor,
    pub lesion_channel: ImageTensor,
    pub t: usize,
}

impl NoisyTriplet {
    /// Checks that all channels agree on height/width and that `t` is a
    /// positive step; the upper bound is the paired model's to enforce.
    pub fn new(
        image_channel: ImageTensor,
        bone_channel: ImageTensor,
        lesion_channel: ImageTensor,
        t: usize,
    ) -> Result<Self> {
        let d0 = image_channel.data().dim();
        for (name, ch) in [("bone", &bone_channel), ("lesion", &lesion_channel)] {
            if ch.data().dim() != d0 {
                return Err(Error::ShapeMismatch {
                    expected: format!("{d0:?}"),
                    got: format!("{name} channel {:?}", ch.data().dim()),
                });
            }
        }
        if t == 0 {
            return Err(Error::TimestepOutOfRange { t, max: usize::MAX });
        }
        Ok(NoisyTriplet {
            image_channel,
            bone_channel,
            lesion_channel,
            t,
        })
    }

    pub fn height_width(&self) -> (usize, usize) {
        self.image_channel.data().dim()
    }

    /// Stacks the channels into a batch of one: (1, 3, H, W).
    pub fn to_batch(&self) -> Array4<f64> {
        let (h, w) = self.height_width();
        let mut x = Array4::<f64>::zeros((1, STATE_CHANNELS, h, w));
        for (c, ch) in [
            &self.image_channel,
            &self.bone_channel,
            &self.lesion_channel,
        ]
        .into_iter()
        .enumerate()
        {
            x.slice_mut(ndarray::s![0, c, .., ..]).assign(ch.data());
        }
        x
    }
}

/// Denoiser prediction: per-channel noise estimate and the per-pixel
/// variance interpolation fraction, squashed to [0, 1].
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub eps_hat: Array3<f64>,
    pub v: Array3<f64>,
}

#[cfg(test)]
mod tests;
