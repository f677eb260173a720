//! Mask-conditioned denoising diffusion at desk scale.
//!
//! The crate trains a three-channel denoiser (grayscale image plus bone and
//! lesion masks) and a noisy-input classifier, runs classifier-guided DDIM
//! sampling and intermediate-step image-to-image translation that emits
//! synthetic images *and* their segmentation masks, and measures downstream
//! value on a procedural phantom corpus (classification, segmentation Dice,
//! Frechet distance).

pub mod diffusion;
pub mod error;
pub mod eval;
pub mod image;
pub mod models;
pub mod nn;
pub mod phantom;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
pub use eval::{ConfusionCounts, DiceSummary, EvalTrainConfig, MetricsReport};
pub use image::{ImageTensor, ValueRange};
pub use models::{
    ChannelWeights, ClassifierConfig, ClassifierHead, Denoiser, DenoiserConfig, DenoiserOutput,
    NoisyTriplet,
};
pub use phantom::{DatasetManifest, Label, LabeledTriplet, Provenance};
pub use sampling::{GuidanceSpec, SampleResult, TrajectoryMetadata};
pub use schedule::{build_schedule, NoiseSchedule, ScheduleKind, ScheduleSpec};
pub use training::{TrainConfig, TrainedClassifier, TrainedDenoiser};
