//! Time-conditioned convolutional classifier over noisy inputs.
//!
//! Architecturally this is the denoiser's encoder half with attention
//! pooling and a two-way linear head. The same structure serves two roles:
//! the guidance classifier (three noisy input channels, trained across all
//! timesteps) and the downstream phantom classifier (one clean image
//! channel, trained at a fixed small timestep).

use ndarray::{Array2, Array3, Array4, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::embed::{sinusoidal_embedding, TimeMlp, TimeMlpCache};
use crate::models::resblock::{ResBlock, ResBlockCache};
use crate::models::NoisyTriplet;
use crate::nn::act::{log_softmax, silu, silu2, silu2_backward, silu_backward};
use crate::nn::conv::{Conv2d, ConvCache};
use crate::nn::linear::{Linear, LinearCache};
use crate::nn::norm::{GnCache, GroupNorm};
use crate::nn::pool::{AttnPool, AttnPoolCache};
use crate::nn::store::StoreBuilder;

/// Number of output classes (normal, CML).
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Input channel count: 3 for a noisy triplet, 1 for a bare image.
    pub in_channels: usize,
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub emb_dim: usize,
    pub t_max: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            in_channels: 3,
            image_size: 32,
            base_channels: 12,
            channel_mults: vec![1, 2, 3],
            emb_dim: 48,
            t_max: 200,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be at least 1".into()));
        }
        if self.channel_mults.is_empty() {
            return Err(Error::Config("channel_mults must be non-empty".into()));
        }
        if self.emb_dim % 2 != 0 || self.emb_dim == 0 {
            return Err(Error::Config("emb_dim must be positive and even".into()));
        }
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be at least 1".into()));
        }
        let down_factor = 1usize << (self.channel_mults.len() - 1);
        if self.image_size == 0 || self.image_size % down_factor != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of {down_factor}",
                self.image_size
            )));
        }
        Ok(())
    }

    fn channels(&self) -> Vec<usize> {
        self.channel_mults
            .iter()
            .map(|m| m * self.base_channels)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub config: ClassifierConfig,
    time_mlp: TimeMlp,
    stem: Conv2d,
    blocks: Vec<ResBlock>,
    downs: Vec<Conv2d>,
    gn_out: GroupNorm,
    pool: AttnPool,
    fc: Linear,
    pub param_count: usize,
    /// Offset/length of the final linear head inside the parameter buffer,
    /// exposed so tests can freeze it.
    pub head_slot: crate::nn::store::Slot,
}

pub struct ClassifierCache {
    e: Array2<f64>,
    tmlp: TimeMlpCache,
    stem: ConvCache,
    blocks: Vec<ResBlockCache>,
    downs: Vec<ConvCache>,
    gn_out: GnCache,
    pre_pool: Array4<f64>,
    pool: AttnPoolCache,
    fc: LinearCache,
}

impl ClassifierHead {
    pub fn new(config: ClassifierConfig, rng: &mut ChaCha8Rng) -> Result<(Self, Vec<f64>)> {
        config.validate()?;
        let chans = config.channels();
        let levels = chans.len();
        let emb = config.emb_dim;
        let mut sb = StoreBuilder::new();

        let time_mlp = TimeMlp::new(&mut sb, rng, emb);
        let stem = Conv2d::new(&mut sb, rng, config.in_channels, chans[0], 3, 1, 1, 1.0);
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        for i in 0..levels {
            blocks.push(ResBlock::new(&mut sb, rng, chans[i], chans[i], emb));
            if i + 1 < levels {
                downs.push(Conv2d::new(&mut sb, rng, chans[i], chans[i + 1], 3, 2, 1, 1.0));
            }
        }
        let top = chans[levels - 1];
        let gn_out = GroupNorm::new(&mut sb, top);
        let pool = AttnPool::new(&mut sb, rng, top);
        let head_start = sb.len();
        let fc = Linear::new(&mut sb, rng, top, NUM_CLASSES, 1.0);
        let head_slot = crate::nn::store::Slot {
            off: head_start,
            len: sb.len() - head_start,
        };

        let param_count = sb.len();
        let params = sb.finish();
        Ok((
            ClassifierHead {
                config,
                time_mlp,
                stem,
                blocks,
                downs,
                gn_out,
                pool,
                fc,
                param_count,
                head_slot,
            },
            params,
        ))
    }

    pub fn from_config(config: ClassifierConfig) -> Result<Self> {
        let mut rng = crate::rng::rng_from(0);
        Ok(Self::new(config, &mut rng)?.0)
    }

    fn check_input(&self, x: &Array4<f64>, ts: &[usize]) -> Result<()> {
        let (n, c, h, w) = x.dim();
        let sz = self.config.image_size;
        if c != self.config.in_channels || h != sz || w != sz {
            return Err(Error::ShapeMismatch {
                expected: format!("(N, {}, {sz}, {sz})", self.config.in_channels),
                got: format!("({n}, {c}, {h}, {w})"),
            });
        }
        if ts.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} timesteps"),
                got: format!("{}", ts.len()),
            });
        }
        for &t in ts {
            if t < 1 || t > self.config.t_max {
                return Err(Error::TimestepOutOfRange {
                    t,
                    max: self.config.t_max,
                });
            }
        }
        Ok(())
    }

    /// Class logits for a batch.
    pub fn forward_logits(&self, ps: &[f64], x: &Array4<f64>, ts: &[usize]) -> Result<Array2<f64>> {
        self.check_input(x, ts)?;
        let (f, _) = self.trunk(ps, x, ts);
        Ok(self.fc.forward(ps, &f))
    }

    fn trunk(&self, ps: &[f64], x: &Array4<f64>, ts: &[usize]) -> (Array2<f64>, Array2<f64>) {
        let e = self
            .time_mlp
            .forward(ps, &sinusoidal_embedding(ts, self.config.emb_dim));
        let ea = silu2(&e);
        let mut h = self.stem.forward(ps, x);
        for i in 0..self.blocks.len() {
            h = self.blocks[i].forward(ps, &h, &ea);
            if i < self.downs.len() {
                h = self.downs[i].forward(ps, &h);
            }
        }
        let s = silu(&self.gn_out.forward(ps, &h));
        (self.pool.forward(ps, &s), e)
    }

    /// Pooled penultimate features, used as the desk-scale embedding space
    /// for distribution-distance scoring.
    pub fn features(&self, ps: &[f64], x: &Array4<f64>, ts: &[usize]) -> Result<Array2<f64>> {
        self.check_input(x, ts)?;
        Ok(self.trunk(ps, x, ts).0)
    }

    pub fn forward_logits_cached(
        &self,
        ps: &[f64],
        x: &Array4<f64>,
        ts: &[usize],
    ) -> Result<(Array2<f64>, ClassifierCache)> {
        self.check_input(x, ts)?;
        let temb = sinusoidal_embedding(ts, self.config.emb_dim);
        let (e, tmlp) = self.time_mlp.forward_cached(ps, &temb);
        let ea = silu2(&e);

        let (mut h, stem_c) = self.stem.forward_cached(ps, x);
        let mut blocks_c = Vec::with_capacity(self.blocks.len());
        let mut downs_c = Vec::with_capacity(self.downs.len());
        for i in 0..self.blocks.len() {
            let (h2, c) = self.blocks[i].forward_cached(ps, &h, &ea);
            blocks_c.push(c);
            h = h2;
            if i < self.downs.len() {
                let (h3, c) = self.downs[i].forward_cached(ps, &h);
                downs_c.push(c);
                h = h3;
            }
        }
        let (pre, gn_c) = self.gn_out.forward_cached(ps, &h);
        let s = silu(&pre);
        let (f, pool_c) = self.pool.forward_cached(ps, &s);
        let (logits, fc_c) = self.fc.forward_cached(ps, &f);
        Ok((
            logits,
            ClassifierCache {
                e,
                tmlp,
                stem: stem_c,
                blocks: blocks_c,
                downs: downs_c,
                gn_out: gn_c,
                pre_pool: pre,
                pool: pool_c,
                fc: fc_c,
            },
        ))
    }

    /// Backpropagates a logits gradient to the input. `grads: None` skips
    /// parameter gradients (the guidance path only needs input gradients).
    pub fn backward_from_logits(
        &self,
        ps: &[f64],
        cache: &ClassifierCache,
        g_logits: &Array2<f64>,
        mut grads: Option<&mut [f64]>,
    ) -> Array4<f64> {
        let n = g_logits.dim().0;
        let mut g_ea = Array2::<f64>::zeros((n, self.config.emb_dim));

        let gf = self.fc.backward(ps, &cache.fc, g_logits, grads.as_deref_mut());
        let gs = self.pool.backward(ps, &cache.pool, &gf, grads.as_deref_mut());
        let gpre = silu_backward(&cache.pre_pool, &gs);
        let mut g = self
            .gn_out
            .backward(ps, &cache.gn_out, &gpre, grads.as_deref_mut());

        for i in (0..self.blocks.len()).rev() {
            if i < self.downs.len() {
                g = self.downs[i].backward(ps, &cache.downs[i], &g, grads.as_deref_mut());
            }
            g = self.blocks[i].backward(ps, &cache.blocks[i], &g, grads.as_deref_mut(), &mut g_ea);
        }
        let gx = self.stem.backward(ps, &cache.stem, &g, grads.as_deref_mut());

        if let Some(gs) = grads {
            let ge = silu2_backward(&cache.e, &g_ea);
            self.time_mlp.backward(ps, &cache.tmlp, &ge, gs);
        }
        gx
    }

    /// Log-probabilities over {normal, CML} for one weighted noisy triplet.
    pub fn classifier_forward(&self, ps: &[f64], input: &NoisyTriplet) -> Result<[f64; NUM_CLASSES]> {
        let logits = self.forward_logits(ps, &input.to_batch(), &[input.t])?;
        let ls = log_softmax(&logits);
        let out = [ls[[0, 0]], ls[[0, 1]]];
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite log-probabilities {out:?} at t={}",
                input.t
            )));
        }
        Ok(out)
    }

    /// Gradient of log p(y | input) with respect to every input pixel, for
    /// a batch of weighted inputs.
    pub fn input_gradient_batch(
        &self,
        ps: &[f64],
        x: &Array4<f64>,
        ts: &[usize],
        ys: &[usize],
    ) -> Result<Array4<f64>> {
        if ys.len() != x.dim().0 {
            return Err(Error::ShapeMismatch {
                expected: format!("{} labels", x.dim().0),
                got: format!("{}", ys.len()),
            });
        }
        for &y in ys {
            if y >= NUM_CLASSES {
                return Err(Error::Config(format!("class label {y} out of range")));
            }
        }
        let (logits, cache) = self.forward_logits_cached(ps, x, ts)?;
        // d log p(y) / d logit_j = [j == y] - softmax(logits)_j
        let ls = log_softmax(&logits);
        let mut g_logits = Array2::<f64>::zeros(logits.raw_dim());
        for (n, &y) in ys.iter().enumerate() {
            for j in 0..NUM_CLASSES {
                let p = ls[[n, j]].exp();
                g_logits[[n, j]] = if j == y { 1.0 - p } else { -p };
            }
        }
        let gx = self.backward_from_logits(ps, &cache, &g_logits, None);
        if let Some(bad) = gx.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite input gradient ({bad}) at t={:?}",
                ts
            )));
        }
        Ok(gx)
    }

    /// Single-sample input gradient of the selected-class log-probability.
    pub fn classifier_input_gradient(
        &self,
        ps: &[f64],
        input: &NoisyTriplet,
        y: usize,
    ) -> Result<Array3<f64>> {
        let gx = self.input_gradient_batch(ps, &input.to_batch(), &[input.t], &[y])?;
        Ok(gx.index_axis(Axis(0), 0).to_owned())
    }
}
