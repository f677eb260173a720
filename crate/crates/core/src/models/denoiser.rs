//! Mask-conditioned denoising network: a time-conditioned encoder-decoder
//! with skip connections over the three-channel state (image, bone mask,
//! lesion mask). It predicts per-channel noise plus a per-pixel variance
//! interpolation fraction, so the raw output has six channels.

use ndarray::{s, Array2, Array4, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::embed::{sinusoidal_embedding, TimeMlp, TimeMlpCache};
use crate::models::resblock::{ResBlock, ResBlockCache};
use crate::models::{DenoiserOutput, NoisyTriplet};
use crate::nn::act::{sigmoid4, silu, silu2, silu2_backward, silu_backward};
use crate::nn::conv::{Conv2d, ConvCache};
use crate::nn::norm::{GnCache, GroupNorm};
use crate::nn::pool::{upsample_nearest2x, upsample_nearest2x_backward};
use crate::nn::store::StoreBuilder;

/// Architecture hyperparameters; serialized into checkpoints so a saved
/// model can be rebuilt exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Input height and width (square).
    pub image_size: usize,
    /// Channel count at full resolution.
    pub base_channels: usize,
    /// Per-level channel multipliers; the length sets the resolution levels.
    pub channel_mults: Vec<usize>,
    /// Time-embedding width (even).
    pub emb_dim: usize,
    /// Largest valid timestep.
    pub t_max: usize,
    /// Input channel count; the diffusion denoiser consumes the full
    /// three-channel state, while the evaluation segmenter reuses this
    /// backbone with a single image channel.
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Output channel count; 2x the state for noise-plus-variance heads,
    /// 1 for a segmentation logit map.
    #[serde(default = "default_out_channels")]
    pub out_channels: usize,
}

fn default_in_channels() -> usize {
    STATE_CHANNELS
}

fn default_out_channels() -> usize {
    OUTPUT_CHANNELS
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_size: 32,
            base_channels: 16,
            channel_mults: vec![1, 2, 3],
            emb_dim: 64,
            t_max: 200,
            in_channels: STATE_CHANNELS,
            out_channels: OUTPUT_CHANNELS,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(
                "in_channels and out_channels must be at least 1".into(),
            ));
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

/// Number of state channels (image, bone mask, lesion mask).
pub const STATE_CHANNELS: usize = 3;
/// Raw network output channels: noise prediction plus variance fraction
/// for each state channel.
pub const OUTPUT_CHANNELS: usize = 2 * STATE_CHANNELS;

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    time_mlp: TimeMlp,
    stem: Conv2d,
    down_blocks: Vec<ResBlock>,
    down_convs: Vec<Conv2d>,
    mid1: ResBlock,
    mid2: ResBlock,
    up_convs: Vec<Conv2d>,
    up_blocks: Vec<ResBlock>,
    gn_out: GroupNorm,
    out_conv: Conv2d,
    pub param_count: usize,
}

pub struct DenoiserCache {
    e: Array2<f64>,
    tmlp: TimeMlpCache,
    stem: ConvCache,
    down_rb: Vec<ResBlockCache>,
    down_cv: Vec<ConvCache>,
    mid1: ResBlockCache,
    mid2: ResBlockCache,
    up_cv: Vec<Option<ConvCache>>,
    up_rb: Vec<Option<ResBlockCache>>,
    gn_out: GnCache,
    pre_out: Array4<f64>,
    out_cv: ConvCache,
}

impl Denoiser {
    /// Builds the network and its freshly initialized parameter buffer.
    pub fn new(config: DenoiserConfig, rng: &mut ChaCha8Rng) -> Result<(Self, Vec<f64>)> {
        config.validate()?;
        let chans = config.channels();
        let levels = chans.len();
        let emb = config.emb_dim;
        let mut sb = StoreBuilder::new();

        let time_mlp = TimeMlp::new(&mut sb, rng, emb);
        let stem = Conv2d::new(&mut sb, rng, config.in_channels, chans[0], 3, 1, 1, 1.0);

        let mut down_blocks = Vec::new();
        let mut down_convs = Vec::new();
        for i in 0..levels - 1 {
            down_blocks.push(ResBlock::new(&mut sb, rng, chans[i], chans[i], emb));
            down_convs.push(Conv2d::new(&mut sb, rng, chans[i], chans[i + 1], 3, 2, 1, 1.0));
        }

        let top = chans[levels - 1];
        let mid1 = ResBlock::new(&mut sb, rng, top, top, emb);
        let mid2 = ResBlock::new(&mut sb, rng, top, top, emb);

        let mut up_convs = Vec::new();
        let mut up_blocks = Vec::new();
        for i in 0..levels - 1 {
            up_convs.push(Conv2d::new(&mut sb, rng, chans[i + 1], chans[i], 3, 1, 1, 1.0));
            up_blocks.push(ResBlock::new(&mut sb, rng, 2 * chans[i], chans[i], emb));
        }

        let gn_out = GroupNorm::new(&mut sb, chans[0]);
        // Small (not zero) output init: a zero head would make the network
        // constant at initialization, which training recovers from slowly
        // and which would break input-sensitivity probes.
        let out_conv = Conv2d::new(&mut sb, rng, chans[0], config.out_channels, 3, 1, 1, 0.01);

        let param_count = sb.len();
        let params = sb.finish();
        Ok((
            Denoiser {
                config,
                time_mlp,
                stem,
                down_blocks,
                down_convs,
                mid1,
                mid2,
                up_convs,
                up_blocks,
                gn_out,
                out_conv,
                param_count,
            },
            params,
        ))
    }

    /// Rebuilds the layer layout for a loaded parameter buffer.
    pub fn from_config(config: DenoiserConfig) -> Result<Self> {
        // The slot layout is a pure function of the config; the throwaway
        // RNG only produces initial values that the caller overwrites.
        let mut rng = crate::rng::rng_from(0);
        Ok(Self::new(config, &mut rng)?.0)
    }

    fn check_input(&self, x: &Array4<f64>, ts: &[usize]) -> Result<()> {
        let (n, c, h, w) = x.dim();
        let sz = self.config.image_size;
        let in_ch = self.config.in_channels;
        if c != in_ch || h != sz || w != sz {
            return Err(Error::ShapeMismatch {
                expected: format!("(N, {in_ch}, {sz}, {sz})"),
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

    /// Raw output for a weighted input batch. With the default channel
    /// layout the first three output channels are the noise prediction and
    /// the last three the pre-squash variance field.
    pub fn forward_raw(&self, ps: &[f64], x: &Array4<f64>, ts: &[usize]) -> Result<Array4<f64>> {
        self.check_input(x, ts)?;
        let e = self
            .time_mlp
            .forward(ps, &sinusoidal_embedding(ts, self.config.emb_dim));
        let ea = silu2(&e);

        let mut h = self.stem.forward(ps, x);
        let mut skips = Vec::with_capacity(self.down_blocks.len());
        for i in 0..self.down_blocks.len() {
            h = self.down_blocks[i].forward(ps, &h, &ea);
            skips.push(h.clone());
            h = self.down_convs[i].forward(ps, &h);
        }
        h = self.mid1.forward(ps, &h, &ea);
        h = self.mid2.forward(ps, &h, &ea);
        for i in (0..self.up_blocks.len()).rev() {
            h = upsample_nearest2x(&h);
            h = self.up_convs[i].forward(ps, &h);
            let cat = concat_channels(&h, &skips[i]);
            h = self.up_blocks[i].forward(ps, &cat, &ea);
        }
        let pre = self.gn_out.forward(ps, &h);
        Ok(self.out_conv.forward(ps, &silu(&pre)))
    }

    /// As [`forward_raw`](Self::forward_raw), also returning everything the
    /// backward pass needs.
    pub fn forward_cached(
        &self,
        ps: &[f64],
        x: &Array4<f64>,
        ts: &[usize],
    ) -> Result<(Array4<f64>, DenoiserCache)> {
        self.check_input(x, ts)?;
        let temb = sinusoidal_embedding(ts, self.config.emb_dim);
        let (e, tmlp) = self.time_mlp.forward_cached(ps, &temb);
        let ea = silu2(&e);

        let (mut h, stem_c) = self.stem.forward_cached(ps, x);
        let levels = self.down_blocks.len();
        let mut skips = Vec::with_capacity(levels);
        let mut down_rb = Vec::with_capacity(levels);
        let mut down_cv = Vec::with_capacity(levels);
        for i in 0..levels {
            let (h2, c) = self.down_blocks[i].forward_cached(ps, &h, &ea);
            down_rb.push(c);
            skips.push(h2.clone());
            let (h3, c) = self.down_convs[i].forward_cached(ps, &h2);
            down_cv.push(c);
            h = h3;
        }
        let (h2, mid1_c) = self.mid1.forward_cached(ps, &h, &ea);
        let (mut h, mid2_c) = self.mid2.forward_cached(ps, &h2, &ea);

        let mut up_cv: Vec<Option<ConvCache>> = (0..levels).map(|_| None).collect();
        let mut up_rb: Vec<Option<ResBlockCache>> = (0..levels).map(|_| None).collect();
        for i in (0..levels).rev() {
            let u = upsample_nearest2x(&h);
            let (hu, c) = self.up_convs[i].forward_cached(ps, &u);
            up_cv[i] = Some(c);
            let cat = concat_channels(&hu, &skips[i]);
            let (h2, c) = self.up_blocks[i].forward_cached(ps, &cat, &ea);
            up_rb[i] = Some(c);
            h = h2;
        }
        let (pre, gn_c) = self.gn_out.forward_cached(ps, &h);
        let (y, out_c) = self.out_conv.forward_cached(ps, &silu(&pre));
        Ok((
            y,
            DenoiserCache {
                e,
                tmlp,
                stem: stem_c,
                down_rb,
                down_cv,
                mid1: mid1_c,
                mid2: mid2_c,
                up_cv,
                up_rb,
                gn_out: gn_c,
                pre_out: pre,
                out_cv: out_c,
            },
        ))
    }

    /// Backpropagates an output gradient; accumulates parameter gradients
    /// into `grads` and returns the input gradient.
    pub fn backward(
        &self,
        ps: &[f64],
        cache: &DenoiserCache,
        gy: &Array4<f64>,
        mut grads: Option<&mut [f64]>,
    ) -> Array4<f64> {
        let n = gy.dim().0;
        let mut g_ea = Array2::<f64>::zeros((n, self.config.emb_dim));
        let chans = self.config.channels();
        let levels = self.down_blocks.len();

        let gs = self
            .out_conv
            .backward(ps, &cache.out_cv, gy, grads.as_deref_mut());
        let gpre = silu_backward(&cache.pre_out, &gs);
        let mut g = self
            .gn_out
            .backward(ps, &cache.gn_out, &gpre, grads.as_deref_mut());

        // Decoder, in reverse of its (already reversed) forward order.
        let mut g_skips: Vec<Option<Array4<f64>>> = (0..levels).map(|_| None).collect();
        for i in 0..levels {
            let gcat = self.up_blocks[i].backward(
                ps,
                cache.up_rb[i].as_ref().unwrap(),
                &g,
                grads.as_deref_mut(),
                &mut g_ea,
            );
            let c = chans[i];
            let g_up = gcat.slice(s![.., 0..c, .., ..]).to_owned();
            g_skips[i] = Some(gcat.slice(s![.., c..2 * c, .., ..]).to_owned());
            let gu = self.up_convs[i].backward(
                ps,
                cache.up_cv[i].as_ref().unwrap(),
                &g_up,
                grads.as_deref_mut(),
            );
            g = upsample_nearest2x_backward(&gu);
        }

        g = self
            .mid2
            .backward(ps, &cache.mid2, &g, grads.as_deref_mut(), &mut g_ea);
        g = self
            .mid1
            .backward(ps, &cache.mid1, &g, grads.as_deref_mut(), &mut g_ea);

        for i in (0..levels).rev() {
            g = self.down_convs[i].backward(ps, &cache.down_cv[i], &g, grads.as_deref_mut());
            g += g_skips[i].as_ref().unwrap();
            g = self.down_blocks[i].backward(
                ps,
                &cache.down_rb[i],
                &g,
                grads.as_deref_mut(),
                &mut g_ea,
            );
        }
        let gx = self.stem.backward(ps, &cache.stem, &g, grads.as_deref_mut());

        if let Some(gs) = grads {
            let ge = silu2_backward(&cache.e, &g_ea);
            self.time_mlp.backward(ps, &cache.tmlp, &ge, gs);
        }
        gx
    }

    /// Single-sample inference on an already-weighted input triplet.
    pub fn denoiser_forward(&self, ps: &[f64], input: &NoisyTriplet) -> Result<DenoiserOutput> {
        if self.config.out_channels != OUTPUT_CHANNELS {
            return Err(Error::Config(format!(
                "denoiser inference needs a {OUTPUT_CHANNELS}-channel head, this network has {}",
                self.config.out_channels
            )));
        }
        let x = input.to_batch();
        let raw = self.forward_raw(ps, &x, &[input.t])?;
        let eps = raw.slice(s![0, 0..STATE_CHANNELS, .., ..]).to_owned();
        let v_raw = raw
            .slice(s![.., STATE_CHANNELS..OUTPUT_CHANNELS, .., ..])
            .to_owned();
        let v = sigmoid4(&v_raw).index_axis(Axis(0), 0).to_owned();
        Ok(DenoiserOutput { eps_hat: eps, v })
    }
}

/// Concatenates two batches along the channel axis into a standard-layout
/// array (the layer kit requires contiguous inputs).
fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    let (n, ca, h, w) = a.dim();
    let cb = b.dim().1;
    debug_assert_eq!((n, h, w), (b.dim().0, b.dim().2, b.dim().3));
    let mut out = Array4::<f64>::zeros((n, ca + cb, h, w));
    out.slice_mut(s![.., 0..ca, .., ..]).assign(a);
    out.slice_mut(s![.., ca..ca + cb, .., ..]).assign(b);
    out
}

/// Splits a raw 6-channel batch into (noise prediction, pre-squash variance
/// field). Callers that need the bounded fraction apply the sigmoid.
pub fn split_raw_output(raw: &Array4<f64>) -> (Array4<f64>, Array4<f64>) {
    let eps = raw.slice(s![.., 0..STATE_CHANNELS, .., ..]).to_owned();
    let v_raw = raw
        .slice(s![.., STATE_CHANNELS..OUTPUT_CHANNELS, .., ..])
        .to_owned();
    (eps, v_raw)
}
