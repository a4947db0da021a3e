//! Conditional denoiser contract and a small cross-attention UNet that
//! satisfies it. Only decoder-side activations are used; there is no noise
//! prediction head.

use candle_core::{DType, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, Linear, Module, VarBuilder};

use crate::cide::{ContextEmbedding, CONTEXT_DIM};
use crate::diffusion::features::{FeatureLevel, FeaturePyramid};
use crate::error::{Error, Result};
use crate::latent::{LatentTensor, LATENT_STRIDE};
use crate::nn::{norm_groups, Activation};

/// One conditional denoising pass exposing multi-scale activations.
pub trait Denoiser: Send + Sync {
    /// Width of the conditioning tokens the denoiser attends to.
    fn context_dim(&self) -> usize;

    /// Strides (relative to the input image) of the levels returned by [`Denoiser::features`].
    fn level_strides(&self) -> Vec<usize>;

    fn level_channels(&self, stride: usize) -> Option<usize>;

    fn features(&self, z_t: &LatentTensor, t: usize, ctx: &ContextEmbedding) -> Result<FeaturePyramid>;
}

/// Run the denoiser once and return its feature pyramid.
pub fn extract_features(
    z_t: &LatentTensor,
    t: usize,
    ctx: &ContextEmbedding,
    denoiser: &dyn Denoiser,
) -> Result<FeaturePyramid> {
    let width = ctx.tensor().dims()[2];
    if width != denoiser.context_dim() {
        return Err(Error::Contract(format!(
            "context width {width} but the denoiser was built for {}",
            denoiser.context_dim()
        )));
    }
    denoiser.features(z_t, t, ctx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyUnetConfig {
    /// Base width `e`; the three resolutions use `(e, 2e, 4e)` channels.
    pub embed_dim: usize,
    pub latent_channels: usize,
    pub context_dim: usize,
    /// Decoder strides to expose, any of 8, 16, 32, 64.
    pub levels: Vec<usize>,
    pub act: Activation,
}

impl Default for ToyUnetConfig {
    fn default() -> Self {
        Self {
            embed_dim: 8,
            latent_channels: 4,
            context_dim: CONTEXT_DIM,
            levels: vec![16, 32, 64],
            act: Activation::Gelu,
        }
    }
}

impl ToyUnetConfig {
    pub fn channels_at(&self, stride: usize) -> Option<usize> {
        let e = self.embed_dim;
        match stride {
            8 => Some(e),
            16 => Some(2 * e),
            32 | 64 => Some(4 * e),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "embedding dim must be even and >= 2, got {}",
                self.embed_dim
            )));
        }
        if self.levels.len() < 2 {
            return Err(Error::Config("feature pyramid needs at least two levels".into()));
        }
        let mut seen = self.levels.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.levels.len() {
            return Err(Error::Config("duplicate feature level".into()));
        }
        if let Some(bad) = self.levels.iter().find(|s| self.channels_at(**s).is_none()) {
            return Err(Error::Config(format!(
                "feature level stride {bad} not in {{8, 16, 32, 64}}"
            )));
        }
        Ok(())
    }
}

fn sinusoidal_embedding(
    t: usize,
    dim: usize,
    batch: usize,
    dtype: DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    v.extend(freqs.iter().map(|f| (t as f64 * f).sin()));
    v.extend(freqs.iter().map(|f| (t as f64 * f).cos()));
    Ok(Tensor::from_vec(v, (1, dim), device)?
        .to_dtype(dtype)?
        .broadcast_as((batch, dim))?
        .contiguous()?)
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    act: Activation,
}

impl ResBlock {
    fn new(cin: usize, cout: usize, tdim: usize, act: Activation, vb: VarBuilder) -> Result<Self> {
        let pad = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let skip = if cin != cout {
            Some(candle_nn::conv2d(cin, cout, 1, Default::default(), vb.pp("skip"))?)
        } else {
            None
        };
        Ok(Self {
            norm1: candle_nn::group_norm(norm_groups(cin), cin, 1e-5, vb.pp("norm1"))?,
            conv1: candle_nn::conv2d(cin, cout, 3, pad, vb.pp("conv1"))?,
            time: candle_nn::linear(tdim, cout, vb.pp("time"))?,
            norm2: candle_nn::group_norm(norm_groups(cout), cout, 1e-5, vb.pp("norm2"))?,
            conv2: candle_nn::conv2d(cout, cout, 3, pad, vb.pp("conv2"))?,
            skip,
            act,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.act.apply(&self.norm1.forward(x)?)?)?;
        let tb = self.time.forward(&self.act.apply(temb)?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&tb)?;
        let h = self.conv2.forward(&self.act.apply(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Single-head cross-attention from spatial positions to context tokens.
#[derive(Debug, Clone)]
struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    scale: f64,
}

impl CrossAttention {
    fn new(ch: usize, ctx_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm: candle_nn::group_norm(norm_groups(ch), ch, 1e-5, vb.pp("norm"))?,
            q: candle_nn::linear_no_bias(ch, ch, vb.pp("q"))?,
            k: candle_nn::linear_no_bias(ctx_dim, ch, vb.pp("k"))?,
            v: candle_nn::linear_no_bias(ctx_dim, ch, vb.pp("v"))?,
            out: candle_nn::linear(ch, ch, vb.pp("out"))?,
            scale: 1.0 / (ch as f64).sqrt(),
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = self.norm.forward(x)?.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let q = self.q.forward(&tokens)?;
        let k = self.k.forward(ctx)?;
        let v = self.v.forward(ctx)?;
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? * self.scale)?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let o = self.out.forward(&attn.matmul(&v)?)?;
        let o = o.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((x + o)?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    res: ResBlock,
    attn: CrossAttention,
}

impl Stage {
    fn new(cin: usize, cout: usize, tdim: usize, ctx_dim: usize, act: Activation, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            res: ResBlock::new(cin, cout, tdim, act, vb.pp("res"))?,
            attn: CrossAttention::new(cout, ctx_dim, vb.pp("attn"))?,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        self.attn.forward(&self.res.forward(x, temb)?, ctx)
    }
}

/// Three-resolution conditional UNet with cross-attention at every stage.
///
/// Encoder widths are `(e, 2e, 4e)` at strides 8, 16, 32 of the image, with a
/// `4e` bottleneck at stride 64. Decoder stages at strides 64, 32, 16, 8 carry
/// `4e, 4e, 2e, e` channels and are the activations the pyramid draws from.
#[derive(Debug, Clone)]
pub struct ToyUnet {
    cfg: ToyUnetConfig,
    time_in: Linear,
    time_out: Linear,
    conv_in: Conv2d,
    enc: Vec<Stage>,
    down: Vec<Conv2d>,
    mid: Stage,
    dec: Vec<Stage>,
}

impl ToyUnet {
    pub fn new(cfg: ToyUnetConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.embed_dim;
        let tdim = 4 * e;
        let ctx = cfg.context_dim;
        let act = cfg.act;
        let pad = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let stride2 = Conv2dConfig {
            padding: 1,
            stride: 2,
            ..Default::default()
        };
        let widths = [e, 2 * e, 4 * e];
        let enc = vec![
            Stage::new(e, e, tdim, ctx, act, vb.pp("enc0"))?,
            Stage::new(e, 2 * e, tdim, ctx, act, vb.pp("enc1"))?,
            Stage::new(2 * e, 4 * e, tdim, ctx, act, vb.pp("enc2"))?,
        ];
        let down = widths
            .iter()
            .enumerate()
            .map(|(i, w)| candle_nn::conv2d(*w, *w, 3, stride2, vb.pp(format!("down{i}"))))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let mid = Stage::new(4 * e, 4 * e, tdim, ctx, act, vb.pp("mid"))?;
        // decoder stages: stride 32, 16, 8; input is upsampled + skip concat
        let dec = vec![
            Stage::new(4 * e + 4 * e, 4 * e, tdim, ctx, act, vb.pp("dec2"))?,
            Stage::new(4 * e + 2 * e, 2 * e, tdim, ctx, act, vb.pp("dec1"))?,
            Stage::new(2 * e + e, e, tdim, ctx, act, vb.pp("dec0"))?,
        ];
        Ok(Self {
            time_in: candle_nn::linear(e, tdim, vb.pp("time.0"))?,
            time_out: candle_nn::linear(tdim, tdim, vb.pp("time.1"))?,
            conv_in: candle_nn::conv2d(cfg.latent_channels, e, 3, pad, vb.pp("conv_in"))?,
            enc,
            down,
            mid,
            dec,
            cfg,
        })
    }

    pub fn config(&self) -> &ToyUnetConfig {
        &self.cfg
    }
}

impl Denoiser for ToyUnet {
    fn context_dim(&self) -> usize {
        self.cfg.context_dim
    }

    fn level_strides(&self) -> Vec<usize> {
        self.cfg.levels.clone()
    }

    fn level_channels(&self, stride: usize) -> Option<usize> {
        if self.cfg.levels.contains(&stride) {
            self.cfg.channels_at(stride)
        } else {
            None
        }
    }

    fn features(&self, z_t: &LatentTensor, t: usize, ctx: &ContextEmbedding) -> Result<FeaturePyramid> {
        let x = &z_t.data;
        let (b, c, _, _) = x.dims4()?;
        if c != self.cfg.latent_channels {
            return Err(Error::Contract(format!(
                "latent has {c} channels, denoiser expects {}",
                self.cfg.latent_channels
            )));
        }
        let ctx = ctx.tensor();
        let ctx = if ctx.dims()[0] == b {
            ctx.clone()
        } else if ctx.dims()[0] == 1 {
            ctx.broadcast_as((b, ctx.dims()[1], ctx.dims()[2]))?.contiguous()?
        } else {
            return Err(Error::Contract(format!(
                "context batch {} does not match latent batch {b}",
                ctx.dims()[0]
            )));
        };
        let temb = sinusoidal_embedding(t, self.cfg.embed_dim, b, x.dtype(), x.device())?;
        let temb = self
            .time_out
            .forward(&self.cfg.act.apply(&self.time_in.forward(&temb)?)?)?;

        let mut h = self.conv_in.forward(x)?;
        let mut skips = Vec::with_capacity(3);
        for (stage, down) in self.enc.iter().zip(&self.down) {
            h = stage.forward(&h, &temb, &ctx)?;
            skips.push(h.clone());
            h = down.forward(&h)?;
        }
        h = self.mid.forward(&h, &temb, &ctx)?;

        let mut decoded = vec![(LATENT_STRIDE * 8, h.clone())];
        for (i, stage) in self.dec.iter().enumerate() {
            let skip = &skips[2 - i];
            let (_, _, sh, sw) = skip.dims4()?;
            let up = h.upsample_nearest2d(sh, sw)?;
            h = stage.forward(&Tensor::cat(&[&up, skip], 1)?, &temb, &ctx)?;
            decoded.push((LATENT_STRIDE << (2 - i), h.clone()));
        }

        let levels = self
            .cfg
            .levels
            .iter()
            .map(|s| {
                let data = decoded
                    .iter()
                    .find(|(ds, _)| ds == s)
                    .map(|(_, t)| t.clone())
                    .expect("validated level stride");
                FeatureLevel { stride: *s, data }
            })
            .collect();
        FeaturePyramid::new(levels, z_t.source_dims)
    }
}
