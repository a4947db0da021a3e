//! Upsampling decoder and the two-convolution depth regressor.

use candle_core::Tensor;
use candle_nn::{Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig, GroupNorm, Module, VarBuilder};

use crate::diffusion::AggregatedFeatureMap;
use crate::error::{Error, Result};
use crate::nn::{norm_groups, Activation};

/// Dense metric depth `[H, W]` in meters. Zero marks an undefined pixel in
/// ground truth; predictions are strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Input(format!(
                "depth buffer has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Data(format!("depth value {v} is negative or non-finite")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Split a `[B, 1, H, W]` prediction tensor into per-sample maps.
    pub fn from_batch(t: &Tensor) -> Result<Vec<DepthMap>> {
        let (b, c, h, w) = t.dims4()?;
        if c != 1 {
            return Err(Error::Contract(format!("depth tensor has {c} channels, expected 1")));
        }
        let t = t.to_dtype(candle_core::DType::F64)?;
        (0..b)
            .map(|i| {
                let data = t.get(i)?.flatten_all()?.to_vec1::<f64>()?;
                Ok(DepthMap {
                    height: h,
                    width: w,
                    data,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    /// Number of x2 transposed-conv stages.
    pub stages: usize,
    /// Upper bound on predicted depth, meters.
    pub d_max: f64,
    /// Stride of the decoder input relative to the image; must equal `2^stages`.
    pub feature_stride: usize,
    pub act: Activation,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 192,
            stages: 5,
            d_max: 10.0,
            feature_stride: 32,
            act: Activation::Gelu,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        if !(self.d_max > 0.0 && self.d_max.is_finite()) {
            return Err(Error::Config(format!("d_max must be positive, got {}", self.d_max)));
        }
        if self.stages >= usize::BITS as usize || 1usize << self.stages != self.feature_stride {
            return Err(Error::Config(format!(
                "{} upsampling stages cannot restore features at stride {}",
                self.stages, self.feature_stride
            )));
        }
        Ok(())
    }

    /// Output channels of each stage: `8e -> 4e -> 2e -> e -> e ...`, ending at `e`.
    pub fn channel_plan(&self) -> Vec<usize> {
        let e = self.embed_dim;
        let mut plan = vec![8 * e];
        for i in 0..self.stages {
            // the last stage always lands on e, however few stages there are
            let c = if i + 1 == self.stages {
                e
            } else {
                ((8 * e) >> (i + 1)).max(e)
            };
            plan.push(c);
        }
        plan
    }
}

#[derive(Debug, Clone)]
struct UpStage {
    deconv: ConvTranspose2d,
    norm: GroupNorm,
}

/// Stack of stride-2 3x3 transposed convolutions, each followed by group norm
/// and the activation.
#[derive(Debug, Clone)]
pub struct UpsamplingDecoder {
    stages: Vec<UpStage>,
    cfg: DecoderConfig,
}

impl UpsamplingDecoder {
    pub fn new(cfg: DecoderConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let tcfg = ConvTranspose2dConfig {
            padding: 1,
            output_padding: 1,
            stride: 2,
            dilation: 1,
        };
        let plan = cfg.channel_plan();
        let stages = plan
            .windows(2)
            .enumerate()
            .map(|(i, io)| {
                let vb = vb.pp(format!("stage{i}"));
                Ok(UpStage {
                    deconv: candle_nn::conv_transpose2d(io[0], io[1], 3, tcfg, vb.pp("deconv"))?,
                    norm: candle_nn::group_norm(norm_groups(io[1]), io[1], 1e-5, vb.pp("norm"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { stages, cfg })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// Upsample to `target` pixels, returning `[B, e, H, W]`.
    pub fn decode(&self, f: &AggregatedFeatureMap, target: (usize, usize)) -> Result<Tensor> {
        let (h, w) = f.spatial()?;
        let s = self.cfg.feature_stride;
        if f.embed_dim != self.cfg.embed_dim || h * s != target.0 || w * s != target.1 {
            return Err(Error::Contract(format!(
                "feature map {h}x{w} (e={}) cannot decode to {}x{} with stride {s} (e={})",
                f.embed_dim, target.0, target.1, self.cfg.embed_dim
            )));
        }
        let mut x = f.data.clone();
        for st in &self.stages {
            x = self.cfg.act.apply(&st.norm.forward(&st.deconv.forward(&x)?)?)?;
        }
        Ok(x)
    }
}

const SIGMOID_FLOOR: f64 = 1e-6;

/// `y = d_max * sigmoid(conv2(act(conv1(feat))))`.
#[derive(Debug, Clone)]
pub struct DepthRegressor {
    conv1: Conv2d,
    conv2: Conv2d,
    d_max: f64,
    act: Activation,
}

impl DepthRegressor {
    pub fn new(embed_dim: usize, d_max: f64, act: Activation, vb: VarBuilder) -> Result<Self> {
        let pad = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        Ok(Self {
            conv1: candle_nn::conv2d(embed_dim, embed_dim, 3, pad, vb.pp("conv1"))?,
            conv2: candle_nn::conv2d(embed_dim, 1, 3, pad, vb.pp("conv2"))?,
            d_max,
            act,
        })
    }

    pub fn from_parts(conv1: Conv2d, conv2: Conv2d, d_max: f64, act: Activation) -> Self {
        Self {
            conv1,
            conv2,
            d_max,
            act,
        }
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    /// Pre-sigmoid logits `[B, 1, H, W]`.
    pub fn logits(&self, feat: &Tensor) -> Result<Tensor> {
        Ok(self.conv2.forward(&self.act.apply(&self.conv1.forward(feat)?)?)?)
    }

    /// The sigmoid is squeezed affinely into `[1e-6, 1 - 1e-6]` so saturated
    /// logits still land strictly inside `(0, d_max)` in f32. Unlike a clamp
    /// this lets NaN through, so a diverged run is caught by the loss check.
    pub fn depth_from_logits(&self, logits: &Tensor) -> Result<Tensor> {
        let s = candle_nn::ops::sigmoid(logits)?.affine(1.0 - 2.0 * SIGMOID_FLOOR, SIGMOID_FLOOR)?;
        Ok((s * self.d_max)?)
    }

    pub fn regress(&self, feat: &Tensor) -> Result<Tensor> {
        self.depth_from_logits(&self.logits(feat)?)
    }
}
