//! RGB image tensors and the image-to-latent encoder contract.

use candle_core::{DType, Device, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, Module, VarBuilder};

use crate::error::{Error, Result};
use crate::nn::Activation;

/// Spatial stride between image pixels and latent cells.
pub const LATENT_STRIDE: usize = 8;
/// Every model input must be a multiple of this in both dimensions.
pub const INPUT_MULTIPLE: usize = 32;

/// A single RGB image, channel-major `[3, H, W]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Input(format!(
                "image buffer has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Input(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn map_pixels(&mut self, mut f: impl FnMut([f32; 3]) -> [f32; 3]) {
        let plane = self.height * self.width;
        for i in 0..plane {
            let out = f([self.data[i], self.data[plane + i], self.data[2 * plane + i]]);
            for (c, v) in out.into_iter().enumerate() {
                self.data[c * plane + i] = v.clamp(0.0, 1.0);
            }
        }
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (3, self.height, self.width), device)?.to_dtype(dtype)?)
    }
}

/// Scale an interleaved 8-bit image to `[0, 1]`.
pub fn normalize_image(raw: &[u8], channels: usize, height: usize, width: usize) -> Result<ImageTensor> {
    if channels != 3 {
        return Err(Error::Input(format!(
            "expected a 3-channel RGB image, got {channels} channels"
        )));
    }
    if raw.len() != 3 * height * width {
        return Err(Error::Input(format!(
            "raw buffer has {} bytes, expected 3x{height}x{width}",
            raw.len()
        )));
    }
    let plane = height * width;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Ok(ImageTensor { height, width, data })
}

pub fn check_input_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || !height.is_multiple_of(INPUT_MULTIPLE) || !width.is_multiple_of(INPUT_MULTIPLE) {
        return Err(Error::Input(format!(
            "image is {height}x{width}; both sides must be positive multiples of {INPUT_MULTIPLE}, pad or crop the input"
        )));
    }
    Ok(())
}

/// Stack same-sized images into a `[B, 3, H, W]` batch.
pub fn stack_images(images: &[&ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Input("empty image batch".into()))?;
    if images
        .iter()
        .any(|im| im.height != first.height || im.width != first.width)
    {
        return Err(Error::Input("images in a batch must share dimensions".into()));
    }
    let parts = images
        .iter()
        .map(|im| im.to_tensor(dtype, device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&parts, 0)?)
}

/// Batched latent `[B, C_lat, H/8, W/8]` plus the image size it came from.
#[derive(Debug, Clone)]
pub struct LatentTensor {
    pub data: Tensor,
    pub source_dims: (usize, usize),
}

impl LatentTensor {
    pub fn channels(&self) -> Result<usize> {
        Ok(self.data.dims4()?.1)
    }
}

/// Deterministic image-to-latent map with a fixed downsample factor of 8.
pub trait LatentEncoder: Send + Sync {
    fn latent_channels(&self) -> usize;

    /// Encode a `[B, 3, H, W]` batch.
    fn encode_batch(&self, images: &Tensor) -> Result<LatentTensor>;

    fn encode(&self, image: &ImageTensor, dtype: DType, device: &Device) -> Result<LatentTensor> {
        self.encode_batch(&image.to_tensor(dtype, device)?.unsqueeze(0)?)
    }
}

/// Three stride-2 convolutions: `3 -> width -> 2*width -> C_lat`.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    convs: Vec<Conv2d>,
    latent_channels: usize,
    act: Activation,
}

impl ToyEncoder {
    pub fn new(width: usize, latent_channels: usize, act: Activation, vb: VarBuilder) -> Result<Self> {
        let cfg = Conv2dConfig {
            padding: 1,
            stride: 2,
            ..Default::default()
        };
        let plan = [(3, width), (width, 2 * width), (2 * width, latent_channels)];
        let convs = plan
            .iter()
            .enumerate()
            .map(|(i, (ci, co))| candle_nn::conv2d(*ci, *co, 3, cfg, vb.pp(format!("conv{i}"))))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            convs,
            latent_channels,
            act,
        })
    }
}

impl LatentEncoder for ToyEncoder {
    fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    fn encode_batch(&self, images: &Tensor) -> Result<LatentTensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::Input(format!("encoder expects 3 channels, got {c}")));
        }
        check_input_dims(h, w)?;
        let mut x = images.clone();
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?;
            if i < last {
                x = self.act.apply(&x)?;
            }
        }
        Ok(LatentTensor {
            data: x,
            source_dims: (h, w),
        })
    }
}
