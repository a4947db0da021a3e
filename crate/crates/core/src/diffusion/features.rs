use candle_core::Tensor;
use candle_nn::{Conv2d, Module, VarBuilder};

use crate::error::{Error, Result};
use crate::nn::bilinear_resize;

/// Stride of the aggregated map relative to the input image.
pub const AGGREGATE_STRIDE: usize = 32;

#[derive(Debug, Clone)]
pub struct FeatureLevel {
    /// Downsample factor relative to the input image (8, 16, 32 or 64).
    pub stride: usize,
    /// `[B, C, H/stride, W/stride]`
    pub data: Tensor,
}

/// Multi-resolution denoiser activations from one pass.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    levels: Vec<FeatureLevel>,
    source_dims: (usize, usize),
}

impl FeaturePyramid {
    pub fn new(levels: Vec<FeatureLevel>, source_dims: (usize, usize)) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Contract("feature pyramid has no levels".into()));
        }
        Ok(Self { levels, source_dims })
    }

    pub fn levels(&self) -> &[FeatureLevel] {
        &self.levels
    }

    pub fn source_dims(&self) -> (usize, usize) {
        self.source_dims
    }

    pub fn total_channels(&self) -> Result<usize> {
        let mut c = 0;
        for l in &self.levels {
            c += l.data.dims4()?.1;
        }
        Ok(c)
    }
}

/// Fused `[B, 8e, H/32, W/32]` feature map.
#[derive(Debug, Clone)]
pub struct AggregatedFeatureMap {
    pub data: Tensor,
    pub embed_dim: usize,
}

impl AggregatedFeatureMap {
    pub fn new(data: Tensor, embed_dim: usize) -> Result<Self> {
        let (_, c, _, _) = data.dims4()?;
        if c != 8 * embed_dim {
            return Err(Error::Contract(format!(
                "aggregated map has {c} channels, expected 8e = {}",
                8 * embed_dim
            )));
        }
        Ok(Self { data, embed_dim })
    }

    pub fn spatial(&self) -> Result<(usize, usize)> {
        let (_, _, h, w) = self.data.dims4()?;
        Ok((h, w))
    }
}

/// Bilinear resize of every level to the target grid, channel concat, and a
/// learnable 1x1 projection to `8e` channels.
#[derive(Debug, Clone)]
pub struct FeatureAggregator {
    proj: Conv2d,
    in_channels: usize,
    embed_dim: usize,
}

impl FeatureAggregator {
    pub fn new(in_channels: usize, embed_dim: usize, vb: VarBuilder) -> Result<Self> {
        let proj = candle_nn::conv2d(in_channels, 8 * embed_dim, 1, Default::default(), vb.pp("proj"))?;
        Ok(Self {
            proj,
            in_channels,
            embed_dim,
        })
    }

    /// Build from an explicit `[8e, in, 1, 1]` projection.
    pub fn from_projection(weight: Tensor, bias: Option<Tensor>, embed_dim: usize) -> Result<Self> {
        let (out, in_channels, kh, kw) = weight.dims4()?;
        if out != 8 * embed_dim || kh != 1 || kw != 1 {
            return Err(Error::Contract(format!(
                "projection weight {:?} is not [8e, C, 1, 1] for e={embed_dim}",
                weight.dims()
            )));
        }
        Ok(Self {
            proj: Conv2d::new(weight, bias, Default::default()),
            in_channels,
            embed_dim,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn aggregate(&self, pyramid: &FeaturePyramid, target: (usize, usize)) -> Result<AggregatedFeatureMap> {
        if pyramid.levels().is_empty() {
            return Err(Error::Contract("cannot aggregate an empty pyramid".into()));
        }
        let total = pyramid.total_channels()?;
        if total != self.in_channels {
            return Err(Error::Contract(format!(
                "pyramid carries {total} channels, aggregator was built for {}",
                self.in_channels
            )));
        }
        let resized = pyramid
            .levels()
            .iter()
            .map(|l| bilinear_resize(&l.data, target.0, target.1))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let cat = Tensor::cat(&resized, 1)?;
        AggregatedFeatureMap::new(self.proj.forward(&cat)?, self.embed_dim)
    }
}

/// Target grid for an input of `source` pixels.
pub fn aggregate_target(source: (usize, usize)) -> (usize, usize) {
    (source.0 / AGGREGATE_STRIDE, source.1 / AGGREGATE_STRIDE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn identity_projection_passes_through() {
        let e = 2;
        let c = 8 * e;
        let x = Tensor::rand(-1f64, 1.0, (1, c, 3, 4), &Device::Cpu).unwrap();
        let p = FeaturePyramid::new(
            vec![FeatureLevel {
                stride: 32,
                data: x.clone(),
            }],
            (96, 128),
        )
        .unwrap();
        let eye = Tensor::eye(c, DType::F64, &Device::Cpu)
            .unwrap()
            .reshape((c, c, 1, 1))
            .unwrap();
        let agg = FeatureAggregator::from_projection(eye, None, e).unwrap();
        let out = agg.aggregate(&p, (3, 4)).unwrap();
        assert_eq!(
            out.data.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn toy_shape() {
        let store = ParamStore::new(0);
        let e = 8;
        let levels = vec![
            FeatureLevel {
                stride: 16,
                data: Tensor::zeros((2, 16, 4, 4), DType::F32, &Device::Cpu).unwrap(),
            },
            FeatureLevel {
                stride: 32,
                data: Tensor::zeros((2, 32, 2, 2), DType::F32, &Device::Cpu).unwrap(),
            },
            FeatureLevel {
                stride: 64,
                data: Tensor::zeros((2, 32, 1, 1), DType::F32, &Device::Cpu).unwrap(),
            },
        ];
        let p = FeaturePyramid::new(levels, (64, 64)).unwrap();
        let agg = FeatureAggregator::new(80, e, store.var_builder(DType::F32, &Device::Cpu)).unwrap();
        let out = agg.aggregate(&p, aggregate_target((64, 64))).unwrap();
        assert_eq!(out.data.dims(), &[2, 64, 2, 2]);
    }

    #[test]
    fn empty_and_mismatched_pyramids() {
        assert!(matches!(FeaturePyramid::new(vec![], (64, 64)), Err(Error::Contract(_))));
        let store = ParamStore::new(0);
        let agg = FeatureAggregator::new(10, 2, store.var_builder(DType::F32, &Device::Cpu)).unwrap();
        let p = FeaturePyramid::new(
            vec![FeatureLevel {
                stride: 32,
                data: Tensor::zeros((1, 3, 2, 2), DType::F32, &Device::Cpu).unwrap(),
            }],
            (64, 64),
        )
        .unwrap();
        assert!(matches!(agg.aggregate(&p, (2, 2)), Err(Error::Contract(_))));
    }
}
