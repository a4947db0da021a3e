use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::latent::LatentTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScheduleKind {
    Linear,
    /// Linear in `sqrt(beta)`, the latent-diffusion convention.
    #[default]
    ScaledLinear,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "scaled_linear" => Ok(ScheduleKind::ScaledLinear),
            other => Err(Error::Config(format!(
                "unknown schedule kind {other:?} (expected linear or scaled_linear)"
            ))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::ScaledLinear => "scaled_linear",
        })
    }
}

/// Per-step noise rates and their cumulative signal retention
/// `alpha_bars[t] = prod_{s<=t} (1 - betas[s])`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(timesteps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::Config("noise schedule needs at least one timestep".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "noise schedule betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let lerp = |a: f64, b: f64, i: usize| {
            if timesteps == 1 {
                a
            } else {
                a + (b - a) * i as f64 / (timesteps - 1) as f64
            }
        };
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..timesteps).map(|i| lerp(beta_start, beta_end, i)).collect(),
            ScheduleKind::ScaledLinear => (0..timesteps)
                .map(|i| lerp(beta_start.sqrt(), beta_end.sqrt(), i).powi(2))
                .collect(),
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("noise schedule needs at least one timestep".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::Contract(format!("timestep {t} outside schedule of length {}", self.timesteps())))
    }

    /// Closed-form forward noising: `sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps`.
    pub fn q_sample_tensor(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        if z0.dims() != eps.dims() {
            return Err(Error::Contract(format!(
                "noise shape {:?} does not match latent shape {:?}",
                eps.dims(),
                z0.dims()
            )));
        }
        let ab = self.alpha_bar(t)?;
        Ok(((z0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
    }

    pub fn q_sample(&self, z0: &LatentTensor, t: usize, eps: &Tensor) -> Result<LatentTensor> {
        let data = self.q_sample_tensor(&z0.data, t, eps)?;
        Ok(LatentTensor {
            data,
            source_dims: z0.source_dims,
        })
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new(1000, 0.00085, 0.012, ScheduleKind::ScaledLinear).expect("default schedule is valid")
    }
}
