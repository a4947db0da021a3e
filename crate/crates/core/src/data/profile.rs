use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::Crop;

/// Per-dataset file conventions and evaluation range.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetProfile {
    pub name: String,
    /// Divisor turning 16-bit PNG values into meters.
    pub depth_png_scale: f64,
    /// Evaluation cap, meters.
    pub cap: f64,
    pub d_min: f64,
    pub crop: Crop,
    /// Prediction ceiling for the depth head, meters.
    pub d_max: f64,
}

pub const PROFILE_NAMES: [&str; 7] = ["nyu", "kitti", "sunrgbd", "ibims", "diode", "hypersim", "toy"];

impl DatasetProfile {
    pub fn named(name: &str) -> Result<Self> {
        let (scale, cap, crop, d_max) = match name {
            "nyu" => (1000.0, 10.0, Crop::None, 10.0),
            "kitti" => (256.0, 80.0, Crop::Garg, 80.0),
            "sunrgbd" => (1000.0, 8.0, Crop::None, 10.0),
            "ibims" => (1000.0, 10.0, Crop::None, 10.0),
            "diode" => (1000.0, 10.0, Crop::None, 10.0),
            "hypersim" => (1000.0, 80.0, Crop::None, 80.0),
            "toy" => (1000.0, 10.0, Crop::None, 10.0),
            other => {
                return Err(Error::Config(format!(
                    "unknown dataset profile {other:?} (expected one of {})",
                    PROFILE_NAMES.join(", ")
                )))
            }
        };
        Ok(Self {
            name: name.to_string(),
            depth_png_scale: scale,
            cap,
            d_min: 1e-3,
            crop,
            d_max,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.depth_png_scale > 0.0) {
            return Err(Error::Config("depth PNG scale must be positive".into()));
        }
        if !(self.cap > self.d_min && self.d_min >= 0.0) {
            return Err(Error::Config(format!("profile {} needs cap > d_min >= 0", self.name)));
        }
        Ok(())
    }

    pub fn depth_from_png(&self, v: u16) -> f64 {
        v as f64 / self.depth_png_scale
    }

    /// Quantize meters to the PNG encoding, saturating at the u16 range.
    pub fn depth_to_png(&self, meters: f64) -> u16 {
        (meters * self.depth_png_scale).round().clamp(0.0, u16::MAX as f64) as u16
    }
}

/// How raw frames are brought to 32-divisible model inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sizing {
    /// Center-crop to the largest multiple of 32 in each dimension.
    #[default]
    Floor32,
    /// Center-crop to exactly `h x w`.
    CenterCrop { height: usize, width: usize },
    /// Center-crop to the target aspect ratio, then resample to `h x w`.
    Resize { height: usize, width: usize },
}

impl FromStr for Sizing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "floor32" {
            return Ok(Sizing::Floor32);
        }
        let (kind, dims) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("bad sizing {s:?} (floor32, crop:HxW, resize:HxW)")))?;
        let (h, w) = dims
            .split_once('x')
            .and_then(|(h, w)| Some((h.parse::<usize>().ok()?, w.parse::<usize>().ok()?)))
            .ok_or_else(|| Error::Config(format!("bad sizing dims {dims:?}")))?;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "sizing {h}x{w} must be positive multiples of 32"
            )));
        }
        match kind {
            "crop" => Ok(Sizing::CenterCrop { height: h, width: w }),
            "resize" => Ok(Sizing::Resize { height: h, width: w }),
            _ => Err(Error::Config(format!("bad sizing kind {kind:?}"))),
        }
    }
}

impl fmt::Display for Sizing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sizing::Floor32 => f.write_str("floor32"),
            Sizing::CenterCrop { height, width } => write!(f, "crop:{height}x{width}"),
            Sizing::Resize { height, width } => write!(f, "resize:{height}x{width}"),
        }
    }
}
