use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::head::DepthMap;

/// Evaluation window applied on top of the depth-range test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Crop {
    #[default]
    None,
    /// NYU window rows 45..471, cols 41..601 of a 480x640 frame, scaled to the
    /// actual frame size.
    Eigen,
    /// KITTI window from Garg et al.: rows 0.4081..0.9919, cols 0.0359..0.9641.
    Garg,
}

const EIGEN_ROWS: (f64, f64) = (45.0 / 480.0, 471.0 / 480.0);
const EIGEN_COLS: (f64, f64) = (41.0 / 640.0, 601.0 / 640.0);
const GARG_ROWS: (f64, f64) = (0.408_108_11, 0.991_891_89);
const GARG_COLS: (f64, f64) = (0.035_947_71, 0.964_052_29);

impl Crop {
    /// Half-open `(row0, row1, col0, col1)` window for a frame of the given size.
    pub fn window(&self, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let scale = |f: (f64, f64), n: usize| {
            let a = (f.0 * n as f64) as usize;
            let b = ((f.1 * n as f64) as usize).min(n);
            (a, b)
        };
        match self {
            Crop::None => (0, height, 0, width),
            Crop::Eigen => {
                let (r0, r1) = scale(EIGEN_ROWS, height);
                let (c0, c1) = scale(EIGEN_COLS, width);
                (r0, r1, c0, c1)
            }
            Crop::Garg => {
                let (r0, r1) = scale(GARG_ROWS, height);
                let (c0, c1) = scale(GARG_COLS, width);
                (r0, r1, c0, c1)
            }
        }
    }
}

impl FromStr for Crop {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Crop::None),
            "eigen" => Ok(Crop::Eigen),
            "garg" => Ok(Crop::Garg),
            other => Err(Error::Config(format!(
                "unknown crop {other:?} (expected none, eigen, garg)"
            ))),
        }
    }
}

impl fmt::Display for Crop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Crop::None => "none",
            Crop::Eigen => "eigen",
            Crop::Garg => "garg",
        })
    }
}

/// Per-pixel validity of ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl ValidityMask {
    pub fn all(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Error unless at least one pixel is valid.
    pub fn require_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::Data("validity mask has no valid pixels".into()))
        } else {
            Ok(())
        }
    }

    pub fn and(&self, other: &ValidityMask) -> Result<ValidityMask> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Contract("mask dimensions differ".into()));
        }
        Ok(ValidityMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        })
    }
}

/// Valid iff `d_min < gt <= cap` and inside the crop window.
pub fn build_mask(gt: &DepthMap, d_min: f64, cap: f64, crop: Crop) -> Result<ValidityMask> {
    if !(cap > d_min && d_min >= 0.0) {
        return Err(Error::Config(format!(
            "mask requires cap > d_min >= 0, got cap={cap}, d_min={d_min}"
        )));
    }
    let (r0, r1, c0, c1) = crop.window(gt.height, gt.width);
    let data = (0..gt.height * gt.width)
        .map(|i| {
            let (y, x) = (i / gt.width, i % gt.width);
            let v = gt.data[i];
            y >= r0 && y < r1 && x >= c0 && x < c1 && v > d_min && v <= cap
        })
        .collect();
    Ok(ValidityMask {
        height: gt.height,
        width: gt.width,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_depth_inside_cap() {
        let gt = DepthMap::filled(4, 4, 5.0);
        let m = build_mask(&gt, 1e-3, 10.0, Crop::None).unwrap();
        assert_eq!(m.count(), 16);
    }

    #[test]
    fn uniform_depth_beyond_cap_is_empty() {
        let gt = DepthMap::filled(4, 4, 12.0);
        let m = build_mask(&gt, 1e-3, 10.0, Crop::None).unwrap();
        assert!(m.is_empty());
        assert!(matches!(m.require_nonempty(), Err(Error::Data(_))));
    }

    #[test]
    fn eight_meter_cap() {
        let gt = DepthMap::new(1, 4, vec![7.0, 9.0, 7.0, 9.0]).unwrap();
        let m = build_mask(&gt, 1e-3, 8.0, Crop::None).unwrap();
        assert_eq!(m.data, vec![true, false, true, false]);
    }

    #[test]
    fn sensor_zero_and_cap_boundary() {
        let gt = DepthMap::new(1, 3, vec![0.0, 10.0, 10.000001]).unwrap();
        let m = build_mask(&gt, 1e-3, 10.0, Crop::None).unwrap();
        assert_eq!(m.data, vec![false, true, false]);
    }

    #[test]
    fn crop_windows() {
        assert_eq!(Crop::Eigen.window(480, 640), (45, 471, 41, 601));
        assert_eq!(Crop::Garg.window(352, 1216), (143, 349, 43, 1172));
        let gt = DepthMap::filled(480, 640, 3.0);
        let m = build_mask(&gt, 1e-3, 10.0, Crop::Eigen).unwrap();
        assert_eq!(m.count(), 426 * 560);
        assert!(build_mask(&gt, 5.0, 5.0, Crop::None).is_err());
    }
}
