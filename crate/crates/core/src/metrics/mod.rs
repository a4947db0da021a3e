//! Depth supervision and evaluation: SiLog, the standard error/accuracy
//! metrics, validity masks, and mean relative improvement over a baseline.

pub mod loss;
pub mod mask;
pub mod report;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::DepthMap;

pub use loss::{silog_loss, silog_loss_batch, silog_loss_tensor, SilogParams};
pub use mask::{build_mask, Crop, ValidityMask};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_pixels: usize,
}

impl MetricReport {
    pub fn field(&self, f: MriField) -> f64 {
        match f {
            MriField::Delta1 => self.delta1,
            MriField::AbsRel => self.abs_rel,
            MriField::Rmse => self.rmse,
        }
    }
}

#[derive(Default)]
struct Accum {
    n: usize,
    abs_rel: f64,
    sq_rel: f64,
    sq: f64,
    sq_log: f64,
    log10: f64,
    d: [usize; 3],
}

impl Accum {
    fn push(&mut self, p: f64, g: f64) -> Result<()> {
        if !(p > 0.0 && g > 0.0) {
            return Err(Error::Data(format!("nonpositive depth under mask (pred {p}, gt {g})")));
        }
        let diff = p - g;
        self.n += 1;
        self.abs_rel += diff.abs() / g;
        self.sq_rel += diff * diff / g;
        self.sq += diff * diff;
        let dl = p.ln() - g.ln();
        self.sq_log += dl * dl;
        self.log10 += (p.log10() - g.log10()).abs();
        let ratio = (p / g).max(g / p);
        for (i, t) in [1.25f64, 1.25f64.powi(2), 1.25f64.powi(3)].iter().enumerate() {
            if ratio < *t {
                self.d[i] += 1;
            }
        }
        Ok(())
    }

    fn add(&mut self, pred: &DepthMap, gt: &DepthMap, mask: &ValidityMask) -> Result<()> {
        if pred.data.len() != gt.data.len() || gt.data.len() != mask.data.len() {
            return Err(Error::Contract("prediction, ground truth and mask sizes differ".into()));
        }
        for ((p, g), m) in pred.data.iter().zip(&gt.data).zip(&mask.data) {
            if *m {
                self.push(*p, *g)?;
            }
        }
        Ok(())
    }

    fn finish(&self) -> Result<MetricReport> {
        if self.n == 0 {
            return Err(Error::Data("metrics over an empty mask".into()));
        }
        let n = self.n as f64;
        Ok(MetricReport {
            abs_rel: self.abs_rel / n,
            sq_rel: self.sq_rel / n,
            rmse: (self.sq / n).sqrt(),
            rmse_log: (self.sq_log / n).sqrt(),
            log10: self.log10 / n,
            delta1: self.d[0] as f64 / n,
            delta2: self.d[1] as f64 / n,
            delta3: self.d[2] as f64 / n,
            n_pixels: self.n,
        })
    }
}

/// Metrics over the valid pixels of one prediction. Accuracy thresholds use a
/// strict `<`, so a ratio of exactly `1.25^i` counts as a miss.
pub fn compute_metrics(pred: &DepthMap, gt: &DepthMap, mask: &ValidityMask) -> Result<MetricReport> {
    let mut acc = Accum::default();
    acc.add(pred, gt, mask)?;
    acc.finish()
}

/// How per-sample results combine into a dataset score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Metrics per image, then the unweighted mean over images.
    #[default]
    PerImage,
    /// Metrics over every valid pixel of the dataset at once.
    Pooled,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_image" => Ok(Aggregation::PerImage),
            "pooled" => Ok(Aggregation::Pooled),
            other => Err(Error::Config(format!(
                "unknown aggregation {other:?} (expected per_image or pooled)"
            ))),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::PerImage => "per_image",
            Aggregation::Pooled => "pooled",
        })
    }
}

/// Unweighted mean of per-image reports; `n_pixels` is the total.
pub fn mean_report(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::Data("no evaluable samples".into()));
    }
    let n = reports.len() as f64;
    let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(MetricReport {
        abs_rel: avg(|r| r.abs_rel),
        sq_rel: avg(|r| r.sq_rel),
        rmse: avg(|r| r.rmse),
        rmse_log: avg(|r| r.rmse_log),
        log10: avg(|r| r.log10),
        delta1: avg(|r| r.delta1),
        delta2: avg(|r| r.delta2),
        delta3: avg(|r| r.delta3),
        n_pixels: reports.iter().map(|r| r.n_pixels).sum(),
    })
}

pub fn pooled_metrics(items: &[(&DepthMap, &DepthMap, &ValidityMask)]) -> Result<MetricReport> {
    let mut acc = Accum::default();
    for (p, g, m) in items {
        acc.add(p, g, m)?;
    }
    acc.finish()
}

/// Dataset score under the chosen aggregation.
pub fn aggregate(items: &[(&DepthMap, &DepthMap, &ValidityMask)], how: Aggregation) -> Result<MetricReport> {
    match how {
        Aggregation::Pooled => pooled_metrics(items),
        Aggregation::PerImage => {
            let reports = items
                .iter()
                .map(|(p, g, m)| compute_metrics(p, g, m))
                .collect::<Result<Vec<_>>>()?;
            mean_report(&reports)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MriField {
    /// Higher is better.
    Delta1,
    /// Lower is better.
    AbsRel,
    /// Lower is better.
    Rmse,
}

impl MriField {
    pub const STANDARD: [MriField; 3] = [MriField::Delta1, MriField::AbsRel, MriField::Rmse];

    fn higher_is_better(&self) -> bool {
        matches!(self, MriField::Delta1)
    }
}

/// Mean over `fields` of the signed relative improvement of `ours` over
/// `baseline`, as a fraction (0.205 means 20.5%).
pub fn mean_relative_improvement(ours: &MetricReport, baseline: &MetricReport, fields: &[MriField]) -> Result<f64> {
    if fields.is_empty() {
        return Err(Error::Input("mRI needs at least one field".into()));
    }
    let mut total = 0.0;
    for f in fields {
        let b = baseline.field(*f);
        if b == 0.0 {
            return Err(Error::Data(format!("baseline {f:?} is zero")));
        }
        let o = ours.field(*f);
        total += if f.higher_is_better() { (o - b) / b } else { (b - o) / b };
    }
    Ok(total / fields.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple(d1: f64, rel: f64, rmse: f64) -> MetricReport {
        MetricReport {
            delta1: d1,
            abs_rel: rel,
            rmse,
            ..Default::default()
        }
    }

    #[test]
    fn perfect_prediction() {
        let g = DepthMap::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = compute_metrics(&g, &g, &ValidityMask::all(2, 2)).unwrap();
        assert_eq!(r.abs_rel, 0.0);
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.delta1, 1.0);
        assert_eq!(r.n_pixels, 4);
    }

    #[test]
    fn two_pixel_hand_case() {
        let g = DepthMap::new(1, 2, vec![2.0, 4.0]).unwrap();
        let p = DepthMap::new(1, 2, vec![1.0, 4.4]).unwrap();
        let r = compute_metrics(&p, &g, &ValidityMask::all(1, 2)).unwrap();
        assert!((r.abs_rel - 0.3).abs() < 1e-12);
        assert!((r.sq_rel - 0.27).abs() < 1e-12);
        assert!((r.rmse - 0.58f64.sqrt()).abs() < 1e-12);
        assert!((r.rmse - 0.761577).abs() < 1e-6);
        assert!((r.log10 - 0.171210).abs() < 5e-6);
        assert!((r.log10 - (2f64.log10() + 1.1f64.log10()) / 2.0).abs() < 1e-15);
        assert_eq!(r.delta1, 0.5);
    }

    #[test]
    fn delta_threshold_is_strict() {
        let g = DepthMap::new(1, 2, vec![1.0, 1.0]).unwrap();
        let p = DepthMap::new(1, 2, vec![1.25, 1.2]).unwrap();
        let r = compute_metrics(&p, &g, &ValidityMask::all(1, 2)).unwrap();
        assert_eq!(r.delta1, 0.5);
        assert_eq!(r.delta2, 1.0);
    }

    #[test]
    fn empty_mask_is_data_error() {
        let g = DepthMap::filled(1, 2, 1.0);
        let m = ValidityMask {
            height: 1,
            width: 2,
            data: vec![false; 2],
        };
        assert!(matches!(compute_metrics(&g, &g, &m), Err(Error::Data(_))));
    }

    #[test]
    fn mri_identity_and_published_rows() {
        let b = triple(0.798, 0.151, 0.424);
        assert_eq!(mean_relative_improvement(&b, &b, &MriField::STANDARD).unwrap(), 0.0);
        let sun = mean_relative_improvement(&triple(0.885, 0.112, 0.319), &b, &MriField::STANDARD).unwrap();
        assert!((sun - 0.2050).abs() < 5e-4, "{sun}");
        let ibims = mean_relative_improvement(
            &triple(0.688, 0.163, 0.664),
            &triple(0.548, 0.206, 0.861),
            &MriField::STANDARD,
        )
        .unwrap();
        assert!((ibims - 0.2310).abs() < 5e-4, "{ibims}");
        assert!(matches!(
            mean_relative_improvement(&b, &triple(0.0, 0.1, 0.1), &MriField::STANDARD),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn per_image_versus_pooled() {
        let g1 = DepthMap::new(1, 1, vec![1.0]).unwrap();
        let p1 = DepthMap::new(1, 1, vec![2.0]).unwrap();
        let g2 = DepthMap::new(1, 3, vec![1.0; 3]).unwrap();
        let m1 = ValidityMask::all(1, 1);
        let m2 = ValidityMask::all(1, 3);
        let items = [(&p1, &g1, &m1), (&g2, &g2, &m2)];
        let per = aggregate(&items, Aggregation::PerImage).unwrap();
        let pooled = aggregate(&items, Aggregation::Pooled).unwrap();
        assert!((per.abs_rel - 0.5).abs() < 1e-15);
        assert!((pooled.abs_rel - 0.25).abs() < 1e-15);
        assert_eq!(per.n_pixels, 4);
    }
}
