//! Scale-invariant log loss.
//!
//! With `d_i = ln(pred_i) - ln(gt_i)` over valid pixels the loss is
//! `alpha * sqrt(mean(d^2) - lambda * mean(d)^2)`. At `lambda = 1` it is the
//! standard deviation of the log ratio and ignores global scale.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::head::DepthMap;
use crate::metrics::mask::ValidityMask;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SilogParams {
    /// Variance focus.
    pub lambda: f64,
    /// Output scale.
    pub alpha: f64,
}

impl Default for SilogParams {
    fn default() -> Self {
        Self {
            lambda: 0.85,
            alpha: 10.0,
        }
    }
}

/// Loss from log-ratio samples directly.
pub fn silog_from_log_ratios(d: &[f64], params: SilogParams) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::Data("SiLog over an empty mask".into()));
    }
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let mean_sq = d.iter().map(|v| v * v).sum::<f64>() / n;
    Ok(params.alpha * (mean_sq - params.lambda * mean * mean).max(0.0).sqrt())
}

fn log_ratios(pred: &DepthMap, gt: &DepthMap, mask: &ValidityMask, out: &mut Vec<f64>) -> Result<()> {
    if pred.data.len() != gt.data.len() || gt.data.len() != mask.data.len() {
        return Err(Error::Contract("prediction, ground truth and mask sizes differ".into()));
    }
    for ((p, g), m) in pred.data.iter().zip(&gt.data).zip(&mask.data) {
        if !*m {
            continue;
        }
        if !(*p > 0.0 && *g > 0.0) {
            return Err(Error::Data(format!("nonpositive depth under mask (pred {p}, gt {g})")));
        }
        out.push(p.ln() - g.ln());
    }
    Ok(())
}

/// SiLog for one prediction.
pub fn silog_loss(pred: &DepthMap, gt: &DepthMap, mask: &ValidityMask, params: SilogParams) -> Result<f64> {
    let mut d = Vec::new();
    log_ratios(pred, gt, mask, &mut d)?;
    silog_from_log_ratios(&d, params)
}

/// SiLog pooled over every valid pixel of a batch.
pub fn silog_loss_batch(items: &[(&DepthMap, &DepthMap, &ValidityMask)], params: SilogParams) -> Result<f64> {
    let mut d = Vec::new();
    for (p, g, m) in items {
        log_ratios(p, g, m, &mut d)?;
    }
    silog_from_log_ratios(&d, params)
}

/// Differentiable SiLog over a `[B, 1, H, W]` batch, pooled over all pixels
/// where `mask` (same shape, 1.0 valid / 0.0 invalid) is set. Ground truth
/// under invalid pixels is ignored and may be zero.
pub fn silog_loss_tensor(pred: &Tensor, gt: &Tensor, mask: &Tensor, params: SilogParams) -> Result<Tensor> {
    if pred.dims() != gt.dims() || gt.dims() != mask.dims() {
        return Err(Error::Contract(format!(
            "SiLog shapes differ: pred {:?}, gt {:?}, mask {:?}",
            pred.dims(),
            gt.dims(),
            mask.dims()
        )));
    }
    let n = mask.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if n < 1.0 {
        return Err(Error::Data("SiLog over an empty mask".into()));
    }
    let inv = (1.0 - mask)?;
    // invalid pixels get gt := pred so they contribute d = 0 and no gradient
    let safe_gt = ((gt * mask)? + (pred.detach() * &inv)?)?;
    let safe_pred = ((pred * mask)? + (pred.detach() * &inv)?)?;
    let d = (safe_pred.log()? - safe_gt.log()?)?;
    let mean = (d.sum_all()? / n)?;
    let mean_sq = (d.sqr()?.sum_all()? / n)?;
    let var = (mean_sq - (mean.sqr()? * params.lambda)?)?;
    // relu maps NaN to 0; adding `0 * var` (0, or NaN) keeps a diverged
    // prediction visible to the caller
    let var = (var.relu()? + (&var * 0.0)?)?;
    Ok((var.sqrt()? * params.alpha)?)
}
