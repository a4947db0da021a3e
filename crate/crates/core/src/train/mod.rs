//! Optimization: learning-rate schedule, AdamW, checkpoints and the loop.

pub mod checkpoint;
pub mod optim;
pub mod trainer;

use crate::error::{Error, Result};
use crate::metrics::SilogParams;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, LoadOptions, FORMAT_VERSION};
pub use optim::{AdamW, ParamGroup};
pub use trainer::{train, train_step, TrainOutcome, LOG_HEADER};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub layer_decay: f64,
    pub warmup_frac: f64,
    pub seed: u64,
    /// Train the seeded toy encoder and denoiser alongside the head.
    pub toy_profile: bool,
    /// Train a loaded pretrained backbone instead of freezing it.
    pub finetune_backbone: bool,
    /// 0 means run every epoch.
    pub max_steps: usize,
    /// 0 means only the final checkpoint.
    pub checkpoint_every: usize,
    pub silog: SilogParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 32,
            lr_min: 3e-5,
            lr_max: 5e-4,
            weight_decay: 0.1,
            betas: (0.9, 0.999),
            eps: 1e-8,
            layer_decay: 0.9,
            warmup_frac: 0.3,
            seed: 0,
            toy_profile: true,
            finetune_backbone: false,
            max_steps: 0,
            checkpoint_every: 0,
            silog: SilogParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!(
                "need 0 < lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(Error::Config(format!(
                "warmup_frac {} outside (0, 1)",
                self.warmup_frac
            )));
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(Error::Config(format!(
                "layer_decay {} outside (0, 1]",
                self.layer_decay
            )));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!("AdamW betas ({b1}, {b2}) outside [0, 1)")));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("need eps > 0 and weight_decay >= 0".into()));
        }
        if !(self.silog.lambda >= 0.0 && self.silog.lambda <= 1.0 && self.silog.alpha > 0.0) {
            return Err(Error::Config("SiLog needs lambda in [0, 1] and alpha > 0".into()));
        }
        Ok(())
    }

    /// Step at which the rate peaks, kept strictly inside the schedule so
    /// both endpoints stay at `lr_min`.
    pub fn peak_step(&self, total_steps: usize) -> usize {
        let p = (self.warmup_frac * total_steps as f64).round() as usize;
        p.clamp(1, total_steps.saturating_sub(1).max(1))
    }
}

/// Piecewise-linear one-cycle rate: `lr_min -> lr_max` over the warmup, then
/// back to `lr_min` at `total_steps`.
pub fn one_cycle_lr(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Contract(format!(
            "step {step} beyond schedule of {total_steps} steps"
        )));
    }
    if total_steps < 2 {
        return Ok(cfg.lr_min);
    }
    let peak = cfg.peak_step(total_steps);
    let (lo, hi) = (cfg.lr_min, cfg.lr_max);
    // exact at the knots; the lerp can land one ulp off
    let lr = if step == peak {
        hi
    } else if step == total_steps {
        lo
    } else if step < peak {
        lo + (hi - lo) * step as f64 / peak as f64
    } else {
        hi - (hi - lo) * (step - peak) as f64 / (total_steps - peak) as f64
    };
    Ok(lr)
}

/// `decay^(num_layers - 1 - layer_index)`; the output-side block gets 1.
pub fn layer_lr_scale(layer_index: usize, num_layers: usize, decay: f64) -> Result<f64> {
    if layer_index >= num_layers {
        return Err(Error::Contract(format!(
            "layer {layer_index} out of range for {num_layers} layers"
        )));
    }
    Ok(decay.powi((num_layers - 1 - layer_index) as i32))
}
