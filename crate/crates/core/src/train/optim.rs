use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Parameters sharing one learning-rate multiplier.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub lr_scale: f64,
    pub params: Vec<(String, Var)>,
}

struct Slot {
    name: String,
    var: Var,
    decay: bool,
    m: Tensor,
    v: Tensor,
}

/// AdamW with decoupled weight decay `theta -= lr * wd * theta`. Decay skips
/// rank-1 parameters (biases, norm scales).
pub struct AdamW {
    groups: Vec<(String, f64, Vec<Slot>)>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: usize,
}

impl AdamW {
    pub fn new(groups: Vec<ParamGroup>, cfg: &TrainConfig) -> Result<Self> {
        let groups = groups
            .into_iter()
            .map(|g| {
                let slots = g
                    .params
                    .into_iter()
                    .map(|(name, var)| {
                        let t = var.as_tensor();
                        Ok(Slot {
                            decay: t.rank() >= 2,
                            m: t.zeros_like()?,
                            v: t.zeros_like()?,
                            name,
                            var,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((g.name, g.lr_scale, slots))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            groups,
            beta1: cfg.betas.0,
            beta2: cfg.betas.1,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn group_scales(&self) -> Vec<(String, f64)> {
        self.groups.iter().map(|g| (g.0.clone(), g.1)).collect()
    }

    /// One update at base rate `lr`. Parameters without a gradient are left
    /// untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (_, scale, slots) in &mut self.groups {
            let lr_g = lr * *scale;
            for s in slots.iter_mut() {
                let Some(g) = grads.get(s.var.as_tensor()) else {
                    continue;
                };
                let g = g.detach();
                s.m = ((s.m.clone() * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
                s.v = ((s.v.clone() * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
                let m_hat = (&s.m / bc1)?;
                let v_hat = (&s.v / bc2)?;
                let theta = s.var.as_tensor().detach();
                let theta = if s.decay && self.weight_decay > 0.0 {
                    (&theta * (1.0 - lr_g * self.weight_decay))?
                } else {
                    theta
                };
                let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
                let next = (theta - (update * lr_g)?)?;
                s.var.set(&next)?;
            }
        }
        Ok(())
    }

    /// Moment tensors as `(m/<name>, m)` and `(v/<name>, v)`.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (_, _, slots) in &self.groups {
            for s in slots {
                out.push((format!("m/{}", s.name), s.m.clone()));
                out.push((format!("v/{}", s.name), s.v.clone()));
            }
        }
        out
    }

    pub fn restore(&mut self, step: usize, state: &[(String, Tensor)]) -> Result<()> {
        for (_, _, slots) in &mut self.groups {
            for s in slots.iter_mut() {
                for (prefix, dst) in [("m/", &mut s.m), ("v/", &mut s.v)] {
                    let key = format!("{prefix}{}", s.name);
                    let src = state
                        .iter()
                        .find(|(n, _)| *n == key)
                        .ok_or_else(|| Error::Contract(format!("optimizer state lacks {key}")))?;
                    if src.1.dims() != dst.dims() {
                        return Err(Error::ShapeMismatch(format!(
                            "{key}: checkpoint {:?}, model {:?}",
                            src.1.dims(),
                            dst.dims()
                        )));
                    }
                    *dst = src.1.to_dtype(dst.dtype())?;
                }
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    /// Scalar AdamW written out by hand.
    fn oracle(theta0: f64, grads: &[f64], lr: f64, wd: f64) -> f64 {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (mut m, mut v, mut th) = (0.0, 0.0, theta0);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            th = th * (1.0 - lr * wd) - lr * mh / (vh.sqrt() + eps);
        }
        th
    }

    #[test]
    fn matches_scalar_oracle_and_scales() {
        let dev = Device::Cpu;
        let w = Var::from_tensor(&Tensor::new(&[[0.5f64]], &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::new(&[0.5f64], &dev).unwrap()).unwrap();
        let cfg = TrainConfig::default();
        let groups = vec![
            ParamGroup {
                name: "w".into(),
                lr_scale: 0.5,
                params: vec![("w".into(), w.clone())],
            },
            ParamGroup {
                name: "b".into(),
                lr_scale: 1.0,
                params: vec![("b".into(), b.clone())],
            },
        ];
        let mut opt = AdamW::new(groups, &cfg).unwrap();
        let mut gs = Vec::new();
        for k in 0..5 {
            // loss = c * (w + b) so both gradients equal c
            let c = 1.0 + k as f64 * 0.3;
            gs.push(c);
            let loss = ((w.as_tensor().sum_all().unwrap() + b.as_tensor().sum_all().unwrap()).unwrap() * c).unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&grads, 1e-2).unwrap();
        }
        let wv = w.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()[0];
        let bv = b.as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((wv - oracle(0.5, &gs, 0.5e-2, 0.1)).abs() < 1e-12);
        assert!((bv - oracle(0.5, &gs, 1e-2, 0.0)).abs() < 1e-12);
        assert_eq!(opt.steps_taken(), 5);
        assert_eq!(opt.state().len(), 4);
    }
}
