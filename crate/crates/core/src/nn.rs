//! Shared tensor plumbing: a seeded parameter store backing `VarBuilder`,
//! activations, and separable bilinear resampling.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::{Init, VarBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named parameter store with deterministic, order-independent initialization.
///
/// Every parameter is drawn from a ChaCha stream keyed by `(seed, name)`, so two
/// stores built with the same seed hold identical values no matter which order
/// the model asks for them. A frozen store hands out detached tensors.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<StoreInner>,
}

struct StoreInner {
    seed: u64,
    frozen: bool,
    vars: Mutex<BTreeMap<String, Var>>,
}

impl fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParamStore")
            .field("seed", &self.inner.seed)
            .field("frozen", &self.inner.frozen)
            .field("len", &self.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self::with_mode(seed, false)
    }

    pub fn frozen(seed: u64) -> Self {
        Self::with_mode(seed, true)
    }

    fn with_mode(seed: u64, frozen: bool) -> Self {
        Self {
            inner: Arc::new(StoreInner {
                seed,
                frozen,
                vars: Mutex::new(BTreeMap::new()),
            }),
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.inner.frozen
    }

    pub fn var_builder(&self, dtype: DType, device: &Device) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), dtype, device.clone())
    }

    pub fn len(&self) -> usize {
        self.inner.vars.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All parameters sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.inner
            .vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn get_var(&self, name: &str) -> Option<Var> {
        self.inner.vars.lock().unwrap().get(name).cloned()
    }

    /// SHA-256 over names, shapes, and raw parameter bytes.
    pub fn fingerprint(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in self.vars() {
            hasher.update(name.as_bytes());
            for d in var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            hasher.update(tensor_bytes(var.as_tensor())?);
        }
        Ok(hex::encode(hasher.finalize()))
    }

    fn init_tensor(&self, shape: &Shape, name: &str, init: Init) -> Result<Tensor> {
        let mut key = Sha256::new();
        key.update(self.inner.seed.to_le_bytes());
        key.update(name.as_bytes());
        let digest: [u8; 32] = key.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Const(v) => vec![v; n],
            Init::Uniform { lo, up } => (0..n).map(|_| rng.gen_range(lo..up)).collect(),
            Init::Randn { mean, stdev } => (0..n)
                .map(|_| mean + stdev * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
                match dist {
                    candle_nn::init::NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                    }
                    candle_nn::init::NormalOrUniform::Normal => {
                        (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
                    }
                }
            }
        };
        Ok(Tensor::from_vec(values, shape.clone(), &Device::Cpu)?)
    }
}

impl candle_nn::var_builder::SimpleBackend for ParamStore {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let mut vars = self.inner.vars.lock().unwrap();
        let var = match vars.get(name) {
            Some(v) => {
                if v.shape() != &s {
                    candle_core::bail!("parameter {name} has shape {:?}, requested {:?}", v.dims(), s.dims());
                }
                v.clone()
            }
            None => {
                let t = self
                    .init_tensor(&s, name, h)
                    .map_err(|e| candle_core::Error::Msg(e.to_string()))?
                    .to_dtype(dtype)?
                    .to_device(dev)?;
                let v = Var::from_tensor(&t)?;
                vars.insert(name.to_string(), v.clone());
                v
            }
        };
        if self.inner.frozen {
            Ok(var.as_tensor().detach())
        } else {
            Ok(var.as_tensor().clone())
        }
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        match self.inner.vars.lock().unwrap().get(name) {
            Some(v) => Ok(v.as_tensor().clone()),
            None => candle_core::bail!("no parameter named {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.inner.vars.lock().unwrap().contains_key(name)
    }
}

/// Raw little-endian bytes of a tensor in its own dtype.
pub fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    let bytes = match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Contract(format!("unsupported parameter dtype {other:?}"))),
    };
    Ok(bytes)
}

/// Nonlinearity used between layers; GELU unless configured otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
    Silu,
}

impl Activation {
    pub fn apply(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        match self {
            Activation::Gelu => x.gelu_erf(),
            Activation::Relu => x.relu(),
            Activation::Silu => x.silu(),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            "silu" => Ok(Activation::Silu),
            other => Err(Error::Config(format!(
                "unknown activation {other:?} (expected gelu, relu, silu)"
            ))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
            Activation::Silu => "silu",
        })
    }
}

/// Group count for a group norm over `channels`: the largest power of two up
/// to 32 that divides `channels` while keeping at least two channels per group.
pub fn norm_groups(channels: usize) -> usize {
    [32, 16, 8, 4, 2]
        .into_iter()
        .find(|g| channels.is_multiple_of(*g) && channels / g >= 2)
        .unwrap_or(1)
}

/// Row-major `[out_len, in_len]` half-pixel bilinear interpolation weights.
pub fn resize_weights(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut w = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = if i0 == in_len - 1 { 0.0 } else { src - i0 as f64 };
        w[i * in_len + i0] += 1.0 - frac;
        w[i * in_len + i1] += frac;
    }
    w
}

/// Bilinear resize of a `[B, C, H, W]` tensor, written as two matmuls so it
/// stays differentiable.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> candle_core::Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ry = Tensor::from_vec(resize_weights(h, out_h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let rx = Tensor::from_vec(resize_weights(w, out_w), (out_w, w), dev)?
        .to_dtype(x.dtype())?
        .t()?
        .contiguous()?;
    ry.broadcast_matmul(&x.contiguous()?)?.broadcast_matmul(&rx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_nn::Module;

    #[test]
    fn store_init_is_order_independent() {
        let a = ParamStore::new(7);
        let b = ParamStore::new(7);
        let vb_a = a.var_builder(DType::F32, &Device::Cpu);
        let vb_b = b.var_builder(DType::F32, &Device::Cpu);
        let _ = candle_nn::linear(3, 4, vb_a.pp("x")).unwrap();
        let _ = candle_nn::linear(5, 2, vb_a.pp("y")).unwrap();
        let _ = candle_nn::linear(5, 2, vb_b.pp("y")).unwrap();
        let _ = candle_nn::linear(3, 4, vb_b.pp("x")).unwrap();
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        assert_ne!(a.fingerprint().unwrap(), ParamStore::new(8).fingerprint().unwrap());
    }

    #[test]
    fn frozen_store_blocks_gradients() {
        let store = ParamStore::frozen(1);
        let lin = candle_nn::linear(2, 1, store.var_builder(DType::F64, &Device::Cpu)).unwrap();
        let x = Var::new(&[[1.0f64, 2.0]], &Device::Cpu).unwrap();
        let grads = lin
            .forward(x.as_tensor())
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        for (_, v) in store.vars() {
            assert!(grads.get(v.as_tensor()).is_none());
        }
        assert!(grads.get(x.as_tensor()).is_some());
    }

    #[test]
    fn resize_rows_sum_to_one() {
        for (i, o) in [(1, 4), (4, 2), (2, 2), (3, 7), (8, 1)] {
            let w = resize_weights(i, o);
            for r in 0..o {
                let s: f64 = w[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_identity_and_constant() {
        let x = Tensor::arange(0f64, 16., &Device::Cpu)
            .unwrap()
            .reshape((1, 1, 4, 4))
            .unwrap();
        let same = bilinear_resize(&x, 4, 4).unwrap();
        assert_eq!(
            same.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
        let c = Tensor::full(3.5f64, (1, 2, 2, 2), &Device::Cpu).unwrap();
        let up = bilinear_resize(&c, 8, 4).unwrap();
        assert_eq!(up.dims(), &[1, 2, 8, 4]);
        for v in up.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - 3.5).abs() < 1e-12);
        }
        // 2x downsample with half-pixel centers averages each pair
        let down = bilinear_resize(&x, 2, 2).unwrap();
        let d = down.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(d, vec![2.5, 4.5, 10.5, 12.5]);
    }
}
