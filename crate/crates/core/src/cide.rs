//! Semantic conditioning: classifier probabilities mixed over a bank of
//! learnable embeddings and projected to the 768-wide context the denoiser
//! cross-attends to. Also hosts the one-hot and precomputed-vector variants.

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, Init, Linear, Module, VarBuilder};

use crate::error::{Error, Result};
use crate::nn::{Activation, ParamStore};

/// Width of every conditioning token.
pub const CONTEXT_DIM: usize = 768;

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Conditioning tokens `[B, S, 768]`.
#[derive(Debug, Clone)]
pub struct ContextEmbedding {
    data: Tensor,
}

impl ContextEmbedding {
    pub fn new(data: Tensor) -> Result<Self> {
        let (_, _, width) = data
            .dims3()
            .map_err(|_| Error::Contract(format!("context must be [B, S, {CONTEXT_DIM}], got {:?}", data.dims())))?;
        if width != CONTEXT_DIM {
            return Err(Error::Contract(format!(
                "context width {width}, expected {CONTEXT_DIM}"
            )));
        }
        Ok(Self { data })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn batch(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn tokens(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn is_finite(&self) -> Result<bool> {
        let v = self.data.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        Ok(v.iter().all(|x| x.is_finite()))
    }

    /// Concatenate per-sample contexts along the batch axis.
    pub fn cat(parts: &[ContextEmbedding]) -> Result<Self> {
        let ts: Vec<&Tensor> = parts.iter().map(|c| &c.data).collect();
        Self::new(Tensor::cat(&ts, 0)?)
    }
}

/// Frozen image classifier producing a `[B, K]` logit vector.
pub trait ImageClassifier: Send + Sync {
    fn num_classes(&self) -> usize;

    /// Logits for a `[B, 3, H, W]` batch in `[0, 1]`; never carries gradients.
    fn logits(&self, images: &Tensor) -> Result<Tensor>;

    /// Hash of the frozen weights.
    fn fingerprint(&self) -> Result<String>;
}

/// Small strided-conv classifier standing in for a pretrained ViT.
#[derive(Debug, Clone)]
pub struct ToyClassifier {
    convs: Vec<Conv2d>,
    head: Linear,
    num_classes: usize,
    standardize: bool,
    store: ParamStore,
}

impl ToyClassifier {
    /// `store` should be frozen; its tensors are handed out detached.
    pub fn new(
        num_classes: usize,
        width: usize,
        standardize: bool,
        store: ParamStore,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let vb = store.var_builder(dtype, device);
        let cfg = Conv2dConfig {
            padding: 1,
            stride: 2,
            ..Default::default()
        };
        let convs = vec![
            candle_nn::conv2d(3, width, 3, cfg, vb.pp("conv0"))?,
            candle_nn::conv2d(width, 2 * width, 3, cfg, vb.pp("conv1"))?,
        ];
        let head = candle_nn::linear(2 * width, num_classes, vb.pp("head"))?;
        Ok(Self {
            convs,
            head,
            num_classes,
            standardize,
            store,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }
}

impl ImageClassifier for ToyClassifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = images.detach();
        if self.standardize {
            let dev = x.device();
            let mean = Tensor::new(&IMAGENET_MEAN, dev)?
                .to_dtype(x.dtype())?
                .reshape((1, 3, 1, 1))?;
            let std = Tensor::new(&IMAGENET_STD, dev)?
                .to_dtype(x.dtype())?
                .reshape((1, 3, 1, 1))?;
            x = x.broadcast_sub(&mean)?.broadcast_div(&std)?;
        }
        for conv in &self.convs {
            x = conv.forward(&x)?.relu()?;
        }
        let pooled = x.mean(D::Minus1)?.mean(D::Minus1)?;
        Ok(self.head.forward(&pooled)?.detach())
    }

    fn fingerprint(&self) -> Result<String> {
        self.store.fingerprint()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CideConfig {
    /// Classifier output width K.
    pub num_classes: usize,
    /// Number of learnable bank embeddings N.
    pub num_embeddings: usize,
    /// Hidden width of the two-layer MLP.
    pub hidden: usize,
    /// Apply softmax to the logits before the MLP.
    pub softmax: bool,
    pub act: Activation,
}

impl Default for CideConfig {
    fn default() -> Self {
        Self {
            num_classes: 1000,
            num_embeddings: 100,
            hidden: 400,
            softmax: true,
            act: Activation::Gelu,
        }
    }
}

/// Classifier logits -> MLP -> weights over the embedding bank -> projection.
#[derive(Debug, Clone)]
pub struct Cide {
    mlp_in: Linear,
    mlp_out: Linear,
    bank: Tensor,
    projection: Linear,
    cfg: CideConfig,
}

impl Cide {
    pub fn new(cfg: CideConfig, vb: VarBuilder) -> Result<Self> {
        if cfg.num_classes == 0 || cfg.num_embeddings == 0 || cfg.hidden == 0 {
            return Err(Error::Config("CIDE widths must be positive".into()));
        }
        let mlp_in = candle_nn::linear(cfg.num_classes, cfg.hidden, vb.pp("mlp.0"))?;
        let mlp_out = candle_nn::linear(cfg.hidden, cfg.num_embeddings, vb.pp("mlp.1"))?;
        let bank = vb.get_with_hints(
            (cfg.num_embeddings, CONTEXT_DIM),
            "bank.vectors",
            Init::Randn {
                mean: 0.0,
                stdev: 1.0 / (cfg.num_embeddings as f64).sqrt(),
            },
        )?;
        let projection = candle_nn::linear(CONTEXT_DIM, CONTEXT_DIM, vb.pp("projection"))?;
        Ok(Self {
            mlp_in,
            mlp_out,
            bank,
            projection,
            cfg,
        })
    }

    pub fn config(&self) -> &CideConfig {
        &self.cfg
    }

    pub fn bank(&self) -> &Tensor {
        &self.bank
    }

    /// Mixing weights `[B, N]` from logits `[B, K]`.
    pub fn weights(&self, logits: &Tensor) -> Result<Tensor> {
        let (_, k) = logits.dims2()?;
        if k != self.cfg.num_classes {
            return Err(Error::Config(format!(
                "classifier emits {k} logits but the CIDE MLP expects {}",
                self.cfg.num_classes
            )));
        }
        let p = if self.cfg.softmax {
            candle_nn::ops::softmax_last_dim(logits)?
        } else {
            logits.clone()
        };
        let h = self.cfg.act.apply(&self.mlp_in.forward(&p)?)?;
        Ok(self.mlp_out.forward(&h)?)
    }

    /// Pre-projection embedding `w . bank`, `[B, 768]`.
    pub fn mix(&self, weights: &Tensor) -> Result<Tensor> {
        let (_, n) = weights.dims2()?;
        if n != self.cfg.num_embeddings {
            return Err(Error::Contract(format!(
                "got {n} mixing weights for a bank of {}",
                self.cfg.num_embeddings
            )));
        }
        Ok(weights.matmul(&self.bank)?)
    }

    /// Bypass the MLP and condition on explicit bank weights.
    pub fn forward_with_weights(&self, weights: &Tensor) -> Result<ContextEmbedding> {
        let c = self.projection.forward(&self.mix(weights)?)?;
        ContextEmbedding::new(c.unsqueeze(1)?)
    }

    pub fn forward_logits(&self, logits: &Tensor) -> Result<ContextEmbedding> {
        self.forward_with_weights(&self.weights(logits)?)
    }

    pub fn forward(&self, images: &Tensor, classifier: &dyn ImageClassifier) -> Result<ContextEmbedding> {
        self.forward_logits(&classifier.logits(images)?)
    }
}

/// Scene-label ablation: `C = linear(one_hot(scene))`.
#[derive(Debug, Clone)]
pub struct OneHotEmbedder {
    linear: Linear,
    num_scenes: usize,
}

impl OneHotEmbedder {
    pub fn new(num_scenes: usize, vb: VarBuilder) -> Result<Self> {
        if num_scenes == 0 {
            return Err(Error::Config("one-hot conditioning needs at least one scene".into()));
        }
        Ok(Self {
            linear: candle_nn::linear(num_scenes, CONTEXT_DIM, vb)?,
            num_scenes,
        })
    }

    pub fn num_scenes(&self) -> usize {
        self.num_scenes
    }

    pub fn linear(&self) -> &Linear {
        &self.linear
    }

    pub fn forward(&self, scenes: &[usize], dtype: DType, device: &Device) -> Result<ContextEmbedding> {
        let mut onehot = vec![0f32; scenes.len() * self.num_scenes];
        for (b, &s) in scenes.iter().enumerate() {
            if s >= self.num_scenes {
                return Err(Error::Input(format!(
                    "scene index {s} out of range for {} scenes",
                    self.num_scenes
                )));
            }
            onehot[b * self.num_scenes + s] = 1.0;
        }
        let x = Tensor::from_vec(onehot, (scenes.len(), self.num_scenes), device)?.to_dtype(dtype)?;
        ContextEmbedding::new(self.linear.forward(&x)?.unsqueeze(1)?)
    }
}

/// Externally computed conditioning vector of width `768 * S`, reshaped to `[1, S, 768]`.
pub fn precomputed_condition(vec: &[f32], dtype: DType, device: &Device) -> Result<ContextEmbedding> {
    if vec.is_empty() || !vec.len().is_multiple_of(CONTEXT_DIM) {
        return Err(Error::Input(format!(
            "precomputed vector width {} is not a positive multiple of {CONTEXT_DIM}",
            vec.len()
        )));
    }
    if vec.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("precomputed vector has non-finite entries".into()));
    }
    let s = vec.len() / CONTEXT_DIM;
    let t = Tensor::from_slice(vec, (1, s, CONTEXT_DIM), device)?.to_dtype(dtype)?;
    ContextEmbedding::new(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cide(k: usize, n: usize) -> (Cide, ParamStore) {
        let store = ParamStore::new(11);
        let cfg = CideConfig {
            num_classes: k,
            num_embeddings: n,
            hidden: 16,
            ..Default::default()
        };
        (
            Cide::new(cfg, store.var_builder(DType::F64, &Device::Cpu)).unwrap(),
            store,
        )
    }

    fn values(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn one_hot_weights_select_a_bank_row() {
        let (c, _) = cide(10, 5);
        let mut w = vec![0f64; 5];
        w[3] = 1.0;
        let w = Tensor::from_vec(w, (1, 5), &Device::Cpu).unwrap();
        let got = c.forward_with_weights(&w).unwrap();
        let row = c.bank.get(3).unwrap().unsqueeze(0).unwrap();
        let expected = c.projection.forward(&row).unwrap();
        assert_eq!(got.tensor().dims(), &[1, 1, CONTEXT_DIM]);
        assert_eq!(values(got.tensor()), values(&expected));
    }

    #[test]
    fn logits_width_mismatch_is_config_error() {
        let (c, _) = cide(10, 5);
        let logits = Tensor::zeros((2, 9), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(c.forward_logits(&logits), Err(Error::Config(_))));
    }

    #[test]
    fn batched_images_through_classifier() {
        let (c, _) = cide(10, 5);
        let clf = ToyClassifier::new(10, 4, true, ParamStore::frozen(2), DType::F64, &Device::Cpu).unwrap();
        let imgs = Tensor::rand(0f64, 1.0, (4, 3, 32, 32), &Device::Cpu).unwrap();
        let ctx = c.forward(&imgs, &clf).unwrap();
        assert_eq!(ctx.tensor().dims(), &[4, 1, CONTEXT_DIM]);
        assert!(ctx.is_finite().unwrap());
    }

    #[test]
    fn mix_is_linear_in_weights() {
        let (c, _) = cide(10, 6);
        let a = Tensor::rand(-1f64, 1.0, (1, 6), &Device::Cpu).unwrap();
        let b = Tensor::rand(-1f64, 1.0, (1, 6), &Device::Cpu).unwrap();
        let sum = values(&c.mix(&(&a + &b).unwrap()).unwrap());
        let parts: Vec<f64> = values(&c.mix(&a).unwrap())
            .iter()
            .zip(values(&c.mix(&b).unwrap()))
            .map(|(x, y)| x + y)
            .collect();
        for (x, y) in sum.iter().zip(parts) {
            assert!((x - y).abs() < 1e-12);
        }
        let scaled = values(&c.mix(&(&a * 2.5).unwrap()).unwrap());
        for (x, y) in scaled.iter().zip(values(&c.mix(&a).unwrap())) {
            assert!((x - 2.5 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_bank_and_weights_together_is_invariant() {
        let (c, _) = cide(10, 4);
        let w = Tensor::new(&[[0.3f64, -1.2, 0.7, 2.0]], &Device::Cpu).unwrap();
        let base = values(c.forward_with_weights(&w).unwrap().tensor());
        let perm = [2u32, 0, 3, 1];
        let idx = Tensor::new(&perm, &Device::Cpu).unwrap();
        let permuted = Cide {
            bank: c.bank.index_select(&idx, 0).unwrap(),
            ..c.clone()
        };
        let pw = w.index_select(&idx, 1).unwrap();
        let got = values(permuted.forward_with_weights(&pw).unwrap().tensor());
        for (x, y) in base.iter().zip(got) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_condition_picks_weight_column() {
        let store = ParamStore::new(5);
        let oh = OneHotEmbedder::new(27, store.var_builder(DType::F64, &Device::Cpu)).unwrap();
        let c = oh.forward(&[0], DType::F64, &Device::Cpu).unwrap();
        // weight is [768, num_scenes]; one_hot(0) selects column 0
        let col = oh.linear.weight().narrow(1, 0, 1).unwrap().squeeze(1).unwrap();
        let expected = (col + oh.linear.bias().unwrap()).unwrap();
        assert_eq!(values(c.tensor()), values(&expected));
        let again = oh.forward(&[0], DType::F64, &Device::Cpu).unwrap();
        assert_eq!(values(c.tensor()), values(again.tensor()));
        assert!(matches!(
            oh.forward(&[27], DType::F64, &Device::Cpu),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn precomputed_vectors() {
        let z = precomputed_condition(&[0.0; 768], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(z.tensor().dims(), &[1, 1, 768]);
        assert!(z
            .tensor()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap()
            .iter()
            .all(|v| *v == 0.0));
        let two = precomputed_condition(&[1.0; 1536], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(two.tokens(), 2);
        assert!(matches!(
            precomputed_condition(&[0.0; 700], DType::F32, &Device::Cpu),
            Err(Error::Input(_))
        ));
    }
}
