//! The full depth pipeline: encode -> condition -> extract -> aggregate ->
//! decode -> regress.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use crate::cide::{
    precomputed_condition, Cide, CideConfig, ContextEmbedding, ImageClassifier, OneHotEmbedder, ToyClassifier,
    CONTEXT_DIM,
};
use crate::config::RunConfig;
use crate::diffusion::{
    aggregate_target, extract_features, Denoiser, FeatureAggregator, NoiseSchedule, ToyUnet, ToyUnetConfig,
    AGGREGATE_STRIDE,
};
use crate::error::{Error, Result};
use crate::head::{DecoderConfig, DepthRegressor, UpsamplingDecoder};
use crate::latent::{check_input_dims, LatentEncoder, ToyEncoder, LATENT_STRIDE};
use crate::nn::ParamStore;
use crate::train::{layer_lr_scale, ParamGroup};

/// Front end producing the denoiser's context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditioningVariant {
    /// Classifier logits through CIDE.
    Cide,
    /// Learned embedding of a scene label.
    OneHot,
    /// Externally computed per-image vectors.
    Precomputed,
}

impl FromStr for ConditioningVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cide" => Ok(Self::Cide),
            "one_hot" => Ok(Self::OneHot),
            "precomputed" => Ok(Self::Precomputed),
            other => Err(Error::Config(format!(
                "unknown conditioning variant {other:?} (expected cide, one_hot, precomputed)"
            ))),
        }
    }
}

impl fmt::Display for ConditioningVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cide => "cide",
            Self::OneHot => "one_hot",
            Self::Precomputed => "precomputed",
        })
    }
}

enum Conditioner {
    Cide { cide: Cide, classifier: ToyClassifier },
    OneHot(OneHotEmbedder),
    Precomputed(HashMap<String, Vec<f32>>),
}

/// Per-batch side information for the conditioning front end.
#[derive(Debug, Clone, Copy)]
pub struct BatchMeta<'a> {
    pub ids: &'a [String],
    pub scenes: Option<&'a [usize]>,
}

/// One stage's output shape next to the shape the pipeline contract requires.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageCheck {
    pub stage: String,
    pub shape: Vec<usize>,
    pub expected: Vec<usize>,
}

impl StageCheck {
    pub fn ok(&self) -> bool {
        self.shape == self.expected
    }
}

/// Parameter stores, split by freezing policy.
#[derive(Debug, Clone)]
pub struct ModelStores {
    /// Frozen classifier; present for the CIDE variant.
    pub classifier: Option<ParamStore>,
    /// Latent encoder (`enc.*`) and denoiser (`unet.*`).
    pub backbone: ParamStore,
    /// Conditioning, aggregation, decoder and regressor.
    pub head: ParamStore,
}

/// Blocks in input-to-output order, the unit of layer-wise rate decay.
pub const BLOCK_ORDER: [&str; 7] = ["enc", "cide", "onehot", "unet", "agg", "dec", "reg"];

pub struct DepthModel {
    dtype: DType,
    device: Device,
    encoder: ToyEncoder,
    unet: ToyUnet,
    schedule: NoiseSchedule,
    timestep: usize,
    cond: Conditioner,
    aggregator: FeatureAggregator,
    decoder: UpsamplingDecoder,
    regressor: DepthRegressor,
    stores: ModelStores,
    embed_dim: usize,
    variant: ConditioningVariant,
}

/// Sub-seed for one parameter store.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let d = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(tag.as_bytes())
        .finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        _ => Err(Error::Config(format!("unsupported dtype {s:?}"))),
    }
}

impl DepthModel {
    /// Build from config. `vectors` feeds the precomputed variant.
    pub fn build(cfg: &RunConfig, vectors: Option<HashMap<String, Vec<f32>>>, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let dtype = parse_dtype(&cfg.model.dtype)?;
        let seed = cfg.train.seed;
        let act = cfg.model.activation;
        let backbone_trainable = if cfg.model.backbone_weights.is_some() {
            cfg.train.finetune_backbone
        } else {
            cfg.train.toy_profile || cfg.train.finetune_backbone
        };
        let bseed = derive_seed(seed, "backbone");
        let backbone = if backbone_trainable {
            ParamStore::new(bseed)
        } else {
            ParamStore::frozen(bseed)
        };
        let head = ParamStore::new(derive_seed(seed, "head"));
        let bvb = backbone.var_builder(dtype, device);
        let hvb = head.var_builder(dtype, device);

        let encoder = ToyEncoder::new(cfg.model.encoder_width, cfg.model.latent_channels, act, bvb.pp("enc"))?;
        let ucfg = ToyUnetConfig {
            embed_dim: cfg.model.unet_width,
            latent_channels: cfg.model.latent_channels,
            context_dim: CONTEXT_DIM,
            levels: cfg.model.unet_levels.clone(),
            act,
        };
        let unet = ToyUnet::new(ucfg, bvb.pp("unet"))?;

        let variant = cfg.conditioning.variant;
        let (cond, classifier_store) = match variant {
            ConditioningVariant::Cide => {
                let store = ParamStore::frozen(derive_seed(seed, "classifier"));
                let classifier = ToyClassifier::new(
                    cfg.cide.num_classes,
                    cfg.cide.classifier_width,
                    true,
                    store.clone(),
                    dtype,
                    device,
                )?;
                let ccfg = CideConfig {
                    num_classes: cfg.cide.num_classes,
                    num_embeddings: cfg.cide.num_embeddings,
                    hidden: cfg.cide.hidden,
                    softmax: cfg.cide.softmax,
                    act,
                };
                let cide = Cide::new(ccfg, hvb.pp("cide"))?;
                (Conditioner::Cide { cide, classifier }, Some(store))
            }
            ConditioningVariant::OneHot => (
                Conditioner::OneHot(OneHotEmbedder::new(cfg.conditioning.num_scenes, hvb.pp("onehot"))?),
                None,
            ),
            ConditioningVariant::Precomputed => {
                let v = vectors
                    .ok_or_else(|| Error::Data("precomputed conditioning needs a context vector file".into()))?;
                (Conditioner::Precomputed(v), None)
            }
        };

        let in_channels = cfg
            .model
            .unet_levels
            .iter()
            .map(|s| unet.level_channels(*s).unwrap_or(0))
            .sum();
        let e = cfg.model.embed_dim;
        let aggregator = FeatureAggregator::new(in_channels, e, hvb.pp("agg"))?;
        let dcfg = DecoderConfig {
            embed_dim: e,
            stages: cfg.model.decoder_stages,
            d_max: cfg.d_max()?,
            feature_stride: AGGREGATE_STRIDE,
            act,
        };
        let decoder = UpsamplingDecoder::new(dcfg, hvb.pp("dec"))?;
        let regressor = DepthRegressor::new(e, cfg.d_max()?, act, hvb.pp("reg"))?;

        let model = Self {
            dtype,
            device: device.clone(),
            encoder,
            unet,
            schedule: cfg.schedule()?,
            timestep: cfg.model.timestep,
            cond,
            aggregator,
            decoder,
            regressor,
            stores: ModelStores {
                classifier: classifier_store,
                backbone,
                head,
            },
            embed_dim: e,
            variant,
        };
        if let Some(p) = &cfg.model.backbone_weights {
            model.load_prefixed(p, "backbone/")?;
        }
        if let (Some(p), ConditioningVariant::Cide) = (&cfg.cide.classifier_weights, variant) {
            model.load_prefixed(p, "classifier/")?;
        }
        Ok(model)
    }

    fn load_prefixed(&self, path: &Path, prefix: &str) -> Result<()> {
        let arrays = crate::train::checkpoint::read_arrays(path)?;
        let picked: BTreeMap<String, Tensor> = arrays.into_iter().filter(|(n, _)| n.starts_with(prefix)).collect();
        if picked.is_empty() {
            return Err(Error::Data(format!("{} holds no {prefix}* arrays", path.display())));
        }
        self.load_arrays(&picked, Some(prefix))
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn variant(&self) -> ConditioningVariant {
        self.variant
    }

    pub fn stores(&self) -> &ModelStores {
        &self.stores
    }

    pub fn regressor(&self) -> &DepthRegressor {
        &self.regressor
    }

    /// Fingerprints of frozen parameter stores keyed by store name.
    pub fn frozen_fingerprints(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        if let Some(c) = &self.stores.classifier {
            out.insert("classifier".to_string(), c.fingerprint()?);
        }
        if self.stores.backbone.is_frozen() {
            out.insert("backbone".to_string(), self.stores.backbone.fingerprint()?);
        }
        Ok(out)
    }

    fn named_stores(&self) -> Vec<(&'static str, &ParamStore)> {
        let mut v = Vec::new();
        if let Some(c) = &self.stores.classifier {
            v.push(("classifier", c));
        }
        v.push(("backbone", &self.stores.backbone));
        v.push(("head", &self.stores.head));
        v
    }

    /// Every parameter as `store/name`, sorted within each store.
    pub fn named_arrays(&self) -> Vec<(String, Tensor)> {
        self.named_stores()
            .into_iter()
            .flat_map(|(s, store)| {
                store
                    .vars()
                    .into_iter()
                    .map(move |(n, v)| (format!("{s}/{n}"), v.as_tensor().clone()))
            })
            .collect()
    }

    /// Overwrite parameters from `arrays`. With `only_prefix`, only model
    /// arrays under it must be present. Any missing, unexpected or
    /// differently shaped array is reported at once.
    pub fn load_arrays(&self, arrays: &BTreeMap<String, Tensor>, only_prefix: Option<&str>) -> Result<()> {
        let mut problems = Vec::new();
        let mut targets = Vec::new();
        let mut known = std::collections::BTreeSet::new();
        for (s, store) in self.named_stores() {
            for (n, var) in store.vars() {
                let key = format!("{s}/{n}");
                if only_prefix.is_some_and(|p| !key.starts_with(p)) {
                    continue;
                }
                known.insert(key.clone());
                match arrays.get(&key) {
                    None => problems.push(format!("  missing   {key} {:?}", var.dims())),
                    Some(t) if t.dims() != var.dims() => problems.push(format!(
                        "  shape     {key}: file {:?}, model {:?}",
                        t.dims(),
                        var.dims()
                    )),
                    Some(t) => targets.push((var, t)),
                }
            }
        }
        for (k, t) in arrays {
            if !known.contains(k) && only_prefix.is_none_or(|p| k.starts_with(p)) {
                problems.push(format!("  unexpected {k} {:?}", t.dims()));
            }
        }
        if !problems.is_empty() {
            return Err(Error::ShapeMismatch(problems.join("\n")));
        }
        for (var, t) in targets {
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// Trainable parameters grouped by block with per-block rate scales.
    pub fn param_groups(&self, layer_decay: f64) -> Result<Vec<ParamGroup>> {
        let mut by_block: BTreeMap<&str, Vec<(String, candle_core::Var)>> = BTreeMap::new();
        for (s, store) in self.named_stores() {
            if store.is_frozen() {
                continue;
            }
            for (n, v) in store.vars() {
                let block = n.split('.').next().unwrap_or("");
                let block = BLOCK_ORDER
                    .iter()
                    .find(|b| **b == block)
                    .ok_or_else(|| Error::Contract(format!("parameter {n} belongs to no known block")))?;
                by_block.entry(block).or_default().push((format!("{s}/{n}"), v));
            }
        }
        let present: Vec<&str> = BLOCK_ORDER
            .iter()
            .copied()
            .filter(|b| by_block.contains_key(b))
            .collect();
        let n = present.len();
        present
            .iter()
            .enumerate()
            .map(|(i, b)| {
                Ok(ParamGroup {
                    name: b.to_string(),
                    lr_scale: layer_lr_scale(i, n, layer_decay)?,
                    params: by_block.remove(b).unwrap_or_default(),
                })
            })
            .collect()
    }

    /// Context embedding `[B, S, 768]` for a batch.
    pub fn context(&self, images: &Tensor, meta: &BatchMeta) -> Result<ContextEmbedding> {
        let b = images.dims4()?.0;
        match &self.cond {
            Conditioner::Cide { cide, classifier } => cide.forward(images, classifier),
            Conditioner::OneHot(emb) => {
                let scenes = meta
                    .scenes
                    .ok_or_else(|| Error::Data("one_hot conditioning needs a scene index on every sample".into()))?;
                if scenes.len() != b {
                    return Err(Error::Contract("scene labels do not match the batch".into()));
                }
                if let Some(s) = scenes.iter().find(|s| **s >= emb.num_scenes()) {
                    return Err(Error::Data(format!(
                        "scene index {s} out of range for {} scenes",
                        emb.num_scenes()
                    )));
                }
                emb.forward(scenes, self.dtype, &self.device)
            }
            Conditioner::Precomputed(map) => {
                if meta.ids.len() != b {
                    return Err(Error::Contract("sample ids do not match the batch".into()));
                }
                let parts = meta
                    .ids
                    .iter()
                    .map(|id| {
                        let v = map
                            .get(id)
                            .ok_or_else(|| Error::Data(format!("no context vector for sample {id}")))?;
                        precomputed_condition(v, self.dtype, &self.device)
                    })
                    .collect::<Result<Vec<_>>>()?;
                ContextEmbedding::cat(&parts)
            }
        }
    }

    pub fn forward(&self, images: &Tensor, meta: &BatchMeta) -> Result<Tensor> {
        self.run(images, meta, None)
    }

    /// Forward pass recording every stage's shape against the contract.
    /// Fails on the first stage that deviates.
    pub fn forward_checked(&self, images: &Tensor, meta: &BatchMeta) -> Result<(Tensor, Vec<StageCheck>)> {
        let mut trace = Vec::new();
        let out = self.run(images, meta, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn run(&self, images: &Tensor, meta: &BatchMeta, mut trace: Option<&mut Vec<StageCheck>>) -> Result<Tensor> {
        let (b, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::Input(format!("expected RGB batch, got {c} channels")));
        }
        check_input_dims(h, w)?;
        let images = images.to_dtype(self.dtype)?;
        let mut record = |stage: &str, t: &Tensor, expected: Vec<usize>| -> Result<()> {
            if let Some(tr) = trace.as_deref_mut() {
                let check = StageCheck {
                    stage: stage.to_string(),
                    shape: t.dims().to_vec(),
                    expected,
                };
                let ok = check.ok();
                let msg = format!("stage {stage}: got {:?}, expected {:?}", check.shape, check.expected);
                tr.push(check);
                if !ok {
                    return Err(Error::Contract(msg));
                }
            }
            Ok(())
        };

        let z0 = self.encoder.encode_batch(&images)?;
        record(
            "encode",
            &z0.data,
            vec![b, self.encoder.latent_channels(), h / LATENT_STRIDE, w / LATENT_STRIDE],
        )?;

        let ctx = self.context(&images, meta)?;
        let tokens = ctx.tokens();
        record("condition", ctx.tensor(), vec![b, tokens, CONTEXT_DIM])?;

        // deterministic pass: eps = 0
        let eps = z0.data.zeros_like()?;
        let z_t = self.schedule.q_sample(&z0, self.timestep, &eps)?;
        let pyramid = extract_features(&z_t, self.timestep, &ctx, &self.unet)?;
        for level in pyramid.levels() {
            let s = level.stride;
            let ch = self.unet.level_channels(s).unwrap_or(0);
            record(
                &format!("extract@{s}"),
                &level.data,
                vec![b, ch, h.div_ceil(s), w.div_ceil(s)],
            )?;
        }

        let target = aggregate_target((h, w));
        let agg = self.aggregator.aggregate(&pyramid, target)?;
        record(
            "aggregate",
            &agg.data,
            vec![b, 8 * self.embed_dim, h / AGGREGATE_STRIDE, w / AGGREGATE_STRIDE],
        )?;

        let dec = self.decoder.decode(&agg, (h, w))?;
        record("decode", &dec, vec![b, self.embed_dim, h, w])?;

        let depth = self.regressor.regress(&dec)?;
        record("regress", &depth, vec![b, 1, h, w])?;
        Ok(depth)
    }

    /// Classifier fingerprint, when the variant has one.
    pub fn classifier_fingerprint(&self) -> Result<Option<String>> {
        match &self.cond {
            Conditioner::Cide { classifier, .. } => Ok(Some(classifier.fingerprint()?)),
            _ => Ok(None),
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn toy_config() -> RunConfig {
        RunConfig::parse_str(
            "data.profile = toy\nmodel.embed_dim = 4\nmodel.unet_width = 4\nmodel.encoder_width = 4\n\
             cide.num_classes = 10\ncide.num_embeddings = 6\ncide.hidden = 8\ncide.classifier_width = 4\n\
             conditioning.num_scenes = 4\n",
        )
        .unwrap()
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn instrumented_forward_matches_contract() {
        let cfg = toy_config();
        let m = DepthModel::build(&cfg, None, &Device::Cpu).unwrap();
        let x = Tensor::rand(0f32, 1.0, (2, 3, 64, 96), &Device::Cpu).unwrap();
        let ids = ids(2);
        let (y, trace) = m
            .forward_checked(
                &x,
                &BatchMeta {
                    ids: &ids,
                    scenes: None,
                },
            )
            .unwrap();
        assert_eq!(y.dims(), &[2, 1, 64, 96]);
        let names: Vec<_> = trace.iter().map(|c| c.stage.as_str()).collect();
        assert_eq!(
            names,
            [
                "encode",
                "condition",
                "extract@16",
                "extract@32",
                "extract@64",
                "aggregate",
                "decode",
                "regress"
            ]
        );
        assert!(trace.iter().all(|c| c.ok()));
    }

    #[test]
    fn variants_and_their_inputs() {
        let mut cfg = toy_config();
        cfg.conditioning.variant = ConditioningVariant::OneHot;
        let m = DepthModel::build(&cfg, None, &Device::Cpu).unwrap();
        let x = Tensor::rand(0f32, 1.0, (2, 3, 32, 32), &Device::Cpu).unwrap();
        let ids = ids(2);
        let no_labels = m.forward(
            &x,
            &BatchMeta {
                ids: &ids,
                scenes: None,
            },
        );
        assert!(matches!(no_labels, Err(Error::Data(_))));
        assert!(m
            .forward(
                &x,
                &BatchMeta {
                    ids: &ids,
                    scenes: Some(&[0, 3])
                }
            )
            .is_ok());
        assert!(m.classifier_fingerprint().unwrap().is_none());

        cfg.conditioning.variant = ConditioningVariant::Precomputed;
        assert!(matches!(
            DepthModel::build(&cfg, None, &Device::Cpu),
            Err(Error::Data(_))
        ));
        let vecs: HashMap<String, Vec<f32>> = ids.iter().map(|i| (i.clone(), vec![0.1; CONTEXT_DIM])).collect();
        let m = DepthModel::build(&cfg, Some(vecs), &Device::Cpu).unwrap();
        assert!(m
            .forward(
                &x,
                &BatchMeta {
                    ids: &ids,
                    scenes: None
                }
            )
            .is_ok());
        let other = vec!["zz".to_string(), "s0".to_string()];
        assert!(matches!(
            m.forward(
                &x,
                &BatchMeta {
                    ids: &other,
                    scenes: None
                }
            ),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn groups_follow_block_order() {
        let cfg = toy_config();
        let m = DepthModel::build(&cfg, None, &Device::Cpu).unwrap();
        let groups = m.param_groups(0.9).unwrap();
        let names: Vec<_> = groups.iter().map(|g| g.name.as_str()).collect();
        assert_eq!(names, ["enc", "cide", "unet", "agg", "dec", "reg"]);
        assert_eq!(groups.last().unwrap().lr_scale, 1.0);
        assert!((groups[0].lr_scale - 0.9f64.powi(5)).abs() < 1e-15);
        assert!(groups.iter().all(|g| !g.params.is_empty()));
        assert!(m.frozen_fingerprints().unwrap().contains_key("classifier"));
    }

    #[test]
    fn load_arrays_reports_every_mismatch() {
        let cfg = toy_config();
        let m = DepthModel::build(&cfg, None, &Device::Cpu).unwrap();
        let mut arrays: BTreeMap<String, Tensor> = m.named_arrays().into_iter().collect();
        let key = "head/reg.conv2.bias".to_string();
        arrays.insert(key.clone(), Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap());
        arrays.remove("head/reg.conv1.bias");
        arrays.insert("head/extra".into(), Tensor::zeros(1, DType::F32, &Device::Cpu).unwrap());
        match m.load_arrays(&arrays, None) {
            Err(Error::ShapeMismatch(report)) => {
                assert!(report.contains("head/reg.conv2.bias"));
                assert!(report.contains("missing   head/reg.conv1.bias"));
                assert!(report.contains("unexpected head/extra"));
            }
            other => panic!("{:?}", other.err()),
        }
    }
}
