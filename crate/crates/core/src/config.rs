//! Flat `key = value` run configuration.
//!
//! Every key has a documented default (see [`KEYS`]). Unknown keys are errors.
//! [`RunConfig::to_canonical`] writes every key in sorted order with
//! normalized values, so parse -> serialize -> parse is a fixed point.
//!
//! Environment overrides: `DIFFDEPTH_<KEY>` with the key uppercased and dots
//! replaced by underscores, e.g. `train.lr_max` -> `DIFFDEPTH_TRAIN_LR_MAX`.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{AugmentPolicy, DatasetProfile, Sizing};
use crate::diffusion::{NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::metrics::{Aggregation, Crop, SilogParams};
use crate::model::ConditioningVariant;
use crate::nn::Activation;
use crate::train::TrainConfig;

/// `(key, default, description)` for every recognised key.
pub const KEYS: &[(&str, &str, &str)] = &[
    (
        "augment.brightness_max",
        "0.2",
        "brightness factor drawn from [1-b, 1+b]",
    ),
    (
        "augment.cut_depth_alpha_max",
        "0.75",
        "max CutDepth rectangle side, as a fraction of the frame",
    ),
    ("augment.enabled", "true", "apply training augmentation"),
    ("augment.hue_max", "0.1", "max hue shift, fraction of the color wheel"),
    ("augment.p_brightness", "0.5", "brightness change probability"),
    ("augment.p_cut_depth", "0.25", "CutDepth probability"),
    ("augment.p_flip", "0.5", "horizontal flip probability"),
    ("augment.p_hue", "0.5", "hue shift probability"),
    (
        "cide.classifier_weights",
        "none",
        "arrays file for the frozen classifier, or none for seeded init",
    ),
    ("cide.classifier_width", "16", "toy classifier conv width"),
    ("cide.hidden", "400", "hidden width of the CIDE MLP"),
    ("cide.num_classes", "1000", "classifier output width K"),
    ("cide.num_embeddings", "100", "learnable embedding count N"),
    ("cide.softmax", "true", "softmax the logits before the MLP"),
    (
        "conditioning.num_scenes",
        "27",
        "scene label count for the one_hot variant",
    ),
    ("conditioning.variant", "cide", "cide, one_hot or precomputed"),
    (
        "conditioning.vectors",
        "context_vectors.txt",
        "per-image context vectors for the precomputed variant, relative to the data root",
    ),
    (
        "data.cap",
        "auto",
        "evaluation depth cap in meters; auto takes the profile value",
    ),
    ("data.crop", "auto", "evaluation crop: none, eigen, garg or auto"),
    ("data.d_min", "auto", "minimum valid depth in meters"),
    ("data.depth_scale", "auto", "16-bit PNG divisor"),
    ("data.profile", "nyu", "dataset profile"),
    ("data.sizing", "crop:448x608", "floor32, crop:HxW or resize:HxW"),
    (
        "data.test_split",
        "test.txt",
        "evaluation listing, relative to the data root",
    ),
    (
        "data.train_split",
        "train.txt",
        "training listing, relative to the data root",
    ),
    ("data.workers", "1", "parallel sample loaders"),
    ("eval.aggregation", "per_image", "per_image or pooled"),
    ("model.activation", "gelu", "gelu, relu or silu"),
    (
        "model.backbone_weights",
        "none",
        "arrays file for the encoder and denoiser, or none",
    ),
    (
        "model.d_max",
        "auto",
        "depth ceiling in meters; auto takes the profile value",
    ),
    ("model.decoder_stages", "5", "x2 upsampling stages in the decoder"),
    ("model.dtype", "f32", "f32 or f64"),
    ("model.embed_dim", "192", "decoder embedding dim e"),
    ("model.encoder_width", "32", "toy latent encoder width"),
    ("model.latent_channels", "4", "latent channels"),
    ("model.timestep", "1", "denoiser timestep used for feature extraction"),
    (
        "model.unet_levels",
        "16,32,64",
        "denoiser strides fed to the aggregator",
    ),
    ("model.unet_width", "32", "toy denoiser base width"),
    ("schedule.beta_end", "0.012", "final beta"),
    ("schedule.beta_start", "0.00085", "first beta"),
    ("schedule.kind", "scaled_linear", "linear or scaled_linear"),
    ("schedule.timesteps", "1000", "schedule length"),
    ("train.batch_size", "32", "samples per step"),
    ("train.beta1", "0.9", "AdamW first moment decay"),
    ("train.beta2", "0.999", "AdamW second moment decay"),
    (
        "train.checkpoint_every",
        "0",
        "steps between intermediate checkpoints, 0 for final only",
    ),
    ("train.epochs", "25", "passes over the training split"),
    ("train.eps", "1e-8", "AdamW epsilon"),
    (
        "train.finetune_backbone",
        "false",
        "train a loaded backbone instead of freezing it",
    ),
    (
        "train.layer_decay",
        "0.9",
        "per-block learning rate decay toward the input",
    ),
    ("train.lr_max", "0.0005", "peak learning rate"),
    ("train.lr_min", "0.00003", "initial and final learning rate"),
    ("train.max_steps", "0", "stop after this many steps, 0 for no limit"),
    ("train.seed", "0", "seed for init, shuffling and augmentation"),
    ("train.silog_alpha", "10", "SiLog output scale"),
    ("train.silog_lambda", "0.85", "SiLog variance focus"),
    ("train.toy_profile", "true", "train the seeded toy encoder and denoiser"),
    ("train.warmup_frac", "0.3", "fraction of steps spent ramping up"),
    ("train.weight_decay", "0.1", "decoupled weight decay"),
];

pub const ENV_PREFIX: &str = "DIFFDEPTH_";

pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_uppercase().replace('.', "_"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub activation: Activation,
    pub backbone_weights: Option<PathBuf>,
    pub d_max: Option<f64>,
    pub decoder_stages: usize,
    pub dtype: String,
    pub embed_dim: usize,
    pub encoder_width: usize,
    pub latent_channels: usize,
    pub timestep: usize,
    pub unet_levels: Vec<usize>,
    pub unet_width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CideSection {
    pub classifier_weights: Option<PathBuf>,
    pub classifier_width: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub num_embeddings: usize,
    pub softmax: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningSection {
    pub variant: ConditioningVariant,
    pub num_scenes: usize,
    pub vectors: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub profile: String,
    pub train_split: PathBuf,
    pub test_split: PathBuf,
    pub sizing: Sizing,
    pub depth_scale: Option<f64>,
    pub cap: Option<f64>,
    pub d_min: Option<f64>,
    pub crop: Option<Crop>,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSection {
    pub enabled: bool,
    pub policy: AugmentPolicy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub cide: CideSection,
    pub conditioning: ConditioningSection,
    pub data: DataSection,
    pub augment: AugmentSection,
    pub train: TrainConfig,
    pub aggregation: Aggregation,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| Error::Config(format!("{key} = {v:?}: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key} = {v:?}: expected true or false"))),
    }
}

fn parse_auto<T: FromStr>(key: &str, v: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    if v == "auto" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn parse_path_or_none(v: &str) -> Option<PathBuf> {
    (v != "none").then(|| PathBuf::from(v))
}

fn show_auto<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or("auto".into(), |x| x.to_string())
}

fn show_path(v: &Option<PathBuf>) -> String {
    v.as_ref().map_or("none".into(), |p| p.display().to_string())
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            model: ModelSection {
                activation: Activation::Gelu,
                backbone_weights: None,
                d_max: None,
                decoder_stages: 0,
                dtype: String::new(),
                embed_dim: 0,
                encoder_width: 0,
                latent_channels: 0,
                timestep: 0,
                unet_levels: vec![],
                unet_width: 0,
            },
            schedule: ScheduleSection {
                kind: ScheduleKind::ScaledLinear,
                timesteps: 0,
                beta_start: 0.0,
                beta_end: 0.0,
            },
            cide: CideSection {
                classifier_weights: None,
                classifier_width: 0,
                hidden: 0,
                num_classes: 0,
                num_embeddings: 0,
                softmax: true,
            },
            conditioning: ConditioningSection {
                variant: ConditioningVariant::Cide,
                num_scenes: 0,
                vectors: PathBuf::new(),
            },
            data: DataSection {
                profile: String::new(),
                train_split: PathBuf::new(),
                test_split: PathBuf::new(),
                sizing: Sizing::Floor32,
                depth_scale: None,
                cap: None,
                d_min: None,
                crop: None,
                workers: 1,
            },
            augment: AugmentSection {
                enabled: true,
                policy: AugmentPolicy::default(),
            },
            train: TrainConfig::default(),
            aggregation: Aggregation::PerImage,
        };
        for (k, v, _) in KEYS {
            cfg.set(k, v).expect("built-in default must parse");
        }
        cfg
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let a = &mut self.augment.policy;
        let t = &mut self.train;
        match key {
            "augment.brightness_max" => a.brightness_max = parse(key, v)?,
            "augment.cut_depth_alpha_max" => a.cut_depth_alpha_max = parse(key, v)?,
            "augment.enabled" => self.augment.enabled = parse_bool(key, v)?,
            "augment.hue_max" => a.hue_max = parse(key, v)?,
            "augment.p_brightness" => a.p_brightness = parse(key, v)?,
            "augment.p_cut_depth" => a.p_cut_depth = parse(key, v)?,
            "augment.p_flip" => a.p_flip = parse(key, v)?,
            "augment.p_hue" => a.p_hue = parse(key, v)?,
            "cide.classifier_weights" => self.cide.classifier_weights = parse_path_or_none(v),
            "cide.classifier_width" => self.cide.classifier_width = parse(key, v)?,
            "cide.hidden" => self.cide.hidden = parse(key, v)?,
            "cide.num_classes" => self.cide.num_classes = parse(key, v)?,
            "cide.num_embeddings" => self.cide.num_embeddings = parse(key, v)?,
            "cide.softmax" => self.cide.softmax = parse_bool(key, v)?,
            "conditioning.num_scenes" => self.conditioning.num_scenes = parse(key, v)?,
            "conditioning.variant" => self.conditioning.variant = parse(key, v)?,
            "conditioning.vectors" => self.conditioning.vectors = PathBuf::from(v),
            "data.cap" => self.data.cap = parse_auto(key, v)?,
            "data.crop" => self.data.crop = parse_auto(key, v)?,
            "data.d_min" => self.data.d_min = parse_auto(key, v)?,
            "data.depth_scale" => self.data.depth_scale = parse_auto(key, v)?,
            "data.profile" => {
                DatasetProfile::named(v)?;
                self.data.profile = v.to_string()
            }
            "data.sizing" => self.data.sizing = parse(key, v)?,
            "data.test_split" => self.data.test_split = PathBuf::from(v),
            "data.train_split" => self.data.train_split = PathBuf::from(v),
            "data.workers" => self.data.workers = parse(key, v)?,
            "eval.aggregation" => self.aggregation = parse(key, v)?,
            "model.activation" => self.model.activation = parse(key, v)?,
            "model.backbone_weights" => self.model.backbone_weights = parse_path_or_none(v),
            "model.d_max" => self.model.d_max = parse_auto(key, v)?,
            "model.decoder_stages" => self.model.decoder_stages = parse(key, v)?,
            "model.dtype" => match v {
                "f32" | "f64" => self.model.dtype = v.to_string(),
                _ => return Err(Error::Config(format!("{key} = {v:?}: expected f32 or f64"))),
            },
            "model.embed_dim" => self.model.embed_dim = parse(key, v)?,
            "model.encoder_width" => self.model.encoder_width = parse(key, v)?,
            "model.latent_channels" => self.model.latent_channels = parse(key, v)?,
            "model.timestep" => self.model.timestep = parse(key, v)?,
            "model.unet_levels" => {
                self.model.unet_levels = v
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "model.unet_width" => self.model.unet_width = parse(key, v)?,
            "schedule.beta_end" => self.schedule.beta_end = parse(key, v)?,
            "schedule.beta_start" => self.schedule.beta_start = parse(key, v)?,
            "schedule.kind" => self.schedule.kind = parse(key, v)?,
            "schedule.timesteps" => self.schedule.timesteps = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.beta1" => t.betas.0 = parse(key, v)?,
            "train.beta2" => t.betas.1 = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.eps" => t.eps = parse(key, v)?,
            "train.finetune_backbone" => t.finetune_backbone = parse_bool(key, v)?,
            "train.layer_decay" => t.layer_decay = parse(key, v)?,
            "train.lr_max" => t.lr_max = parse(key, v)?,
            "train.lr_min" => t.lr_min = parse(key, v)?,
            "train.max_steps" => t.max_steps = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.silog_alpha" => t.silog.alpha = parse(key, v)?,
            "train.silog_lambda" => t.silog.lambda = parse(key, v)?,
            "train.toy_profile" => t.toy_profile = parse_bool(key, v)?,
            "train.warmup_frac" => t.warmup_frac = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let a = &self.augment.policy;
        let t = &self.train;
        Ok(match key {
            "augment.brightness_max" => a.brightness_max.to_string(),
            "augment.cut_depth_alpha_max" => a.cut_depth_alpha_max.to_string(),
            "augment.enabled" => self.augment.enabled.to_string(),
            "augment.hue_max" => a.hue_max.to_string(),
            "augment.p_brightness" => a.p_brightness.to_string(),
            "augment.p_cut_depth" => a.p_cut_depth.to_string(),
            "augment.p_flip" => a.p_flip.to_string(),
            "augment.p_hue" => a.p_hue.to_string(),
            "cide.classifier_weights" => show_path(&self.cide.classifier_weights),
            "cide.classifier_width" => self.cide.classifier_width.to_string(),
            "cide.hidden" => self.cide.hidden.to_string(),
            "cide.num_classes" => self.cide.num_classes.to_string(),
            "cide.num_embeddings" => self.cide.num_embeddings.to_string(),
            "cide.softmax" => self.cide.softmax.to_string(),
            "conditioning.num_scenes" => self.conditioning.num_scenes.to_string(),
            "conditioning.variant" => self.conditioning.variant.to_string(),
            "conditioning.vectors" => self.conditioning.vectors.display().to_string(),
            "data.cap" => show_auto(&self.data.cap),
            "data.crop" => show_auto(&self.data.crop),
            "data.d_min" => show_auto(&self.data.d_min),
            "data.depth_scale" => show_auto(&self.data.depth_scale),
            "data.profile" => self.data.profile.clone(),
            "data.sizing" => self.data.sizing.to_string(),
            "data.test_split" => self.data.test_split.display().to_string(),
            "data.train_split" => self.data.train_split.display().to_string(),
            "data.workers" => self.data.workers.to_string(),
            "eval.aggregation" => self.aggregation.to_string(),
            "model.activation" => self.model.activation.to_string(),
            "model.backbone_weights" => show_path(&self.model.backbone_weights),
            "model.d_max" => show_auto(&self.model.d_max),
            "model.decoder_stages" => self.model.decoder_stages.to_string(),
            "model.dtype" => self.model.dtype.clone(),
            "model.embed_dim" => self.model.embed_dim.to_string(),
            "model.encoder_width" => self.model.encoder_width.to_string(),
            "model.latent_channels" => self.model.latent_channels.to_string(),
            "model.timestep" => self.model.timestep.to_string(),
            "model.unet_levels" => self
                .model
                .unet_levels
                .iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "model.unet_width" => self.model.unet_width.to_string(),
            "schedule.beta_end" => self.schedule.beta_end.to_string(),
            "schedule.beta_start" => self.schedule.beta_start.to_string(),
            "schedule.kind" => self.schedule.kind.to_string(),
            "schedule.timesteps" => self.schedule.timesteps.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.beta1" => t.betas.0.to_string(),
            "train.beta2" => t.betas.1.to_string(),
            "train.checkpoint_every" => t.checkpoint_every.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.eps" => t.eps.to_string(),
            "train.finetune_backbone" => t.finetune_backbone.to_string(),
            "train.layer_decay" => t.layer_decay.to_string(),
            "train.lr_max" => t.lr_max.to_string(),
            "train.lr_min" => t.lr_min.to_string(),
            "train.max_steps" => t.max_steps.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.silog_alpha" => t.silog.alpha.to_string(),
            "train.silog_lambda" => t.silog.lambda.to_string(),
            "train.toy_profile" => t.toy_profile.to_string(),
            "train.warmup_frac" => t.warmup_frac.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        })
    }

    /// Parse config text on top of the defaults. Comments start with `#`.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let k = k.trim();
            if let Some(prev) = seen.insert(k.to_string(), i + 1) {
                return Err(Error::Config(format!("line {}: {k} already set on line {prev}", i + 1)));
            }
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(&e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_prefix(&e))))
    }

    /// Apply `DIFFDEPTH_*` variables from `lookup`.
    pub fn apply_env_with(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        for (k, _, _) in KEYS {
            if let Some(v) = lookup(&env_name(k)) {
                self.set(k, &v)
                    .map_err(|e| Error::Config(format!("{}: {}", env_name(k), strip_prefix(&e))))?;
            }
        }
        self.validate()
    }

    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_env_with(|k| std::env::var(k).ok())
    }

    /// Every key, sorted, one `key = value` per line.
    pub fn to_canonical(&self) -> String {
        let mut out = String::new();
        for (k, _, _) in KEYS {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&self.get(k).expect("every listed key is readable"));
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_canonical().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.schedule()?;
        let profile = self.profile()?;
        profile.validate()?;
        if self.model.timestep >= self.schedule.timesteps {
            return Err(Error::Config(format!(
                "model.timestep {} outside schedule of length {}",
                self.model.timestep, self.schedule.timesteps
            )));
        }
        if self.model.embed_dim == 0 || self.model.unet_width == 0 || self.model.encoder_width == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.data.workers == 0 {
            return Err(Error::Config("data.workers must be at least 1".into()));
        }
        if let Some(d) = self.model.d_max {
            if !(d > 0.0) {
                return Err(Error::Config("model.d_max must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(
            self.schedule.timesteps,
            self.schedule.beta_start,
            self.schedule.beta_end,
            self.schedule.kind,
        )
    }

    /// The configured dataset profile with explicit overrides applied.
    pub fn profile(&self) -> Result<DatasetProfile> {
        self.profile_named(&self.data.profile)
    }

    /// Profile `name` with this config's overrides; used for evaluation on a
    /// different dataset than the one trained on.
    pub fn profile_named(&self, name: &str) -> Result<DatasetProfile> {
        let mut p = DatasetProfile::named(name)?;
        if let Some(v) = self.data.depth_scale {
            p.depth_png_scale = v;
        }
        if let Some(v) = self.data.cap {
            p.cap = v;
        }
        if let Some(v) = self.data.d_min {
            p.d_min = v;
        }
        if let Some(v) = self.data.crop {
            p.crop = v;
        }
        p.validate()?;
        Ok(p)
    }

    /// Model depth ceiling: explicit value or the training profile's.
    pub fn d_max(&self) -> Result<f64> {
        match self.model.d_max {
            Some(v) => Ok(v),
            None => Ok(DatasetProfile::named(&self.data.profile)?.d_max),
        }
    }

    pub fn silog(&self) -> SilogParams {
        self.train.silog
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
