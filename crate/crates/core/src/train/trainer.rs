use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{augment, AugmentPolicy, DepthSample, SplitLoader};
use crate::error::{Error, Result};
use crate::latent::stack_images;
use crate::metrics::{silog_loss_tensor, SilogParams};
use crate::model::{derive_seed, BatchMeta, ConditioningVariant, DepthModel};
use crate::train::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, LoadOptions, RngState, FORMAT_VERSION};
use crate::train::{one_cycle_lr, AdamW};

pub const LOG_HEADER: &str = "step, lr, loss, wall_time";
pub const FINAL_CHECKPOINT: &str = "checkpoint.ckpt";
pub const LOG_FILE: &str = "train.log";

/// Tensors for one optimization step.
pub struct Batch {
    pub images: Tensor,
    /// `[B, 1, H, W]`, zero where invalid.
    pub gt: Tensor,
    /// `[B, 1, H, W]`, 1 valid / 0 invalid.
    pub mask: Tensor,
    pub ids: Vec<String>,
    pub scenes: Option<Vec<usize>>,
}

impl Batch {
    pub fn meta(&self) -> BatchMeta<'_> {
        BatchMeta {
            ids: &self.ids,
            scenes: self.scenes.as_deref(),
        }
    }
}

pub fn make_batch(samples: &[DepthSample], dtype: DType, device: &Device) -> Result<Batch> {
    let imgs: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let images = stack_images(&imgs, dtype, device)?;
    let (h, w) = (samples[0].image.height(), samples[0].image.width());
    let mut gt = Vec::with_capacity(samples.len() * h * w);
    let mut mask = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        let d = s.gt_depth.as_ref().ok_or_else(|| Error::Sample {
            id: s.id.clone(),
            msg: "training needs ground-truth depth".into(),
        })?;
        for (v, m) in d.data.iter().zip(&s.mask.data) {
            gt.push(if *m { *v } else { 0.0 });
            mask.push(if *m { 1.0 } else { 0.0 });
        }
    }
    let shape = (samples.len(), 1, h, w);
    let scenes: Option<Vec<usize>> = samples.iter().map(|s| s.scene_index).collect();
    Ok(Batch {
        images,
        gt: Tensor::from_vec(gt, shape, device)?.to_dtype(dtype)?,
        mask: Tensor::from_vec(mask, shape, device)?.to_dtype(dtype)?,
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        scenes,
    })
}

/// Forward, SiLog, backward and one optimizer update. Returns the loss.
pub fn train_step(model: &DepthModel, opt: &mut AdamW, batch: &Batch, lr: f64, silog: SilogParams) -> Result<f64> {
    let pred = model.forward(&batch.images, &batch.meta())?;
    let loss = silog_loss_tensor(&pred, &batch.gt, &batch.mask, silog)?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::Numerical(format!(
            "loss is {value} on batch [{}]",
            batch.ids.join(", ")
        )));
    }
    let grads = loss.backward()?;
    opt.step(&grads, lr)?;
    Ok(value)
}

/// Sample order for an epoch; depends only on `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("shuffle/{epoch}")));
    order.shuffle(&mut rng);
    order
}

pub fn total_steps(cfg: &RunConfig, n_samples: usize) -> usize {
    let per_epoch = n_samples.div_ceil(cfg.train.batch_size);
    let all = per_epoch * cfg.train.epochs;
    if cfg.train.max_steps > 0 {
        all.min(cfg.train.max_steps)
    } else {
        all
    }
}

pub fn make_checkpoint(
    cfg: &RunConfig,
    model: &DepthModel,
    opt: Option<&AdamW>,
    step: usize,
    epoch: u64,
) -> Result<Checkpoint> {
    let mut arrays = model.named_arrays();
    if let Some(o) = opt {
        arrays.extend(o.state().into_iter().map(|(n, t)| (format!("opt/{n}"), t)));
    }
    Ok(Checkpoint {
        format_version: FORMAT_VERSION,
        config: cfg.to_canonical(),
        config_hash: cfg.hash(),
        global_step: step as u64,
        rng: RngState {
            seed: cfg.train.seed,
            epoch,
        },
        fingerprints: model.frozen_fingerprints()?,
        arrays,
    })
}

/// Rebuild a model from a checkpoint. With `active`, its hash must match the
/// checkpoint's unless `opts` allows a mismatch, and the model is built from
/// `active`. Returns the model, the config it was built from, and any warning.
pub fn restore_model(
    ckpt: &Checkpoint,
    active: Option<&RunConfig>,
    opts: &LoadOptions,
    vectors: Option<HashMap<String, Vec<f32>>>,
    device: &Device,
) -> Result<(DepthModel, RunConfig, Option<String>)> {
    let saved = RunConfig::parse_str(&ckpt.config)?;
    let (cfg, warning) = match active {
        Some(a) => {
            let opts = LoadOptions {
                expected_config_hash: Some(a.hash()),
                ..opts.clone()
            };
            (a.clone(), ckpt.check_config(&opts)?)
        }
        None => (saved, None),
    };
    let model = DepthModel::build(&cfg, vectors, device)?;
    let arrays = ckpt
        .arrays
        .iter()
        .filter(|(n, _)| !n.starts_with("opt/"))
        .cloned()
        .collect();
    model.load_arrays(&arrays, None)?;
    for (store, fp) in model.frozen_fingerprints()? {
        if let Some(saved_fp) = ckpt.fingerprints.get(&store) {
            if *saved_fp != fp {
                return Err(Error::Data(format!(
                    "frozen {store} weights do not match the checkpoint fingerprint"
                )));
            }
        }
    }
    Ok((model, cfg, warning))
}

pub fn restore_from_path(
    path: &Path,
    active: Option<&RunConfig>,
    opts: &LoadOptions,
    vectors: Option<HashMap<String, Vec<f32>>>,
    device: &Device,
) -> Result<(DepthModel, RunConfig, Option<String>)> {
    restore_model(&load_checkpoint(path)?, active, opts, vectors, device)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    pub total_steps: usize,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    /// Frozen-store fingerprints before and after training.
    pub fingerprints_before: std::collections::BTreeMap<String, String>,
    pub fingerprints_after: std::collections::BTreeMap<String, String>,
}

struct Log(File);

impl Log {
    fn line(&mut self, path: &Path, text: &str) -> Result<()> {
        writeln!(self.0, "{text}")
            .and_then(|_| self.0.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Run the configured schedule over `loader`, writing the log and
/// checkpoints into `out_dir`.
pub fn train(cfg: &RunConfig, loader: &SplitLoader, model: &DepthModel, out_dir: &Path) -> Result<TrainOutcome> {
    if loader.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if model.variant() == ConditioningVariant::OneHot && !loader.has_scene_labels() {
        return Err(Error::Data(
            "one_hot conditioning needs a scene index on every listing line".into(),
        ));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let tc = &cfg.train;
    let n = loader.len();
    let total = total_steps(cfg, n);
    let mut opt = AdamW::new(model.param_groups(tc.layer_decay)?, tc)?;
    let policy = if cfg.augment.enabled {
        cfg.augment.policy
    } else {
        AugmentPolicy::identity()
    };

    let log_path = out_dir.join(LOG_FILE);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = Log(file);
    log.line(
        &log_path,
        &format!(
            "# epochs={} batch_size={} samples={n} total_steps={total} config_hash={}",
            tc.epochs,
            tc.batch_size,
            cfg.hash()
        ),
    )?;
    log.line(&log_path, LOG_HEADER)?;

    let before = model.frozen_fingerprints()?;
    let start = Instant::now();
    let mut losses = Vec::with_capacity(total);
    let mut lrs = Vec::with_capacity(total);
    let mut step = 0usize;
    let mut epoch = 0u64;
    while step < total {
        let order = epoch_order(n, tc.seed, epoch);
        let aug_seed = derive_seed(tc.seed, &format!("augment/{epoch}"));
        for chunk in order.chunks(tc.batch_size) {
            if step >= total {
                break;
            }
            let samples = loader
                .load_many(chunk, cfg.data.workers)
                .into_iter()
                .map(|r| r.map(|s| augment(&s, aug_seed, &policy)))
                .collect::<Result<Vec<_>>>()?;
            let batch = make_batch(&samples, model.dtype(), model.device())?;
            let lr = one_cycle_lr(step, total, tc)?;
            let loss = train_step(model, &mut opt, &batch, lr, tc.silog)?;
            step += 1;
            losses.push(loss);
            lrs.push(lr);
            log.line(
                &log_path,
                &format!("{step}, {lr:e}, {loss}, {:.3}", start.elapsed().as_secs_f64()),
            )?;
            if tc.checkpoint_every > 0 && step.is_multiple_of(tc.checkpoint_every) && step < total {
                let ck = make_checkpoint(cfg, model, Some(&opt), step, epoch)?;
                save_checkpoint(&out_dir.join(format!("step_{step:06}.ckpt")), &ck)?;
            }
        }
        epoch += 1;
    }

    let after = model.frozen_fingerprints()?;
    if after != before {
        return Err(Error::Contract("frozen parameters changed during training".into()));
    }
    let ckpt_path = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&ckpt_path, &make_checkpoint(cfg, model, Some(&opt), step, epoch)?)?;
    fs::write(out_dir.join("config.txt"), cfg.to_canonical()).map_err(|e| Error::io(out_dir, e))?;
    Ok(TrainOutcome {
        losses,
        lrs,
        total_steps: total,
        checkpoint: ckpt_path,
        log: log_path,
        fingerprints_before: before,
        fingerprints_after: after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate, SyntheticSpec, TRAIN_LISTING};
    use crate::data::{load_split, Sizing};
    use crate::model::tests::toy_config;

    fn toy_run(dir: &Path, steps: usize) -> (RunConfig, SplitLoader) {
        let mut cfg = toy_config();
        cfg.set("data.sizing", "floor32").unwrap();
        cfg.set("train.batch_size", "4").unwrap();
        cfg.set("train.max_steps", &steps.to_string()).unwrap();
        cfg.set("train.checkpoint_every", "2").unwrap();
        let prof = cfg.profile().unwrap();
        generate(dir, &SyntheticSpec::default(), &prof).unwrap();
        let loader = load_split(Path::new(TRAIN_LISTING), dir, &prof, Sizing::Floor32).unwrap();
        (cfg, loader)
    }

    #[test]
    fn short_run_is_deterministic_and_restorable() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, loader) = toy_run(dir.path(), 4);
        let run = |out: &str| {
            let m = DepthModel::build(&cfg, None, &Device::Cpu).unwrap();
            (train(&cfg, &loader, &m, &dir.path().join(out)).unwrap(), m)
        };
        let (a, model) = run("a");
        let (b, _) = run("b");
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.losses.len(), 4);
        assert_eq!(a.fingerprints_before, a.fingerprints_after);
        assert_eq!(
            fs::read(dir.path().join("a/step_000002.ckpt")).unwrap(),
            fs::read(dir.path().join("b/step_000002.ckpt")).unwrap()
        );
        let log = fs::read_to_string(&a.log).unwrap();
        assert!(log.lines().nth(1) == Some(LOG_HEADER));
        assert_eq!(log.lines().count(), 6);

        let batch = make_batch(&[loader.load(0).unwrap()], model.dtype(), model.device()).unwrap();
        let p0 = model.forward(&batch.images, &batch.meta()).unwrap();
        let (back, _, warn) =
            restore_from_path(&a.checkpoint, None, &LoadOptions::default(), None, &Device::Cpu).unwrap();
        assert!(warn.is_none());
        let p1 = back.forward(&batch.images, &batch.meta()).unwrap();
        assert_eq!(
            crate::nn::tensor_bytes(&p0).unwrap(),
            crate::nn::tensor_bytes(&p1).unwrap()
        );
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(10, 1, 0);
        assert_eq!(a, epoch_order(10, 1, 0));
        assert_ne!(a, epoch_order(10, 1, 1));
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn non_finite_loss_names_the_batch() {
        let cfg = toy_config();
        let m = DepthModel::build(&cfg, None, &Device::Cpu).unwrap();
        let mut opt = AdamW::new(m.param_groups(0.9).unwrap(), &cfg.train).unwrap();
        let dev = Device::Cpu;
        let batch = Batch {
            images: Tensor::full(f32::NAN, (1, 3, 32, 32), &dev).unwrap(),
            gt: Tensor::ones((1, 1, 32, 32), DType::F32, &dev).unwrap(),
            mask: Tensor::ones((1, 1, 32, 32), DType::F32, &dev).unwrap(),
            ids: vec!["rgb/bad.png".into()],
            scenes: None,
        };
        match train_step(&m, &mut opt, &batch, 1e-4, cfg.silog()) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("rgb/bad.png")),
            other => panic!("{:?}", other.map(|_| ())),
        }
        assert_eq!(opt.steps_taken(), 0);
    }
}
