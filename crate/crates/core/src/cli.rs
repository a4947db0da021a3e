//! Command-line front end: train, evaluate, predict, ablate-conditioning,
//! synth and config.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Device;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::config::{env_name, RunConfig, KEYS};
use crate::data::png::{colorize, write_depth_map, write_rgb};
use crate::data::synthetic::{generate, read_context_vectors, SyntheticSpec};
use crate::data::{load_image, load_split, DatasetProfile, SplitLoader};
use crate::error::{Error, Result};
use crate::head::DepthMap;
use crate::metrics::report::{write_per_sample_csv, write_summary, EvalSummary};
use crate::metrics::{
    aggregate, build_mask, compute_metrics, mean_relative_improvement, MetricReport, MriField, ValidityMask,
};
use crate::model::{BatchMeta, ConditioningVariant, DepthModel};
use crate::train::checkpoint::{load_checkpoint, LoadOptions};
use crate::train::train;
use crate::train::trainer::{make_batch, restore_model};

#[derive(Debug, Parser)]
#[command(name = "diffdepth", version, about = "Monocular depth from diffusion features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on the configured training split.
    Train(TrainArgs),
    /// Score a checkpoint on the test split.
    Evaluate(EvalArgs),
    /// Write depth PNGs for individual images.
    Predict(PredictArgs),
    /// Train and evaluate one conditioning front end, appending a comparison row.
    AblateConditioning(AblateArgs),
    /// Write a small synthetic image-depth dataset.
    Synth(SynthArgs),
    /// Print every config key with its default and description.
    Config,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Flat `key = value` config file; defaults apply to absent keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root that split listings and vector files are relative to.
    #[arg(long, default_value = ".")]
    pub data_root: PathBuf,
    /// Overrides train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Required unless --oracle.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset profile for depth scale, cap and crop; defaults to the config's.
    #[arg(long)]
    pub profile: Option<String>,
    /// Summary or metric JSON to compute the mean relative improvement against.
    #[arg(long)]
    pub baseline_report: Option<PathBuf>,
    /// Score ground truth against itself instead of running a model.
    #[arg(long)]
    pub oracle: bool,
    /// Load a checkpoint whose config hash differs from --config.
    #[arg(long)]
    pub allow_config_mismatch: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset profile whose PNG scale is used for the 16-bit output.
    #[arg(long)]
    pub profile: Option<String>,
    /// Check every pipeline stage's output shape and print the trace.
    #[arg(long)]
    pub instrument: bool,
    #[arg(long)]
    pub allow_config_mismatch: bool,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "cide")]
    pub variant: ConditioningVariant,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 4)]
    pub scenes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "toy")]
    pub profile: String,
}

/// Config file (or defaults), then `DIFFDEPTH_*` variables, then flags.
pub fn resolve_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Context vectors when the precomputed variant needs them.
pub fn vectors_for(cfg: &RunConfig, root: &Path) -> Result<Option<HashMap<String, Vec<f32>>>> {
    if cfg.conditioning.variant != ConditioningVariant::Precomputed {
        return Ok(None);
    }
    read_context_vectors(&resolve(root, &cfg.conditioning.vectors)).map(Some)
}

pub fn run_train(cfg: &RunConfig, data_root: &Path, out: &Path) -> Result<crate::train::TrainOutcome> {
    let profile = cfg.profile()?;
    let loader = load_split(&cfg.data.train_split, data_root, &profile, cfg.data.sizing)?;
    let model = DepthModel::build(cfg, vectors_for(cfg, data_root)?, &Device::Cpu)?;
    let outcome = train(cfg, &loader, &model, out)?;
    info!(
        "trained {} steps, loss {:.5} -> {:.5}",
        outcome.total_steps,
        outcome.losses.first().copied().unwrap_or(f64::NAN),
        outcome.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(outcome)
}

/// Per-sample and aggregate metrics for `loader`. Without a model the ground
/// truth is scored against itself.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub rows: Vec<(String, MetricReport)>,
    pub excluded: Vec<String>,
    pub aggregate: MetricReport,
}

pub fn evaluate_split(
    model: Option<&DepthModel>,
    loader: &SplitLoader,
    profile: &DatasetProfile,
    cfg: &RunConfig,
) -> Result<Evaluation> {
    let mut kept: Vec<(String, DepthMap, DepthMap, ValidityMask)> = Vec::new();
    let mut excluded = Vec::new();
    for i in 0..loader.len() {
        let sample = loader.load(i)?;
        let gt = sample.gt_depth.clone().ok_or_else(|| Error::Sample {
            id: sample.id.clone(),
            msg: "evaluation needs ground-truth depth".into(),
        })?;
        let mask = build_mask(&gt, profile.d_min, profile.cap, profile.crop)?;
        if mask.is_empty() {
            warn!(
                "sample {} has no valid pixels under profile {}; excluded",
                sample.id, profile.name
            );
            excluded.push(sample.id);
            continue;
        }
        let pred = match model {
            Some(m) => {
                let batch = make_batch(std::slice::from_ref(&sample), m.dtype(), m.device())?;
                let t = m.forward(&batch.images, &batch.meta())?;
                DepthMap::from_batch(&t)?.remove(0)
            }
            None => gt.clone(),
        };
        kept.push((sample.id, pred, gt, mask));
    }
    if kept.is_empty() {
        return Err(Error::Data("no sample in the split has valid pixels".into()));
    }
    let rows = kept
        .iter()
        .map(|(id, p, g, m)| Ok((id.clone(), compute_metrics(p, g, m)?)))
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<_> = kept.iter().map(|(_, p, g, m)| (p, g, m)).collect();
    let aggregate = aggregate(&items, cfg.aggregation)?;
    Ok(Evaluation {
        rows,
        excluded,
        aggregate,
    })
}

pub fn run_evaluate(args: &EvalArgs) -> Result<EvalSummary> {
    let explicit = match &args.common.config {
        Some(_) => Some(resolve_config(&args.common)?),
        None => None,
    };
    let (model, cfg) = match (&args.checkpoint, args.oracle) {
        (Some(path), false) => {
            let ckpt = load_checkpoint(path)?;
            let opts = LoadOptions {
                expected_config_hash: None,
                allow_config_mismatch: args.allow_config_mismatch,
            };
            let snapshot = RunConfig::parse_str(&ckpt.config)?;
            let vectors = vectors_for(explicit.as_ref().unwrap_or(&snapshot), &args.common.data_root)?;
            let (m, cfg, warning) = restore_model(&ckpt, explicit.as_ref(), &opts, vectors, &Device::Cpu)?;
            if let Some(w) = warning {
                warn!("{w}");
            }
            (Some(m), cfg)
        }
        (_, true) => (None, explicit.unwrap_or_default()),
        (None, false) => return Err(Error::Input("evaluate needs --checkpoint or --oracle".into())),
    };
    let profile_name = args.profile.clone().unwrap_or_else(|| cfg.data.profile.clone());
    let profile = cfg.profile_named(&profile_name)?;
    let loader = load_split(&cfg.data.test_split, &args.common.data_root, &profile, cfg.data.sizing)?;
    let eval = evaluate_split(model.as_ref(), &loader, &profile, &cfg)?;

    let mri = match &args.baseline_report {
        Some(p) => {
            let base = crate::metrics::report::read_baseline(p)?;
            Some(mean_relative_improvement(&eval.aggregate, &base, &MriField::STANDARD)?)
        }
        None => None,
    };
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    write_per_sample_csv(&args.out.join("per_sample.csv"), &eval.rows)?;
    let summary = EvalSummary {
        metrics: eval.aggregate,
        config_hash: cfg.hash(),
        profile: profile.name.clone(),
        aggregation: cfg.aggregation.to_string(),
        n_samples: eval.rows.len(),
        excluded: eval.excluded,
        mri,
    };
    write_summary(&args.out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Files written for one predicted image.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub depth_png: PathBuf,
    pub color_png: PathBuf,
}

pub fn run_predict(args: &PredictArgs) -> Result<Vec<(PathBuf, Result<Prediction>)>> {
    let explicit = match &args.common.config {
        Some(_) => Some(resolve_config(&args.common)?),
        None => None,
    };
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let snapshot = RunConfig::parse_str(&ckpt.config)?;
    let vectors = vectors_for(explicit.as_ref().unwrap_or(&snapshot), &args.common.data_root)?;
    let opts = LoadOptions {
        expected_config_hash: None,
        allow_config_mismatch: args.allow_config_mismatch,
    };
    let (model, cfg, warning) = restore_model(&ckpt, explicit.as_ref(), &opts, vectors, &Device::Cpu)?;
    if let Some(w) = warning {
        warn!("{w}");
    }
    let profile = cfg.profile_named(args.profile.as_deref().unwrap_or(&cfg.data.profile))?;
    let d_max = cfg.d_max()?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let results = args
        .images
        .iter()
        .map(|path| {
            let r = predict_one(&model, &cfg, &profile, d_max, path, args);
            if let Err(e) = &r {
                warn!("{}: {e}", path.display());
            }
            (path.clone(), r)
        })
        .collect();
    Ok(results)
}

fn predict_one(
    model: &DepthModel,
    cfg: &RunConfig,
    profile: &DatasetProfile,
    d_max: f64,
    path: &Path,
    args: &PredictArgs,
) -> Result<Prediction> {
    let image = load_image(path, cfg.data.sizing)?;
    let x = image.to_tensor(model.dtype(), model.device())?.unsqueeze(0)?;
    // precomputed vectors are keyed by the listing path, relative to the root
    let id = path
        .strip_prefix(&args.common.data_root)
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned();
    let ids = [id];
    let meta = BatchMeta {
        ids: &ids,
        scenes: None,
    };
    let y = if args.instrument {
        let (y, trace) = model.forward_checked(&x, &meta)?;
        for c in &trace {
            println!(
                "{}: {:?} expected {:?} {}",
                c.stage,
                c.shape,
                c.expected,
                if c.ok() { "ok" } else { "MISMATCH" }
            );
        }
        y
    } else {
        model.forward(&x, &meta)?
    };
    let depth = DepthMap::from_batch(&y)?.remove(0);
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let depth_png = args.out.join(format!("{stem}.png"));
    let color_png = args.out.join(format!("{stem}_color.png"));
    write_depth_map(&depth_png, &depth, profile.depth_png_scale)?;
    write_rgb(&color_png, &colorize(&depth, d_max))?;
    Ok(Prediction { depth_png, color_png })
}

pub const ABLATION_HEADER: &str = "variant,rmse,abs_rel,delta1";

/// Train with `variant`, evaluate on the test split, append a row to
/// `out/ablation.csv` and return it.
pub fn run_ablation(cfg: &RunConfig, data_root: &Path, out: &Path, variant: ConditioningVariant) -> Result<String> {
    let mut cfg = cfg.clone();
    cfg.conditioning.variant = variant;
    let run_dir = out.join(variant.to_string());
    run_train(&cfg, data_root, &run_dir)?;
    let args = EvalArgs {
        common: CommonArgs {
            config: None,
            data_root: data_root.to_path_buf(),
            seed: None,
        },
        checkpoint: Some(run_dir.join(crate::train::trainer::FINAL_CHECKPOINT)),
        out: run_dir.join("eval"),
        profile: None,
        baseline_report: None,
        oracle: false,
        allow_config_mismatch: false,
    };
    let s = run_evaluate(&args)?;
    let row = format!(
        "{variant},{},{},{}",
        s.metrics.rmse, s.metrics.abs_rel, s.metrics.delta1
    );
    let table = out.join("ablation.csv");
    let mut text = match fs::read_to_string(&table) {
        Ok(t) => t,
        Err(_) => format!("{ABLATION_HEADER}\n"),
    };
    text.push_str(&row);
    text.push('\n');
    fs::write(&table, text).map_err(|e| Error::io(&table, e))?;
    Ok(row)
}

pub fn config_help() -> String {
    let mut out = String::new();
    for (k, default, doc) in KEYS {
        out.push_str(&format!("# {doc} (env {})\n{k} = {default}\n", env_name(k)));
    }
    out
}

/// Run a parsed command; the caller maps errors to exit codes.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let cfg = resolve_config(&a.common)?;
            let o = run_train(&cfg, &a.common.data_root, &a.out)?;
            println!("{}", o.checkpoint.display());
        }
        Command::Evaluate(a) => {
            let s = run_evaluate(&a)?;
            let m = &s.metrics;
            println!(
                "abs_rel {:.4} sq_rel {:.4} rmse {:.4} rmse_log {:.4} log10 {:.4} d1 {:.4} d2 {:.4} d3 {:.4} ({} samples, {} excluded)",
                m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.log10, m.delta1, m.delta2, m.delta3,
                s.n_samples, s.excluded.len()
            );
            if let Some(v) = s.mri {
                println!("mRI {:.1}%", v * 100.0);
            }
        }
        Command::Predict(a) => {
            let results = run_predict(&a)?;
            let failed = results.iter().filter(|(_, r)| r.is_err()).count();
            for (_, r) in &results {
                if let Ok(p) = r {
                    println!("{}", p.depth_png.display());
                }
            }
            if failed > 0 {
                return Err(Error::Input(format!("{failed} of {} images failed", results.len())));
            }
        }
        Command::AblateConditioning(a) => {
            let cfg = resolve_config(&a.common)?;
            println!("{ABLATION_HEADER}");
            println!("{}", run_ablation(&cfg, &a.common.data_root, &a.out, a.variant)?);
        }
        Command::Synth(a) => {
            let profile = DatasetProfile::named(&a.profile)?;
            let spec = SyntheticSpec {
                samples: a.samples,
                height: a.height,
                width: a.width,
                num_scenes: a.scenes,
                seed: a.seed,
                unlabeled_listing: true,
            };
            let ids = generate(&a.out, &spec, &profile)?;
            println!("wrote {} samples to {}", ids.len(), a.out.display());
        }
        Command::Config => print!("{}", config_help()),
    }
    Ok(())
}
