//! Command-line entry point wiring every stage together.

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Device;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::{file_hash, ModelBundle};
use crate::depth3d::{volume_attention, DepthModel};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_dataset, EvalConfig};
use crate::inference::predict_volume;
use crate::prompting::Prompt;
use crate::sam2d::{ForwardOptions, SegModel};
use crate::service::{serve, ServiceConfig};
use crate::training::{
    load_split, precompute_attention, train_stage_a2d, train_stage_fusion, train_v3d, Stage, TrainConfig,
    TrainLog, TrainOutcome,
};
use crate::volume::{
    generate_dataset, load_volume, save_mask, split_dataset, DatasetManifest, MaskVolume, PhantomConfig, Split,
    SplitRatios,
};

#[derive(Debug, Parser)]
#[command(name = "segbone", version, about = "Promptable bone segmentation on synthetic phantoms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic phantom datasets.
    Phantom {
        #[command(subcommand)]
        command: PhantomCommand,
    },
    /// Reassigns manifest splits by patient.
    Split(SplitArgs),
    /// Stage A: the 2D branch in automatic mode.
    #[command(name = "train-2d")]
    Train2d(TrainArgs),
    /// The 3D V-net branch.
    #[command(name = "train-3d")]
    Train3d(TrainArgs),
    /// Writes per-slice attention maps next to every volume.
    #[command(name = "attn-precompute")]
    AttnPrecompute(PrecomputeArgs),
    /// Fusion stage with hybrid prompting on a stage A bundle.
    #[command(name = "train-fusion")]
    TrainFusion(TrainArgs),
    /// Volumewise DSC/IoU with bootstrap intervals.
    Eval(EvalArgs),
    /// Segments one volume into a mask archive.
    Segment(SegmentArgs),
    /// Runs the HTTP service until interrupted.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum PhantomCommand {
    Gen(PhantomArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Phantom config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Volume shape as `D,H,W`.
    #[arg(long, value_delimiter = ',')]
    pub shape: Option<Vec<usize>>,
    /// Voxel spacing in mm as `d,h,w`.
    #[arg(long, value_delimiter = ',')]
    pub spacing: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output manifest; defaults to overwriting the input.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fractions as `train,val,test`.
    #[arg(long, value_delimiter = ',', conflicts_with = "counts")]
    pub ratios: Option<Vec<f64>>,
    /// Patient counts as `train,val,test`.
    #[arg(long, value_delimiter = ',')]
    pub counts: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Training config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Starting bundle: pretrained weights for stage A, the stage A bundle
    /// for the fusion stage.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub max_iters_per_epoch: Option<usize>,
    /// Sequence tag to train on; `all` takes every sequence.
    #[arg(long)]
    pub sequence: Option<String>,
}

#[derive(Debug, Args)]
pub struct PrecomputeArgs {
    /// V-net bundle.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Training config JSON; its `attention` section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `train`, `val`, `test` or `all`.
    #[arg(long, default_value = "all")]
    pub split: String,
    /// Directory for the run summary.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Evaluation config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `auto`, `prompted-oracle` or `2d-only`.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub use_depth_attention: bool,
    /// Sequence tag to evaluate; `all` takes every sequence.
    #[arg(long, default_value = "t1")]
    pub sequence: String,
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub volume: PathBuf,
    /// `auto` or `prompt`.
    #[arg(long, default_value = "auto")]
    pub mode: String,
    /// Prompt JSON in slice pixels, applied to every segmented slice.
    #[arg(long)]
    pub prompts: Option<String>,
    /// Restricts prompting to these slices; others stay empty.
    #[arg(long, value_delimiter = ',')]
    pub slices: Option<Vec<usize>>,
    /// V-net bundle for depth attention.
    #[arg(long)]
    pub ckpt3d: Option<PathBuf>,
    #[arg(long)]
    pub use_depth_attention: bool,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Output mask archive.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub model3d: Option<PathBuf>,
    /// Service config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Validation failures exit with 1, runtime failures with 2.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. }
        | Error::Diverged { .. }
        | Error::FrozenViolation(_)
        | Error::Tensor(_)
        | Error::Checkpoint(_) => 2,
        _ => 1,
    }
}

pub fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    init_logging();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            tracing::error!(error = %e, "command failed");
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("config {}: {e}", p.display())))
        }
        None => Ok(T::default()),
    }
}

fn log_config<T: Serialize>(command: &str, cfg: &T) -> Result<()> {
    tracing::info!(command, config = %serde_json::to_string(cfg)?, "resolved config");
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| Error::io(path, e))
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    if s == "all" {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

fn triple<T: Copy + std::fmt::Debug>(flag: &str, v: &[T]) -> Result<[T; 3]> {
    match v {
        &[a, b, c] => Ok([a, b, c]),
        _ => Err(Error::Invalid(format!("--{flag} takes three comma-separated values, got {v:?}"))),
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Phantom {
            command: PhantomCommand::Gen(a),
        } => phantom_gen(a),
        Command::Split(a) => split(a),
        Command::Train2d(a) => train(a, Stage::A2D),
        Command::Train3d(a) => train(a, Stage::V3D),
        Command::TrainFusion(a) => train(a, Stage::FUSION),
        Command::AttnPrecompute(a) => attn_precompute(a),
        Command::Eval(a) => eval(a),
        Command::Segment(a) => segment(a),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn phantom_gen(a: PhantomArgs) -> Result<()> {
    let mut cfg: PhantomConfig = read_json(a.config.as_deref())?;
    if let Some(s) = &a.shape {
        cfg.shape = triple("shape", s)?;
    }
    if let Some(s) = &a.spacing {
        cfg.spacing_mm = triple("spacing", s)?;
    }
    log_config("phantom gen", &json!({"count": a.count, "seed": a.seed, "phantom": cfg}))?;
    let m = generate_dataset(&a.out, a.count, a.seed, &cfg)?;
    write_json(&a.out.join("phantom_config.json"), &cfg)?;
    tracing::info!(entries = m.entries.len(), out = %a.out.display(), "phantoms written");
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let m = DatasetManifest::load(&a.manifest)?;
    let patients = m
        .entries
        .iter()
        .map(|e| e.patient_id.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let ratios = match (&a.ratios, &a.counts) {
        (Some(r), None) => {
            let [t, v, s] = triple("ratios", r)?;
            SplitRatios::new(t, v, s)
        }
        (None, Some(c)) => {
            let c = triple("counts", c)?;
            let total: usize = c.iter().sum();
            if total != patients {
                return Err(Error::Invalid(format!("split counts {c:?} do not add up to {patients} patients")));
            }
            let n = total as f64;
            SplitRatios::new(c[0] as f64 / n, c[1] as f64 / n, c[2] as f64 / n)
        }
        _ => SplitRatios::new(0.7, 0.15, 0.15),
    };
    log_config("split", &json!({"ratios": ratios, "seed": a.seed}))?;
    let out = split_dataset(&m, ratios, a.seed)?;
    out.check_patient_partition()?;
    if let Some(c) = &a.counts {
        for (split, &want) in Split::ALL.iter().zip(c.iter()) {
            let got = out
                .split(*split)
                .map(|e| e.patient_id.as_str())
                .collect::<std::collections::BTreeSet<_>>()
                .len();
            if got != want {
                return Err(Error::Invalid(format!("{split:?}: {got} patients allocated, {want} requested")));
            }
        }
    }
    out.save(a.out.as_ref().unwrap_or(&a.manifest))?;
    Ok(())
}

fn resolve_train_config(a: &TrainArgs, stage: Stage) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = read_json(a.config.as_deref())?;
    cfg.stage = stage;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.warmup_iters {
        cfg.warmup_iters = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.input_size {
        cfg.input_size = v;
    }
    if let Some(v) = a.max_iters_per_epoch {
        cfg.max_iters_per_epoch = Some(v);
    }
    if let Some(v) = &a.sequence {
        cfg.sequence = (v != "all").then(|| v.clone());
    }
    Ok(cfg)
}

fn outcome_summary(o: &TrainOutcome, elapsed_s: f64, bundle_hash: &str) -> serde_json::Value {
    json!({
        "stage": o.bundle.stage,
        "epochs": o.epochs,
        "best_epoch": o.best_epoch,
        "best_metric": o.best_metric,
        "iterations": o.iterations,
        "changed_params": o.changed,
        "frozen_params": o.frozen.len(),
        "prompted_fraction": o.prompted_fraction,
        "elapsed_s": elapsed_s,
        "bundle_hash": bundle_hash,
    })
}

fn train(a: TrainArgs, stage: Stage) -> Result<()> {
    let cfg = resolve_train_config(&a, stage)?;
    log_config(stage.name(), &cfg)?;
    let manifest = DatasetManifest::load(&a.data)?;
    let seq = cfg.sequence.as_deref();
    let train_set = load_split(&manifest, Split::Train, seq)?;
    let val_set = load_split(&manifest, Split::Val, seq)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_json(&a.out.join("config.json"), &cfg)?;
    let mut log = TrainLog::new(Some(&a.out.join("train_log.jsonl")))?;
    let device = Device::Cpu;
    let start = Instant::now();
    let outcome = match stage {
        Stage::A2D => {
            let pre = a.ckpt.as_ref().map(ModelBundle::load).transpose()?;
            train_stage_a2d(&cfg, &train_set, &val_set, pre.as_ref(), &mut log, &device)?
        }
        Stage::V3D => train_v3d(&cfg, &train_set, &val_set, &mut log, &device)?,
        Stage::FUSION => {
            let p = a
                .ckpt
                .as_ref()
                .ok_or_else(|| Error::Invalid("train-fusion needs --ckpt with the stage A bundle".into()))?;
            let stage_a = ModelBundle::load(p)?;
            train_stage_fusion(&cfg, &train_set, &val_set, &stage_a, &mut log, &device)?
        }
    };
    log.flush()?;
    let path = a.out.join("bundle.bin");
    outcome.bundle.save(&path)?;
    let hash = file_hash(&path)?;
    let elapsed = start.elapsed().as_secs_f64();
    write_json(&a.out.join("summary.json"), &outcome_summary(&outcome, elapsed, &hash))?;
    tracing::info!(stage = stage.name(), best_epoch = outcome.best_epoch, best_metric = outcome.best_metric, elapsed_s = elapsed, bundle = %path.display(), "training done");
    Ok(())
}

fn attn_precompute(a: PrecomputeArgs) -> Result<()> {
    let cfg: TrainConfig = read_json(a.config.as_deref())?;
    log_config("attn-precompute", &json!({"attention": cfg.attention, "split": a.split}))?;
    let manifest = DatasetManifest::load(&a.data)?;
    let entries: Vec<_> = match parse_split(&a.split)? {
        Some(s) => manifest.split(s).cloned().collect(),
        None => manifest.entries.clone(),
    };
    let bundle = ModelBundle::load(&a.ckpt)?;
    let model = DepthModel::from_bundle(&bundle, &Device::Cpu)?;
    let hash = file_hash(&a.ckpt)?;
    let start = Instant::now();
    let n = precompute_attention(&model, &hash, &entries, &cfg.attention)?;
    if let Some(out) = &a.out {
        write_json(
            &out.join("precompute_summary.json"),
            &json!({"volumes": n, "bundle_hash": hash, "elapsed_s": start.elapsed().as_secs_f64(), "attention": cfg.attention}),
        )?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg: EvalConfig = read_json(a.config.as_deref())?;
    if let Some(m) = &a.mode {
        cfg.mode = m.parse()?;
    }
    if a.use_depth_attention {
        cfg.use_depth_attention = true;
    }
    if let Some(v) = a.bootstrap {
        cfg.bootstrap_resamples = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    log_config("eval", &json!({"eval": cfg, "split": a.split, "sequence": a.sequence}))?;
    let manifest = DatasetManifest::load(&a.data)?;
    let seq = (a.sequence != "all").then_some(a.sequence.as_str());
    let entries = match parse_split(&a.split)? {
        Some(s) => manifest.select(s, seq),
        None => Split::ALL.iter().flat_map(|&s| manifest.select(s, seq)).collect(),
    };
    let model = SegModel::from_bundle(&ModelBundle::load(&a.ckpt)?, &Device::Cpu)?;
    let report = evaluate_dataset(&model, &entries, &cfg)?;
    report.save(&a.report)?;
    if let Some(csv) = &a.csv {
        std::fs::write(csv, report.to_csv()).map_err(|e| Error::io(csv, e))?;
    }
    tracing::info!(mean_dsc = report.mean_dsc, mean_iou = report.mean_iou, volumes = report.volumes.len(), "evaluation done");
    Ok(())
}

fn segment(a: SegmentArgs) -> Result<()> {
    log_config(
        "segment",
        &json!({"mode": a.mode, "prompts": a.prompts, "slices": a.slices, "use_depth_attention": a.use_depth_attention}),
    )?;
    let v = load_volume(&a.volume)?;
    let [d, h, w] = v.shape();
    let prompt = match (a.mode.as_str(), &a.prompts) {
        ("auto", None) => None,
        ("prompt", Some(text)) => {
            let p: Prompt = serde_json::from_str(text).map_err(|e| Error::Prompt(format!("malformed prompts: {e}")))?;
            p.validate(h, w)?;
            Some(p)
        }
        ("auto", Some(_)) => return Err(Error::Prompt("prompts are only accepted in prompt mode".into())),
        ("prompt", None) => return Err(Error::Prompt("prompt mode needs --prompts".into())),
        (m, _) => return Err(Error::Invalid(format!("unknown mode {m:?}"))),
    };
    let selected: Vec<bool> = match &a.slices {
        Some(ks) => {
            let mut sel = vec![false; d];
            for &k in ks {
                if k >= d {
                    return Err(Error::OutOfRange { index: k, len: d });
                }
                sel[k] = true;
            }
            sel
        }
        None => vec![true; d],
    };
    let device = Device::Cpu;
    let bundle = ModelBundle::load(&a.ckpt)?;
    let model = SegModel::from_bundle(&bundle, &device)?;
    // The attention settings the fusion stage trained with, when recorded.
    let attn_cfg: crate::depth3d::AttentionConfig =
        serde_json::from_value(bundle.meta["train_config"]["attention"].clone()).unwrap_or_default();
    let (attention, opts) = if a.use_depth_attention {
        let p = a
            .ckpt3d
            .as_ref()
            .ok_or_else(|| Error::Invalid("--use-depth-attention needs --ckpt3d".into()))?;
        let m3 = DepthModel::from_bundle(&ModelBundle::load(p)?, &device)?;
        let (_, maps) = volume_attention(&m3, &v, &attn_cfg)?;
        (Some(maps), ForwardOptions::default())
    } else {
        (
            None,
            ForwardOptions {
                gate_override: Some(1.0),
                ..Default::default()
            },
        )
    };
    let prompts = vec![prompt; d];
    let mut pred = predict_volume(&model, &v, &prompts, attention.as_ref(), opts, a.batch_size)?;
    for (k, keep) in selected.iter().enumerate() {
        if !keep {
            pred.index_axis_mut(ndarray::Axis(0), k).fill(0);
        }
    }
    let link = a.volume.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    save_mask(&MaskVolume::new(pred, link)?, &v, &a.out)?;
    tracing::info!(out = %a.out.display(), "mask written");
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let mut cfg: ServiceConfig = read_json(a.config.as_deref())?;
    cfg = cfg.with_env();
    if let Some(b) = a.bind {
        cfg.bind_addr = b;
    }
    if let Some(m) = a.model {
        cfg.model_path = Some(m);
    }
    if let Some(m) = a.model3d {
        cfg.model3d_path = Some(m);
    }
    log_config("serve", &cfg)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io(Path::new("tokio runtime"), e))?;
    rt.block_on(serve(cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["segbone", "frobnicate"]), 1);
        assert_eq!(run(["segbone", "eval", "--bogus"]), 1);
        assert_eq!(run(["segbone", "--help"]), 0);
    }

    #[test]
    fn exit_codes_by_error_kind() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("none.json");
        let code = run(["segbone", "split", "--manifest", missing.to_str().unwrap()]);
        assert_eq!(code, 2);
        let code = run([
            "segbone", "eval", "--ckpt", "x", "--data", "y", "--report", "r.json", "--mode", "sideways",
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, r#"{"epochs": 7, "lr": 0.01, "batch_size": 2}"#).unwrap();
        let cli = Cli::try_parse_from([
            "segbone", "train-2d", "--data", "m.json", "--out", "o", "--config", p.to_str().unwrap(), "--epochs", "3",
        ])
        .unwrap();
        let Command::Train2d(a) = cli.command else { panic!() };
        let cfg = resolve_train_config(&a, Stage::A2D).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.batch_size, 2);
        assert_eq!(cfg.warmup_iters, TrainConfig::default().warmup_iters);
    }
}
