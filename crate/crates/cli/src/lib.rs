//! Command-line workflows: synthetic data generation, training, evaluation,
//! single-sample inference and gradient checking.

pub mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mmad_core::eval::{oracle_deviation, report_from_scores, score_by_class, MetricsReport};
use mmad_core::featureprovider::{validate_provider, write_dataset, DiskProvider, FeatureProvider, Split};
use mmad_core::io::{decode_sample, encode_map, encode_pgm, Checkpoint, MapSidecar};
use mmad_core::model::Model;
use mmad_core::numerics::GradCheckReport;
use mmad_core::synthdata::gen_dataset;
use mmad_core::trainer::{run_gradcheck, train};
use mmad_core::Error;

pub use config::RunConfig;

/// Gradient check tolerance on the relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Largest allowed gap between fast metrics and their oracles.
pub const ORACLE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("validation failed: {0}")]
    Validation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Validation(_) => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) | Error::Format(_) | Error::Json(_) => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "mmad", version, about = "Text-guided RGB/3D anomaly detection head")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; defaults apply to omitted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a synthetic dataset directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains on the nominal training split and writes a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores the test split and writes a metrics report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Recomputes every metric with brute-force oracles.
        #[arg(long)]
        oracle_check: bool,
        /// AUPRO FPR limit; repeat for several.
        #[arg(long = "limit")]
        limits: Vec<f64>,
    },
    /// Scores one sample bundle and writes its anomaly map.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample bundle written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// TMF1 map path; a `.json` sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Also writes an 8-bit PGM preview.
        #[arg(long)]
        pgm: bool,
    },
    /// Finite-difference check of every trainable tensor.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Optional JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Reads, overrides and resolves the run configuration.
pub fn load_config(common: &Common) -> CliResult<RunConfig> {
    let cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            RunConfig::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    with_seed(cfg, common.seed)
}

fn with_seed(mut cfg: RunConfig, seed: Option<u64>) -> CliResult<RunConfig> {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.resolve().map_err(CliError::Config)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn pretty_json<S: Serialize>(v: &S) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("serializable");
    out.push(b'\n');
    out
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn open_dataset(dir: &Path) -> CliResult<DiskProvider> {
    DiskProvider::open(dir).map_err(|e| io_err(dir, e))
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let data = gen_dataset::<f64>(&cfg.data, cfg.seed)?;
    let m = write_dataset(out, &data, &cfg.data, &cfg.hash(), cfg.seed, mmad_core::DType::F64)
        .map_err(|e| io_err(out, e))?;
    println!("wrote {} train and {} test samples to {}", m.train.len(), m.test.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct LossLine<'a> {
    step: usize,
    l_vis: f64,
    l_text: f64,
    l_total: f64,
    config_hash: &'a str,
}

/// Trains a model and writes the checkpoint plus `<out>.loss.jsonl`.
pub fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path) -> CliResult<()> {
    let provider = open_dataset(data)?;
    let train_set = FeatureProvider::<f64>::load_split(&provider, Split::Train)?;
    let first = train_set
        .first()
        .ok_or_else(|| CliError::Validation("training split is empty".into()))?;
    let (d_rgb, d_3d) = (first.f_rgb.shape()[2], first.f_3d.shape()[2]);
    let refs = FeatureProvider::<f64>::refs(&provider, Split::Train);
    let diagnostics = validate_provider::<f64, _>(&provider, d_rgb, d_3d, &refs)?;
    if let Some(d) = diagnostics.first() {
        return Err(CliError::Validation(format!(
            "{} provider diagnostics, first at {:?} sample {}: {}",
            diagnostics.len(),
            d.reference.split,
            d.reference.index,
            d.message
        )));
    }
    let arch = cfg.arch(d_rgb, d_3d, provider.manifest.classes.clone());
    let model = Model::<f64>::init(arch, cfg.seed)?;
    let outcome = train(model, &cfg.train, &train_set, cfg.seed)?;
    let hash = cfg.hash();
    let run_config = serde_json::to_value(cfg).expect("config serializes");
    let step = cfg.train.steps as u64;
    let bytes = Checkpoint::from_model(&outcome.model, step, cfg.seed, &hash, run_config, cfg.checkpoint_dtype)
        .to_bytes()?;
    write_file(out, &bytes)?;
    let mut log = Vec::new();
    for r in &outcome.log {
        let line = LossLine {
            step: r.step,
            l_vis: r.l_vis,
            l_text: r.l_text,
            l_total: r.l_total,
            config_hash: &hash,
        };
        log.extend(serde_json::to_vec(&line).expect("serializable"));
        log.push(b'\n');
    }
    write_file(&with_suffix(out, ".loss.jsonl"), &log)?;
    if let (Some(a), Some(b)) = (outcome.log.first(), outcome.log.last()) {
        println!("loss {:.6} -> {:.6} over {} steps", a.l_total, b.l_total, outcome.log.len());
    }
    Ok(())
}

/// Loads a checkpoint as an f64 model regardless of its on-disk dtype.
pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint<f64>> {
    Checkpoint::<f64>::load(path).map_err(|e| io_err(path, e))
}

/// The configuration stored in a checkpoint, or the one given on the
/// command line.
fn eval_config(common: &Common, ckpt: &Checkpoint<f64>) -> CliResult<RunConfig> {
    if common.config.is_some() {
        return load_config(common);
    }
    let cfg: RunConfig = serde_json::from_value(ckpt.run_config.clone())
        .map_err(|e| CliError::Config(format!("checkpoint run_config: {e}")))?;
    with_seed(cfg, common.seed)
}

pub fn eval_cmd(
    cfg: &RunConfig,
    ckpt: &Checkpoint<f64>,
    data: &Path,
    out: &Path,
    oracle_check: bool,
    limits: &[f64],
) -> CliResult<MetricsReport> {
    let limits = if limits.is_empty() { cfg.metrics.fpr_limits.clone() } else { limits.to_vec() };
    config::check_limits(&limits).map_err(CliError::Config)?;
    let provider = open_dataset(data)?;
    let test = FeatureProvider::<f64>::load_split(&provider, Split::Test)?;
    let model = ckpt.to_model()?;
    let scores = score_by_class(&model, &test, &cfg.fusion)?;
    let report = report_from_scores(&scores, &limits, &cfg.hash(), ckpt.seed)?;
    write_file(out, &pretty_json(&report))?;
    let a = &report.average;
    println!(
        "mean I-AUROC {:.4}  P-AUROC {:.4}  AUPRO {:?}",
        a.i_auroc, a.p_auroc, a.aupro
    );
    if oracle_check {
        let dev = oracle_deviation(&scores, &report)?;
        println!("oracle deviation {dev:.3e}");
        if dev > ORACLE_TOLERANCE {
            return Err(CliError::Validation(format!(
                "metrics deviate from their oracles by {dev:.3e} > {ORACLE_TOLERANCE:e}"
            )));
        }
    }
    Ok(report)
}

pub fn infer_cmd(cfg: &RunConfig, ckpt: &Checkpoint<f64>, sample: &Path, out: &Path, pgm: bool) -> CliResult<f64> {
    let bytes = std::fs::read(sample).map_err(|e| io_err(sample, e))?;
    let (s, _) = decode_sample::<f64>(&bytes).map_err(|e| io_err(sample, e))?;
    let model = ckpt.to_model()?;
    let maps = model.score(&s.class_name, &s.f_rgb, &s.f_3d, &s.mask, &cfg.fusion)?;
    let score = maps.image_score;
    write_file(out, &encode_map(&maps.fused)?)?;
    let sidecar = MapSidecar {
        class_name: s.class_name.clone(),
        height: maps.fused.height(),
        width: maps.fused.width(),
        image_score: score,
        config_hash: cfg.hash(),
        checkpoint_step: ckpt.step,
    };
    write_file(&with_suffix(out, ".json"), &pretty_json(&sidecar))?;
    if pgm {
        write_file(&with_suffix(out, ".pgm"), &encode_pgm(&maps.fused))?;
    }
    println!("{score}");
    Ok(score)
}

#[derive(Serialize)]
pub struct SeedReport {
    pub seed: u64,
    pub report: GradCheckReport,
}

#[derive(Serialize)]
pub struct GradcheckSummary {
    pub tolerance: f64,
    pub max_relative_error: f64,
    pub passed: bool,
    pub seeds: Vec<SeedReport>,
}

pub fn gradcheck_cmd(cfg: &RunConfig, out: Option<&Path>) -> CliResult<GradcheckSummary> {
    let mut seeds = Vec::new();
    for gc in cfg.gradcheck.configs() {
        let report = run_gradcheck(&gc, cfg.gradcheck.corrupt.as_ref())?;
        println!(
            "seed {:>3}: max relative error {:.3e} ({})",
            gc.seed, report.max_relative_error, report.worst_parameter
        );
        seeds.push(SeedReport { seed: gc.seed, report });
    }
    let max = seeds.iter().map(|s| s.report.max_relative_error).fold(0.0, f64::max);
    let summary = GradcheckSummary {
        tolerance: GRADCHECK_TOLERANCE,
        max_relative_error: max,
        passed: max <= GRADCHECK_TOLERANCE,
        seeds,
    };
    if let Some(path) = out {
        write_file(path, &pretty_json(&summary))?;
    }
    if !summary.passed {
        return Err(CliError::Validation(format!(
            "gradient check error {max:.3e} exceeds {GRADCHECK_TOLERANCE:e}"
        )));
    }
    Ok(summary)
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { common, out } => gen_data(&load_config(&common)?, &out),
        Command::Train { common, data, out } => train_cmd(&load_config(&common)?, &data, &out),
        Command::Eval {
            common,
            data,
            checkpoint,
            out,
            oracle_check,
            limits,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let cfg = eval_config(&common, &ckpt)?;
            eval_cmd(&cfg, &ckpt, &data, &out, oracle_check, &limits).map(|_| ())
        }
        Command::Infer {
            common,
            checkpoint,
            data,
            out,
            pgm,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let cfg = eval_config(&common, &ckpt)?;
            infer_cmd(&cfg, &ckpt, &data, &out, pgm).map(|_| ())
        }
        Command::Gradcheck { common, out } => gradcheck_cmd(&load_config(&common)?, out.as_deref()).map(|_| ()),
    }
}
