//! Command-line front end: `phantom`, `train-pp`, `run`, `eval`, `serve-oracle`.
//!
//! Exit codes are a stable contract: 0 success, 1 runtime or backend failure,
//! 2 usage or validation error.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anatomy::Region;
use crate::backends::mlp::{samples_from_chain, train, MlpPredictor, MlpWeights, Sample, TrainConfig};
use crate::backends::{Backends, LinearExtrapolator, PointPredictor};
use crate::dataio::{
    list_by_extension, load_annotations, load_chain_doc, load_image, load_predictions, rasterize_gt,
    write_metrics_csv, write_outputs, GroundTruth, ANNOTATION_EXT, CHAIN_SUFFIX,
};
use crate::eval::{match_masks, weighted_average, LevelRow, MetricsAccumulator, DEFAULT_MIN_DICE};
use crate::extproto::{serve, AdapterConfig, ExternalBackend, ANNOTATIONS_PLACEHOLDER};
use crate::geometry::{centroid, BinaryMask, Point2};
use crate::phantom::{generate, OracleNoise, OracleSet, PhantomSpec};
use crate::pipeline::{run_image, PipelineConfig, PipelineError, SpineChain};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Manifest file written into every run output directory.
pub const MANIFEST_FILE: &str = "manifest.json";

/// A command failure tagged with its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(e) | CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

fn usage<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError::Usage(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError::Runtime(e.into())
}

#[derive(Debug, Parser)]
#[command(name = "spinefm", version, about = "Inductive vertebra segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic spine images with annotations.
    Phantom(PhantomArgs),
    /// Train the MLP point predictor on annotated centroid chains.
    TrainPp(TrainArgs),
    /// Run the pipeline over a directory of images.
    Run(RunArgs),
    /// Score chain documents against annotations.
    Eval(EvalArgs),
    /// Serve ground-truth oracle answers over stdio (protocol v1).
    ServeOracle(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct PhantomArgs {
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Phantom spec (TOML); defaults to a 7-vertebra cervical spine.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the spec's maximum curvature amplitude, in pixels.
    #[arg(long)]
    pub curvature: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Directory of annotation documents.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    pub lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of documents held out for reporting.
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Directory of `<id>.pgm` images.
    #[arg(long)]
    pub images: PathBuf,
    /// `oracle` (reads `<id>.ann` next to each image) or `external:<command>`.
    #[arg(long, default_value = "oracle")]
    pub backend: String,
    /// `linear` or a weight file path.
    #[arg(long, default_value = "linear")]
    pub pp: String,
    /// Pipeline config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Seed for oracle corruption.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    #[arg(long, default_value_t = 0)]
    pub false_positives: usize,
    /// Detector centroid jitter as a fraction of vertebra size.
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f64,
    #[arg(long)]
    pub region: Option<Region>,
    #[arg(long)]
    pub confidence_threshold: Option<f64>,
    #[arg(long)]
    pub iou_threshold: Option<f64>,
    #[arg(long)]
    pub sigmoid_threshold: Option<f64>,
    #[arg(long)]
    pub patch_scale: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub flip_superior: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Directory with `<id>.chain.json` and mask files.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory with `<id>.ann` annotation documents.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MIN_DICE)]
    pub min_dice: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    #[arg(long, default_value_t = 0)]
    pub false_positives: usize,
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f64,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPINEFM_LOG", "warn"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cmd: &Command) -> Result<(), CliError> {
    match cmd {
        Command::Phantom(a) => cmd_phantom(a).map(|_| ()),
        Command::TrainPp(a) => {
            let report = cmd_train_pp(a)?;
            println!(
                "trained on {} samples: final mse {:.3e}{}",
                report.train_samples,
                report.final_mse,
                report
                    .heldout_mse
                    .map(|m| format!(", held-out mse {m:.3e} ({} samples)", report.heldout_samples))
                    .unwrap_or_default()
            );
            Ok(())
        }
        Command::Run(a) => {
            let s = cmd_run(a)?;
            println!(
                "processed {} image(s): {} chain(s), {} per-image failure(s)",
                s.inputs, s.chains, s.failures
            );
            Ok(())
        }
        Command::Eval(a) => {
            let rows = cmd_eval(a)?;
            print!("{}", format_table(&rows));
            Ok(())
        }
        Command::ServeOracle(a) => cmd_serve_oracle(a),
    }
}

/// Per-image seed derived from a base seed and a stable string hash.
fn mix_seed(seed: u64, key: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Writes `count` phantoms and returns their ids.
pub fn cmd_phantom(args: &PhantomArgs) -> Result<Vec<String>, CliError> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(usage)?;
            PhantomSpec::from_toml_str(&text)
                .with_context(|| format!("spec {}", path.display()))
                .map_err(usage)?
        }
        None => PhantomSpec::default(),
    };
    if let Some(a) = args.curvature {
        spec.curvature_amplitude = a;
    }
    spec.validate().map_err(usage)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(runtime)?;
    let mut ids = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let id = format!("phantom_{i:04}");
        let variant = spec.sample_variant(mix_seed(args.seed, &id));
        let p = generate(&variant).with_context(|| id.clone()).map_err(usage)?;
        p.export(&args.out, &id).map_err(runtime)?;
        ids.push(id);
    }
    log::info!("wrote {} phantom(s) to {}", ids.len(), args.out.display());
    Ok(ids)
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub train_samples: usize,
    pub heldout_samples: usize,
    pub final_mse: f64,
    pub heldout_mse: Option<f64>,
    pub weights: MlpWeights,
}

fn chain_centroids(gt: &GroundTruth) -> Vec<Point2> {
    gt.vertebrae.iter().filter_map(|v| centroid(&v.mask).ok()).collect()
}

pub fn cmd_train_pp(args: &TrainArgs) -> Result<TrainReport, CliError> {
    let docs = list_by_extension(&args.annotations, ANNOTATION_EXT).map_err(usage)?;
    let mut per_doc: Vec<Vec<Sample>> = Vec::new();
    for (id, path) in &docs {
        let doc = load_annotations(path).with_context(|| id.clone()).map_err(usage)?;
        let gt = rasterize_gt(&doc).gt;
        let samples = samples_from_chain(&chain_centroids(&gt), (gt.width, gt.height));
        if !samples.is_empty() {
            per_doc.push(samples);
        }
    }
    if per_doc.is_empty() {
        return Err(usage(anyhow!(
            "no trainable samples in {}: every chain needs at least 4 vertebrae",
            args.annotations.display()
        )));
    }
    if !(0.0..1.0).contains(&args.holdout) {
        return Err(usage(anyhow!("--holdout must be in [0, 1)")));
    }
    let n_hold = if per_doc.len() >= 2 {
        ((per_doc.len() as f64 * args.holdout).round() as usize).min(per_doc.len() - 1)
    } else {
        0
    };
    let split = per_doc.len() - n_hold;
    let train_set: Vec<Sample> = per_doc[..split].concat();
    let hold_set: Vec<Sample> = per_doc[split..].concat();
    let cfg = TrainConfig {
        epochs: args.epochs,
        learning_rate: args.lr,
        batch_size: args.batch_size,
        seed: args.seed,
    };
    let trained = train(&train_set, &cfg).map_err(usage)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(runtime)?;
    }
    trained
        .weights
        .save(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))
        .map_err(runtime)?;
    Ok(TrainReport {
        train_samples: train_set.len(),
        heldout_samples: hold_set.len(),
        final_mse: trained.final_mse(),
        heldout_mse: (!hold_set.is_empty()).then(|| trained.weights.mse(&hold_set)),
        weights: trained.weights,
    })
}

/// Everything needed to reproduce a run; written as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub inputs: Vec<String>,
    /// `oracle` or `external:<command>`.
    pub backend: String,
    /// `linear` or `mlp:<weight file>`.
    pub predictor: String,
    pub output_dir: String,
    pub seed: u64,
    pub noise: OracleNoise,
    /// Images whose chain records a failure.
    pub failed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub inputs: usize,
    pub chains: usize,
    pub failures: usize,
    pub manifest: RunManifest,
}

enum BackendKind {
    Oracle,
    External(String),
}

fn run_config(args: &RunArgs) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) => PipelineConfig::load(p)
            .with_context(|| format!("config {}", p.display()))
            .map_err(usage)?,
        None => PipelineConfig::default(),
    };
    if let Some(r) = args.region {
        cfg.region = r;
    }
    if let Some(v) = args.confidence_threshold {
        cfg.confidence_threshold = v;
    }
    if let Some(v) = args.iou_threshold {
        cfg.iou_threshold = v;
    }
    if let Some(v) = args.sigmoid_threshold {
        cfg.sigmoid_threshold = v;
    }
    if let Some(v) = args.patch_scale {
        cfg.patch_scale = v;
    }
    if let Some(v) = args.max_steps {
        cfg.max_steps_per_direction = v;
    }
    if args.flip_superior {
        cfg.flip_superior = true;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

/// Outcome of one image: a chain to write, or a systemic failure.
enum ImageResult {
    Chain(SpineChain, (usize, usize)),
    Systemic(String),
}

#[allow(clippy::too_many_arguments)]
fn process_image(
    id: &str,
    path: &Path,
    args: &RunArgs,
    kind: &BackendKind,
    predictor: &Arc<dyn PointPredictor>,
    noise: OracleNoise,
    cfg: &PipelineConfig,
) -> ImageResult {
    let image = match load_image(path) {
        Ok(img) => img,
        Err(e) => return ImageResult::Chain(SpineChain::failed(e.to_string()), (0, 0)),
    };
    let dims = (image.width, image.height);
    let ann_path = args.images.join(format!("{id}.{ANNOTATION_EXT}"));
    let backends = match kind {
        BackendKind::Oracle => {
            let doc = match load_annotations(&ann_path) {
                Ok(d) => d,
                Err(e) => {
                    return ImageResult::Chain(
                        SpineChain::failed(format!("oracle needs annotations: {e}")),
                        dims,
                    )
                }
            };
            let oracle = OracleSet::new(
                rasterize_gt(&doc).gt,
                OracleNoise {
                    seed: mix_seed(noise.seed, id),
                    ..noise
                },
            );
            Backends::from_shared(Arc::new(oracle), predictor.clone())
        }
        BackendKind::External(cmd) => {
            let cmd = cmd.replace(ANNOTATIONS_PLACEHOLDER, &ann_path.to_string_lossy());
            match ExternalBackend::spawn(&cmd, AdapterConfig::default()) {
                Ok(b) => Backends::from_shared(Arc::new(b), predictor.clone()),
                Err(e) => return ImageResult::Systemic(format!("{id}: {e}")),
            }
        }
    };
    match run_image(&image, &backends, cfg) {
        Ok(chain) => ImageResult::Chain(chain, dims),
        Err(e @ PipelineError::Backend(_)) => ImageResult::Systemic(format!("{id}: {e}")),
        Err(e) => ImageResult::Chain(SpineChain::failed(e.to_string()), dims),
    }
}

/// Runs the pipeline on every `<id>.pgm` in `--images`.
///
/// Per-image failures are recorded in that image's chain document. Backend
/// failures are systemic: the remaining images still run, then the command
/// fails with exit code 1.
pub fn cmd_run(args: &RunArgs) -> Result<RunSummary, CliError> {
    let cfg = run_config(args)?;
    let kind = if args.backend == "oracle" {
        BackendKind::Oracle
    } else if let Some(cmd) = args.backend.strip_prefix("external:") {
        if cmd.trim().is_empty() {
            return Err(usage(anyhow!("external backend needs a command")));
        }
        BackendKind::External(cmd.to_string())
    } else {
        return Err(usage(anyhow!(
            "--backend must be `oracle` or `external:<command>`, got `{}`",
            args.backend
        )));
    };
    let (predictor, predictor_desc): (Arc<dyn PointPredictor>, String) = if args.pp == "linear" {
        (Arc::new(LinearExtrapolator), "linear".into())
    } else {
        let w = MlpWeights::load(Path::new(&args.pp))
            .with_context(|| format!("point predictor weights {}", args.pp))
            .map_err(usage)?;
        (Arc::new(MlpPredictor::new(w)), format!("mlp:{}", args.pp))
    };
    if !(0.0..=1.0).contains(&args.dropout) || !(args.jitter >= 0.0) {
        return Err(usage(anyhow!("--dropout must be in [0,1] and --jitter non-negative")));
    }
    if args.jobs == 0 {
        return Err(usage(anyhow!("--jobs must be at least 1")));
    }
    let noise = OracleNoise {
        dropout_prob: args.dropout,
        false_positives: args.false_positives,
        centroid_jitter: args.jitter,
        seed: args.seed,
    };
    let inputs = list_by_extension(&args.images, "pgm").map_err(usage)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(runtime)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(runtime)?;
    let results: Vec<(String, Result<bool, String>)> = pool.install(|| {
        inputs
            .par_iter()
            .map(|(id, path)| {
                let r = match process_image(id, path, args, &kind, &predictor, noise, &cfg) {
                    ImageResult::Systemic(msg) => Err(msg),
                    ImageResult::Chain(chain, dims) => {
                        write_outputs(id, dims, &chain, &cfg, None::<&[LevelRow]>, &args.out)
                            .map(|_| chain.failure.is_some())
                            .map_err(|e| e.to_string())
                    }
                };
                (id.clone(), r)
            })
            .collect()
    });

    let mut failed = Vec::new();
    let mut systemic = Vec::new();
    let mut chains = 0;
    for (id, r) in &results {
        match r {
            Ok(true) => {
                chains += 1;
                failed.push(id.clone());
            }
            Ok(false) => chains += 1,
            Err(msg) => systemic.push(msg.clone()),
        }
    }
    let manifest = RunManifest {
        config: cfg,
        inputs: inputs.iter().map(|(id, _)| id.clone()).collect(),
        backend: args.backend.clone(),
        predictor: predictor_desc,
        output_dir: args.out.to_string_lossy().into_owned(),
        seed: args.seed,
        noise,
        failed,
    };
    let path = args.out.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    std::fs::write(&path, json)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)?;
    if !systemic.is_empty() {
        return Err(runtime(anyhow!(
            "{} image(s) hit a backend failure:\n  {}",
            systemic.len(),
            systemic.join("\n  ")
        )));
    }
    Ok(RunSummary {
        inputs: inputs.len(),
        chains,
        failures: manifest.failed.len(),
        manifest,
    })
}

fn chain_ids(dir: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    let entries = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))
        .map_err(usage)?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(usage)?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(id) = name.strip_suffix(CHAIN_SUFFIX) {
            out.push((id.to_string(), path.clone()));
        }
    }
    out.sort();
    Ok(out)
}

/// Scores predictions against annotations; returns per-level rows followed by
/// the `all` summary row, as written to the CSV.
///
/// An empty prediction directory scores every vertebra as missed. Otherwise
/// the image ids on both sides must agree.
pub fn cmd_eval(args: &EvalArgs) -> Result<Vec<LevelRow>, CliError> {
    if !(0.0..=1.0).contains(&args.min_dice) {
        return Err(usage(anyhow!("--min-dice must be in [0, 1]")));
    }
    let gts = list_by_extension(&args.gt, ANNOTATION_EXT).map_err(usage)?;
    let preds = chain_ids(&args.pred)?;
    if !preds.is_empty() {
        let a: BTreeSet<&str> = gts.iter().map(|(id, _)| id.as_str()).collect();
        let b: BTreeSet<&str> = preds.iter().map(|(id, _)| id.as_str()).collect();
        if a != b {
            let only_gt: Vec<&str> = a.difference(&b).copied().collect();
            let only_pred: Vec<&str> = b.difference(&a).copied().collect();
            return Err(usage(anyhow!(
                "image ids differ: missing predictions for {only_gt:?}, no annotations for {only_pred:?}"
            )));
        }
    }
    let mut acc = MetricsAccumulator::new();
    for (id, gt_path) in &gts {
        let doc = load_annotations(gt_path).with_context(|| id.clone()).map_err(usage)?;
        let gt = rasterize_gt(&doc).gt;
        let masks: Vec<BinaryMask> = if preds.is_empty() {
            Vec::new()
        } else {
            let chain_path = args.pred.join(format!("{id}{CHAIN_SUFFIX}"));
            let chain = load_chain_doc(&chain_path).map_err(usage)?;
            load_predictions(&chain, &args.pred).map_err(usage)?
        };
        let refs: Vec<&BinaryMask> = masks.iter().collect();
        acc.add(&gt, &match_masks(&refs, &gt, args.min_dice));
    }
    let mut rows = acc.rows();
    if let Some(all) = weighted_average(&rows) {
        rows.push(all);
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(runtime)?;
    }
    write_metrics_csv(&rows, &args.out).map_err(runtime)?;
    Ok(rows)
}

/// Human-readable metrics table.
pub fn format_table(rows: &[LevelRow]) -> String {
    let mut s = format!(
        "{:<6} {:>8} {:>10} {:>10} {:>6}\n",
        "level", "ident%", "located", "overall", "count"
    );
    for r in rows {
        let located = if r.located_defined {
            format!("{:.4}", r.located_dsc)
        } else {
            "-".to_string()
        };
        s += &format!(
            "{:<6} {:>8.2} {:>10} {:>10.4} {:>6}\n",
            r.level, r.pct_identified, located, r.overall_dsc, r.count
        );
    }
    s
}

pub fn cmd_serve_oracle(args: &ServeArgs) -> Result<(), CliError> {
    let doc = load_annotations(&args.annotations).map_err(usage)?;
    let oracle = OracleSet::new(
        rasterize_gt(&doc).gt,
        OracleNoise {
            dropout_prob: args.dropout,
            false_positives: args.false_positives,
            centroid_jitter: args.jitter,
            seed: args.seed,
        },
    );
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    serve(stdin.lock(), stdout.lock(), &oracle).map_err(runtime)
}
