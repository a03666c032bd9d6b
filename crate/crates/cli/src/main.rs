//! `gelflex`: dataset generation, training, evaluation, the three-network
//! pipeline and report aggregation.
//!
//! Exit codes: 0 success, 1 internal error, 2 configuration or usage error,
//! 3 I/O error, 4 training divergence, 5 schema version mismatch.

mod config;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use gelflex::experiments::{
    self, load_checkpoint, AngleSource, ExperimentError, ProprioRun, Stopwatch, TaskKind, Trained,
};
use gelflex::models::{ModelError, SizeArch};
use gelflex::nn::NnError;
use gelflex::synthgen::{generate_dataset, load_dataset, save_dataset, Dataset, DatasetKind, Split, SynthError};

use config::ExperimentConfig;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }
    pub fn io(msg: impl Into<String>) -> Self {
        Self { code: 3, msg: msg.into() }
    }
    pub fn schema(msg: impl Into<String>) -> Self {
        Self { code: 5, msg: msg.into() }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        if let ExperimentError::Synth(s) = e {
            return s.into();
        }
        let code = match &e {
            ExperimentError::Config(_) | ExperimentError::Data(_) | ExperimentError::Leakage(_) => 2,
            ExperimentError::Diverged { .. } => 4,
            ExperimentError::Io(_) => 3,
            ExperimentError::Model(ModelError::Spec(_)) => 2,
            ExperimentError::Model(ModelError::Nn(NnError::Schema { .. })) => 5,
            ExperimentError::Model(ModelError::Nn(NnError::Io(_) | NnError::Checkpoint(_))) => 3,
            _ => 1,
        };
        Self { code, msg: e.to_string() }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        let code = match e {
            SynthError::Config(_) => 2,
            SynthError::Io(_) | SynthError::Dataset(_) => 3,
            SynthError::Schema { .. } => 5,
        };
        Self { code, msg: e.to_string() }
    }
}

#[derive(Parser)]
#[command(name = "gelflex", version, about = "Synthetic soft-finger sensing networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a labelled dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        /// proprio, tactile or size.
        #[arg(long)]
        task: Option<TaskKind>,
        #[arg(long)]
        cameras: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
        /// Tactile only: store raw contact and calibration frames instead of
        /// preprocessed imprints.
        #[arg(long)]
        raw: bool,
    },
    /// Train one network and evaluate it on the test split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: Option<TaskKind>,
        /// Dataset directory; generated in memory from the config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        cameras: Option<usize>,
        /// Size network: mlp, two_path or incorporator.
        #[arg(long)]
        arch: Option<SizeArch>,
        /// Size network angle inputs: predicted or ground_truth.
        #[arg(long, value_parser = parse_source)]
        angles: Option<AngleSource>,
        /// Proprioception checkpoint that predicts the size network's angles.
        #[arg(long)]
        proprio: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        /// Disable augmentation and label noise (proprio).
        #[arg(long)]
        no_augment: bool,
    },
    /// Evaluate a checkpoint on a dataset split. Never writes next to its inputs.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Proprioception checkpoint for size models trained on predicted angles.
        #[arg(long)]
        proprio: Option<PathBuf>,
    },
    /// Grasp each of the eight objects `--trials` times through all three networks.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        proprio: PathBuf,
        #[arg(long)]
        tactile: PathBuf,
        #[arg(long)]
        size: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Aggregate every report.json under a directory into mean and std tables.
    Report {
        #[command(flatten)]
        common: Common,
        dir: PathBuf,
    },
}

fn parse_source(s: &str) -> Result<AngleSource, String> {
    match s {
        "predicted" => Ok(AngleSource::Predicted),
        "ground_truth" | "ground-truth" => Ok(AngleSource::GroundTruth),
        _ => Err(format!("unknown angle source {s:?} (predicted, ground_truth)")),
    }
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?} (train, test)")),
    }
}

fn resolve(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref())?;
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if common.out.is_some() {
        cfg.out = common.out.clone();
    }
    Ok(cfg)
}

fn dataset_kind(task: TaskKind, cameras: usize, raw: bool) -> DatasetKind {
    match (task, cameras, raw) {
        (TaskKind::Proprio, 2, _) => DatasetKind::ProprioDouble,
        (TaskKind::Proprio, _, _) => DatasetKind::ProprioSingle,
        (TaskKind::Tactile, _, true) => DatasetKind::TactilePairs,
        (TaskKind::Tactile, _, false) => DatasetKind::Tactile,
        (TaskKind::Size, _, _) => DatasetKind::Size,
    }
}

fn out_dir(cfg: &ExperimentConfig, default: String) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn mkdir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))
}

fn class_counts(ds: &Dataset) -> Vec<(String, usize, usize)> {
    let mut rows: std::collections::BTreeMap<String, (usize, usize)> = Default::default();
    for s in &ds.manifest.samples {
        let key = match (s.shape, s.size) {
            (Some(sh), Some(sz)) if ds.manifest.kind == DatasetKind::Size => {
                format!("{sh:?} {} in", gelflex::synthgen::SIZES_IN[sz]).to_lowercase()
            }
            (Some(sh), _) => format!("{sh:?}").to_lowercase(),
            _ => "all".into(),
        };
        let e = rows.entry(key).or_default();
        match s.split {
            Split::Train => e.0 += 1,
            Split::Test => e.1 += 1,
        }
    }
    rows.into_iter().map(|(k, (a, b))| (k, a, b)).collect()
}

fn cmd_gen(common: Common, task: Option<TaskKind>, cameras: Option<usize>, count: Option<usize>, raw: bool) -> Result<(), CliError> {
    let mut cfg = resolve(&common)?;
    cfg.task = task.or(cfg.task);
    cfg.count = count.or(cfg.count);
    if let Some(c) = cameras {
        cfg.model.cameras = c;
    }
    cfg.validate()?;
    let seed = cfg.seed()?;
    let kind = dataset_kind(cfg.task()?, cfg.model.cameras, raw);
    let count = cfg.count.unwrap_or(kind.default_count());
    let ds = generate_dataset(kind, count, seed, &cfg.scene)?;
    let dir = out_dir(&cfg, format!("data/{}-s{seed}", serde_json::to_value(kind).unwrap().as_str().unwrap()));
    save_dataset(&ds, &dir)?;
    println!("manifest: {}", dir.join("manifest.json").display());
    println!("{:<16} {:>6} {:>6}", "class", "train", "test");
    for (k, a, b) in class_counts(&ds) {
        println!("{k:<16} {a:>6} {b:>6}");
    }
    Ok(())
}

fn obtain_dataset(data: Option<&Path>, kind: DatasetKind, cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    let ds = match data {
        Some(dir) => load_dataset(dir)?,
        None => generate_dataset(kind, cfg.count.unwrap_or(kind.default_count()), cfg.seed()?, &cfg.scene)?,
    };
    let compatible = match kind {
        DatasetKind::ProprioSingle | DatasetKind::ProprioDouble => {
            matches!(ds.manifest.kind, DatasetKind::ProprioSingle | DatasetKind::ProprioDouble)
        }
        k => ds.manifest.kind == k,
    };
    if !compatible {
        return Err(CliError::config(format!("dataset holds {:?} samples, task needs {kind:?}", ds.manifest.kind)));
    }
    Ok(ds)
}

fn save_run(dir: &Path, t: &Trained, cfg: &ExperimentConfig, secs: f64) -> Result<(), CliError> {
    mkdir(dir)?;
    t.save(&dir.join("model.ckpt"))?;
    t.report.write(dir)?;
    write(&dir.join("config.json"), serde_json::to_string_pretty(&json!({ "hash": cfg.hash(), "config": cfg })).unwrap())?;
    write(&dir.join("timing.json"), json!({ "train_and_eval_secs": secs }).to_string())
}

fn print_report(r: &experiments::MetricsReport) {
    let split = match r.split {
        Split::Train => "train",
        Split::Test => "test",
    };
    println!("{} ({}) seed {} on {split} split", r.model, r.task, r.seed);
    if let Some(p) = &r.proprio {
        println!("  within 1 deg: {:.2}% of {}", 100.0 * p.within_1deg, p.samples);
        println!("  mean accumulative error: {:.3} mm", p.mean_accumulative_mm);
        println!("  mean sum |err|: {:.3} deg", p.mean_sum_abs_err_deg);
    }
    if let Some(c) = &r.classifier {
        println!("  accuracy: {:.2}% of {}", 100.0 * c.accuracy, c.samples);
        for row in &c.confusion {
            println!("  {row:?}");
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    common: Common,
    task: Option<TaskKind>,
    data: Option<PathBuf>,
    cameras: Option<usize>,
    arch: Option<SizeArch>,
    angles: Option<AngleSource>,
    proprio: Option<PathBuf>,
    count: Option<usize>,
    no_augment: bool,
) -> Result<(), CliError> {
    let mut cfg = resolve(&common)?;
    cfg.task = task.or(cfg.task);
    cfg.count = count.or(cfg.count);
    if let Some(c) = cameras {
        cfg.model.cameras = c;
    }
    if let Some(a) = arch {
        cfg.model.arch = a;
    }
    if let Some(a) = angles {
        cfg.model.angles = a;
    }
    if no_augment {
        cfg.model.augment = false;
    }
    cfg.validate()?;
    let task = cfg.task()?;
    let seed = cfg.seed()?;
    let schedule = cfg.schedule(task)?;
    let hash = cfg.hash();
    let kind = dataset_kind(task, cfg.model.cameras, false);
    let ds = obtain_dataset(data.as_deref(), kind, &cfg)?;
    let clock = Stopwatch::start();
    let trained = match task {
        TaskKind::Proprio => {
            let augment = if cfg.model.augment { cfg.augment.clone() } else { gelflex::datapipe::AugmentConfig::identity() };
            experiments::train_proprio(&ds, &ProprioRun { schedule, augment, geometry: cfg.geometry.clone() }, &hash)?
        }
        TaskKind::Tactile => experiments::train_tactile(&ds, &schedule, &hash)?,
        TaskKind::Size => {
            let angles = match (cfg.model.angles, &proprio) {
                (AngleSource::GroundTruth, _) => ds.manifest.samples.iter().map(|r| r.angles).collect(),
                (AngleSource::Predicted, Some(p)) => {
                    let (m, meta) = load_checkpoint(p)?;
                    let stats = meta.stats.ok_or_else(|| CliError::config("proprioception checkpoint lacks statistics"))?;
                    experiments::predicted_size_angles(&ds, &m, &stats)?
                }
                (AngleSource::Predicted, None) => {
                    return Err(CliError::config(
                        "size training on predicted angles needs --proprio <checkpoint> (or --angles ground_truth)",
                    ))
                }
            };
            experiments::train_size(&ds, cfg.model.arch, angles, cfg.model.angles, &schedule, &hash)?
        }
    };
    let secs = clock.secs();
    let name = match task {
        TaskKind::Size => format!("size-{}", serde_json::to_value(cfg.model.arch).unwrap().as_str().unwrap()),
        t => t.to_string(),
    };
    let dir = out_dir(&cfg, format!("runs/{name}-s{seed}"));
    save_run(&dir, &trained, &cfg, secs)?;
    print_report(&trained.report);
    println!("  wall time: {secs:.1} s");
    println!("checkpoint: {}", dir.join("model.ckpt").display());
    Ok(())
}

fn cmd_eval(common: Common, checkpoint: PathBuf, data: PathBuf, split: Split, proprio: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = resolve(&common)?;
    cfg.validate()?;
    let (model, meta) = load_checkpoint(&checkpoint)?;
    let ds = load_dataset(&data)?;
    let p = proprio.as_deref().map(load_checkpoint).transpose()?;
    let p_ref = match &p {
        Some((m, meta)) => {
            Some((m, meta.stats.as_ref().ok_or_else(|| CliError::config("proprioception checkpoint lacks statistics"))?))
        }
        None => None,
    };
    let report = experiments::evaluate_checkpoint(&model, &meta, &ds, split, &cfg.geometry, p_ref)?;
    print_report(&report);
    if let Some(dir) = &cfg.out {
        mkdir(dir)?;
        report.write(dir)?;
    }
    Ok(())
}

fn cmd_pipeline(common: Common, proprio: PathBuf, tactile: PathBuf, size: PathBuf, trials: Option<usize>) -> Result<(), CliError> {
    let mut cfg = resolve(&common)?;
    cfg.trials = trials.or(cfg.trials);
    let seed = cfg.seed()?;
    let trials = cfg.trials.unwrap_or(10);
    let p = load_checkpoint(&proprio)?;
    let scene = p.1.scene.clone();
    let models = experiments::pipeline_models(p, load_checkpoint(&tactile)?, load_checkpoint(&size)?)?;
    let outcomes = experiments::run_protocol(&models, &scene, trials, seed)?;
    let summary = experiments::summarize_protocol(&outcomes)?;
    let dir = out_dir(&cfg, format!("runs/pipeline-s{seed}"));
    mkdir(&dir)?;
    let mut csv = String::from("object,trial,shape,size_in,pred_shape,pred_size_in,shape_ok,size_ok,shape_conf,size_conf");
    for j in 0..6 {
        csv.push_str(&format!(",theta{j},pred_theta{j}"));
    }
    csv.push('\n');
    let sizes = gelflex::synthgen::SIZES_IN;
    for o in &outcomes {
        csv.push_str(&format!(
            "{},{},{:?},{},{:?},{},{},{},{:.6},{:.6}",
            o.object,
            o.trial,
            o.shape,
            sizes[o.size],
            o.predicted_shape,
            sizes[o.predicted_size],
            o.shape_correct() as u8,
            o.size_correct() as u8,
            o.shape_confidence,
            o.size_confidence
        ));
        for j in 0..6 {
            csv.push_str(&format!(",{:.4},{:.4}", o.angles[j], o.predicted_angles[j]));
        }
        csv.push('\n');
    }
    write(&dir.join("trials.csv"), csv.to_lowercase())?;
    let provenance = json!({
        "schema_version": experiments::REPORT_SCHEMA,
        "seed": seed,
        "config_hash": cfg.hash(),
        "trials_per_object": trials,
        "checkpoints": { "proprio": proprio, "tactile": tactile, "size": size },
        "summary": summary,
    });
    write(&dir.join("summary.json"), serde_json::to_string_pretty(&provenance).unwrap())?;
    println!("{} grasps: shape correct {}/{}, size correct {}/{}", summary.trials, summary.shape_correct, summary.trials, summary.size_correct, summary.trials);
    println!("trial log: {}", dir.join("trials.csv").display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { common, task, cameras, count, raw } => cmd_gen(common, task, cameras, count, raw),
        Command::Train { common, task, data, cameras, arch, angles, proprio, count, no_augment } => {
            cmd_train(common, task, data, cameras, arch, angles, proprio, count, no_augment)
        }
        Command::Eval { common, checkpoint, data, split, proprio } => cmd_eval(common, checkpoint, data, split, proprio),
        Command::Pipeline { common, proprio, tactile, size, trials } => cmd_pipeline(common, proprio, tactile, size, trials),
        Command::Report { common, dir } => {
            let out = common.out.clone().unwrap_or_else(|| dir.clone());
            report::cmd_report(&dir, &out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
