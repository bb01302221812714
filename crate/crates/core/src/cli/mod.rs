//! The `dvps` command line: argument parsing and one function per verb.

pub mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

pub use config::RunConfig;

use crate::datamodel::viz::render_ppm;
use crate::datamodel::{load_panoptic, Stage};
use crate::error::{Error, Result};
use crate::losses::{loss_csv, train_refiner, train_tracker, LossRecord, TrainOutcome, TrainState};
use crate::metrics::MetricReport;
use crate::model::{
    init_refiner, init_tracker, load_checkpoint, save_checkpoint, warm_start_heads, Checkpoint,
    ParamStore, RefinerConfig, TrackerConfig,
};
use crate::pipeline::{
    generate_dataset, infer_dataset, load_dataset, load_eval_pairs, save_dataset, save_predictions,
    Models,
};
use crate::selfcheck::{run_selfcheck, Fault};

pub const TRACKER_CHECKPOINT: &str = "tracker.ckpt";
pub const REFINER_CHECKPOINT: &str = "refiner.ckpt";
pub const TRACKER_LOSSES: &str = "tracker_loss.csv";
pub const REFINER_LOSSES: &str = "refiner_loss.csv";
pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const RUN_LOG: &str = "run.log";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TABLE: &str = "metrics.txt";

#[derive(Debug, Parser)]
#[command(
    name = "dvps",
    version,
    about = "Decoupled video panoptic segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set scene.noise=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with segmenter-stub outputs.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the referring tracker on frozen segmenter outputs.
    TrainTracker {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many iterations have been completed in total.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Train the temporal refiner on the outputs of a frozen tracker.
    TrainRefiner {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Tracker checkpoint.
        #[arg(long)]
        tracker: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Run the pipeline up to a stage and write panoptic predictions.
    Infer {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_stage)]
        stage: Option<Stage>,
        /// Comma-separated resolution factors.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
        /// Tracker checkpoint (tracker stage).
        #[arg(long)]
        tracker: Option<PathBuf>,
        /// Refiner checkpoint (refiner stage; carries its tracker).
        #[arg(long)]
        refiner: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Directory for metrics.json and metrics.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a video's id maps as PPM frames.
    Viz {
        #[arg(long)]
        video: PathBuf,
        /// Ground truth to render to the left of the prediction.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient, assignment and metric self-tests.
    Selfcheck {
        /// Deliberately break one suite (test hook).
        #[arg(long, value_enum)]
        inject_fault: Option<Fault>,
    },
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Command {
    /// Output directory, where `run.log` goes.
    pub fn out_dir(&self) -> Option<&Path> {
        match self {
            Command::GenData { out, .. }
            | Command::TrainTracker { out, .. }
            | Command::TrainRefiner { out, .. }
            | Command::Infer { out, .. }
            | Command::Viz { out, .. } => Some(out),
            Command::Eval { out, .. } => out.as_deref(),
            Command::Selfcheck { .. } => None,
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn echo_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    let text = cfg.to_json()?;
    log::info!("seed {}", cfg.seed);
    log::info!("resolved config:\n{text}");
    write(&out.join(RESOLVED_CONFIG), text)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => gen_data(&config.resolve()?, &out),
        Command::TrainTracker {
            config,
            data,
            out,
            resume,
            stop_after,
        } => cmd_train_tracker(
            &config.resolve()?,
            &data,
            &out,
            resume.as_deref(),
            stop_after,
        ),
        Command::TrainRefiner {
            config,
            data,
            tracker,
            out,
            resume,
            stop_after,
        } => {
            let tracker = tracker.ok_or_else(|| {
                Error::Missing("refiner training needs a tracker checkpoint (--tracker)".into())
            })?;
            cmd_train_refiner(
                &config.resolve()?,
                &data,
                &tracker,
                &out,
                resume.as_deref(),
                stop_after,
            )
        }
        Command::Infer {
            config,
            data,
            out,
            stage,
            scales,
            tracker,
            refiner,
        } => {
            let mut cfg = config.resolve()?;
            if let Some(s) = stage {
                cfg.infer.stage = s;
            }
            if let Some(s) = scales {
                cfg.infer.scales = s;
            }
            infer(&cfg, &data, &out, tracker.as_deref(), refiner.as_deref())
        }
        Command::Eval { pred, gt, out } => {
            let report = evaluate(&pred, &gt, out.as_deref())?;
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Viz { video, gt, out } => viz(&video, gt.as_deref(), &out),
        Command::Selfcheck { inject_fault } => {
            let report = run_selfcheck(inject_fault);
            print!("{}", report.to_text());
            if report.passed() {
                Ok(())
            } else {
                let failed: Vec<&str> = report
                    .suites
                    .iter()
                    .filter(|s| !s.passed)
                    .map(|s| s.name.as_str())
                    .collect();
                Err(Error::Integrity(format!(
                    "selfcheck failed: {}",
                    failed.join(", ")
                )))
            }
        }
    }
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    echo_config(cfg, out)?;
    let (manifest, samples) = generate_dataset(&cfg.dataset())?;
    save_dataset(out, &manifest, &samples)?;
    log::info!("wrote {} videos to {}", samples.len(), out.display());
    Ok(())
}

fn tracker_meta(cfg: &RunConfig) -> serde_json::Value {
    json!({ "tracker": cfg.tracker, "train": cfg.train_tracker })
}

fn refiner_meta(cfg: &RunConfig, tracker: &TrackerConfig) -> serde_json::Value {
    json!({ "tracker": tracker, "refiner": cfg.refiner, "train": cfg.train_refiner })
}

fn expect_stage(ck: &Checkpoint, stage: Stage, path: &Path) -> Result<()> {
    if ck.meta.stage != stage.name() {
        return Err(Error::Integrity(format!(
            "{} holds a {} checkpoint, expected {}",
            path.display(),
            ck.meta.stage,
            stage.name()
        )));
    }
    Ok(())
}

fn meta_field<T: serde::de::DeserializeOwned>(
    ck: &Checkpoint,
    key: &str,
    path: &Path,
) -> Result<T> {
    let v = ck.meta.config.get(key).ok_or_else(|| {
        Error::Integrity(format!("{}: checkpoint lacks {key} config", path.display()))
    })?;
    serde_json::from_value(v.clone())
        .map_err(|e| Error::json(format!("{}: {key} config", path.display()), e))
}

fn resume_state(
    path: &Path,
    stage: Stage,
    meta: &serde_json::Value,
    cfg: &crate::losses::TrainConfig,
) -> Result<TrainState> {
    let ck = load_checkpoint(path)?;
    expect_stage(&ck, stage, path)?;
    if &ck.meta.config != meta {
        return Err(Error::Config(format!(
            "{} was written with a different configuration",
            path.display()
        )));
    }
    TrainState::from_checkpoint(&ck, stage.name(), cfg)
}

/// Keeps rows of an earlier loss curve that precede `start`.
fn earlier_losses(path: &Path, start: usize) -> Vec<LossRecord> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .skip(1)
        .filter_map(|l| {
            let mut f = l.split(',');
            let iter = f.next()?.parse().ok()?;
            let loss = f.next()?.parse().ok()?;
            let lr = f.next()?.parse().ok()?;
            Some(LossRecord { iter, loss, lr })
        })
        .filter(|r| r.iter < start)
        .collect()
}

fn progress(rec: &LossRecord, _: &TrainState) -> Result<()> {
    log::info!("iter {} loss {:.6} lr {:e}", rec.iter, rec.loss, rec.lr);
    Ok(())
}

fn finish_training(
    outcome: TrainOutcome,
    start: usize,
    ck: Checkpoint,
    out: &Path,
    ck_name: &str,
    csv_name: &str,
) -> Result<()> {
    let mut records = earlier_losses(&out.join(csv_name), start);
    records.extend(outcome.losses);
    save_checkpoint(&out.join(ck_name), &ck)?;
    write(&out.join(csv_name), loss_csv(&records))?;
    log::info!(
        "checkpoint at iteration {} written to {}",
        ck.meta.iteration,
        out.join(ck_name).display()
    );
    Ok(())
}

pub fn cmd_train_tracker(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<()> {
    let (manifest, samples) = load_dataset(data)?;
    cfg.check_scene(&manifest.scene)?;
    create_dir(out)?;
    echo_config(cfg, out)?;
    let meta = tracker_meta(cfg);
    let state = match resume {
        Some(p) => resume_state(p, Stage::Tracker, &meta, &cfg.train_tracker)?,
        None => TrainState::new(init_tracker(&cfg.tracker, cfg.seed)?, &cfg.train_tracker),
    };
    let start = state.iteration;
    let outcome = train_tracker(
        &cfg.train_tracker,
        &cfg.tracker,
        &samples,
        state,
        stop_after,
        &mut progress,
    )?;
    let ck = outcome
        .state
        .to_checkpoint(Stage::Tracker.name(), meta, &ParamStore::new());
    finish_training(outcome, start, ck, out, TRACKER_CHECKPOINT, TRACKER_LOSSES)
}

/// Tracker parameters and configuration from a tracker checkpoint.
pub fn load_tracker(path: &Path) -> Result<(ParamStore, TrackerConfig)> {
    let ck = load_checkpoint(path)?;
    expect_stage(&ck, Stage::Tracker, path)?;
    let tcfg: TrackerConfig = meta_field(&ck, "tracker", path)?;
    Ok((ck.tensors.with_prefix("tracker."), tcfg))
}

/// Refiner and bundled tracker from a refiner checkpoint.
pub fn load_refiner(path: &Path) -> Result<Models> {
    let ck = load_checkpoint(path)?;
    expect_stage(&ck, Stage::Refiner, path)?;
    let tcfg: TrackerConfig = meta_field(&ck, "tracker", path)?;
    let rcfg: RefinerConfig = meta_field(&ck, "refiner", path)?;
    Ok(Models {
        tracker: Some((ck.tensors.with_prefix("tracker."), tcfg)),
        refiner: Some((ck.tensors.with_prefix("refiner."), rcfg)),
    })
}

pub fn cmd_train_refiner(
    cfg: &RunConfig,
    data: &Path,
    tracker: &Path,
    out: &Path,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<()> {
    if !tracker.is_file() {
        return Err(Error::Missing(format!(
            "tracker checkpoint {} does not exist",
            tracker.display()
        )));
    }
    let (tparams, tcfg) = load_tracker(tracker)?;
    let (manifest, samples) = load_dataset(data)?;
    let cfg = RunConfig {
        tracker: tcfg.clone(),
        ..cfg.clone()
    };
    cfg.check_scene(&manifest.scene)?;
    create_dir(out)?;
    echo_config(&cfg, out)?;
    let meta = refiner_meta(&cfg, &tcfg);
    let state = match resume {
        Some(p) => resume_state(p, Stage::Refiner, &meta, &cfg.train_refiner)?,
        None => {
            let mut init = init_refiner(&cfg.refiner, cfg.seed)?;
            warm_start_heads(&mut init, &tparams)?;
            TrainState::new(init, &cfg.train_refiner)
        }
    };
    let start = state.iteration;
    let outcome = train_refiner(
        &cfg.train_refiner,
        &cfg.refiner,
        (&tparams, &tcfg),
        &samples,
        state,
        stop_after,
        &mut progress,
    )?;
    let ck = outcome
        .state
        .to_checkpoint(Stage::Refiner.name(), meta, &tparams);
    finish_training(outcome, start, ck, out, REFINER_CHECKPOINT, REFINER_LOSSES)
}

/// Models needed for `stage`, loaded from the given checkpoints.
pub fn load_models(stage: Stage, tracker: Option<&Path>, refiner: Option<&Path>) -> Result<Models> {
    match stage {
        Stage::Prematch => Ok(Models::default()),
        Stage::Tracker => {
            let p = tracker.ok_or_else(|| {
                Error::Missing("stage tracker needs a tracker checkpoint (--tracker)".into())
            })?;
            Ok(Models {
                tracker: Some(load_tracker(p)?),
                refiner: None,
            })
        }
        Stage::Refiner => {
            let p = refiner.ok_or_else(|| {
                Error::Missing("stage refiner needs a refiner checkpoint (--refiner)".into())
            })?;
            load_refiner(p)
        }
    }
}

pub fn infer(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    tracker: Option<&Path>,
    refiner: Option<&Path>,
) -> Result<()> {
    let models = load_models(cfg.infer.stage, tracker, refiner)?;
    let (manifest, samples) = load_dataset(data)?;
    create_dir(out)?;
    echo_config(cfg, out)?;
    let preds = infer_dataset(&samples, &models, manifest.num_thing_classes(), &cfg.infer)?;
    save_predictions(out, &preds)?;
    log::info!(
        "stage {} predictions for {} videos written to {}",
        cfg.infer.stage.name(),
        preds.len(),
        out.display()
    );
    Ok(())
}

pub fn evaluate(pred: &Path, gt: &Path, out: Option<&Path>) -> Result<MetricReport> {
    let pairs = load_eval_pairs(pred, gt)?;
    let report = MetricReport::evaluate(&pairs)?;
    if let Some(out) = out {
        create_dir(out)?;
        write(&out.join(METRICS_JSON), report.to_json()? + "\n")?;
        write(&out.join(METRICS_TABLE), report.to_table())?;
    }
    Ok(report)
}

pub fn viz(video: &Path, gt: Option<&Path>, out: &Path) -> Result<()> {
    let pred = load_panoptic(video)?;
    let gt = gt.map(load_panoptic).transpose()?;
    if let Some(g) = &gt {
        if g.num_frames() != pred.num_frames() {
            return Err(Error::Integrity(format!(
                "ground truth has {} frames, prediction {}",
                g.num_frames(),
                pred.num_frames()
            )));
        }
    }
    create_dir(out)?;
    for t in 0..pred.num_frames() {
        let mut maps = Vec::new();
        if let Some(g) = &gt {
            maps.push(g.frame(t));
        }
        maps.push(pred.frame(t));
        write(&out.join(format!("frame_{t:04}.ppm")), render_ppm(&maps))?;
    }
    Ok(())
}
