//! Run directory layout:
//!
//! ```text
//! <run>/config.json        config snapshot
//! <run>/metrics.csv        one row per epoch
//! <run>/summary.json       final evaluation
//! <run>/checkpoints/       epoch_NNNN.ckpt, final.ckpt
//! <run>/heatmaps/          snapshots of the first test images
//! <run>/.lock              held while a command writes here
//! ```

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::train::{run_from, EpochObserver, EpochRecord, EvalReport, RunOutcome, TrainState, METRICS_HEADER};
use crate::viz::write_visuals;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const HEATMAP_DIR: &str = "heatmaps";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
const LOCK_FILE: &str = ".lock";
const HEATMAP_IMAGES: usize = 4;

/// An exclusively held run directory; the lock is released on drop.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn open(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        match OpenOptions::new().write(true).create_new(true).open(root.join(LOCK_FILE)) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(Error::Locked(root.to_path_buf())),
            Err(e) => return Err(e.into()),
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoint_path(&self, epoch: u64) -> PathBuf {
        self.root.join(CHECKPOINT_DIR).join(format!("epoch_{epoch:04}.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(self.root.join(LOCK_FILE));
    }
}

/// Final metrics as written to `summary.json`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Summary {
    pub epochs: u64,
    pub param_count: usize,
    pub count: usize,
    pub top1: f64,
    pub top5: f64,
    pub stage1_top1: f64,
    pub counterfactual_gap: Option<f64>,
    pub localization: Option<f64>,
}

impl Summary {
    pub fn new(state: &TrainState, report: &EvalReport) -> Self {
        Self {
            epochs: state.epoch,
            param_count: state.model.param_count(),
            count: report.count,
            top1: report.top1,
            top5: report.top5,
            stage1_top1: report.stage1_top1,
            counterfactual_gap: report.counterfactual_gap,
            localization: report.localization,
        }
    }
}

/// Appends metric rows and writes periodic checkpoints as epochs finish.
struct Recorder<'a> {
    dir: &'a RunDir,
    cfg: &'a TrainConfig,
    metrics: std::fs::File,
    progress: &'a mut dyn EpochObserver,
}

impl EpochObserver for Recorder<'_> {
    fn epoch_done(&mut self, record: &EpochRecord, state: &TrainState) -> Result<()> {
        writeln!(self.metrics, "{}", record.csv_row())?;
        self.metrics.flush()?;
        let k = self.cfg.checkpoint_every;
        if k > 0 && state.epoch % k == 0 && state.epoch < self.cfg.epochs {
            Checkpoint::capture(state, self.cfg).save(&self.dir.checkpoint_path(state.epoch))?;
        }
        self.progress.epoch_done(record, state)
    }
}

/// Trains into `dir`: config snapshot, metrics, checkpoints, summary and
/// heatmaps for the first test images.
pub fn train_into(dir: &RunDir, cfg: &TrainConfig, train: &Dataset, test: &Dataset, progress: &mut dyn EpochObserver) -> Result<RunOutcome> {
    cfg.validate()?;
    let root = dir.root();
    std::fs::create_dir_all(root.join(CHECKPOINT_DIR))?;
    std::fs::write(root.join(CONFIG_FILE), cfg.to_json() + "\n")?;
    let mut metrics = std::fs::File::create(root.join(METRICS_FILE))?;
    writeln!(metrics, "{METRICS_HEADER}")?;
    let mut recorder = Recorder {
        dir,
        cfg,
        metrics,
        progress,
    };
    let outcome = run_from(TrainState::new(cfg)?, cfg, train, test, &mut recorder)?;
    Checkpoint::capture(&outcome.state, cfg).save(&dir.final_checkpoint())?;
    let summary = Summary::new(&outcome.state, &outcome.final_eval);
    std::fs::write(root.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    let shown: Vec<usize> = (0..test.len().min(HEATMAP_IMAGES)).collect();
    if !shown.is_empty() {
        write_visuals(&outcome.state.model, cfg, test, &shown, &root.join(HEATMAP_DIR))?;
    }
    Ok(outcome)
}
