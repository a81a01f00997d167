use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use finegrain::ablation::{run_ablation, to_csv, AblationConfig, Cell};
use finegrain::checkpoint::Checkpoint;
use finegrain::config::TrainConfig;
use finegrain::data::{export_ppm_folder, load_image_folder, Dataset};
use finegrain::run_dir::{train_into, RunDir, CHECKPOINT_DIR, CONFIG_FILE};
use finegrain::train::{evaluate, load_datasets, EpochObserver, EpochRecord, EvalReport, TrainState};
use finegrain::viz::write_visuals;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Root for run directories when `--out` is not given.
const RUNS_ENV: &str = "FINEGRAIN_RUNS";
const DEFAULT_RUNS: &str = "runs";

#[derive(Parser)]
#[command(name = "finegrain", version, about = "Two-stage fine-grained image classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config into a run directory.
    Train {
        config: PathBuf,
        /// Run directory; defaults to $FINEGRAIN_RUNS/<config stem>.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint and write eval.csv.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        source: Source,
        /// Also measure stage-1 accuracy under counterfactual attention.
        #[arg(long)]
        counterfactual_gap: bool,
        /// Where to write eval.csv; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write pipeline snapshots (5 files per image) for n test images.
    Viz {
        checkpoint: PathBuf,
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        out: PathBuf,
        #[arg(short, long, default_value_t = 4)]
        n: usize,
    },
    /// Run the module ablation grid and write ablation.csv.
    Ablate {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Export the configured synthetic benchmark as PPM folders.
    GenData {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct Source {
    /// Config the checkpoint was trained with; defaults to the run's config.json.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Evaluate on a class-per-subdirectory PPM folder instead of the
    /// config's test split.
    #[arg(long)]
    folder: Option<PathBuf>,
    /// Load even if the checkpoint was written under a different config.
    #[arg(long)]
    allow_config_mismatch: bool,
}

struct Progress {
    quiet: bool,
    start: Instant,
    label: String,
}

impl EpochObserver for Progress {
    fn epoch_done(&mut self, r: &EpochRecord, _: &TrainState) -> finegrain::Result<()> {
        if !self.quiet {
            let eval = r.eval.map_or_else(String::new, |(t1, t5)| format!(" top1 {t1:.4} top5 {t5:.4}"));
            eprintln!(
                "{}epoch {:>3} alpha {:.3} total {:.4}{eval} ({:.0}s)",
                self.label,
                r.epoch,
                r.alpha,
                r.total,
                self.start.elapsed().as_secs_f64()
            );
        }
        Ok(())
    }
}

fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_ENV).map_or_else(|| PathBuf::from(DEFAULT_RUNS), PathBuf::from)
}

fn default_out(config: &Path) -> PathBuf {
    let stem = config.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
    runs_root().join(stem)
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    TrainConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

/// `<run>` when the checkpoint sits in `<run>/checkpoints/`.
fn run_of(checkpoint: &Path) -> Option<PathBuf> {
    let parent = checkpoint.parent()?;
    (parent.file_name()? == CHECKPOINT_DIR).then(|| parent.parent().map(Path::to_path_buf))?
}

fn restore(checkpoint: &Path, source: &Source) -> Result<(TrainConfig, TrainState)> {
    let config_path = match (&source.config, run_of(checkpoint)) {
        (Some(p), _) => p.clone(),
        (None, Some(run)) => run.join(CONFIG_FILE),
        (None, None) => bail!("{} is not inside a run directory; pass --config", checkpoint.display()),
    };
    let cfg = load_config(&config_path)?;
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    let state = match ck.restore(&cfg, source.allow_config_mismatch) {
        Err(e @ finegrain::Error::DigestMismatch { .. }) => {
            return Err(e).context("pass --allow-config-mismatch to load anyway");
        }
        r => r?,
    };
    if ck.digest != cfg.digest() {
        eprintln!("warning: checkpoint was written under a different config; loading anyway");
    }
    Ok((cfg, state))
}

fn test_set(cfg: &TrainConfig, source: &Source) -> Result<Dataset> {
    match &source.folder {
        Some(root) => Ok(load_image_folder(root, cfg.image_side)?),
        None => Ok(load_datasets(cfg)?.1),
    }
}

fn print_report(r: &EvalReport) {
    println!("images      {}", r.count);
    println!("top1        {:.4}", r.top1);
    println!("top5        {:.4}", r.top5);
    println!("stage1_top1 {:.4}", r.stage1_top1);
    if let Some(l) = r.localization {
        println!("gaussian peak in object {:.4}", l);
    }
    if let Some(g) = r.counterfactual_gap {
        println!("counterfactual_gap {:.4}", g);
    }
}

fn eval_csv(r: &EvalReport) -> String {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    let mut header = "count,top1,top5,stage1_top1,localization".to_string();
    let mut row = format!("{},{},{},{},{}", r.count, r.top1, r.top5, r.stage1_top1, opt(r.localization));
    if let Some(g) = r.counterfactual_gap {
        header.push_str(",counterfactual_gap");
        row.push_str(&format!(",{g}"));
    }
    format!("{header}\n{row}\n")
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, out, quiet } => {
            let cfg = load_config(&config)?;
            let out = out.unwrap_or_else(|| default_out(&config));
            let dir = RunDir::open(&out)?;
            let (train, test) = load_datasets(&cfg)?;
            let mut progress = Progress {
                quiet,
                start: Instant::now(),
                label: String::new(),
            };
            let outcome = train_into(&dir, &cfg, &train, &test, &mut progress)?;
            print_report(&outcome.final_eval);
            println!("run directory {}", out.display());
        }
        Command::Eval {
            checkpoint,
            source,
            counterfactual_gap,
            out,
        } => {
            let (cfg, state) = restore(&checkpoint, &source)?;
            let test = test_set(&cfg, &source)?;
            let report = evaluate(&state.model, &test, &cfg, counterfactual_gap)?;
            let (path, _lock) = match (out, run_of(&checkpoint)) {
                (Some(p), _) => (p, None),
                (None, Some(run)) => (run.join("eval.csv"), Some(RunDir::open(&run)?)),
                (None, None) => bail!("{} is not inside a run directory; pass --out", checkpoint.display()),
            };
            std::fs::write(&path, eval_csv(&report)).with_context(|| format!("writing {}", path.display()))?;
            print_report(&report);
        }
        Command::Viz { checkpoint, source, out, n } => {
            if n == 0 {
                bail!("-n must be at least 1");
            }
            let (cfg, state) = restore(&checkpoint, &source)?;
            let test = test_set(&cfg, &source)?;
            let n = n.min(test.len());
            let indices: Vec<usize> = (0..n).map(|i| i * test.len() / n).collect();
            let files = write_visuals(&state.model, &cfg, &test, &indices, &out).with_context(|| format!("writing to {}", out.display()))?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
        Command::Ablate { config, out, quiet } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let grid = AblationConfig::from_json(&text)?;
            let out = out.unwrap_or_else(|| default_out(&config));
            let dir = RunDir::open(&out)?;
            std::fs::write(out.join("ablation.json"), grid.to_json())?;
            let (train, test) = load_datasets(&grid.base)?;
            let mut progress = Progress {
                quiet: true,
                start: Instant::now(),
                label: String::new(),
            };
            let start = Instant::now();
            let cells = run_ablation(&grid, &train, &test, &mut progress, &mut |c: &Cell| {
                if !quiet {
                    match &c.result {
                        Ok(m) => eprintln!("row {} seed {}: top1 {:.4} top5 {:.4} ({:.0}s)", c.row, c.seed, m.top1, m.top5, start.elapsed().as_secs_f64()),
                        Err(e) => eprintln!("row {} seed {}: failed: {e}", c.row, c.seed),
                    }
                }
            })?;
            let csv = to_csv(&cells);
            std::fs::write(dir.root().join("ablation.csv"), &csv)?;
            print!("{csv}");
            if cells.iter().all(|c| c.result.is_err()) {
                bail!("every ablation cell failed");
            }
        }
        Command::GenData { config, out } => {
            let cfg = load_config(&config)?;
            if cfg.synthetic_spec().is_none() {
                bail!("config data source is not synthetic");
            }
            let (train, test) = load_datasets(&cfg)?;
            let a = export_ppm_folder(&train, &out.join("train"))?;
            let b = export_ppm_folder(&test, &out.join("test"))?;
            println!("wrote {} train and {} test images to {}", a.len(), b.len(), out.display());
        }
    }
    Ok(())
}
