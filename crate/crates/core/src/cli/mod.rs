//! Command-line front end: data generation, training, evaluation,
//! prediction and parameter sweeps.

pub mod config;
pub mod infer;
pub mod sweep;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

pub use config::RunConfig;
pub use infer::{evaluate, evaluate_oracle, predict_scene, predict_scene_with, score, segment_scene, EvalReport};
pub use sweep::{run_sweep, SweepRow};
pub use train::{train, Dataset, TrainLog, TrainOutcome};

use crate::data::{generate_dataset, read_predictions, read_ptsseg, write_predictions, Mode};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint};

#[derive(Debug, Parser)]
#[command(name = "spseg", version, about = "Joint instance and semantic point cloud segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Scene,
    Shape,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Scene => Mode::Scene,
            ModeArg::Shape => Mode::Shape,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its manifest.
    Gendata {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = ModeArg::Scene)]
        mode: ModeArg,
        /// Scene layout keys (room, boxes, spheres, walls, density).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint plus a TSV training log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Drop the self-prediction term (instance and semantic heads only).
        #[arg(long)]
        no_selfpred: bool,
        /// Training log path; defaults to `<out>.log.tsv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, saved predictions, or the ground truth itself.
    Eval {
        #[arg(long, required_unless_present_any = ["oracle", "predictions"])]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
        /// Report path; defaults to `report.tsv` in the working directory.
        #[arg(long, default_value = "report.tsv")]
        report: PathBuf,
        /// Score the ground truth against itself.
        #[arg(long, conflicts_with = "predictions")]
        oracle: bool,
        /// Directory with one `<scene>.ptspred` file per scene.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Predict one scene file.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Train and evaluate once per value of one parameter.
    Sweep {
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the table and series files.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Seeds averaged per value; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Default log path: the checkpoint path with `.log.tsv` appended.
pub fn default_log_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".log.tsv");
    PathBuf::from(s)
}

pub fn prediction_file_name(scene_file: &str) -> String {
    let stem = Path::new(scene_file)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| scene_file.to_string());
    format!("{stem}.ptspred")
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gendata {
            out,
            scenes,
            seed,
            mode,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            if scenes == 0 {
                warn!("--scenes 0: writing a manifest without scenes");
            }
            let m = generate_dataset(&out, scenes, seed, mode.into(), &cfg.scene_spec())?;
            info!("wrote {} train and {} val scenes to {}", m.train.len(), m.val.len(), out.display());
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            no_selfpred,
            log,
        } => {
            let cfg = RunConfig::load(&config)?;
            let dataset = Dataset::load(&data)?;
            let outcome = train(&cfg, &dataset, no_selfpred)?;
            save_checkpoint(&outcome.params, &out)?;
            let log_path = log.unwrap_or_else(|| default_log_path(&out));
            write_file(&log_path, &outcome.log.to_tsv())?;
            info!("checkpoint written to {}", out.display());
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            config,
            split,
            report,
            oracle,
            predictions,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            let dataset = Dataset::load(&data)?;
            cfg.mode = dataset.manifest.mode;
            let (scenes, names) = match split {
                Split::Train => (dataset.train.clone(), dataset.manifest.train.clone()),
                Split::Val => (dataset.val.clone(), dataset.manifest.val.clone()),
                Split::All => (
                    [dataset.train.clone(), dataset.val.clone()].concat(),
                    [dataset.manifest.train.clone(), dataset.manifest.val.clone()].concat(),
                ),
            };
            let result = if oracle {
                evaluate_oracle(&scenes)?
            } else if let Some(dir) = predictions {
                let preds = names
                    .iter()
                    .map(|n| read_predictions(&dir.join(prediction_file_name(n))).map(|p| infer::labels_from_predictions(&p)))
                    .collect::<Result<Vec<_>>>()?;
                score(scenes.iter().zip(&preds), &dataset.manifest.class_names)?
            } else {
                let params = load_checkpoint(ckpt.as_deref().expect("clap requires --ckpt"))?;
                evaluate(&params, &scenes, &cfg)?
            };
            write_file(&report, &result.text)?;
            print!("{}", result.text);
            Ok(())
        }
        Command::Predict {
            ckpt,
            input,
            output,
            config,
            mode,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(m) = mode {
                cfg.mode = m.into();
            }
            let params = load_checkpoint(&ckpt)?;
            let scene = read_ptsseg(&input)?;
            let labels = predict_scene(&params, &scene, &cfg)?;
            write_predictions(&output, &scene.coords, &labels.sem, &labels.ins)?;
            info!("{} points predicted into {}", scene.len(), output.display());
            Ok(())
        }
        Command::Sweep {
            param,
            values,
            config,
            data,
            out,
            seeds,
        } => {
            let cfg = RunConfig::load(&config)?;
            let dataset = Dataset::load(&data)?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let rows = run_sweep(&cfg, &dataset, &param, &values, &seeds)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let table = sweep::table_tsv(&rows);
            write_file(&out.join(format!("sweep_{param}.tsv")), &table)?;
            write_file(&out.join(format!("sweep_{param}.dat")), &sweep::series(&param, &rows))?;
            print!("{table}");
            Ok(())
        }
    }
}
