use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use transgru::datamodel::{generate_synthetic, Dataset, Split, SynthConfig};
use transgru::engine::{ablate, evaluate, evaluate_late_fusion, fit_late_fusion_on, train, AblationGrid, Checkpoint, TrainConfig};
use transgru::objective::LateFusionFit;
use transgru::{Error, Result};

#[derive(Parser)]
#[command(name = "transgru", version, about = "Action anticipation with visual-semantic fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        /// SynthConfig JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write the selected checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; overrides `data` in the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-epoch history as JSON.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split and print the report JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Second checkpoint; the two are late-fused with weights fitted on val.
        #[arg(long)]
        fuse_with: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every cell of an ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Table JSON path; the text rendering goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_out(path: Option<&Path>, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    match path {
        Some(p) => fs::write(p, text + "\n").map_err(|e| Error::io(p, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn dataset_path(flag: Option<PathBuf>, cfg: &TrainConfig) -> Result<PathBuf> {
    flag.or_else(|| cfg.data.clone())
        .ok_or_else(|| Error::Config("no dataset: pass --data or set \"data\" in the config".into()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out } => {
            let cfg: SynthConfig = match config {
                Some(p) => read_config(&p)?,
                None => SynthConfig::default(),
            };
            let data = generate_synthetic(&cfg)?;
            data.save(&out)?;
            log::info!(
                "wrote {} / {} / {} samples to {}",
                data.train.len(),
                data.val.len(),
                data.test.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train { config, data, out, history } => {
            let cfg: TrainConfig = read_config(&config)?;
            let dataset = Dataset::load(dataset_path(data, &cfg)?)?;
            let outcome = train(&cfg, &dataset)?;
            outcome.checkpoint.save(&out)?;
            if let Some(h) = history {
                write_out(Some(&h), &outcome.history)?;
            }
            log::info!(
                "selected epoch {} (val top5 {:.4}, top1 {:.4})",
                outcome.checkpoint.epoch,
                outcome.checkpoint.val_top5,
                outcome.checkpoint.val_top1
            );
            Ok(())
        }
        Command::Eval { checkpoint, data, split, fuse_with, out } => {
            let split: Split = split.parse()?;
            let dataset = Dataset::load(&data)?;
            let a = Checkpoint::load(&checkpoint)?;
            let report = match fuse_with {
                None => evaluate(&a.model, &dataset, split)?,
                Some(p) => {
                    let b = Checkpoint::load(&p)?;
                    let w = fit_late_fusion_on(&a.model, &b.model, &dataset, &LateFusionFit::default())?;
                    log::info!("late fusion weights {:.4} / {:.4}", w.w_a, w.w_b);
                    evaluate_late_fusion(&a.model, &b.model, &dataset, split, w)?
                }
            };
            write_out(out.as_deref(), &report)
        }
        Command::Ablate { config, data, out } => {
            let grid: AblationGrid = read_config(&config)?;
            let dataset = Dataset::load(dataset_path(data, &grid.base)?)?;
            let table = ablate(&grid, &dataset);
            print!("{}", table.render());
            match out {
                Some(p) => write_out(Some(&p), &table),
                None => Ok(()),
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let body = json!({"error": "usage", "message": e.to_string().trim_end()});
            let _ = writeln!(std::io::stderr(), "{body}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = json!({"error": e.kind(), "message": e.to_string()});
            let _ = writeln!(std::io::stderr(), "{body}");
            ExitCode::FAILURE
        }
    }
}
