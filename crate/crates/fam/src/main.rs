//! Command-line entry point: training runs, checkpoint evaluation,
//! trajectory/embedding exports, and metric-log comparison plots.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fam::config::RunConfig;
use fam::env::EnvConfig;
use fam::error::FamError;
use fam::eval;
use fam::plot::{plot_groups, read_metric_log, SeriesGroup};
use fam::trainer::{self, Checkpoint};

#[derive(Parser)]
#[command(name = "fam", about = "Multi-agent RL with fact-based agent modeling", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutArg {
    /// Output directory (default: $FAM_OUT_DIR or ./fam_out)
    #[arg(long)]
    out: Option<PathBuf>,
}

impl OutArg {
    fn resolve(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| {
            std::env::var_os("FAM_OUT_DIR")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("fam_out"))
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train an algorithm variant and write metrics and checkpoints
    Train {
        /// Flat key-value config file (defaults apply for missing keys)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one config key, e.g. --override seed=3 (repeatable)
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Shorthand for --override train.seed=N
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from a checkpoint file instead of initializing
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Evaluate a checkpoint and write/print the report
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Greedy actions and posterior-mean latents
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        deterministic: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Export per-step entity positions, rewards, and actions
    ExportTraj {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        deterministic: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Export per-step encoder posteriors (mu, log_sigma, z) per agent
    ExportEmb {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        deterministic: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Plot mean curves with 25-75% quartile bands from metric logs
    Plot {
        /// One series per flag: NAME=log1.tsv,log2.tsv,... (repeatable)
        #[arg(long, value_name = "NAME=LOG,...", required = true)]
        series: Vec<String>,
        /// Metric column to plot
        #[arg(long, default_value = "mean_episode_return")]
        key: String,
        #[command(flatten)]
        out: OutArg,
    },
}

/// Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
fn exit_code_for(err: &FamError) -> u8 {
    match err {
        FamError::Config(_) | FamError::Input(_) => 2,
        _ => 1,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, FamError> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| FamError::Config(format!("read {}: {e}", p.display())))?;
            RunConfig::from_text(&text)
        }
        None => Ok(RunConfig::new(
            EnvConfig::cn(5, 5),
            fam::config::Algorithm::Fam,
        )),
    }
}

fn cmd_train(
    config: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    checkpoint: Option<&Path>,
    out_root: &Path,
) -> Result<(), FamError> {
    if let Some(cp_path) = checkpoint {
        let cp = Checkpoint::load(cp_path)?;
        let run_dir = run_dir(out_root, &cp.config);
        let artifacts = trainer::resume(cp, &run_dir)?;
        println!("resumed into {}", run_dir.display());
        println!("metric log: {}", artifacts.metric_log.display());
        return Ok(());
    }
    let mut cfg = load_config(config)?;
    for ov in overrides {
        cfg.apply_override(ov)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let run_dir = run_dir(out_root, &cfg);
    let artifacts = trainer::run(&cfg, &run_dir)?;
    println!("run directory: {}", run_dir.display());
    println!("metric log: {}", artifacts.metric_log.display());
    println!("final checkpoint: {}", artifacts.final_checkpoint.display());
    if let Some(last) = artifacts.metric_rows.last() {
        println!(
            "final cycle: step {} mean_episode_return {}",
            last.step, last.mean_episode_return
        );
    }
    Ok(())
}

fn run_dir(out_root: &Path, cfg: &RunConfig) -> PathBuf {
    out_root.join(format!(
        "{}_{}_seed{}",
        cfg.algorithm.name(),
        cfg.env.task.name(),
        cfg.seed
    ))
}

fn cmd_eval(
    checkpoint: &Path,
    episodes: usize,
    deterministic: bool,
    seed: u64,
    out_root: &Path,
) -> Result<(), FamError> {
    let cp = Checkpoint::load(checkpoint)?;
    let report = eval::evaluate(&cp, episodes, deterministic, seed)?;
    let text = report.to_text();
    std::fs::create_dir_all(out_root).map_err(FamError::Io)?;
    let path = out_root.join("eval_report.txt");
    std::fs::write(&path, &text).map_err(FamError::Io)?;
    print!("{text}");
    println!("report written to {}", path.display());
    Ok(())
}

fn cmd_export(
    traj: bool,
    checkpoint: &Path,
    episodes: usize,
    deterministic: bool,
    seed: u64,
    out_root: &Path,
) -> Result<(), FamError> {
    let cp = Checkpoint::load(checkpoint)?;
    std::fs::create_dir_all(out_root).map_err(FamError::Io)?;
    let path = out_root.join(if traj { "trajectories.tsv" } else { "embeddings.tsv" });
    if traj {
        eval::export_trajectories(&cp, episodes, deterministic, seed, &path)?;
    } else {
        eval::export_embeddings(&cp, episodes, deterministic, seed, &path)?;
    }
    println!("written {}", path.display());
    Ok(())
}

fn cmd_plot(series: &[String], key: &str, out_root: &Path) -> Result<(), FamError> {
    let mut groups = vec![];
    for spec in series {
        let (name, paths) = spec
            .split_once('=')
            .ok_or_else(|| FamError::Input(format!("series '{spec}' is not NAME=log,...")))?;
        let logs = paths
            .split(',')
            .map(|p| read_metric_log(Path::new(p.trim())))
            .collect::<Result<Vec<_>, _>>()?;
        groups.push(SeriesGroup {
            name: name.to_string(),
            logs,
        });
    }
    std::fs::create_dir_all(out_root).map_err(FamError::Io)?;
    let path = out_root.join(format!("{key}.svg"));
    plot_groups(&groups, key, &path)?;
    println!("written {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train {
            config,
            overrides,
            seed,
            checkpoint,
            out,
        } => cmd_train(
            config.as_deref(),
            overrides,
            *seed,
            checkpoint.as_deref(),
            &out.resolve(),
        ),
        Command::Eval {
            checkpoint,
            episodes,
            deterministic,
            seed,
            out,
        } => cmd_eval(checkpoint, *episodes, *deterministic, *seed, &out.resolve()),
        Command::ExportTraj {
            checkpoint,
            episodes,
            deterministic,
            seed,
            out,
        } => cmd_export(true, checkpoint, *episodes, *deterministic, *seed, &out.resolve()),
        Command::ExportEmb {
            checkpoint,
            episodes,
            deterministic,
            seed,
            out,
        } => cmd_export(false, checkpoint, *episodes, *deterministic, *seed, &out.resolve()),
        Command::Plot { series, key, out } => cmd_plot(series, key, &out.resolve()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
