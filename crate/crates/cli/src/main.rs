use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use voxfuse::commands;
use voxfuse::config::ScenarioConfig;
use voxfuse::io::fmt_g9;
use voxfuse::Error;

#[derive(Parser)]
#[command(name = "voxfuse", version, about = "Incremental semantic occupancy mapping on simulated scenes")]
struct Cli {
    /// Worker threads for per-frame parallel work.
    #[arg(long, global = true, env = "VOXFUSE_THREADS")]
    threads: Option<usize>,

    /// Print the effective config (defaults filled in) and exit. With no
    /// subcommand, prints the default config.
    #[arg(long, global = true)]
    dump_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode and write map, metrics and trace.
    Run { config: PathBuf },
    /// Run every fusion strategy with TLA/RCM on and off over several seeds.
    Ablate {
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Train the temporal fusion MLP on simulated episodes.
    TrainTla {
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a pose CSV and convert it into a trajectory file.
    ImportPoses {
        csv: PathBuf,
        /// Trajectory JSON for `trajectory.pose_file`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Config problems exit with 2, everything else with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. }) => 2,
        _ => 1,
    }
}

fn load(path: &Path) -> Result<ScenarioConfig> {
    match ScenarioConfig::load(path) {
        Ok(c) => Ok(c),
        Err(e @ Error::Config { .. }) => Err(anyhow::Error::new(e).context(format!("reading {}", path.display()))),
        Err(Error::Json(e)) => Err(anyhow::Error::new(Error::Config {
            path: String::new(),
            message: e.to_string(),
        })),
        Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads;
    let Some(command) = cli.command else {
        if cli.dump_config {
            println!("{}", ScenarioConfig::default().to_json());
            return Ok(());
        }
        anyhow::bail!("no command given; see --help");
    };
    if cli.dump_config {
        let path = match &command {
            Command::Run { config } | Command::Ablate { config, .. } | Command::TrainTla { config, .. } => config,
            Command::ImportPoses { .. } => anyhow::bail!("import-poses takes no config"),
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg = ScenarioConfig::from_json(&text).map_err(anyhow::Error::new)?;
        println!("{}", cfg.to_json());
        return Ok(());
    }
    match command {
        Command::Run { config } => {
            let cfg = load(&config)?;
            let report = commands::with_threads(threads, || commands::cmd_run(&cfg))??;
            println!("iou={} miou={}", fmt_g9(report.iou), fmt_g9(report.miou));
        }
        Command::Ablate { config, seeds } => {
            let cfg = load(&config)?;
            let (_, summary) = commands::with_threads(threads, || commands::cmd_ablate(&cfg, seeds))??;
            println!("strategy,tla,rcm,mean_iou,mean_miou");
            for s in summary {
                println!(
                    "{},{},{},{},{}",
                    s.strategy,
                    s.tla as u8,
                    s.rcm as u8,
                    fmt_g9(s.mean_iou),
                    fmt_g9(s.mean_miou)
                );
            }
        }
        Command::TrainTla { config, epochs, out } => {
            let cfg = load(&config)?;
            commands::with_threads(threads, || {
                commands::cmd_train_tla(&cfg, epochs, &out, |e, loss| println!("epoch={e} loss={}", fmt_g9(loss)))
            })??;
        }
        Command::ImportPoses { csv, out } => {
            let poses = commands::cmd_import_poses(&csv, out.as_deref())
                .with_context(|| format!("importing {}", csv.display()))?;
            println!("poses={}", poses.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
