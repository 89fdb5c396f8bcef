use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alphaforge::checkpoint::Checkpoint;
use alphaforge::config::RunConfig;
use alphaforge::error::RunError;
use alphaforge::par;
use alphaforge::runner::{cmd_eval, cmd_export_pool, cmd_synth, cmd_train, CHECKPOINT_FILE};
use clap::{Args, Parser, Subcommand};

/// Mine formulaic alpha factors with a policy-gradient learner.
#[derive(Parser)]
#[command(name = "alphaforge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a factor generator; resumes when given --checkpoint.
    Train(Common),
    /// Score a checkpoint's factor pool on the test split.
    Eval(Common),
    /// Write a synthetic panel and its targets.
    Synth(Common),
    /// Write a checkpoint's factor pool as CSV.
    ExportPool(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to resume from or read.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Seed, replacing the configured seed or seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (a file for export-pool).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<(), RunError> {
    if let Ok(v) = std::env::var("ALPHAFORGE_THREADS") {
        let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            RunError::Config(format!(
                "ALPHAFORGE_THREADS must be a positive integer, got `{v}`"
            ))
        })?;
        par::init_threads(n);
    }
    match command {
        Command::Train(a) => {
            let cfg = match (&a.config, &a.checkpoint) {
                (Some(path), _) => RunConfig::load(path)?,
                (None, Some(ck)) => Checkpoint::load(ck)?.meta.config,
                (None, None) => {
                    return Err(RunError::Config(
                        "train needs --config or --checkpoint".into(),
                    ))
                }
            };
            let out = match (&a.out, &a.checkpoint) {
                (Some(out), _) => out.clone(),
                (None, Some(ck)) => ck.parent().unwrap_or(Path::new(".")).to_path_buf(),
                (None, None) => PathBuf::from("out"),
            };
            for s in cmd_train(&cfg, &out, a.seed, a.checkpoint.as_deref())? {
                let ic = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
                let row = s.last_row;
                println!(
                    "seed {} steps {} train IC {} valid IC {} pool {} -> {}",
                    s.seed,
                    s.env_steps,
                    ic(row.and_then(|r| r.train_ic)),
                    ic(row.and_then(|r| r.valid_ic)),
                    s.pool.len(),
                    s.out_dir.display()
                );
            }
            Ok(())
        }
        Command::Eval(a) => {
            let ck = a
                .checkpoint
                .ok_or_else(|| RunError::Config("eval needs --checkpoint".into()))?;
            let ck = if ck.is_dir() {
                ck.join(CHECKPOINT_FILE)
            } else {
                ck
            };
            let cfg = a.config.as_deref().map(RunConfig::load).transpose()?;
            let r = cmd_eval(&ck, cfg.as_ref(), a.out.as_deref())?;
            let ic = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            println!(
                "test IC {} RankIC {} pool {} days {}..{} ({})",
                ic(r.test_ic),
                ic(r.test_rank_ic),
                r.pool_size,
                r.test_days[0],
                r.test_days[1],
                r.status
            );
            Ok(())
        }
        Command::Synth(a) => {
            let cfg = match &a.config {
                Some(path) => RunConfig::load(path)?,
                None => RunConfig::default(),
            };
            let out = a.out.unwrap_or_else(|| PathBuf::from("."));
            let (panel, targets) = cmd_synth(&cfg, a.seed.unwrap_or(cfg.seed), &out)?;
            println!("{} {}", panel.display(), targets.display());
            Ok(())
        }
        Command::ExportPool(a) => {
            let ck = a
                .checkpoint
                .ok_or_else(|| RunError::Config("export-pool needs --checkpoint".into()))?;
            let ck = if ck.is_dir() {
                ck.join(CHECKPOINT_FILE)
            } else {
                ck
            };
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            cmd_export_pool(&ck, a.out.as_deref(), &mut lock)?;
            lock.flush()?;
            Ok(())
        }
    }
}
