//! `driftlearn`: generate drifting streams, run continual-learning
//! experiments, and score transcripts.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data or I/O error,
//! 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use driftlearn_core::error::{Error, Result};
use driftlearn_core::eval::{bootstrap_ci, score_transcripts, DEFAULT_RESAMPLES};
use driftlearn_core::harness::{
    collect_runs, emit_reports, resolve_output, resolve_stream, results_table, run_grid, run_sequence,
    summarize, RunConfig, RunKey,
};
use driftlearn_core::selection::SnapshotStore;
use driftlearn_core::stream::{build_stream, export_stream, StreamSpecFile};

#[derive(Parser)]
#[command(name = "driftlearn", version, about = "Continual learning under speaker-population drift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic stream and export its manifest and frames.
    Gen {
        /// TOML stream specification (schedule and generator settings).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the configured method and strategy for every configured seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run methods × strategies × seeds and write the reports.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild reports from the run results under a directory.
    Report { dir: PathBuf },
    /// Score line-aligned reference and hypothesis token files.
    Score {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        /// Bootstrap resamples for the confidence interval.
        #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
        resamples: usize,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Inspect a run's snapshot store.
    Snapshots {
        #[command(subcommand)]
        action: SnapshotsAction,
    },
}

#[derive(Subcommand)]
enum SnapshotsAction {
    /// List snapshot records of a run directory.
    Ls { run_dir: PathBuf },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_config(path: &Path, out: Option<PathBuf>) -> Result<(RunConfig, PathBuf)> {
    let cfg = RunConfig::load(path)?;
    let dir = match out {
        Some(o) => resolve_output(&o),
        None => cfg.resolved_output_dir(),
    };
    Ok((cfg, dir))
}

fn finish_reports(grid: &driftlearn_core::GridResult, dir: &Path) -> Result<()> {
    for p in emit_reports(grid, dir)? {
        log::info!("wrote {}", p.display());
    }
    print!("{}", results_table(grid));
    for r in &grid.reductions {
        println!(
            "{} {}: relative WER reduction vs No CL {:+.2}%",
            r.strategy,
            r.method.display_name(),
            100.0 * r.relative_reduction
        );
    }
    Ok(())
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Gen { spec, seed, out } => {
            let file = match spec {
                Some(p) => StreamSpecFile::load(&p)?,
                None => StreamSpecFile::default(),
            };
            let schedule = file.schedule.resolve()?;
            let stream = build_stream(&schedule.spec, &file.gen, seed)?;
            let out = resolve_output(&out);
            export_stream(&stream, &out)?;
            println!(
                "wrote {} batches, {} dev, {} test utterances to {}",
                stream.batches.len(),
                stream.dev.len(),
                stream.test.len(),
                out.display()
            );
            for b in &stream.batches {
                println!("batch {:>2}: {:>3} speakers", b.roster.batch_index, b.roster.total());
            }
            Ok(0)
        }
        Command::Run { config, out } => {
            let (cfg, dir) = load_config(&config, out)?;
            let mut runs = Vec::new();
            for &seed in &cfg.seeds {
                let key = RunKey {
                    method: cfg.method,
                    strategy: cfg.strategy,
                    seed,
                    learning_rate: cfg.training.learning_rate,
                    reg_strength: cfg.training.reg_strength,
                };
                let stream = resolve_stream(&cfg.stream, seed)?;
                runs.push(run_sequence(&cfg, key, &stream, &dir.join("runs").join(key.dir_name()))?);
            }
            finish_reports(&summarize(cfg.hash(), runs, Vec::new()), &dir)?;
            Ok(0)
        }
        Command::Grid { config, out } => {
            let (cfg, dir) = load_config(&config, out)?;
            let grid = run_grid(&cfg, &dir)?;
            finish_reports(&grid, &dir)?;
            for f in &grid.failures {
                eprintln!("run {} failed: {}", f.key.dir_name(), f.error);
            }
            Ok(grid.failures.iter().map(|f| f.exit_code).max().unwrap_or(0))
        }
        Command::Report { dir } => {
            let dir = resolve_output(&dir);
            finish_reports(&collect_runs(&dir)?, &dir)?;
            Ok(0)
        }
        Command::Score {
            reference,
            hyp,
            resamples,
            level,
            seed,
        } => {
            let (scores, summary) = score_transcripts(&read(&reference)?, &read(&hyp)?)?;
            let ci = bootstrap_ci(&scores, resamples, level, seed)?;
            let out = serde_json::json!({ "summary": summary, "ci": ci });
            println!("{}", serde_json::to_string_pretty(&out).expect("plain values"));
            Ok(0)
        }
        Command::Snapshots {
            action: SnapshotsAction::Ls { run_dir },
        } => {
            let store = SnapshotStore::open(&resolve_output(&run_dir))?;
            print!("{}", store.listing());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
