use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand, ValueEnum};

use splitreason::orchestrator::{Policy, RunMode};
use splitreason::perfsim::ExecMode;
use splitreason_cli::config::LoadedConfig;
use splitreason_cli::run::RunOverrides;
use splitreason_cli::{annotate, io, plotdata, resolve_out_dir, reward, run, simulate};

#[derive(Parser)]
#[command(
    name = "splitreason",
    version,
    about = "Cooperative small/large model reasoning toolkit"
)]
struct Cli {
    /// Tool configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for batch items.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    /// Streaming prefill overlapped with decoding.
    Pipelined,
    /// Streaming prefill between decode calls.
    NonPipelined,
}

#[derive(Subcommand)]
enum Command {
    /// Run cooperative generations and write runs.jsonl.
    Run {
        /// JSON-Lines file of {id?, question}.
        #[arg(long, conflicts_with = "question")]
        questions: Option<PathBuf>,
        /// A single inline question.
        #[arg(long)]
        question: Option<String>,
        /// learned-tags | never-offload | random-offload:p=P,seed=N[,mean=M]
        #[arg(long)]
        policy: Option<Policy>,
        /// Seed for the random policy; question i uses seed + i.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Annotate a corpus of traces and write annotations plus statistics.
    Annotate {
        /// JSON-Lines file of {question, trace, snippets?}.
        corpus: PathBuf,
    },
    /// Score completions and write rewards.jsonl.
    Reward {
        /// JSON-Lines file of {completion, gold}.
        completions: PathBuf,
    },
    /// Simulate latency scenarios and write breakdown and speedup CSVs.
    Simulate {
        scenarios: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Write a per-run offload raster CSV from run records.
    TracePlotdata {
        records: PathBuf,
        #[arg(long, default_value_t = 50)]
        bins: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    if cli.workers == 0 {
        bail!("--workers must be >= 1");
    }
    let loaded = match &cli.config {
        Some(p) => LoadedConfig::load(p)?,
        None => LoadedConfig::default(),
    };
    let out = resolve_out_dir(cli.out.as_deref(), &loaded);
    match cli.command {
        Command::Run {
            questions,
            question,
            policy,
            seed,
            mode,
        } => {
            let items = match (questions, question) {
                (Some(p), None) => run::load_questions(&p)?,
                (None, Some(q)) => run::inline_question(&q)?,
                _ => bail!("give --questions FILE or --question TEXT"),
            };
            let overrides = RunOverrides {
                policy,
                seed,
                mode: mode.map(|m| match m {
                    Mode::Pipelined => RunMode::Overlapped,
                    Mode::NonPipelined => RunMode::Sequential,
                }),
            };
            let records = run::cmd_run(&loaded, items, &overrides, cli.workers)?;
            let path = out.join("runs.jsonl");
            io::write_jsonl(&path, &records)?;
            let failed: Vec<_> = records.iter().filter(|r| r.failed()).collect();
            for r in &failed {
                eprintln!("run {}: {}", r.id, r.error.as_deref().unwrap_or_default());
            }
            println!(
                "{} runs, {} failed -> {}",
                records.len(),
                failed.len(),
                path.display()
            );
            Ok(if failed.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Annotate { corpus } => {
            let corpus = annotate::load_corpus(&corpus)?;
            let output = annotate::cmd_annotate(&loaded, &corpus, cli.workers)?;
            for w in &output.warnings {
                log::warn!("{w}");
            }
            annotate::write_outputs(&out, &output)?;
            println!("{}", annotate::summary_line(&output.stats));
            Ok(ExitCode::SUCCESS)
        }
        Command::Reward { completions } => {
            let lines = reward::cmd_reward(&completions, &loaded.tool.reward, cli.workers)?;
            let failed = lines
                .iter()
                .filter(|l| matches!(l, reward::RewardLine::Failed { .. }))
                .count();
            let path = out.join("rewards.jsonl");
            io::write_jsonl(&path, &lines)?;
            if failed > 0 {
                log::warn!("{failed} malformed lines");
            }
            println!(
                "{} lines scored, {failed} failed -> {}",
                lines.len() - failed,
                path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate { scenarios, mode } => {
            let mode = mode.map(|m| match m {
                Mode::Pipelined => ExecMode::Pipelined,
                Mode::NonPipelined => ExecMode::NonPipelined,
            });
            let output = simulate::cmd_simulate(&scenarios, &loaded.tool.sim, mode)?;
            io::write_csv(&out.join("breakdown.csv"), &output.breakdown)?;
            io::write_csv(&out.join("speedup.csv"), &output.speedup)?;
            print!("{}", simulate::render_table(&output.speedup));
            Ok(ExitCode::SUCCESS)
        }
        Command::TracePlotdata { records, bins } => {
            let rows = plotdata::cmd_trace_plotdata(&records, bins, &loaded.tool.run.config.tags)?;
            let path = out.join("raster.csv");
            io::write_csv(&path, &rows)?;
            println!("{} rows -> {}", rows.len(), path.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
