use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use hpl_reid::commands::{self, StageSelection};
use hpl_reid::config::{RunConfig, TaskSelection};

/// Unified text- and image-based person re-identification.
///
/// Every flag can also be set through an `HPL_` environment variable
/// (HPL_CONFIG, HPL_SEED, HPL_OUT, HPL_STAGE, HPL_TASK). HPL_LOG sets the log
/// filter (default "info").
#[derive(Parser)]
#[command(name = "hpl", version)]
struct Cli {
    /// TOML run config; the bundled desk preset when omitted.
    #[arg(long, global = true, env = "HPL_CONFIG")]
    config: Option<PathBuf>,
    /// Root seed override.
    #[arg(long, global = true, env = "HPL_SEED")]
    seed: Option<u64>,
    /// Output directory: data root for `generate`, run directory for
    /// `train`/`evaluate`/`ablate`, table directory for `report`.
    #[arg(long, global = true, env = "HPL_OUT")]
    out: Option<PathBuf>,
    #[arg(long, global = true, env = "HPL_STAGE", default_value = "all")]
    stage: Stage,
    /// Retrieval task(s) to evaluate; the config's `eval.task` when omitted.
    #[arg(long, global = true, env = "HPL_TASK")]
    task: Option<Task>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic manifest pair.
    Generate {
        #[arg(long)]
        identities: Option<usize>,
        #[arg(long)]
        images: Option<usize>,
    },
    /// Run Stage I, Stage II or both.
    Train,
    /// Evaluate the trained run.
    Evaluate,
    /// Train and evaluate the four component rows, then report.
    Ablate,
    /// Tabulate evaluated runs.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    I2i,
    T2i,
    Both,
}

fn run(cli: Cli) -> hpl_reid::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(task) = cli.task {
        cfg.eval.task = match task {
            Task::I2i => TaskSelection::I2i,
            Task::T2i => TaskSelection::T2i,
            Task::Both => TaskSelection::Both,
        };
    }
    match cli.command {
        Command::Generate { identities, images } => {
            let out = cli.out.unwrap_or_else(|| cfg.data.root.clone());
            let g = commands::generate(&cfg, &out, identities, images)?;
            println!("{}", g.t2i_path.display());
            println!("{}", g.i2i_path.display());
        }
        Command::Report { runs } => {
            let out = cli.out.unwrap_or_else(|| PathBuf::from("."));
            let rows = commands::report(&runs, &out)?;
            print!("{}", commands::render_table(&rows));
        }
        cmd => {
            if let Some(out) = cli.out {
                cfg.output.dir = out;
            }
            let data = commands::load_data(&cfg)?;
            match cmd {
                Command::Train => {
                    let stage = match cli.stage {
                        Stage::One => StageSelection::One,
                        Stage::Two => StageSelection::Two,
                        Stage::All => StageSelection::All,
                    };
                    let ckpt = commands::train(&cfg, &data, stage)?;
                    println!(
                        "stage {} done after {} epochs",
                        ckpt.meta.stage, ckpt.meta.epoch
                    );
                }
                Command::Evaluate => {
                    let res = commands::evaluate(&cfg, &data, cfg.eval.task)?;
                    println!("{}", serde_json::to_string_pretty(&res.results)?);
                }
                Command::Ablate => {
                    let rows = commands::ablate(&cfg, &data)?;
                    print!("{}", commands::render_table(&rows));
                }
                Command::Generate { .. } | Command::Report { .. } => unreachable!(),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HPL_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!(
                "error: kind=usage msg={}",
                first.trim_start_matches("error: ")
            );
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={} msg={}", e.kind(), e.detail());
            ExitCode::FAILURE
        }
    }
}
