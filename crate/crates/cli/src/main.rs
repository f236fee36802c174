use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tkit::checks::Fault;
use tkit::commands::{self, EvalArgs, TrainArgs};
use tkit::config::Config;
use tkit::Result;

#[derive(Parser)]
#[command(name = "tkit", version, about = "Transducer training with sampled softmax")]
struct Cli {
    /// Configuration file (key=value); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides train.seed (or synth.seed for gen-data).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for training and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Number of utterances (default synth.count).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model and write its checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Held-out set; otherwise train.dev_fraction of --data is split off.
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Also write the training log here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Decode a dataset and report token error rate.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Per-utterance outputs as JSON lines.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Memory report CSV over a sweep of sample sizes.
    Memplot {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time and measure full versus sampled training steps.
    Bench {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle and invariant checks.
    Selftest {
        /// Deliberately corrupt gradients to show the checks can fail.
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
}

fn output(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::fs::File::create(p).map_err(|e| tkit::CliError::io(p, e))?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let mut stdout = std::io::stdout().lock();
    match &cli.command {
        Command::GenData { out, count } => commands::gen_data(&cfg, *count, cli.seed, out, &mut stdout)?,
        Command::Train { data, dev, out, log } => {
            let args = TrainArgs {
                data,
                dev: dev.as_deref(),
                checkpoint: out,
                seed: cli.seed,
                workers: cli.workers,
                log: log.as_deref(),
            };
            commands::train_cmd(&cfg, &args, &mut stdout)?
        }
        Command::Eval { checkpoint, data, out } => {
            let args = EvalArgs {
                checkpoint,
                data,
                outputs: out.as_deref(),
                workers: cli.workers,
            };
            commands::eval_cmd(&cfg, &args, &mut stdout)?
        }
        Command::Memplot { out } => {
            drop(stdout);
            commands::memplot(&cfg, &mut output(out.as_ref())?)?
        }
        Command::Bench { out } => {
            drop(stdout);
            commands::bench(&cfg, cli.seed, &mut output(out.as_ref())?)?
        }
        Command::Selftest { inject_sign_flip } => {
            let fault = if *inject_sign_flip { Fault::GradSignFlip } else { Fault::None };
            return commands::selftest(cli.seed.unwrap_or(0), fault, &mut stdout);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TKIT_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
