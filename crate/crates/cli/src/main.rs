//! `meshloop` command-line driver.

mod commands;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "meshloop", version, about = "Recursive transformers with memory-buffer state highways")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
pub struct RunArgs {
    /// Run manifest (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides applied after the manifest, e.g. `--set steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write loss.csv, checkpoints and the effective config.
    Train(RunArgs),
    /// Run sequences through a checkpoint and dump the captured states.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = meshloop::diagnostics::DEFAULT_PROBE_SAMPLES)]
        samples: usize,
        /// Tokens per probe; defaults to the model's maximum length.
        #[arg(long)]
        seq_len: Option<usize>,
        /// Text to draw probes from. Defaults to the synthetic corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        corpus_seed: u64,
        #[arg(long, default_value_t = 200_000)]
        synthetic_bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate a state dump into metric tables.
    Report {
        #[arg(long)]
        dump: PathBuf,
        /// Where to write CSV/JSON tables; stdout only when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Metrics to compute; all when omitted.
        #[arg(long = "metric", value_parser = ["effort", "cka", "spectrum"])]
        metrics: Vec<String>,
        #[arg(long, default_value_t = meshloop::diagnostics::DEFAULT_THETA)]
        theta: f64,
    },
    /// Router parameter counts and parameter reduction for a plan.
    Params {
        #[arg(long)]
        plan: String,
        #[arg(long)]
        hidden: usize,
        #[arg(long, default_value = "mesh")]
        scheme: String,
        /// Buffer slots; defaults to N_loop + 3.
        #[arg(long)]
        buffer: Option<usize>,
    },
    /// Train the same config with B = (N_loop + 1) + k buffer slots.
    AblateBuffer {
        #[command(flatten)]
        run: RunArgs,
        /// Scratch slot counts to try.
        #[arg(long, value_delimiter = ',', default_values_t = [0usize, 1, 2, 3])]
        k: Vec<usize>,
    },
    /// Run the built-in oracle checks.
    Selftest,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(run) => commands::train(&run),
        Command::Probe {
            checkpoint,
            out,
            samples,
            seq_len,
            corpus,
            corpus_seed,
            synthetic_bytes,
            seed,
        } => commands::probe(&commands::ProbeArgs {
            checkpoint,
            out,
            samples,
            seq_len,
            corpus,
            corpus_seed,
            synthetic_bytes,
            seed,
        }),
        Command::Report {
            dump,
            out,
            metrics,
            theta,
        } => commands::report(&dump, out.as_deref(), &metrics, theta),
        Command::Params {
            plan,
            hidden,
            scheme,
            buffer,
        } => commands::params(&plan, hidden, &scheme, buffer),
        Command::AblateBuffer { run, k } => commands::ablate_buffer(&run, &k),
        Command::Selftest => selftest::run(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            // Library errors already embed their source in the message.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
