//! `polyvox`: corpus generation, curriculum training, synthesis, evaluation,
//! and the ablation grid, all driven by one config file per run.
//!
//! Exit codes: 0 success, 1 usage, 2 validation (bad config or violated
//! precondition), 3 runtime failure, 4 directional-check failure.

mod commands;
mod lock;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use polyvox_core::Error;

use commands::{SynthArgs, TrainMode};

#[derive(Parser)]
#[command(
    name = "polyvox",
    version,
    about = "Joint speech-text training lab on procedurally generated micro-languages",
    after_help = "Relative run directories can be re-rooted by setting POLYVOX_RUN_ROOT."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the micro-language corpus and its manifests into the run dir.
    GenCorpus {
        /// Run config file.
        #[arg(long)]
        config: PathBuf,
        /// Replace an existing corpus.
        #[arg(long)]
        force: bool,
    },
    /// Train curriculum stages (and the evaluation recognizer).
    Train {
        /// Run config file.
        #[arg(long)]
        config: PathBuf,
        /// Train exactly one stage; needs the previous stage's checkpoint.
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=3))]
        stage: Option<u32>,
        /// Train stages 1-3, then the evaluation recognizer if missing.
        #[arg(long)]
        all: bool,
        /// Train only the evaluation recognizer.
        #[arg(long)]
        eval_asr: bool,
    },
    /// Synthesize a signal from text with a stage-3 checkpoint.
    Synth {
        /// Run config file.
        #[arg(long)]
        config: PathBuf,
        /// Text to speak (must be non-empty).
        #[arg(long)]
        text: String,
        /// Language name; unknown names fall back to the OOV embedding.
        #[arg(long)]
        lang: String,
        /// Speaker name; omitted means the neutral OOV speaker.
        #[arg(long)]
        spk: Option<String>,
        /// Guidance weight; 1.0 is the pure conditional path.
        #[arg(long, default_value_t = 1.0)]
        guidance: f64,
        /// Output signal file; relative paths land under the run dir.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the stage-3 checkpoint on the test set and write reports.
    Eval {
        /// Run config file.
        #[arg(long)]
        config: PathBuf,
    },
    /// Train and score the unsupervised-injection grid over zero and 15m.
    Ablate {
        /// Run config file.
        #[arg(long)]
        config: PathBuf,
        /// Subset of grid rows, e.g. `1,4` (default: the config's rows).
        #[arg(long)]
        rows: Option<String>,
    },
}

/// Which exit code an error maps to: problems with what the user supplied
/// (config, preconditions, data) are validation; failures while doing the
/// work are runtime.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::InvalidArg(_)
        | Error::Contract(_)
        | Error::Data(_)
        | Error::Format(_) => 2,
        Error::Io { .. } | Error::Numeric(_) | Error::Shape { .. } => 3,
    }
}

fn parse_rows(s: &str) -> Result<Vec<u32>, String> {
    let mut rows = Vec::new();
    for part in s.split(',') {
        let r: u32 = part
            .trim()
            .parse()
            .map_err(|_| format!("--rows expects numbers 1-4 separated by commas, got {s:?}"))?;
        if !(1..=4).contains(&r) {
            return Err(format!("--rows entries must be in 1..=4, got {r}"));
        }
        if !rows.contains(&r) {
            rows.push(r);
        }
    }
    if rows.is_empty() {
        return Err("--rows must name at least one row".into());
    }
    rows.sort_unstable();
    Ok(rows)
}

fn run(cli: Cli) -> polyvox_core::Result<i32> {
    match cli.cmd {
        Cmd::GenCorpus { config, force } => commands::cmd_gen_corpus(&config, force),
        Cmd::Train { config, stage, all, eval_asr } => {
            let mode = match (stage, all, eval_asr) {
                (Some(s), false, false) => TrainMode::Stage(s),
                (None, true, false) => TrainMode::All,
                (None, false, true) => TrainMode::EvalAsr,
                _ => {
                    eprintln!("pass exactly one of --stage <1|2|3>, --all, --eval-asr");
                    return Ok(1);
                }
            };
            commands::cmd_train(&config, mode)
        }
        Cmd::Synth { config, text, lang, spk, guidance, out } => {
            if text.trim().is_empty() {
                eprintln!("--text must not be empty");
                return Ok(1);
            }
            commands::cmd_synth(&config, &SynthArgs { text, lang, spk, guidance, out })
        }
        Cmd::Eval { config } => commands::cmd_eval(&config),
        Cmd::Ablate { config, rows } => {
            let rows = match rows.as_deref().map(parse_rows).transpose() {
                Ok(r) => r,
                Err(msg) => {
                    eprintln!("{msg}");
                    return Ok(1);
                }
            };
            commands::cmd_ablate(&config, rows)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version print and succeed; real usage errors exit 1.
            if e.use_stderr() {
                let _ = e.print();
                return ExitCode::from(1);
            }
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(u8::try_from(code).unwrap_or(3)),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
