//! `operas`: runner, checker, and trace statistics for `.opml` models.
//!
//! Exit codes: 0 success, 1 model errors (diagnostics on stderr), 2 runtime
//! errors. Errors never surface as stack traces.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use operas_core::operas::OperasRunner;
use operas_core::pps::{BondMode, Engine, EngineOptions, StepMode};
use operas_core::trace::Trace;
use operas_core::xm::{run_stream_trace, CxmRunner};
use operas_dsl::{parse, ModelBody, ModelDocument};

mod stats;

#[derive(Parser)]
#[command(
    name = "operas",
    about = "Execution engine for population-membrane and state-machine models of dynamic multi-agent systems",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Max,
    Arb,
}

#[derive(Clone, Copy, ValueEnum)]
enum BondsArg {
    Dynamic,
    Static,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Jsonl,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a model file, run it, and write the trace.
    Run {
        file: PathBuf,
        /// Steps (pps, operas) or rounds (cxm); stream machines consume
        /// their declared stream instead.
        #[arg(long, default_value_t = 10)]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Parallelism of rule selection (pps models).
        #[arg(long, value_enum, default_value_t = ModeArg::Max)]
        mode: ModeArg,
        /// Bond maintenance (pps models); defaults to dynamic when the model
        /// declares bond-making rules and static otherwise.
        #[arg(long, value_enum)]
        bonds: Option<BondsArg>,
        /// Dying cells release their contents to the environment instead of
        /// discarding them.
        #[arg(long)]
        death_releases_objects: bool,
        #[arg(long, value_enum, default_value_t = FormatArg::Text)]
        format: FormatArg,
        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a jsonl trace: per-step populations, environment totals,
    /// link counts.
    Stats {
        trace: PathBuf,
        /// Emit CSV instead of an aligned table.
        #[arg(long)]
        csv: bool,
    },
    /// Parse and validate only.
    Check { file: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run {
            file,
            steps,
            seed,
            mode,
            bonds,
            death_releases_objects,
            format,
            out,
        } => run(file, steps, seed, mode, bonds, death_releases_objects, format, out),
        Command::Stats { trace, csv } => stats::stats_command(&trace, csv),
        Command::Check { file } => check(file),
    };
    ExitCode::from(code)
}

fn load_document(file: &PathBuf) -> Result<ModelDocument, u8> {
    let source = match fs::read_to_string(file) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error[E-IO] cannot read {}: {e}", file.display());
            return Err(1);
        }
    };
    match parse(&source) {
        Ok(doc) => {
            for w in &doc.warnings {
                eprintln!("{w}");
            }
            Ok(doc)
        }
        Err(diags) => {
            for d in diags {
                eprintln!("{d}");
            }
            Err(1)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run(
    file: PathBuf,
    steps: u64,
    seed: u64,
    mode: ModeArg,
    bonds: Option<BondsArg>,
    death_releases_objects: bool,
    format: FormatArg,
    out: Option<PathBuf>,
) -> u8 {
    let doc = match load_document(&file) {
        Ok(doc) => doc,
        Err(code) => return code,
    };
    let step_mode = match mode {
        ModeArg::Max => StepMode::MaximalParallel,
        ModeArg::Arb => StepMode::ArbitraryParallel,
    };
    let trace: Trace = match doc.body {
        ModelBody::Pps(model) => {
            let mut options = EngineOptions::for_model(&model);
            if let Some(b) = bonds {
                options.bonds = match b {
                    BondsArg::Dynamic => BondMode::Dynamic,
                    BondsArg::Static => BondMode::Static,
                };
            }
            options.death_releases_objects = death_releases_objects;
            let engine = match Engine::new(model, options) {
                Ok(e) => e,
                Err(e) => {
                    eprintln!("error[E-VALIDATE] {e}");
                    return 1;
                }
            };
            match engine.run(steps, step_mode, seed) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error[E-RUNTIME] {e}");
                    return 2;
                }
            }
        }
        ModelBody::Xm(xm) => match run_stream_trace(&xm.def, &xm.stream) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("error[E-RUNTIME] {e}");
                return 2;
            }
        },
        ModelBody::Cxm(system) => {
            let runner = match CxmRunner::new(system) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("error[E-VALIDATE] {e}");
                    return 1;
                }
            };
            match runner.run(steps, seed) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error[E-RUNTIME] {e}");
                    return 2;
                }
            }
        }
        ModelBody::Operas(system) => {
            let runner = match OperasRunner::new(system) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("error[E-VALIDATE] {e}");
                    return 1;
                }
            };
            match runner.run(steps, seed) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error[E-RUNTIME] {e}");
                    return 2;
                }
            }
        }
    };
    let rendered = match format {
        FormatArg::Text => trace.to_text(),
        FormatArg::Jsonl => trace.to_jsonl(),
    };
    match out {
        Some(path) => {
            if let Err(e) = fs::write(&path, rendered) {
                eprintln!("error[E-IO] cannot write {}: {e}", path.display());
                return 2;
            }
        }
        None => print!("{rendered}"),
    }
    0
}

fn check(file: PathBuf) -> u8 {
    match load_document(&file) {
        Ok(doc) => {
            let name = doc.name.as_deref().unwrap_or("(anonymous)");
            println!("ok: {} document {}", doc.kind, name);
            0
        }
        Err(code) => code,
    }
}
