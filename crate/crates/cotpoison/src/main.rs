//! Command-line driver for the poisoning toolkit.
//!
//! Exit codes: 0 success, 2 config error, 3 stage failure, 4 clean-label
//! violations found by `validate`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cotpoison::corpus::{load_corpus, validate_clean_label, FieldMap};
use cotpoison::pipeline::{
    emit_report, run_defend, run_eval, run_forge, run_pipeline, BackendKind, PipelineConfig,
    PipelineError,
};
use cotpoison::sentinel::DetectorKind;

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;
const EXIT_VIOLATIONS: u8 = 4;

#[derive(Parser)]
#[command(
    name = "cotpoison",
    version,
    about = "Construct, evaluate, and detect clean-label poisoned reasoning datasets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides shared by the config-driven subcommands.
#[derive(Args)]
struct ConfigArgs {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's backend kind.
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fixed name for the run directory (default: timestamped).
    #[arg(long)]
    run_label: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig, PipelineError> {
        let mut config = PipelineConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(kind) = self.backend {
            config.backend.kind = kind;
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        if let Some(label) = &self.run_label {
            config.run_label = Some(label.clone());
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the full poisoning pipeline: carriers, forge, integrate,
    /// assemble, plus configured evaluations and defenses.
    Poison(ConfigArgs),
    /// Construct only the adversarial target set.
    Forge(ConfigArgs),
    /// Run only the configured evaluation suites.
    Eval(ConfigArgs),
    /// Run one defense over an existing labeled corpus.
    Defend {
        #[command(flatten)]
        common: ConfigArgs,
        /// Which detector to run (ppl | autorate).
        #[arg(long, value_parser = parse_detector)]
        detector: DetectorKind,
        /// Labeled corpus to score (e.g. a saved d_psn.jsonl).
        #[arg(long)]
        data: PathBuf,
    },
    /// Print the summary for a completed run directory.
    Report {
        /// Run directory containing run_manifest.json.
        #[arg(long)]
        run: PathBuf,
    },
    /// Check the clean-label contract between two corpora.
    Validate {
        /// The original (source) corpus.
        original: PathBuf,
        /// The possibly-poisoned corpus.
        poisoned: PathBuf,
    },
}

fn parse_detector(s: &str) -> Result<DetectorKind, String> {
    match s {
        "ppl" | "perplexity" => Ok(DetectorKind::Perplexity),
        "autorate" | "autorater" => Ok(DetectorKind::Autorater),
        other => Err(format!("unknown detector '{other}' (use ppl or autorate)")),
    }
}

fn exit_for(err: &PipelineError) -> u8 {
    match err {
        PipelineError::Config(_) => EXIT_CONFIG,
        _ => EXIT_STAGE,
    }
}

fn finish_run(outcome: Result<(cotpoison::pipeline::RunManifest, PathBuf), PipelineError>) -> u8 {
    match outcome {
        Ok((_, run_dir)) => {
            match emit_report(&run_dir) {
                Ok(summary) => print!("{summary}"),
                Err(err) => eprintln!("warning: could not build summary: {err}"),
            }
            println!("run directory: {}", run_dir.display());
            0
        }
        Err(err) => {
            eprintln!("error: {err}");
            exit_for(&err)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Poison(args) => match args.load() {
            Ok(config) => finish_run(run_pipeline(&config)),
            Err(err) => {
                eprintln!("error: {err}");
                exit_for(&err)
            }
        },
        Command::Forge(args) => match args.load() {
            Ok(config) => finish_run(run_forge(&config)),
            Err(err) => {
                eprintln!("error: {err}");
                exit_for(&err)
            }
        },
        Command::Eval(args) => match args.load() {
            Ok(config) => finish_run(run_eval(&config)),
            Err(err) => {
                eprintln!("error: {err}");
                exit_for(&err)
            }
        },
        Command::Defend {
            common,
            detector,
            data,
        } => match common.load() {
            Ok(config) => finish_run(run_defend(&config, detector, &data)),
            Err(err) => {
                eprintln!("error: {err}");
                exit_for(&err)
            }
        },
        Command::Report { run } => match emit_report(&run) {
            Ok(summary) => {
                print!("{summary}");
                0
            }
            Err(err) => {
                eprintln!("error: {err}");
                exit_for(&err)
            }
        },
        Command::Validate { original, poisoned } => {
            let field_map = FieldMap::default();
            let load = |path: &PathBuf| {
                load_corpus(path, &field_map).map_err(|e| {
                    eprintln!("error: {e}");
                    EXIT_CONFIG
                })
            };
            match (load(&original), load(&poisoned)) {
                (Ok(a), Ok(b)) => match validate_clean_label(&a, &b) {
                    Ok(violations) if violations.is_empty() => {
                        println!("clean-label check passed: no violations");
                        0
                    }
                    Ok(violations) => {
                        println!("clean-label check found {} violations:", violations.len());
                        for v in &violations {
                            println!("  {v}");
                        }
                        EXIT_VIOLATIONS
                    }
                    Err(err) => {
                        eprintln!("error: {err}");
                        EXIT_CONFIG
                    }
                },
                (Err(code), _) | (_, Err(code)) => code,
            }
        }
    };
    ExitCode::from(code)
}
