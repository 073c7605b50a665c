//! Command-line entry point. Exit codes: 0 success, 1 validation error,
//! 2 runtime failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;

use super::config::RunConfig;
use super::report::{Report, Status};
use super::run;
use crate::error::{Error, Result};
use crate::speaker::DecodingScheme;

#[derive(Debug, Parser)]
#[command(name = "convert-speak", version, about = "Convert semantic tokens between accents, then speak them")]
struct Cli {
    /// Flat `section.key = value` config file applied over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `KEY=VALUE` override, applied after the config file (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Start from the 12-layer, 500k-step configuration.
    #[arg(long, global = true)]
    paper_scale: bool,
    /// Log progress and timings to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SchemeArg {
    SingleStage,
    RvqTwoStage,
    Both,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the synthetic benchmark and write its corpora.
    Synth,
    /// Pre-train the converter on corrupted target-accent tokens.
    Pretrain,
    /// Fine-tune the converter on parallel pairs.
    Finetune,
    /// Train the speaker on target semantic and acoustic corpora.
    TrainSpeaker,
    /// Convert held-out source-accent tokens.
    Convert,
    /// Generate acoustic frames for a semantic corpus.
    Speak,
    /// Run every stage on the synthetic benchmark and evaluate.
    Pipeline,
    /// Mean LCSR of a hypothesis corpus against a reference corpus.
    EvalLcsr {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Decoding steps per second of audio for each scheme.
    BenchSteps {
        #[arg(long, default_value_t = 1.0)]
        duration: f64,
        #[arg(long, value_enum, default_value = "both")]
        scheme: SchemeArg,
    },
    /// Finite-difference check of the analytic gradient.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Full pipeline against no-pretraining and no-decoupling arms.
    Ablation,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::TrainSpeaker => "train-speaker",
            Command::Convert => "convert",
            Command::Speak => "speak",
            Command::Pipeline => "pipeline",
            Command::EvalLcsr { .. } => "eval-lcsr",
            Command::BenchSteps { .. } => "bench-steps",
            Command::GradCheck { .. } => "grad-check",
            Command::Ablation => "ablation",
        }
    }
}

struct StderrLogger;

impl log::Log for StderrLogger {
    fn enabled(&self, metadata: &log::Metadata) -> bool {
        metadata.level() <= log::max_level()
    }

    fn log(&self, record: &log::Record) {
        if self.enabled(record.metadata()) {
            eprintln!("[{}] {}", record.level(), record.args());
        }
    }

    fn flush(&self) {}
}

static LOGGER: StderrLogger = StderrLogger;

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = if cli.paper_scale {
        log::warn!("--paper-scale: 12-layer models for 500k steps take days on one CPU core");
        RunConfig::paper_scale()
    } else {
        RunConfig::default()
    };
    if let Some(path) = &cli.config {
        if !path.exists() {
            return Err(Error::MissingPath(path.clone()));
        }
        cfg.apply_flat(&std::fs::read_to_string(path)?, &path.display().to_string())?;
    }
    for s in &cli.set {
        cfg.set(s)?;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate(cli.paper_scale)?;
    Ok(cfg)
}

fn execute(cmd: &Command, cfg: &RunConfig) -> Result<Value> {
    let started = std::time::Instant::now();
    let value = match cmd {
        Command::Synth => run::synth(cfg),
        Command::Pretrain => run::pretrain_stage(cfg),
        Command::Finetune => run::finetune_stage(cfg),
        Command::TrainSpeaker => run::train_speaker_stage(cfg),
        Command::Convert => run::convert_stage(cfg),
        Command::Speak => run::speak_stage(cfg),
        Command::Pipeline => run::pipeline(cfg).map(|(v, _)| v),
        Command::EvalLcsr { hyp, reference } => run::eval_lcsr(hyp, reference),
        Command::BenchSteps { duration, scheme } => {
            let schemes: &[DecodingScheme] = match scheme {
                SchemeArg::SingleStage => &[DecodingScheme::SingleStage],
                SchemeArg::RvqTwoStage => &[DecodingScheme::RvqTwoStage],
                SchemeArg::Both => &[DecodingScheme::SingleStage, DecodingScheme::RvqTwoStage],
            };
            run::bench_steps(cfg, *duration, schemes)
        }
        Command::GradCheck { seed } => run::grad_check(*seed),
        Command::Ablation => run::ablation_suite(cfg).and_then(|a| Ok(serde_json::to_value(a)?)),
    }?;
    log::info!("{} finished in {:.1?}", cmd.name(), started.elapsed());
    Ok(value)
}

/// Parses `argv`, runs one subcommand, writes `<out>/<command>.json` and
/// returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let _ = log::set_logger(&LOGGER);
    log::set_max_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn });
    let name = cli.command.name();

    let (cfg, outcome) = match resolve_config(&cli) {
        Ok(cfg) => {
            let outcome = execute(&cli.command, &cfg).map_err(|e| (Status::of(&e), e.to_string()));
            (cfg, outcome)
        }
        Err(e) => {
            let mut fallback = RunConfig::default();
            if let Some(out) = &cli.out {
                fallback.output_dir = out.clone();
            }
            (fallback, Err((Status::ValidationError, e.to_string())))
        }
    };
    // A check that ran but did not pass is a runtime failure.
    let outcome = match outcome {
        Ok(v) if v.get("passed") == Some(&Value::Bool(false)) => {
            Err((Status::RuntimeError, "gradient check failed".to_string()))
        }
        other => other,
    };
    let report = Report::new(name, &cfg, outcome);
    if let Some(e) = &report.error {
        eprintln!("error: {e}");
    }
    if let Err(e) = report.write(&cfg.output_dir) {
        eprintln!("error: cannot write report: {e}");
        return Status::RuntimeError.exit_code();
    }
    report.status.exit_code()
}
