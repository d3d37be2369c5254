use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

#[derive(Parser, Debug)]
#[command(name = "percept-loop", version, about = "Pairwise studies, blind IQA training and IQA-guided enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Log level.
    #[arg(long, global = true, value_enum, default_value_t = Verbosity::Normal)]
    verbosity: Verbosity,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Verbosity {
    Quiet,
    Normal,
    Debug,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthetic corpora.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Pairwise preference studies.
    #[command(subcommand)]
    Study(StudyCmd),
    /// Blind quality model.
    #[command(subcommand)]
    Iqa(IqaCmd),
    /// Low-light enhancer.
    #[command(subcommand)]
    Enhance(EnhanceCmd),
    /// Evaluation reports.
    #[command(subcommand)]
    Eval(EvalCmd),
}

#[derive(Subcommand, Debug)]
enum CorpusCmd {
    /// Render references, low-light inputs and pseudo-enhanced variants plus a manifest and split.
    Synth(SynthArgs),
}

#[derive(Subcommand, Debug)]
enum StudyCmd {
    /// Serve the study HTTP API on 127.0.0.1.
    Serve(ServeArgs),
    /// Simulate subjects voting on a corpus.
    Simulate(SimulateArgs),
    /// Sanity-filter a vote log and write opinion scores as CSV.
    Aggregate(AggregateArgs),
}

#[derive(Subcommand, Debug)]
enum IqaCmd {
    /// Train the quality model on opinion scores.
    Train(IqaTrainArgs),
    /// Score every image in a directory.
    Score(IqaScoreArgs),
}

#[derive(Subcommand, Debug)]
enum EnhanceCmd {
    /// Train the enhancer against a frozen quality model.
    Train(EnhanceTrainArgs),
    /// Enhance every image in a directory.
    Apply(EnhanceApplyArgs),
}

#[derive(Subcommand, Debug)]
enum EvalCmd {
    /// SROCC and PLCC of model predictions against opinion scores.
    Correlations(CorrelationsArgs),
    /// Per-image score difference between two directories of enhanced images.
    Scorediff(ScorediffArgs),
    /// Preference percentages from a two-method vote log.
    Preference(PreferenceArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// JSON config (format_version, count, height, width, base_images, degradation, test_fraction).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corpus directory.
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing corpus.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct ServeArgs {
    /// JSON config (format_version, study_id, sanity_rate, min_consistency, methods, ui_dir).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for trial schedules.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corpus directory holding manifest.json.
    #[arg(long)]
    images: PathBuf,
    /// Append-only vote log (JSON lines); resumed if present.
    #[arg(long)]
    votes: PathBuf,
    /// Listening port.
    #[arg(long, default_value_t = 8080)]
    port: u16,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// JSON config (format_version, n_subjects, temperature).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corpus directory holding manifest.json.
    #[arg(long)]
    images: PathBuf,
    /// Vote log to write (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing output.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct AggregateArgs {
    /// JSON config (format_version, min_consistency).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Vote log (JSON lines).
    #[arg(long)]
    votes: PathBuf,
    /// Scores CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct IqaTrainArgs {
    /// JSON config (format_version, model, hyper, split).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corpus directory holding manifest.json.
    #[arg(long)]
    images: PathBuf,
    /// Opinion scores CSV from `study aggregate`.
    #[arg(long)]
    votes: PathBuf,
    /// Overrides hyper.epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Model directory.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing model.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct IqaScoreArgs {
    /// Quality model directory.
    #[arg(long)]
    model: PathBuf,
    /// Image file or directory of PNG/JPEG images.
    #[arg(long)]
    images: PathBuf,
    /// CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EnhanceTrainArgs {
    /// JSON config (format_version, train, split).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Frozen quality model directory.
    #[arg(long)]
    model: PathBuf,
    /// Corpus directory holding manifest.json.
    #[arg(long)]
    images: PathBuf,
    /// Overrides train.lambda.
    #[arg(long)]
    lambda: Option<f64>,
    /// Overrides train.epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Enhancer directory.
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing output.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct EnhanceApplyArgs {
    /// Enhancer directory.
    #[arg(long)]
    model: PathBuf,
    /// Image file or directory of PNG/JPEG images.
    #[arg(long)]
    images: PathBuf,
    /// Output directory; files keep their stem and become PNG.
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing output.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct CorrelationsArgs {
    /// JSON config (format_version, split).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Quality model directory.
    #[arg(long)]
    model: PathBuf,
    /// Corpus directory holding manifest.json.
    #[arg(long)]
    images: PathBuf,
    /// Opinion scores CSV.
    #[arg(long)]
    votes: PathBuf,
    /// Report path (.json or .csv); JSON on stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScorediffArgs {
    /// Quality model directory.
    #[arg(long)]
    model: PathBuf,
    /// Baseline directory followed by optimized directory; files pair by stem.
    #[arg(long, num_args = 2, value_names = ["BASELINE", "OPTIMIZED"])]
    images: Vec<PathBuf>,
    /// Report path (.json or .csv); JSON on stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PreferenceArgs {
    /// JSON config (format_version, ours).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Vote log of a two-method study.
    #[arg(long)]
    votes: PathBuf,
    /// Report path (.json or .csv); JSON on stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failed command; the variant picks the exit code.
#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<percept_core::Error> for Failure {
    fn from(e: percept_core::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

pub type CmdResult = Result<(), Failure>;

fn dispatch(command: Command) -> CmdResult {
    use commands::*;
    match command {
        Command::Corpus(CorpusCmd::Synth(a)) => corpus_synth(a),
        Command::Study(StudyCmd::Serve(a)) => study_serve(a),
        Command::Study(StudyCmd::Simulate(a)) => study_simulate(a),
        Command::Study(StudyCmd::Aggregate(a)) => study_aggregate(a),
        Command::Iqa(IqaCmd::Train(a)) => iqa_train(a),
        Command::Iqa(IqaCmd::Score(a)) => iqa_score(a),
        Command::Enhance(EnhanceCmd::Train(a)) => enhance_train(a),
        Command::Enhance(EnhanceCmd::Apply(a)) => enhance_apply(a),
        Command::Eval(EvalCmd::Correlations(a)) => eval_correlations(a),
        Command::Eval(EvalCmd::Scorediff(a)) => eval_scorediff(a),
        Command::Eval(EvalCmd::Preference(a)) => eval_preference(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbosity {
        Verbosity::Quiet => log::LevelFilter::Error,
        Verbosity::Normal => log::LevelFilter::Info,
        Verbosity::Debug => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    let result = percept_core::init_threads()
        .map_err(Failure::from)
        .and_then(|threads| {
            log::debug!("using {threads} worker threads");
            dispatch(cli.command)
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
