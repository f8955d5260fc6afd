//! Command-line surface of the `grpg` binary.
//!
//! Every subcommand is a pure function of its flags, config and seeds, so
//! rerunning with the same arguments rewrites byte-identical files.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod commands;

pub use commands::{Manifest, ManifestPrompt};

#[derive(Debug, Parser)]
#[command(name = "grpg", version, about = "Region-aware golden-noise adapters on a desk-scale surrogate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic training corpus.
    GenCorpus(GenCorpusArgs),
    /// Train adapters on a corpus.
    Train(TrainArgs),
    /// Predict golden noise for the prompts of a manifest.
    Predict(PredictArgs),
    /// Score checkpoints on the held-out split of a corpus.
    Eval(EvalArgs),
    /// Render metric tables.
    Report(ReportArgs),
    /// Run the built-in invariant suite.
    Selftest,
}

#[derive(Debug, Args)]
struct GenCorpusArgs {
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of genuinely multi-concept prompts.
    #[arg(long)]
    mix: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// film_only, v3 or v4.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Defaults to the checkpoint path with a `.history.csv` extension.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Checkpoint whose surrogate and adapters start the run.
    #[arg(long)]
    warm_start: Option<PathBuf>,
    /// Silence config-hash mismatch warnings.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON prompt manifest.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the manifest's seed count.
    #[arg(long)]
    seeds: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Repeat to score several variants side by side.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Config whose eval section replaces the checkpoint's.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seeds: Option<usize>,
    /// Leave out the adapter-free baseline.
    #[arg(long)]
    no_baseline: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Per-sample metric CSV written by `eval`.
    #[arg(long)]
    metrics: PathBuf,
    /// Aggregate CSV output.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Text table output; the table is always printed.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Emit the three-row variant ablation instead of the main table.
    #[arg(long)]
    ablation: bool,
    #[arg(long)]
    per_category: bool,
    /// Config used for ablation parameter counts.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus(_) => "gen-corpus",
            Command::Train(_) => "train",
            Command::Predict(_) => "predict",
            Command::Eval(_) => "eval",
            Command::Report(_) => "report",
            Command::Selftest => "selftest",
        }
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit status: 0 on success, 1 on a runtime failure, 2 on bad
/// usage.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let name = cli.command.name();
    let run = || match cli.command {
        Command::GenCorpus(a) => commands::gen_corpus(a),
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Eval(a) => commands::eval(a),
        Command::Report(a) => commands::report(a),
        Command::Selftest => commands::selftest(),
    };
    let result = if grpg_core::training::deterministic_mode() {
        match rayon::ThreadPoolBuilder::new().num_threads(1).build() {
            Ok(pool) => pool.install(run),
            Err(e) => Err(e.into()),
        }
    } else {
        run()
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("grpg: error[{name}]: {e:#}");
            1
        }
    }
}
