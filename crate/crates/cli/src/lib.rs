//! Command-line front end: argument parsing and the subcommands.

mod commands;
mod error;
mod manifest;
mod svg;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use error::CliError;

#[derive(Parser)]
#[command(name = "geokernel", version, about = "Learn and apply geometric skill kernels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic labeled demonstrations.
    Gen(GenArgs),
    /// Train a kernel on demonstration traces.
    Train(TrainArgs),
    /// Score a trained kernel against labeled traces.
    Eval(EvalArgs),
    /// Select associations in one frame.
    Infer(InferArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
}

/// Hyperparameter overrides shared by the commands that use them.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub sigma0: Option<f64>,
    /// A positive number, or "auto".
    #[arg(long)]
    pub beta: Option<String>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub top_p: Option<usize>,
    #[arg(long)]
    pub cap: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args)]
pub struct GenArgs {
    /// Scene spec JSON: an object, or an array of objects.
    #[arg(long, conflicts_with = "preset")]
    pub spec: Option<PathBuf>,
    /// Use a named preset instead of a spec file.
    #[arg(long)]
    pub preset: Option<String>,
    /// Traces per spec, with consecutive seeds and trace ids.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Trace files (JSON lines).
    #[arg(long = "traces", num_args = 1.., required_unless_present = "from_manifest")]
    pub traces: Vec<PathBuf>,
    /// Training config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Repeat the run recorded in a manifest.
    #[arg(long, conflicts_with_all = ["traces", "config", "resume"])]
    pub from_manifest: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Kernel or training checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labeled trace files.
    #[arg(long = "traces", num_args = 1.., required = true)]
    pub traces: Vec<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct InferArgs {
    /// Kernel or training checkpoints; several form an ensemble.
    #[arg(long = "checkpoint", num_args = 1.., required = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Trace file holding the frame.
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub trace_id: u32,
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    /// SVG overlay of the confident associations.
    #[arg(long)]
    pub svg: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Gradient-check config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("GEOKERNEL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("GEOKERNEL_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Infer(a) => commands::infer(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
