use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

/// Train, embed, combine and evaluate shared-private sentence encoders.
#[derive(Parser)]
#[command(name = "mtlsent", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Sp,
    Asp,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Named (β, γ) preset, e.g. qqp_snli.
    #[arg(long = "beta-gamma")]
    pub beta_gamma: Option<String>,
    /// LSTM hidden size.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub word_vectors: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub common: Common,
    /// Bundle directory or manifest written by `train`.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Text file with one sentence per line.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Dataset TSV to embed instead of `--input`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<String>,
    /// Sentence column of a pair dataset (1 or 2).
    #[arg(long)]
    pub column: Option<usize>,
    /// shared, private:<task> or concat_all.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub word_vectors: Option<PathBuf>,
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PoolArg {
    Avg,
    Max,
}

#[derive(Args, Debug)]
pub struct CombineArgs {
    #[command(flatten)]
    pub common: Common,
    /// Embedding caches or contextual-vector files, in concatenation order.
    pub inputs: Vec<PathBuf>,
    /// L2-normalize each part before concatenating.
    #[arg(long)]
    pub normalize: bool,
    /// Pooling for contextual-vector inputs.
    #[arg(long, value_enum)]
    pub pool: Option<PoolArg>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub word_vectors: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum EncoderArg {
    Shared,
    Private,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub encoder: Option<EncoderArg>,
    #[arg(long)]
    pub word_vectors: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScopeArg {
    Ops,
    Encoder,
    Mtl,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(value_enum)]
    pub scope: ScopeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the JSON report into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Corrupt one op's backward rule (test fixture).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train an SP or ASP model and export its encoders.
    Train(TrainArgs),
    /// Embed sentences with a trained bundle.
    Embed(EmbedArgs),
    /// Concatenate embedding caches of one corpus.
    Combine(CombineArgs),
    /// Frozen-feature transfer evaluation.
    Eval(EvalArgs),
    /// Task-identity probe over embedding sets.
    Probe(ProbeArgs),
    /// Weighted-pooling analysis of encoder contributions.
    Analyze(Common),
    /// Accuracy as a function of training-set size.
    Curve(EvalArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Write synthetic tasks and word vectors.
    Synth(Common),
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn config(field: &str, msg: impl fmt::Display) -> Self {
        Self {
            code: 2,
            msg: format!("invalid config field `{field}`: {msg}"),
        }
    }

    pub fn runtime(msg: impl fmt::Display) -> Self {
        Self {
            code: 1,
            msg: msg.to_string(),
        }
    }
}

impl From<mtlsent::Error> for CliError {
    fn from(e: mtlsent::Error) -> Self {
        use mtlsent::Error as E;
        let code = match e {
            E::Config { .. } | E::Parse { .. } | E::Format(_) | E::Alignment(_) => 2,
            _ => 1,
        };
        Self { code, msg: e.to_string() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.cmd {
        Cmd::Train(a) => commands::train(a),
        Cmd::Embed(a) => commands::embed(a),
        Cmd::Combine(a) => commands::combine(a),
        Cmd::Eval(a) => commands::eval(a),
        Cmd::Probe(a) => commands::probe(a),
        Cmd::Analyze(a) => commands::analyze(a),
        Cmd::Curve(a) => commands::curve(a),
        Cmd::Gradcheck(a) => commands::gradcheck(a),
        Cmd::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
