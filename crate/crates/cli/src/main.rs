//! `vflr` — operator CLI for two-party vertical federated logistic
//! regression. Subcommands cover the whole lifecycle: key generation,
//! vertical data splitting, training (local duplex or one networked
//! party), evaluation, leakage audits, and live attack demos.
//!
//! Exit codes: 0 success, 1 usage, 2 runtime abort, 3 leakage-warning gate.

mod commands;
mod files;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use vflr_core::ahe::AheError;
use vflr_core::data::DataError;
use vflr_core::lr::LrError;
use vflr_core::protocol::ProtocolError;
use vflr_core::transport::TransportError;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
    /// Refused because the configuration meets a leakage condition.
    Leakage(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Leakage(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) | CliError::Leakage(m) => f.write_str(m),
        }
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> CliError {
        match e {
            ProtocolError::LeakageRefused { .. } => CliError::Leakage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<AheError> for CliError {
    fn from(e: AheError) -> CliError {
        match e {
            // a bad --bits value is an operator mistake, not a crash
            AheError::UnsupportedKeySize(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

macro_rules! runtime_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> CliError {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(
    DataError,
    LrError,
    TransportError,
    vflr_core::cluster::ClusterError,
    std::io::Error,
    serde_json::Error,
    csv::Error
);

#[derive(Parser)]
#[command(
    name = "vflr",
    version,
    about = "Two-party vertical federated logistic regression"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Generate a Paillier keypair (party A keeps the private key)
    Keygen(KeygenArgs),
    /// Split a dataset's columns into party A and party B shards
    SplitData(SplitArgs),
    /// Train a model: both parties locally, or one networked party
    Train(TrainArgs),
    /// Score trained models on data held by both parties
    Evaluate(EvaluateArgs),
    /// Audit a run shape for leakage conditions
    AnalyzeSecurity(AnalyzeArgs),
    /// Run a reconstruction attack end to end on a generated instance
    AttackDemo(AttackArgs),
}

#[derive(Args)]
pub struct KeygenArgs {
    /// Modulus size: 1024, 2048, or 3072
    #[arg(long, default_value_t = 1024)]
    pub bits: u32,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Deterministic key derivation (tests only)
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct SplitArgs {
    /// Source dataset: .csv (dense, `label` column) or LIBSVM
    #[arg(long)]
    pub input: PathBuf,
    /// Number of feature columns for party A; the rest go to B
    #[arg(long)]
    pub m_a: usize,
    /// Shuffle column assignment; omitted = first m_a columns to A
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Role {
    A,
    B,
    Duplex,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn as_bool(self) -> bool {
        self == Switch::On
    }
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub role: Role,
    /// Party A shard (duplex mode)
    #[arg(long)]
    pub data_a: Option<PathBuf>,
    /// Party B shard (duplex mode)
    #[arg(long)]
    pub data_b: Option<PathBuf>,
    /// This party's shard (networked roles a/b)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Party B's address to connect to (role a)
    #[arg(long)]
    pub peer: Option<String>,
    /// Address to listen on (role b)
    #[arg(long)]
    pub listen: Option<String>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Directory holding private_key.json from `keygen` (roles a/duplex);
    /// omitted = generate a fresh keypair for this run
    #[arg(long)]
    pub keys: Option<PathBuf>,
    /// JSON config file; flags override it, it overrides defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads per party (1 = serial backend)
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub max_iterations: Option<u64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub key_bits: Option<u32>,
    #[arg(long)]
    pub fraction_bits: Option<u32>,
    #[arg(long)]
    pub coeff_fraction_bits: Option<u32>,
    /// Gradient masks are uniform in ±2^bound
    #[arg(long)]
    pub mask_bound: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// off leaks B's gradients to A and requires --unsafe
    #[arg(long, value_enum)]
    pub masking: Option<Switch>,
    /// Standardize each party's columns before training
    #[arg(long, value_enum)]
    pub standardize: Option<Switch>,
    /// Accept configurations the leakage gate would refuse
    #[arg(long = "unsafe")]
    pub allow_unsafe: bool,
    /// Record per-iteration train AUC in the trace
    #[arg(long)]
    pub trace_auc: bool,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model_a: PathBuf,
    #[arg(long)]
    pub model_b: PathBuf,
    /// Training-set shards (reported as train metrics)
    #[arg(long)]
    pub data_a: PathBuf,
    #[arg(long)]
    pub data_b: PathBuf,
    /// Held-out shards (reported as test metrics)
    #[arg(long)]
    pub test_data_a: Option<PathBuf>,
    #[arg(long)]
    pub test_data_b: Option<PathBuf>,
    #[arg(long, default_value = "metrics.json")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    /// Shared sample count
    #[arg(long)]
    pub n: usize,
    /// Party A's feature count (0 = not visible to the auditor)
    #[arg(long, default_value_t = 0)]
    pub m_a: usize,
    /// Party B's feature count
    #[arg(long)]
    pub m_b: usize,
    /// Training rounds observed or planned
    #[arg(long)]
    pub rounds: usize,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub masking: Switch,
    /// Also write the JSON report here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AttackKind {
    /// B recovers A's residuals (and labels) when it has enough features
    Residuals,
    /// A recovers B's feature matrix from unmasked gradients
    Unmasked,
}

#[derive(Args)]
pub struct AttackArgs {
    #[arg(long, value_enum)]
    pub kind: AttackKind,
    /// Rows in the generated instance
    #[arg(long)]
    pub n: Option<usize>,
    /// Party B feature count in the generated instance
    #[arg(long)]
    pub m: Option<usize>,
    /// Training rounds (unmasked attack needs >= n)
    #[arg(long)]
    pub rounds: Option<u64>,
    /// For the unmasked demo: on shows the attack being defeated
    #[arg(long, value_enum)]
    pub masking: Option<Switch>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
