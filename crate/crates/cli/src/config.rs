//! Command-line arguments; each subcommand doubles as a JSON run config.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use orthoiqa::attacks::AttackKind;
use orthoiqa::defense::PruneCriterion;
use orthoiqa::metrics::DEFAULT_EPS_GRID;
use serde::{Deserialize, Serialize};

use crate::rational::Rational;

#[derive(Debug, Parser)]
#[command(name = "oiqa", version, about = "Robustness toolkit for no-reference image quality regressors")]
pub struct Cli {
    /// Worker threads (falls back to OIQA_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Directory that receives run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,

    /// Run the subcommand described by a JSON config file.
    #[arg(long, conflicts_with = "replay")]
    pub config: Option<PathBuf>,

    /// Re-run a recorded provenance file and check the outputs match.
    #[arg(long)]
    pub replay: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Option<Command>,
}

/// The resolved configuration of one run.
#[derive(Clone, Debug, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic quality-labelled dataset.
    GenData(GenDataArgs),
    /// Train the toy regressor on a dataset.
    Train(TrainArgs),
    /// Per-layer spectral norms and block placement ratios.
    Certify(CertifyArgs),
    /// Insert a RobustBlock, prune, and fine-tune.
    Defend(DefendArgs),
    /// Attack a model at one ε.
    Attack(AttackArgs),
    /// Clean performance plus robustness over an ε grid.
    Eval(EvalArgs),
    /// Combine evaluation reports with dataset weights.
    Report(ReportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Certify(_) => "certify",
            Command::Defend(_) => "defend",
            Command::Attack(_) => "attack",
            Command::Eval(_) => "eval",
            Command::Report(_) => "report",
        }
    }
}

fn d_n() -> usize {
    1000
}
fn d_size() -> usize {
    16
}
fn d_epochs() -> usize {
    30
}
fn d_lr() -> f64 {
    3e-3
}
fn d_batch() -> usize {
    16
}
fn d_rate() -> f64 {
    orthoiqa::defense::DEFAULT_PRUNE_RATE
}
fn d_ft_epochs() -> usize {
    orthoiqa::defense::DEFAULT_FINE_TUNE_EPOCHS
}
fn d_kind() -> AttackKind {
    AttackKind::Pgd
}
fn d_eps() -> Rational {
    Rational(4.0 / 255.0)
}
fn d_grid() -> Vec<Rational> {
    DEFAULT_EPS_GRID.iter().map(|&e| Rational(e)).collect()
}
fn d_smooth() -> f64 {
    orthoiqa::attacks::DEFAULT_FLOW_SMOOTHNESS
}
fn d_log_base() -> f64 {
    10.0
}

fn parse_kind(s: &str) -> Result<AttackKind, String> {
    match s {
        "pgd" => Ok(AttackKind::Pgd),
        "uap" => Ok(AttackKind::Uap),
        "stadv" => Ok(AttackKind::Stadv),
        _ => Err(format!("unknown attack '{s}' (expected pgd, uap, or stadv)")),
    }
}

fn parse_criterion(s: &str) -> Result<PruneCriterion, String> {
    match s {
        "l1" => Ok(PruneCriterion::L1),
        "l2" => Ok(PruneCriterion::L2),
        _ => Err(format!("unknown criterion '{s}' (expected l1 or l2)")),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitArg {
    Train,
    Val,
    #[default]
    Test,
    All,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataArgs {
    /// Number of samples.
    #[arg(long, default_value_t = d_n())]
    #[serde(default = "d_n")]
    pub n: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = d_size())]
    #[serde(default = "d_size")]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    /// A gen-data run directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    #[serde(default)]
    pub seed: u64,
    #[arg(long, default_value_t = d_epochs())]
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[arg(long, default_value_t = d_lr())]
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[arg(long, default_value_t = d_batch())]
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Weight of the input-gradient-norm penalty (0 disables it).
    #[arg(long, default_value_t = 0.0)]
    #[serde(default)]
    pub nt_lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyArgs {
    /// Model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefendArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// The dataset the model was trained on; fine-tuning uses its train split.
    #[arg(long)]
    pub data: PathBuf,
    /// Insert before this conv layer instead of the recommended one.
    #[arg(long)]
    #[serde(default)]
    pub position: Option<usize>,
    #[arg(long)]
    #[serde(default)]
    pub skip_block: bool,
    #[arg(long, default_value_t = d_rate())]
    #[serde(default = "d_rate")]
    pub rate: f64,
    #[arg(long, value_parser = parse_criterion, default_value = "l2")]
    #[serde(default)]
    pub criterion: PruneCriterion,
    #[arg(long, default_value_t = d_ft_epochs())]
    #[serde(default = "d_ft_epochs")]
    pub epochs: usize,
    /// Learning rate the model was trained with; fine-tuning uses a tenth.
    #[arg(long, default_value_t = d_lr())]
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[arg(long, default_value_t = d_batch())]
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    #[serde(default)]
    pub seed: u64,
}

/// Attack settings shared by `attack` and `eval`.
#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_kind, default_value = "pgd")]
    #[serde(default = "d_kind")]
    pub kind: AttackKind,
    /// ℓ∞ radius, e.g. 4/255.
    #[arg(long, default_value_t = d_eps())]
    #[serde(default = "d_eps")]
    pub eps: Rational,
    /// Iterations (default: 1 for pgd, 10 for uap, 5 for stadv).
    #[arg(long)]
    #[serde(default)]
    pub steps: Option<usize>,
    /// Per-step size (default: 1/255, or 0.25 pixels of flow for stadv).
    #[arg(long)]
    #[serde(default)]
    pub step_size: Option<Rational>,
    #[arg(long, default_value_t = d_smooth())]
    #[serde(default = "d_smooth")]
    pub flow_smoothness: f64,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    #[serde(default)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 0)]
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_kind, default_value = "pgd")]
    #[serde(default = "d_kind")]
    pub kind: AttackKind,
    /// Comma-separated ε values.
    #[arg(long, value_delimiter = ',', default_value = "2/255,4/255,6/255,8/255,10/255")]
    #[serde(default = "d_grid")]
    pub grid: Vec<Rational>,
    #[arg(long)]
    #[serde(default)]
    pub steps: Option<usize>,
    #[arg(long)]
    #[serde(default)]
    pub step_size: Option<Rational>,
    #[arg(long, default_value_t = d_smooth())]
    #[serde(default = "d_smooth")]
    pub flow_smoothness: f64,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    #[serde(default)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 0)]
    #[serde(default)]
    pub seed: u64,
    /// Logarithm base of the R-Score.
    #[arg(long, default_value_t = d_log_base())]
    #[serde(default = "d_log_base")]
    pub log_base: f64,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportArgs {
    /// One or two eval run directories (or their report.json files).
    #[arg(long, num_args = 1..=2, required = true)]
    pub reports: Vec<PathBuf>,
    /// Dataset weights for two reports, e.g. 2/3,1/3.
    #[arg(long, value_delimiter = ',')]
    #[serde(default)]
    pub weights: Option<Vec<Rational>>,
}
