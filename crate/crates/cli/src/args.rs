use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use probe_core::learning::AlphaMode;
use probe_core::model::{ReferencePoint, WeightKind};

#[derive(Debug, Parser)]
#[command(name = "probe", version, about = "Bias-embedded bundle choice model runner")]
pub struct Cli {
    /// Master seed; overrides the seed in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for folds and theorem samples.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Derive labeled choice records from raw purchase events.
    Ingest(IngestArgs),
    /// Fit the correlation model on choice records.
    FitCorrelation(FitArgs),
    /// Fit the correlation model, then learn biases and item values by SGD.
    Train(TrainArgs),
    /// Repeated k-fold evaluation against the frequency baseline.
    Evaluate(EvaluateArgs),
    /// Check the comparative-statics and pricing results on seeded instances.
    Theorems(TheoremArgs),
    /// Bundle probability as a function of the additional-item price.
    Sweep(SweepArgs),
    /// Generate a synthetic world with planted biases.
    Synth,
    /// Summarize learned biases, optionally against planted ones.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Directory holding items.csv, bundles.jsonl, events.jsonl and records.csv.
    #[arg(long, default_value = ".")]
    pub data: PathBuf,
    #[arg(long)]
    pub items: Option<PathBuf>,
    #[arg(long)]
    pub bundles: Option<PathBuf>,
}

impl DataArgs {
    pub fn items(&self) -> PathBuf {
        self.items.clone().unwrap_or_else(|| self.data.join("items.csv"))
    }

    pub fn bundles(&self) -> PathBuf {
        self.bundles.clone().unwrap_or_else(|| self.data.join("bundles.jsonl"))
    }

    pub fn in_data(&self, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.data.join(name))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightArg {
    Power,
    Cpt,
}

impl From<WeightArg> for WeightKind {
    fn from(w: WeightArg) -> Self {
        match w {
            WeightArg::Power => WeightKind::Power,
            WeightArg::Cpt => WeightKind::Cpt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RefPointArg {
    Savings,
    Expense,
    MainItem,
    Bundle,
}

impl From<RefPointArg> for ReferencePoint {
    fn from(r: RefPointArg) -> Self {
        match r {
            RefPointArg::Savings => ReferencePoint::SavingsCentered,
            RefPointArg::Expense => ReferencePoint::ExpenseCentered,
            RefPointArg::MainItem => ReferencePoint::MainItemCentered,
            RefPointArg::Bundle => ReferencePoint::BundleCentered,
        }
    }
}

/// `personal`, or `PLUS,MINUS` for one fixed pair shared by everyone.
pub fn parse_alpha(s: &str) -> Result<AlphaMode, String> {
    if s == "personal" {
        return Ok(AlphaMode::Personal);
    }
    let (plus, minus) = parse_pair(s)?;
    Ok(AlphaMode::Fixed { plus, minus })
}

pub fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected PLUS,MINUS, got {s:?}"))?;
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}"));
    Ok((num(a)?, num(b)?))
}

#[derive(Debug, Clone, Args)]
pub struct AblationArgs {
    /// Probability weighting function.
    #[arg(long, value_enum)]
    pub weight: Option<WeightArg>,
    /// Reference point of the value function.
    #[arg(long, value_enum)]
    pub ref_point: Option<RefPointArg>,
    /// `personal` or a fixed `PLUS,MINUS` pair.
    #[arg(long, value_parser = parse_alpha)]
    pub alpha: Option<AlphaMode>,
}

#[derive(Debug, Clone, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub events: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Ridge penalty.
    #[arg(long, allow_negative_numbers = true)]
    pub ridge: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[command(flatten)]
    pub ablation: AblationArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub eta: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[command(flatten)]
    pub ablation: AblationArgs,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Share of each training split used for fitting.
    #[arg(long, allow_negative_numbers = true)]
    pub sampling_rate: Option<f64>,
    /// Evaluate only the frequency baseline.
    #[arg(long)]
    pub baseline_only: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Json,
}

#[derive(Debug, Clone, Args)]
pub struct TheoremArgs {
    /// Random instances per derivative check.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Adds a setting that breaks the pricing orderings, to exercise the
    /// violation path.
    #[arg(long)]
    pub force_invalid: bool,
    /// Format of the summary printed to stdout.
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    pub report: ReportFormat,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long, allow_negative_numbers = true, default_value_t = 1.0)]
    pub c_m: f64,
    /// Bundle discount rate `c_B / (c_m + c_1)`.
    #[arg(long, allow_negative_numbers = true, default_value_t = 0.25)]
    pub r: f64,
    /// Correlation probability.
    #[arg(long, allow_negative_numbers = true, default_value_t = 0.5)]
    pub p: f64,
    #[arg(long, value_parser = parse_pair, default_value = "1,1")]
    pub alpha_user: (f64, f64),
    #[arg(long, value_parser = parse_pair, default_value = "1,1")]
    pub alpha_item: (f64, f64),
    #[arg(long, default_value_t = 400)]
    pub points: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Trained model JSON.
    #[arg(long)]
    pub model: PathBuf,
    /// Ground truth written by `synth`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}
