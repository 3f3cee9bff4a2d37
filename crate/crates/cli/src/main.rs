mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

#[derive(Parser, Debug)]
#[command(name = "kvcomm", version, about = "Selective layer-wise KV sharing between two transformers")]
pub struct Cli {
    /// Service base URL. Without it an embedded server is started in-process.
    #[arg(long, global = true, env = "KVCOMM_SERVER")]
    pub server: Option<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a seeded model and write it to a file.
    GenModel(GenModelArgs),
    /// Score layers on a calibration sample and freeze a layer set.
    Calibrate(CalibrateArgs),
    /// Run one method end to end and emit a report.
    Run(RunArgs),
    /// Run a parameter sweep and emit CSV and JSON grids.
    Experiment(ExperimentArgs),
    /// Evaluate the analytic cost model, optionally against instrumented runs.
    Flops(FlopsArgs),
    /// Flatten grid JSON into long-form CSV.
    PlotData(PlotDataArgs),
    /// Verify the all-layer and empty-payload equivalences on a model.
    Check(CheckArgs),
    /// Serve the HTTP API in the foreground.
    Serve(ServeArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum Preset {
    /// 16 layers, d_model 64, byte vocabulary.
    Micro,
    /// 8 layers, d_model 128, d_ff 512.
    Wide,
}

#[derive(Args, Debug)]
pub struct GenModelArgs {
    /// JSON model config; overrides the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "micro")]
    pub preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub kv_heads: Option<usize>,
    #[arg(long)]
    pub head_dim: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct Inputs {
    /// Context token file.
    #[arg(long)]
    pub context: Option<PathBuf>,
    /// Query token file.
    #[arg(long)]
    pub query: Option<PathBuf>,
    /// Read input files as raw bytes instead of whitespace-separated ids.
    #[arg(long)]
    pub bytes: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
pub enum StrategyArg {
    Score,
    Chunk,
    Random,
    AttentionLevel,
    None,
}

#[derive(Args, Debug, Clone, Default)]
pub struct SelectionArgs {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Fraction of layers to send.
    #[arg(long, conflicts_with = "m")]
    pub ratio: Option<f64>,
    /// Number of layers to send.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Inclusive range for the chunk strategy, as FROM,TO.
    #[arg(long, value_parser = parse_pair)]
    pub chunk: Option<(usize, usize)>,
    #[arg(long, default_value_t = 0)]
    pub random_seed: u64,
    /// Attention-rank quantile for the attention-level strategy.
    #[arg(long)]
    pub level: Option<f64>,
    /// Score layers with the sender's attention instead of the receiver's.
    #[arg(long)]
    pub sender_scores: bool,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub sender: PathBuf,
    #[arg(long)]
    pub receiver: PathBuf,
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub selection: SelectionArgs,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum AcModeArg {
    Replace,
    Mean,
    Sum,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum DTypeArg {
    F32,
    F16,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Full run config as JSON; flags below are ignored when given.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, required_unless_present_any = ["config", "payload_in"])]
    pub sender: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    pub receiver: Option<PathBuf>,
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub selection: SelectionArgs,
    /// Query-only run with no communication.
    #[arg(long, group = "method")]
    pub baseline: bool,
    /// Receiver processes context and query together.
    #[arg(long, group = "method")]
    pub skyline: bool,
    /// Last-token hidden-state exchange.
    #[arg(long, value_enum, group = "method")]
    pub ac: Option<AcModeArg>,
    #[arg(long)]
    pub ac_layer: Option<usize>,
    /// Prepend sender hidden states, as FROM,TO layer boundaries.
    #[arg(long, value_parser = parse_pair, group = "method")]
    pub hs_prepend: Option<(usize, usize)>,
    /// Explicit layer set, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "layer_set")]
    pub layers: Option<Vec<usize>>,
    /// Layer set JSON written by `calibrate`.
    #[arg(long)]
    pub layer_set: Option<PathBuf>,
    /// in-process, file:PATH, tcp or tcp:ADDR.
    #[arg(long, default_value = "in-process")]
    pub transport: String,
    #[arg(long, value_enum, default_value = "f32")]
    pub dtype: DTypeArg,
    #[arg(long, default_value_t = 16)]
    pub max_new: usize,
    #[arg(long)]
    pub compare_skyline: bool,
    /// Skip the sender: decode this serialized payload on the receiver.
    #[arg(long, conflicts_with_all = ["baseline", "skyline", "ac", "hs_prepend"])]
    pub payload_in: Option<PathBuf>,
    /// Also write the serialized payload of a KV run here.
    #[arg(long)]
    pub payload_out: Option<PathBuf>,
    /// Report path; stdout when absent.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    /// token-importance, hs-prepend, chunk, attn-level, random-vs-kvcomm, flops-sweep or all.
    #[arg(long)]
    pub kind: String,
    /// Experiment config JSON; grid flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub sender: PathBuf,
    #[arg(long)]
    pub receiver: PathBuf,
    #[arg(long)]
    pub context_len: Option<usize>,
    #[arg(long)]
    pub query_len: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// remove, retain or retain-all.
    #[arg(long)]
    pub token_mode: Option<String>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub level_m: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long)]
    pub decode_steps: Option<usize>,
    #[command(flatten)]
    pub selection: SelectionArgs,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    /// Layers; taken from --model when given.
    #[arg(long, required_unless_present = "model")]
    pub l: Option<u64>,
    #[arg(long)]
    pub m: Option<u64>,
    /// Hidden width; taken from --model when given.
    #[arg(long, required_unless_present = "model")]
    pub d: Option<u64>,
    #[arg(long)]
    pub c: u64,
    #[arg(long)]
    pub q: u64,
    #[arg(long, default_value_t = 0)]
    pub t: u64,
    #[arg(long, default_value_t = 0)]
    pub t_s: u64,
    #[arg(long, default_value_t = 0)]
    pub t_r: u64,
    /// Take constants from this model's dimensions instead of unit ones.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// With --model: run instrumented sweeps at these ratios of L.
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Args, Debug)]
pub struct PlotDataArgs {
    /// Grid JSON written by `experiment`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 17)]
    pub max_new: usize,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8787")]
    pub addr: String,
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected FROM,TO, got {s:?}"))?;
    let p = |x: &str| x.trim().parse::<usize>().map_err(|_| format!("{x:?} is not a layer index"));
    Ok((p(a)?, p(b)?))
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(1);
        }
    };
    match rt.block_on(commands::dispatch(cli)) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
