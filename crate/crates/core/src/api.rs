//! Request and response types shared by the HTTP service, its client and
//! the command line, plus the synchronous operations behind them.
//!
//! Operations take already-resolved models; looking models up by id is the
//! caller's business.

use std::path::PathBuf;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, AcMode, MethodOutput};
use crate::comm::{end_to_end, receiver_run, sender_run, ReceiveOptions, Session, StageFlops, Transport};
use crate::cost::{self, Breakdown, CostConstants, CostParams, CostReport};
use crate::error::{Error, ErrorKind, Result, Stage};
use crate::experiments::ExperimentConfig;
use crate::kv::{deserialize, serialize, DType};
use crate::model::{GenerateOptions, Model, ModelConfig};
use crate::selection::{self, ScoreRow, SelectionConfig};
use crate::tensor::flops::FlopMeter;

/// Enough to rebuild a model bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub config: ModelConfig,
    pub seed: u64,
}

impl ModelSpec {
    pub fn of(model: &Model) -> Self {
        ModelSpec {
            config: model.config().clone(),
            seed: model.seed(),
        }
    }
}

pub fn format_id(id: u64) -> String {
    format!("{id:016x}")
}

pub fn parse_id(s: &str) -> Result<u64> {
    u64::from_str_radix(s, 16).map_err(|_| Error::Config(format!("{s:?} is not a model id")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub id: String,
    pub config: ModelConfig,
    pub seed: u64,
}

impl ModelInfo {
    pub fn of(model: &Model) -> Self {
        ModelInfo {
            id: format_id(model.model_id()),
            config: model.config().clone(),
            seed: model.seed(),
        }
    }
}

/// Whose attention drives calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    #[default]
    Receiver,
    Sender,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrateRequest {
    pub sender: String,
    pub receiver: String,
    /// One or more `(context, query)` samples; raw scores are averaged.
    pub samples: Vec<Sample>,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub score_source: ScoreSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub context: Vec<u32>,
    pub query: Vec<u32>,
}

/// The frozen layer set and the per-layer scores behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSet {
    pub n_layers: usize,
    pub layers: Vec<usize>,
    pub selection: SelectionConfig,
    pub score_source: ScoreSource,
    pub rows: Vec<ScoreRow>,
}

pub fn calibrate(sender: &Model, receiver: &Model, samples: &[Sample], selection: &SelectionConfig, source: ScoreSource) -> Result<LayerSet> {
    crate::comm::check_compatible(sender.config(), receiver.config())?;
    let model = match source {
        ScoreSource::Receiver => receiver,
        ScoreSource::Sender => sender,
    };
    let pairs: Vec<(&[u32], &[u32])> = samples.iter().map(|s| (s.context.as_slice(), s.query.as_slice())).collect();
    let cal = selection::calibrate_samples(model, &pairs, selection)?;
    Ok(LayerSet {
        n_layers: model.n_layers(),
        rows: cal.rows(model.n_layers()),
        layers: cal.layers,
        selection: selection.clone(),
        score_source: source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Kvcomm,
    Baseline,
    Skyline,
    Ac {
        mode: AcMode,
        /// Defaults to the last layer.
        #[serde(default)]
        layer: Option<usize>,
    },
    HsPrepend {
        layer_from: usize,
        layer_to: usize,
    },
}

fn default_max_new() -> usize {
    16
}

/// Everything a run needs besides the two models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub context: Vec<u32>,
    pub query: Vec<u32>,
    #[serde(default = "default_method")]
    pub method: Method,
    /// A frozen layer set; when absent one is calibrated with `selection`.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub score_source: ScoreSource,
    /// Calibration sample; defaults to the run's own context and query.
    #[serde(default)]
    pub calibration: Option<Sample>,
    #[serde(default)]
    pub transport: Transport,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
    #[serde(default = "default_max_new")]
    pub max_new: usize,
    /// Also run Skyline on the same sample and report the FLOP ratio.
    #[serde(default)]
    pub compare_skyline: bool,
}

fn default_method() -> Method {
    Method::Kvcomm
}

fn default_dtype() -> DType {
    DType::F32
}

impl RunSettings {
    pub fn new(context: Vec<u32>, query: Vec<u32>) -> Self {
        RunSettings {
            context,
            query,
            method: Method::Kvcomm,
            layers: None,
            selection: SelectionConfig::default(),
            score_source: ScoreSource::Receiver,
            calibration: None,
            transport: Transport::InProcess,
            dtype: DType::F32,
            max_new: default_max_new(),
            compare_skyline: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRequest {
    pub sender: String,
    pub receiver: String,
    #[serde(flatten)]
    pub settings: RunSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResponse {
    pub method: Method,
    pub tokens: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wire_bytes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position_offset: Option<u32>,
    pub flops: StageFlops,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostReport>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

fn stage_flops(total: u64, out: &MethodOutput) -> StageFlops {
    StageFlops {
        sender_prefill: total - out.prefill_flops - out.decode_flops,
        receiver_prefill: out.prefill_flops,
        receiver_decode: out.decode_flops,
    }
}

/// Resolve the layer set of a KVComm run.
pub fn resolve_layers(sender: &Model, receiver: &Model, s: &RunSettings) -> Result<Vec<usize>> {
    if let Some(l) = &s.layers {
        return Ok(l.clone());
    }
    let sample = s.calibration.clone().unwrap_or_else(|| Sample {
        context: s.context.clone(),
        query: s.query.clone(),
    });
    Ok(calibrate(sender, receiver, &[sample], &s.selection, s.score_source)?.layers)
}

pub fn run(sender: &Model, receiver: &Model, s: &RunSettings) -> Result<RunResponse> {
    if s.max_new == 0 {
        return Err(Error::Config("max_new must be at least 1".into()));
    }
    crate::tokens::check_vocab(&s.context, sender.config().vocab_size)?;
    crate::tokens::check_vocab(&s.query, receiver.config().vocab_size)?;
    let opts = ReceiveOptions {
        generate: GenerateOptions::greedy(s.max_new),
        ..ReceiveOptions::default()
    };
    let cfg = receiver.config();
    let params = |m: usize, tokens: usize| CostParams {
        l: cfg.n_layers as u64,
        m: m as u64,
        d: cfg.d_model as u64,
        c: s.context.len() as u64,
        q: s.query.len() as u64,
        t: tokens.saturating_sub(1) as u64,
        t_s: 0,
        t_r: 0,
    };
    let k = CostConstants::for_model(cfg);
    let skyline_flops = || -> Result<Option<StageFlops>> {
        if !s.compare_skyline {
            return Ok(None);
        }
        let sky = baselines::run_skyline(receiver, &s.context, &s.query, &opts)?;
        Ok(Some(StageFlops {
            sender_prefill: 0,
            receiver_prefill: sky.prefill_flops,
            receiver_decode: sky.decode_flops,
        }))
    };

    let meter = FlopMeter::start();
    let response = match &s.method {
        Method::Kvcomm => {
            let layers = resolve_layers(sender, receiver, s)?;
            let session = Session::new(sender, receiver, &layers, s.transport.clone(), s.dtype)?;
            let out = end_to_end(&session, &s.context, &s.query, &opts)?;
            let p = params(layers.len(), out.tokens.len());
            let cost = cost::reconcile(&out.flops, skyline_flops()?.as_ref(), &p, &k)?;
            RunResponse {
                method: s.method.clone(),
                tokens: out.tokens,
                layers: Some(out.layers),
                wire_bytes: Some(out.wire_bytes),
                position_offset: Some(out.position_offset),
                flops: out.flops,
                cost: Some(cost),
                warnings: out.warnings,
            }
        }
        method => {
            let out = match method {
                Method::Baseline => baselines::run_baseline(receiver, &s.query, &opts)?,
                Method::Skyline => baselines::run_skyline(receiver, &s.context, &s.query, &opts)?,
                Method::Ac { mode, layer } => {
                    let layer = layer.unwrap_or(baselines::default_ac_layer(receiver.n_layers()));
                    baselines::run_ac(sender, receiver, &s.context, &s.query, *mode, layer, &opts)?
                }
                Method::HsPrepend { layer_from, layer_to } => {
                    baselines::run_hs_prepend(sender, receiver, &s.context, &s.query, *layer_from, *layer_to, &opts)?
                }
                Method::Kvcomm => unreachable!(),
            };
            RunResponse {
                method: s.method.clone(),
                flops: stage_flops(meter.elapsed(), &out),
                tokens: out.tokens,
                layers: None,
                wire_bytes: None,
                position_offset: None,
                cost: None,
                warnings: Vec::new(),
            }
        }
    };
    Ok(response)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractRequest {
    pub sender: String,
    pub context: Vec<u32>,
    pub layers: Vec<usize>,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayloadResponse {
    /// The serialized payload, base64 encoded.
    pub payload: String,
    pub bytes: usize,
    pub m: usize,
    pub checksum: u32,
}

pub fn extract(sender: &Model, req: &ExtractRequest) -> Result<PayloadResponse> {
    let p = sender_run(sender, &req.context, &req.layers, req.dtype)?;
    let bytes = serialize(&p);
    Ok(PayloadResponse {
        payload: B64.encode(&bytes),
        bytes: bytes.len(),
        m: p.m(),
        checksum: p.checksum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceiveRequest {
    pub receiver: String,
    pub query: Vec<u32>,
    pub payload: String,
    #[serde(default = "default_max_new")]
    pub max_new: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceiveResponse {
    pub tokens: Vec<u32>,
    pub layers: Vec<usize>,
    pub position_offset: u32,
    pub warnings: Vec<String>,
}

pub fn receive(receiver: &Model, req: &ReceiveRequest) -> Result<ReceiveResponse> {
    let bytes = B64
        .decode(&req.payload)
        .map_err(|e| Error::Protocol(format!("payload is not valid base64: {e}")))?;
    let payload = deserialize(&bytes).map_err(|e| Error::from(e).at(Stage::Transport))?;
    let opts = ReceiveOptions {
        generate: GenerateOptions::greedy(req.max_new),
        ..ReceiveOptions::default()
    };
    let out = receiver_run(receiver, &req.query, &payload, &opts).map_err(|e| e.at(Stage::Receiver))?;
    Ok(ReceiveResponse {
        tokens: out.tokens,
        layers: payload.layer_indices(),
        position_offset: out.position_offset,
        warnings: out.warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRequest {
    pub sender: String,
    pub receiver: String,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsRequest {
    pub params: CostParams,
    /// Unit constants when absent.
    #[serde(default)]
    pub constants: Option<CostConstants>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsResponse {
    pub params: CostParams,
    pub constants: CostConstants,
    pub kvcomm: Breakdown,
    pub skyline: Breakdown,
    pub nld: Breakdown,
    pub margin_over_skyline: i128,
    pub margin_over_nld: i128,
}

pub fn flops(req: &FlopsRequest) -> Result<FlopsResponse> {
    req.params.validate()?;
    let k = req.constants.unwrap_or(CostConstants::unit(req.params.d));
    let p = &req.params;
    Ok(FlopsResponse {
        params: *p,
        constants: k,
        kvcomm: cost::flops_kvcomm(p, &k),
        skyline: cost::flops_skyline(p, &k),
        nld: cost::flops_nld(p, &k),
        margin_over_skyline: cost::margin_over_skyline(p, &k),
        margin_over_nld: cost::margin_over_nld(p, &k),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureRequest {
    pub sender: String,
    pub receiver: String,
    pub context: Vec<u32>,
    pub query: Vec<u32>,
    pub layers: Vec<usize>,
    /// Decode passes after the first generated token.
    pub t: usize,
}

pub fn measure(sender: &Model, receiver: &Model, req: &MeasureRequest) -> Result<CostReport> {
    cost::measure(sender, receiver, &req.context, &req.query, &req.layers, req.t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRequest {
    pub model: String,
    #[serde(default = "default_check_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_check_steps")]
    pub max_new: usize,
}

fn default_check_samples() -> usize {
    5
}

fn default_check_steps() -> usize {
    17
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResponse {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

/// Tolerance of the all-layers-versus-joint-prefill comparison.
pub const SKYLINE_TOLERANCE: f64 = 1e-4;

/// Logits of the query span followed by every decode step.
fn logit_trail(query_logits: &crate::tensor::Tensor, steps: &[Vec<f32>]) -> Vec<Vec<f32>> {
    let mut rows: Vec<Vec<f32>> = (0..query_logits.rows()).map(|r| query_logits.row(r).to_vec()).collect();
    rows.extend(steps.iter().skip(1).cloned());
    rows
}

/// Compare all-layer KV exchange with the joint prefill and the empty
/// exchange with the query-only run on random samples of `model`.
pub fn check(model: &Model, req: &CheckRequest) -> Result<CheckResponse> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(req.seed);
    let vocab = model.config().vocab_size as u32;
    let all: Vec<usize> = (0..model.n_layers()).collect();
    let (mut sky_diff, mut base_diff) = (0.0f64, 0.0f64);
    let mut tokens_differ = false;
    for _ in 0..req.samples {
        let c: Vec<u32> = (0..rng.random_range(8..=64)).map(|_| rng.random_range(0..vocab)).collect();
        let q: Vec<u32> = (0..rng.random_range(4..=16)).map(|_| rng.random_range(0..vocab)).collect();
        let plain = ReceiveOptions {
            generate: GenerateOptions::greedy(req.max_new),
            query_logits: true,
            attention: false,
        };
        let sky = baselines::run_skyline(model, &c, &q, &plain)?;
        let forced = ReceiveOptions {
            generate: GenerateOptions {
                forced: Some(sky.tokens.clone()),
                ..GenerateOptions::greedy(req.max_new)
            },
            ..plain.clone()
        };
        let full = receiver_run(model, &q, &sender_run(model, &c, &all, DType::F32)?, &forced)?;
        let a = logit_trail(sky.query_logits.as_ref().expect("requested"), &sky.step_logits);
        let b = logit_trail(full.query_logits.as_ref().expect("requested"), &full.step_logits);
        sky_diff = sky_diff.max(baselines::max_logit_diff(&a, &b) as f64);

        let base = baselines::run_baseline(model, &q, &plain)?;
        let empty = receiver_run(model, &q, &sender_run(model, &c, &[], DType::F32)?, &plain)?;
        let a = logit_trail(base.query_logits.as_ref().expect("requested"), &base.step_logits);
        let b = logit_trail(empty.query_logits.as_ref().expect("requested"), &empty.step_logits);
        base_diff = base_diff.max(baselines::max_logit_diff(&a, &b) as f64);
        tokens_differ |= base.tokens != empty.tokens;
    }
    let checks = vec![
        CheckResult {
            name: "all_layers_match_joint_prefill".into(),
            passed: sky_diff <= SKYLINE_TOLERANCE,
            max_abs_diff: sky_diff,
            tolerance: SKYLINE_TOLERANCE,
            detail: String::new(),
        },
        CheckResult {
            name: "empty_payload_matches_query_only".into(),
            passed: base_diff == 0.0 && !tokens_differ,
            max_abs_diff: base_diff,
            tolerance: 0.0,
            detail: if tokens_differ { "generated tokens differ".into() } else { String::new() },
        },
    ];
    Ok(CheckResponse {
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: ErrorKind,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    /// Wire-format failure code, when one applies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wire_code: Option<u8>,
}

impl ErrorBody {
    pub fn of(e: &Error) -> Self {
        let stage = match e {
            Error::Stage { stage, .. } => Some(*stage),
            _ => None,
        };
        let wire_code = match e.root() {
            Error::Wire(w) => Some(w.code()),
            Error::Nack(c) => Some(*c),
            _ => None,
        };
        ErrorBody {
            kind: e.kind(),
            message: e.to_string(),
            stage,
            wire_code,
        }
    }
}

/// A fully reproducible run: model specs, inputs and settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub sender: ModelSpec,
    pub receiver: ModelSpec,
    #[serde(flatten)]
    pub settings: RunSettings,
    #[serde(default)]
    pub experiment: Option<ExperimentConfig>,
    #[serde(default)]
    pub outputs: OutputPaths,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OutputPaths {
    #[serde(default)]
    pub report: Option<PathBuf>,
    #[serde(default)]
    pub csv: Option<PathBuf>,
}

/// A report always carries the config that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub result: RunResponse,
}
