//! Parameter sweeps producing rectangular grids of one scalar per cell.
//!
//! Every cell is an independent, deterministic run, so sweeps fan out over
//! the rayon pool and collect in row-major order.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    greedy, kl_from_logits, run_hs_prepend, run_skyline, token_importance_against, TokenMode,
};
use crate::comm::{receiver_run, sender_run};
use crate::cost::{flops_kvcomm, flops_skyline, measure, CostConstants};
use crate::error::{Error, Result};
use crate::kv::DType;
use crate::model::{Capture, LogitRows, Model};
use crate::selection::{self, resolve_m, SelectionConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    TokenImportance,
    HsPrepend,
    Chunk,
    AttnLevel,
    RandomVsKvcomm,
    FlopsSweep,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::TokenImportance,
        ExperimentKind::HsPrepend,
        ExperimentKind::Chunk,
        ExperimentKind::AttnLevel,
        ExperimentKind::RandomVsKvcomm,
        ExperimentKind::FlopsSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::TokenImportance => "token-importance",
            ExperimentKind::HsPrepend => "hs-prepend",
            ExperimentKind::Chunk => "chunk",
            ExperimentKind::AttnLevel => "attn-level",
            ExperimentKind::RandomVsKvcomm => "random-vs-kvcomm",
            ExperimentKind::FlopsSweep => "flops-sweep",
        }
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default = "default_context_len")]
    pub context_len: usize,
    #[serde(default = "default_query_len")]
    pub query_len: usize,
    /// Seed of the synthetic (context, query) sample.
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default = "default_token_mode")]
    pub token_mode: TokenMode,
    /// Levels of the attention-level sweep, spaced evenly over [0, 1].
    #[serde(default = "default_levels")]
    pub levels: usize,
    /// Layers per attention-level selection; clamped to L.
    #[serde(default = "default_level_m")]
    pub level_m: usize,
    #[serde(default = "default_ratios")]
    pub ratios: Vec<f64>,
    /// Random layer sets drawn per ratio.
    #[serde(default = "default_draws")]
    pub draws: usize,
    /// Decode passes in the flops sweep.
    #[serde(default = "default_decode")]
    pub decode_steps: usize,
    #[serde(default)]
    pub selection: SelectionConfig,
}

fn default_context_len() -> usize {
    32
}
fn default_query_len() -> usize {
    8
}
fn default_token_mode() -> TokenMode {
    TokenMode::Remove
}
fn default_levels() -> usize {
    9
}
fn default_level_m() -> usize {
    9
}
fn default_ratios() -> Vec<f64> {
    vec![0.3, 0.5, 0.7, 1.0]
}
fn default_draws() -> usize {
    8
}
fn default_decode() -> usize {
    4
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        ExperimentConfig {
            kind,
            context_len: default_context_len(),
            query_len: default_query_len(),
            data_seed: 0,
            token_mode: default_token_mode(),
            levels: default_levels(),
            level_m: default_level_m(),
            ratios: default_ratios(),
            draws: default_draws(),
            decode_steps: default_decode(),
            selection: SelectionConfig::default(),
        }
    }
}

/// Uniform random token ids below `vocab`.
pub fn sample_tokens(vocab: usize, len: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

/// The synthetic `(context, query)` pair of a config.
pub fn sample_pair(vocab: usize, cfg: &ExperimentConfig) -> (Vec<u32>, Vec<u32>) {
    let tokens = sample_tokens(vocab, cfg.context_len + cfg.query_len, cfg.data_seed);
    let (c, q) = tokens.split_at(cfg.context_len);
    (c.to_vec(), q.to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub kind: ExperimentKind,
    pub metric: String,
    pub row_axis: String,
    pub col_axis: String,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// `cells[r][c]`; `None` where the cell is undefined.
    pub cells: Vec<Vec<Option<f64>>>,
    /// Free-form per-row notes, e.g. the layers a row selected.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub row_notes: Vec<String>,
    pub metadata: BTreeMap<String, String>,
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        if self.cells.len() != self.rows.len() {
            return Err(Error::shape(format!("{} rows of cells for {} labels", self.cells.len(), self.rows.len())));
        }
        if let Some(r) = self.cells.iter().position(|r| r.len() != self.cols.len()) {
            return Err(Error::shape(format!("row {r} is not {} cells wide", self.cols.len())));
        }
        if !self.row_notes.is_empty() && self.row_notes.len() != self.rows.len() {
            return Err(Error::shape("one note per row required"));
        }
        Ok(())
    }

    /// Header `row_axis\col_axis,<cols>`; undefined cells are empty.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let corner = format!("{}\\{}", self.row_axis, self.col_axis);
        let header: Vec<&str> = std::iter::once(corner.as_str()).chain(self.cols.iter().map(String::as_str)).collect();
        w.write_record(&header).map_err(csv_err)?;
        for (label, row) in self.rows.iter().zip(&self.cells) {
            let rec: Vec<String> = std::iter::once(label.clone())
                .chain(row.iter().map(|c| c.map(|v| format!("{v:.9e}")).unwrap_or_default()))
                .collect();
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn metadata(cfg: &ExperimentConfig, sender: &Model, receiver: &Model) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("sender_model_id".into(), format!("{:016x}", sender.model_id())),
        ("receiver_model_id".into(), format!("{:016x}", receiver.model_id())),
        ("sender_seed".into(), sender.seed().to_string()),
        ("receiver_seed".into(), receiver.seed().to_string()),
        ("data_seed".into(), cfg.data_seed.to_string()),
        ("context_len".into(), cfg.context_len.to_string()),
        ("query_len".into(), cfg.query_len.to_string()),
    ])
}

/// Next-token logits after the query for a given layer set.
fn first_logits(sender: &Model, receiver: &Model, c: &[u32], q: &[u32], layers: &[usize]) -> Result<Vec<f32>> {
    let p = sender_run(sender, c, layers, DType::F32)?;
    let r = receiver_run(receiver, q, &p, &greedy(1, false))?;
    Ok(r.step_logits.into_iter().next().expect("one step"))
}

fn skyline_logits(receiver: &Model, c: &[u32], q: &[u32]) -> Result<Vec<f32>> {
    let s = run_skyline(receiver, c, q, &greedy(1, false))?;
    Ok(s.step_logits.into_iter().next().expect("one step"))
}

fn labels(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

fn check_sample(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.query_len == 0 {
        return Err(Error::Config("experiments need a non-empty query".into()));
    }
    Ok(())
}

pub fn run_experiment(cfg: &ExperimentConfig, sender: &Model, receiver: &Model) -> Result<ExperimentGrid> {
    check_sample(cfg)?;
    crate::comm::check_compatible(sender.config(), receiver.config())?;
    let grid = match cfg.kind {
        ExperimentKind::TokenImportance => token_importance_grid(cfg, sender, receiver),
        ExperimentKind::HsPrepend => hs_prepend_grid(cfg, sender, receiver),
        ExperimentKind::Chunk => chunk_grid(cfg, sender, receiver),
        ExperimentKind::AttnLevel => attn_level_grid(cfg, sender, receiver),
        ExperimentKind::RandomVsKvcomm => random_vs_kvcomm(cfg, sender, receiver),
        ExperimentKind::FlopsSweep => flops_sweep(cfg, sender, receiver),
    }?;
    grid.validate()?;
    Ok(grid)
}

/// KL to the unmodified prediction after zeroing rows at each layer output.
/// Runs on the receiver over `[context; query]`.
fn token_importance_grid(cfg: &ExperimentConfig, sender: &Model, receiver: &Model) -> Result<ExperimentGrid> {
    let (c, q) = sample_pair(receiver.config().vocab_size, cfg);
    let prompt: Vec<u32> = c.iter().chain(&q).copied().collect();
    let reference = receiver
        .prefill(&prompt, 0, None, Capture { logits: LogitRows::Last, ..Capture::default() })?
        .trace
        .logits
        .expect("requested")
        .into_data();
    let l = receiver.n_layers();
    let cells = (0..l)
        .into_par_iter()
        .map(|layer| {
            (0..prompt.len())
                .map(|p| token_importance_against(receiver, &prompt, &reference, cfg.token_mode, p, layer).map(|m| Some(m.kl)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = metadata(cfg, sender, receiver);
    meta.insert("token_mode".into(), format!("{:?}", cfg.token_mode).to_lowercase());
    Ok(ExperimentGrid {
        kind: cfg.kind,
        metric: "kl_to_unmodified".into(),
        row_axis: "layer".into(),
        col_axis: "position".into(),
        rows: labels(l),
        cols: labels(prompt.len()),
        cells,
        row_notes: Vec::new(),
        metadata: meta,
    })
}

fn hs_prepend_grid(cfg: &ExperimentConfig, sender: &Model, receiver: &Model) -> Result<ExperimentGrid> {
    let (c, q) = sample_pair(receiver.config().vocab_size, cfg);
    let sky = skyline_logits(receiver, &c, &q)?;
    let l = receiver.n_layers();
    let cells = (0..l)
        .into_par_iter()
        .map(|from| {
            (0..l)
                .map(|to| {
                    let out = run_hs_prepend(sender, receiver, &c, &q, from, to, &greedy(1, false))?;
                    Ok(Some(kl_from_logits(&sky, &out.step_logits[0])))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentGrid {
        kind: cfg.kind,
        metric: "kl_to_skyline".into(),
        row_axis: "layer_from".into(),
        col_axis: "layer_to".into(),
        rows: labels(l),
        cols: labels(l),
        cells,
        row_notes: Vec::new(),
        metadata: metadata(cfg, sender, receiver),
    })
}

/// Every contiguous chunk `[from, to]`; cells below the diagonal are empty.
fn chunk_grid(cfg: &ExperimentConfig, sender: &Model, receiver: &Model) -> Result<ExperimentGrid> {
    let (c, q) = sample_pair(receiver.config().vocab_size, cfg);
    let sky = skyline_logits(receiver, &c, &q)?;
    let l = receiver.n_layers();
    let cells = (0..l)
        .into_par_iter()
        .map(|from| {
            (0..l)
                .map(|to| {
                    if to < from {
                        return Ok(None);
                    }
                    let layers = selection::select_chunk(l, from, to)?;
                    let got = first_logits(sender, receiver, &c, &q, &layers)?;
                    Ok(Some(kl_from_logits(&sky, &got)))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentGrid {
        kind: cfg.kind,
        metric: "kl_to_skyline".into(),
        row_axis: "from".into(),
        col_axis: "to".into(),
        rows: labels(l),
        cols: labels(l),
        cells,
        row_notes: Vec::new(),
        metadata: metadata(cfg, sender, receiver),
    })
}

fn calibrated_scores(model: &Model, c: &[u32], q: &[u32]) -> Result<Vec<f64>> {
    if c.is_empty() {
        return Err(Error::Config("attention scores need a non-empty context".into()));
    }
    let raw = selection::raw_scores(model, c, q)?;
    Ok(selection::normalize_scores(&raw))
}

fn attn_level_grid(cfg: &ExperimentConfig, sender: &Model, receiver: &Model) -> Result<ExperimentGrid> {
    if cfg.levels < 2 {
        return Err(Error::Config("attention-level sweep needs at least two levels".into()));
    }
    let (c, q) = sample_pair(receiver.config().vocab_size, cfg);
    let l = receiver.n_layers();
    let m = cfg.level_m.min(l);
    let scores = calibrated_scores(receiver, &c, &q)?;
    let sky = skyline_logits(receiver, &c, &q)?;
    let levels: Vec<f64> = (0..cfg.levels).map(|i| i as f64 / (cfg.levels - 1) as f64).collect();
    let results = levels
        .par_iter()
        .map(|&level| {
            let layers = selection::select_by_attention_level(&scores, m, level)?;
            let got = first_logits(sender, receiver, &c, &q, &layers)?;
            Ok((kl_from_logits(&sky, &got), layers))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = metadata(cfg, sender, receiver);
    meta.insert("m".into(), m.to_string());
    Ok(ExperimentGrid {
        kind: cfg.kind,
        metric: "kl_to_skyline".into(),
        row_axis: "level".into(),
        col_axis: "metric".into(),
        rows: levels.iter().map(|v| format!("{v:.3}")).collect(),
        cols: vec!["kl_to_skyline".into()],
        cells: results.iter().map(|(kl, _)| vec![Some(*kl)]).collect(),
        row_notes: results.iter().map(|(_, layers)| join_layers(layers)).collect(),
        metadata: meta,
    })
}

fn join_layers(layers: &[usize]) -> String {
    layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(";")
}

fn random_vs_kvcomm(cfg: &ExperimentConfig, sender: &Model, receiver: &Model) -> Result<ExperimentGrid> {
    if cfg.draws == 0 {
        return Err(Error::Config("random baseline needs at least one draw".into()));
    }
    let (c, q) = sample_pair(receiver.config().vocab_size, cfg);
    let l = receiver.n_layers();
    let sky = skyline_logits(receiver, &c, &q)?;
    let raw = selection::raw_scores(receiver, &c, &q)?;
    let sel = &cfg.selection;
    let scores = selection::SelectionScores::from_raw(raw, sel.mu_for(l), sel.sigma, sel.alpha)?;
    let rows = cfg
        .ratios
        .par_iter()
        .map(|&ratio| {
            let m = resolve_m(l, ratio)?;
            let chosen = selection::select_top_m(&scores.combined, m)?;
            let kv = kl_from_logits(&sky, &first_logits(sender, receiver, &c, &q, &chosen)?);
            let random = (0..cfg.draws as u64)
                .map(|d| {
                    let layers = selection::select_random(l, m, cfg.data_seed ^ (d + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))?;
                    Ok(kl_from_logits(&sky, &first_logits(sender, receiver, &c, &q, &layers)?))
                })
                .collect::<Result<Vec<f64>>>()?;
            let mean = random.iter().sum::<f64>() / random.len() as f64;
            let min = random.iter().copied().fold(f64::INFINITY, f64::min);
            let max = random.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok((vec![Some(m as f64), Some(kv), Some(mean), Some(min), Some(max)], join_layers(&chosen)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = metadata(cfg, sender, receiver);
    meta.insert("draws".into(), cfg.draws.to_string());
    Ok(ExperimentGrid {
        kind: cfg.kind,
        metric: "kl_to_skyline".into(),
        row_axis: "ratio".into(),
        col_axis: "method".into(),
        rows: cfg.ratios.iter().map(|r| format!("{r}")).collect(),
        cols: ["m", "kvcomm", "random_mean", "random_min", "random_max"].map(String::from).to_vec(),
        cells: rows.iter().map(|r| r.0.clone()).collect(),
        row_notes: rows.into_iter().map(|r| r.1).collect(),
        metadata: meta,
    })
}

/// Instrumented and analytic FLOPs per selection ratio, layers chosen by
/// the configured selection.
fn flops_sweep(cfg: &ExperimentConfig, sender: &Model, receiver: &Model) -> Result<ExperimentGrid> {
    let (c, q) = sample_pair(receiver.config().vocab_size, cfg);
    let k = CostConstants::for_model(receiver.config());
    let rows = cfg
        .ratios
        .iter()
        .map(|&ratio| {
            let sel = SelectionConfig {
                budget: selection::Budget::Ratio(ratio),
                ..cfg.selection.clone()
            };
            let cal = selection::calibrate(receiver, &c, &q, &sel)?;
            let report = measure(sender, receiver, &c, &q, &cal.layers, cfg.decode_steps)?;
            let kv = flops_kvcomm(&report.params, &k);
            let sky = flops_skyline(&report.params, &k);
            let inst = report.kvcomm_instrumented;
            let sky_inst = report.skyline_instrumented.expect("measured");
            let analytic_recv = kv.total - kv.term("sender_prefill").expect("term");
            Ok((
                vec![
                    Some(cal.layers.len() as f64),
                    Some(inst.sender_prefill as f64),
                    Some(inst.receiver_prefill as f64),
                    Some(inst.receiver_decode as f64),
                    Some(sky_inst.receiver() as f64),
                    report.receiver_ratio,
                    Some(analytic_recv as f64),
                    Some(sky.total as f64),
                ],
                join_layers(&cal.layers),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = metadata(cfg, sender, receiver);
    meta.insert("decode_steps".into(), cfg.decode_steps.to_string());
    Ok(ExperimentGrid {
        kind: cfg.kind,
        metric: "flops".into(),
        row_axis: "ratio".into(),
        col_axis: "quantity".into(),
        rows: cfg.ratios.iter().map(|r| format!("{r}")).collect(),
        cols: [
            "m",
            "sender_prefill",
            "receiver_prefill",
            "receiver_decode",
            "skyline_receiver",
            "skyline_over_kvcomm_receiver",
            "analytic_kvcomm_receiver",
            "analytic_skyline",
        ]
        .map(String::from)
        .to_vec(),
        cells: rows.iter().map(|r| r.0.clone()).collect(),
        row_notes: rows.into_iter().map(|r| r.1).collect(),
        metadata: meta,
    })
}
