//! Choosing which layers' KV pairs to send.
//!
//! The score of a layer blends how much attention the query places on the
//! context at that layer (min-max normalized across layers) with a Gaussian
//! preference for a chosen depth:
//!
//! ```text
//! raw[l]      = 1/(H·T) Σ_h Σ_{t∈query} Σ_{c∈context} a[l][h][t][c]
//! norm[l]     = (raw[l] - min raw) / (max raw - min raw)      (all 0 if flat)
//! prior[l]    = exp(-(l - μ)² / (2σ²))
//! combined[l] = α·norm[l] + (1 - α)·prior[l]
//! ```
//!
//! The top `M` layers by `combined` are selected once on a calibration
//! sample and then reused unchanged. Layer indices are 0-based, and the
//! default centre `μ = L/2 - 0.5` sits exactly between the two middle layers.
//! Every tie is broken toward the lower layer index.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Capture, ForwardTrace, LogitRows, Model};

/// How many layers to send.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    /// `M = ceil(ratio · L)`.
    Ratio(f64),
    Count(usize),
}

impl Budget {
    pub fn resolve(self, n_layers: usize) -> Result<usize> {
        match self {
            Budget::Ratio(r) => resolve_m(n_layers, r),
            Budget::Count(m) if m <= n_layers => Ok(m),
            Budget::Count(m) => Err(Error::Config(format!("M = {m} exceeds {n_layers} layers"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// Top-M by combined score.
    Score,
    /// Inclusive contiguous range of layers.
    Chunk { from: usize, to: usize },
    /// M layers uniformly at random.
    Random { seed: u64 },
    /// M layers whose attention-score rank sits around a quantile
    /// (1.0 = most attended, 0.0 = least).
    AttentionLevel { level: f64 },
    Explicit { layers: Vec<usize> },
    /// Send nothing.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Prior centre in 0-based layer coordinates; `None` means `L/2 - 0.5`.
    #[serde(default)]
    pub mu: Option<f64>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_budget")]
    pub budget: Budget,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
}

fn default_alpha() -> f64 {
    1.0
}

fn default_sigma() -> f64 {
    10.0
}

fn default_budget() -> Budget {
    Budget::Ratio(0.3)
}

fn default_strategy() -> Strategy {
    Strategy::Score
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            alpha: default_alpha(),
            mu: None,
            sigma: default_sigma(),
            budget: default_budget(),
            strategy: default_strategy(),
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if let Some(mu) = self.mu {
            if !mu.is_finite() {
                return Err(Error::Config("mu must be finite".into()));
            }
        }
        self.budget.resolve(n_layers)?;
        Ok(())
    }

    pub fn mu_for(&self, n_layers: usize) -> f64 {
        self.mu.unwrap_or(default_mu(n_layers))
    }
}

/// Middle of `0..n_layers`.
pub fn default_mu(n_layers: usize) -> f64 {
    n_layers as f64 / 2.0 - 0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionScores {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub prior: Vec<f64>,
    pub combined: Vec<f64>,
}

impl SelectionScores {
    pub fn from_raw(raw: Vec<f64>, mu: f64, sigma: f64, alpha: f64) -> Result<Self> {
        let normalized = normalize_scores(&raw);
        let prior = gaussian_prior(raw.len(), mu, sigma)?;
        let combined = combine(&normalized, &prior, alpha)?;
        Ok(SelectionScores {
            raw,
            normalized,
            prior,
            combined,
        })
    }
}

/// Average attention mass the last `query` rows place on the first
/// `context` columns, per layer.
pub fn attention_importance(trace: &ForwardTrace, context: usize, query: usize) -> Result<Vec<f64>> {
    if context == 0 || query == 0 {
        return Err(Error::Config(
            "attention importance needs at least one context and one query token".into(),
        ));
    }
    let attention = trace
        .attention
        .as_ref()
        .ok_or_else(|| Error::Config("trace was captured without attention weights".into()))?;
    attention
        .iter()
        .enumerate()
        .map(|(l, a)| {
            let [heads, tq, tkv] = a.shape()[..] else {
                return Err(Error::shape(format!("layer {l} attention has shape {:?}", a.shape())));
            };
            if tq < query || tkv < context {
                return Err(Error::shape(format!(
                    "layer {l} attention [{heads}, {tq}, {tkv}] cannot hold {query} queries over {context} context tokens"
                )));
            }
            let mut mass = 0.0f64;
            for h in 0..heads {
                for t in tq - query..tq {
                    let row = &a.data()[(h * tq + t) * tkv..(h * tq + t) * tkv + context];
                    mass += row.iter().map(|&v| v as f64).sum::<f64>();
                }
            }
            Ok(mass / (heads * query) as f64)
        })
        .collect()
}

/// Min-max normalization across layers; a flat input maps to all zeros.
pub fn normalize_scores(raw: &[f64]) -> Vec<f64> {
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if raw.is_empty() || max == min {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|v| (v - min) / (max - min)).collect()
}

pub fn gaussian_prior(n_layers: usize, mu: f64, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    Ok((0..n_layers)
        .map(|l| {
            let d = l as f64 - mu;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect())
}

pub fn combine(attention: &[f64], prior: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if attention.len() != prior.len() {
        return Err(Error::shape(format!(
            "{} attention scores vs {} prior values",
            attention.len(),
            prior.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(attention
        .iter()
        .zip(prior)
        .map(|(a, p)| alpha * a + (1.0 - alpha) * p)
        .collect())
}

/// `ceil(ratio · L)`, treating products within 1e-9 of an integer as that integer.
pub fn resolve_m(n_layers: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("selection ratio {ratio} outside (0, 1]")));
    }
    // 0.3 · 10 is 3.0000000000000004 in binary; that is still three layers.
    let m = (ratio * n_layers as f64 - 1e-9).ceil() as usize;
    Ok(m.min(n_layers))
}

/// Layer indices ordered by descending score, lower index first on ties.
fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// The `m` highest-scoring layers, returned in ascending layer order.
pub fn select_top_m(scores: &[f64], m: usize) -> Result<Vec<usize>> {
    if m > scores.len() {
        return Err(Error::Config(format!("M = {m} exceeds {} layers", scores.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN selection score".into()));
    }
    let mut top: Vec<usize> = rank_by_score(scores).into_iter().take(m).collect();
    top.sort_unstable();
    Ok(top)
}

pub fn select_chunk(n_layers: usize, from: usize, to: usize) -> Result<Vec<usize>> {
    if from > to {
        return Err(Error::Config(format!("inverted chunk {from}..={to}")));
    }
    if to >= n_layers {
        return Err(Error::Config(format!("chunk end {to} beyond {n_layers} layers")));
    }
    Ok((from..=to).collect())
}

pub fn select_random(n_layers: usize, m: usize, seed: u64) -> Result<Vec<usize>> {
    if m > n_layers {
        return Err(Error::Config(format!("M = {m} exceeds {n_layers} layers")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, n_layers, m).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// `m` consecutive ranks (by descending attention score) centred on rank
/// `(1 - level)·(L - 1)`, clamped into range. `level = 1` is the top-`m` set.
pub fn select_by_attention_level(scores: &[f64], m: usize, level: f64) -> Result<Vec<usize>> {
    let n = scores.len();
    if m > n {
        return Err(Error::Config(format!("M = {m} exceeds {n} layers")));
    }
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::Config(format!("level {level} outside [0, 1]")));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let ranked = rank_by_score(scores);
    let start = attention_window_start(n, m, level);
    let mut picked = ranked[start..start + m].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

pub(crate) fn attention_window_start(n: usize, m: usize, level: f64) -> usize {
    let centre = (1.0 - level) * (n - 1) as f64;
    let start = (centre - (m - 1) as f64 / 2.0).round();
    start.clamp(0.0, (n - m) as f64) as usize
}

/// A frozen layer set and the scores it was derived from, when any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub layers: Vec<usize>,
    pub scores: Option<SelectionScores>,
}

/// One JSON row per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub layer: usize,
    pub raw: Option<f64>,
    pub normalized: Option<f64>,
    pub prior: Option<f64>,
    pub combined: Option<f64>,
    pub selected: bool,
}

impl Calibration {
    pub fn rows(&self, n_layers: usize) -> Vec<ScoreRow> {
        (0..n_layers)
            .map(|l| {
                let s = self.scores.as_ref();
                ScoreRow {
                    layer: l,
                    raw: s.map(|s| s.raw[l]),
                    normalized: s.map(|s| s.normalized[l]),
                    prior: s.map(|s| s.prior[l]),
                    combined: s.map(|s| s.combined[l]),
                    selected: self.layers.binary_search(&l).is_ok(),
                }
            })
            .collect()
    }
}

/// Raw attention-importance scores from one capture-enabled prefill of
/// `[context; query]` on `model`.
pub fn raw_scores(model: &Model, context: &[u32], query: &[u32]) -> Result<Vec<f64>> {
    if context.is_empty() || query.is_empty() {
        return Err(Error::Config(
            "calibration needs a non-empty context and query".into(),
        ));
    }
    let mut seq = context.to_vec();
    seq.extend_from_slice(query);
    let out = model.prefill(
        &seq,
        0,
        None,
        Capture {
            attention: true,
            hidden: false,
            logits: LogitRows::None,
        },
    )?;
    attention_importance(&out.trace, context.len(), query.len())
}

/// Calibrate on a single `(context, query)` sample.
pub fn calibrate(model: &Model, context: &[u32], query: &[u32], cfg: &SelectionConfig) -> Result<Calibration> {
    calibrate_samples(model, &[(context, query)], cfg)
}

/// Calibrate on several samples; raw scores are averaged before normalization.
pub fn calibrate_samples(model: &Model, samples: &[(&[u32], &[u32])], cfg: &SelectionConfig) -> Result<Calibration> {
    let n = model.n_layers();
    cfg.validate(n)?;
    let m = cfg.budget.resolve(n)?;

    let needs_scores = matches!(cfg.strategy, Strategy::Score | Strategy::AttentionLevel { .. });
    let scores = if needs_scores {
        if samples.is_empty() {
            return Err(Error::Config("calibration needs at least one sample".into()));
        }
        let mut raw = vec![0.0f64; n];
        for (c, q) in samples {
            for (acc, v) in raw.iter_mut().zip(raw_scores(model, c, q)?) {
                *acc += v;
            }
        }
        raw.iter_mut().for_each(|v| *v /= samples.len() as f64);
        Some(SelectionScores::from_raw(raw, cfg.mu_for(n), cfg.sigma, cfg.alpha)?)
    } else {
        None
    };

    let layers = match &cfg.strategy {
        Strategy::Score => select_top_m(&scores.as_ref().expect("computed").combined, m)?,
        Strategy::AttentionLevel { level } => {
            select_by_attention_level(&scores.as_ref().expect("computed").normalized, m, *level)?
        }
        Strategy::Chunk { from, to } => select_chunk(n, *from, *to)?,
        Strategy::Random { seed } => select_random(n, m, *seed)?,
        Strategy::Explicit { layers } => {
            let mut l = layers.clone();
            l.sort_unstable();
            l.dedup();
            if let Some(bad) = l.iter().find(|&&x| x >= n) {
                return Err(Error::Config(format!("layer {bad} beyond {n} layers")));
            }
            l
        }
        Strategy::None => Vec::new(),
    };
    Ok(Calibration { layers, scores })
}
