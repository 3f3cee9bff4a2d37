//! A small deterministic decoder-only transformer.
//!
//! Pre-norm RMSNorm blocks with grouped-query attention, rotary positions and
//! a SwiGLU MLP. Weights come from a seeded ChaCha stream, so a
//! `(ModelConfig, seed)` pair fully determines a model and its `model_id`.
//!
//! Every layer can be handed a prefix of foreign key/value entries
//! ([`ForwardRequest::past`]); that is how both decoding and KV injection
//! work. Attention visibility is purely positional: a query at absolute
//! position `p` sees every key whose position is `<= p`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kv::concat_inject;
use crate::tensor::{matmul, rmsnorm_rows, rope_apply, softmax_in_place, Tensor};

pub type ModelId = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f32,
    #[serde(default = "default_eps")]
    pub rmsnorm_eps: f32,
}

fn default_rope_theta() -> f32 {
    10_000.0
}

fn default_eps() -> f32 {
    1e-5
}

impl ModelConfig {
    /// 16 layers, 4 query heads over 2 KV heads, d_model 64, byte vocabulary.
    pub fn micro() -> Self {
        ModelConfig {
            n_layers: 16,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 16,
            d_model: 64,
            d_ff: 256,
            vocab_size: 256,
            rope_theta: default_rope_theta(),
            rmsnorm_eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if self.n_layers > u16::MAX as usize {
            return fail(format!("n_layers {} does not fit the wire format", self.n_layers));
        }
        if self.n_heads == 0 || self.n_kv_heads == 0 {
            return fail("head counts must be positive".into());
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return fail(format!(
                "n_heads {} is not a multiple of n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return fail(format!("head_dim must be positive and even, got {}", self.head_dim));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return fail(format!(
                "d_model {} must equal n_heads·head_dim = {}",
                self.d_model,
                self.n_heads * self.head_dim
            ));
        }
        if self.d_ff == 0 || self.vocab_size == 0 {
            return fail("d_ff and vocab_size must be positive".into());
        }
        if !(self.rope_theta > 1.0) || !(self.rmsnorm_eps >= 0.0) {
            return fail("rope_theta must exceed 1 and rmsnorm_eps must be non-negative".into());
        }
        Ok(())
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// KV head serving query head `h`.
    pub fn kv_head_for(&self, h: usize) -> usize {
        h * self.n_kv_heads / self.n_heads
    }

    fn canonical_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(40);
        for v in [
            self.n_layers,
            self.n_heads,
            self.n_kv_heads,
            self.head_dim,
            self.d_model,
            self.d_ff,
            self.vocab_size,
        ] {
            b.extend_from_slice(&(v as u32).to_le_bytes());
        }
        b.extend_from_slice(&self.rope_theta.to_le_bytes());
        b.extend_from_slice(&self.rmsnorm_eps.to_le_bytes());
        b
    }

    /// First eight bytes (little endian) of SHA-256 over the config and seed.
    pub fn model_id(&self, seed: u64) -> ModelId {
        let mut h = Sha256::new();
        h.update(b"kvcomm-model");
        h.update(self.canonical_bytes());
        h.update(seed.to_le_bytes());
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}

/// Keys and values of one layer, `[n_kv_heads × seq × head_dim]` each, plus
/// the absolute position of every sequence slot.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    pub layer_index: usize,
    keys: Tensor,
    values: Tensor,
    positions: Vec<u32>,
}

impl LayerKv {
    pub fn new(layer_index: usize, keys: Tensor, values: Tensor, positions: Vec<u32>) -> Result<Self> {
        if keys.rank() != 3 || keys.shape() != values.shape() {
            return Err(Error::shape(format!(
                "keys {:?} and values {:?} must share a [heads, seq, head_dim] shape",
                keys.shape(),
                values.shape()
            )));
        }
        if positions.len() != keys.dim(1) {
            return Err(Error::shape(format!(
                "{} positions for {} cached tokens",
                positions.len(),
                keys.dim(1)
            )));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::shape("positions must be strictly increasing"));
        }
        Ok(LayerKv {
            layer_index,
            keys,
            values,
            positions,
        })
    }

    pub fn empty(layer_index: usize, n_kv_heads: usize, head_dim: usize) -> Self {
        LayerKv {
            layer_index,
            keys: Tensor::zeros(vec![n_kv_heads, 0, head_dim]),
            values: Tensor::zeros(vec![n_kv_heads, 0, head_dim]),
            positions: Vec::new(),
        }
    }

    pub fn keys(&self) -> &Tensor {
        &self.keys
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn positions(&self) -> &[u32] {
        &self.positions
    }

    pub fn n_kv_heads(&self) -> usize {
        self.keys.dim(0)
    }

    pub fn seq_len(&self) -> usize {
        self.keys.dim(1)
    }

    pub fn head_dim(&self) -> usize {
        self.keys.dim(2)
    }

    /// Copy of sequence slots `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<LayerKv> {
        let seq = self.seq_len();
        if range.start > range.end || range.end > seq {
            return Err(Error::shape(format!("slice {range:?} out of 0..{seq}")));
        }
        let (heads, hd) = (self.n_kv_heads(), self.head_dim());
        let take = |t: &Tensor| {
            let mut out = Vec::with_capacity(heads * range.len() * hd);
            for h in 0..heads {
                let base = h * seq * hd;
                out.extend_from_slice(&t.data()[base + range.start * hd..base + range.end * hd]);
            }
            Tensor::new(vec![heads, range.len(), hd], out)
        };
        LayerKv::new(
            self.layer_index,
            take(&self.keys)?,
            take(&self.values)?,
            self.positions[range.clone()].to_vec(),
        )
    }

    /// Head `h` keys as a `[seq × head_dim]` slice.
    fn head_keys(&self, h: usize) -> &[f32] {
        let n = self.seq_len() * self.head_dim();
        &self.keys.data()[h * n..(h + 1) * n]
    }

    fn head_values(&self, h: usize) -> &[f32] {
        let n = self.seq_len() * self.head_dim();
        &self.values.data()[h * n..(h + 1) * n]
    }

    pub fn last_position(&self) -> Option<u32> {
        self.positions.last().copied()
    }
}

/// One [`LayerKv`] per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCacheSet {
    layers: Vec<LayerKv>,
}

impl KvCacheSet {
    pub fn new(layers: Vec<LayerKv>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if l.layer_index != i {
                return Err(Error::shape(format!(
                    "cache slot {i} holds layer {}",
                    l.layer_index
                )));
            }
        }
        Ok(KvCacheSet { layers })
    }

    pub fn layers(&self) -> &[LayerKv] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> Option<&LayerKv> {
        self.layers.get(l)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn seq_lens(&self) -> Vec<usize> {
        self.layers.iter().map(LayerKv::seq_len).collect()
    }

    pub fn max_position(&self) -> Option<u32> {
        self.layers.iter().filter_map(LayerKv::last_position).max()
    }

    pub fn into_layers(self) -> Vec<LayerKv> {
        self.layers
    }
}

/// Which logits rows a forward pass computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogitRows {
    #[default]
    All,
    Last,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Capture {
    pub attention: bool,
    pub hidden: bool,
    pub logits: LogitRows,
}

impl Capture {
    pub fn logits_only() -> Self {
        Capture::default()
    }

    pub fn everything() -> Self {
        Capture {
            attention: true,
            hidden: true,
            logits: LogitRows::All,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    /// Residual stream entering each layer; index `n_layers` is the output of
    /// the last layer. Each `[seq × d_model]`.
    pub hidden_states: Option<Vec<Tensor>>,
    /// Attention probabilities per layer, `[n_heads × T_q × T_kv]`.
    pub attention: Option<Vec<Tensor>>,
    pub logits: Option<Tensor>,
    /// Absolute positions of the rows that left the last layer.
    pub positions: Vec<u32>,
}

/// Intervention on the residual stream at layer boundaries.
///
/// `boundary` is the index of the layer about to run, or `n_layers` for the
/// final output. Hooks may rewrite rows or change the sequence length, in
/// which case `positions` must be kept in step with `hidden`.
pub trait ResidualHook {
    fn at_boundary(&mut self, boundary: usize, hidden: &mut Tensor, positions: &mut Vec<u32>) -> Result<()>;
}

pub struct ForwardRequest<'a> {
    pub tokens: &'a [u32],
    pub positions: Vec<u32>,
    /// Entries prepended to each layer's own keys/values before attention.
    pub past: Vec<Option<&'a LayerKv>>,
    pub capture: Capture,
    pub hook: Option<&'a mut dyn ResidualHook>,
}

pub struct ForwardOutput {
    pub trace: ForwardTrace,
    /// Keys/values computed by this pass only.
    pub own: KvCacheSet,
    /// `past ++ own` per layer: exactly what attention saw.
    pub attended: KvCacheSet,
}

pub struct PrefillOutput {
    pub trace: ForwardTrace,
    /// Keys/values of the prefilled tokens only; injected entries are not re-emitted.
    pub cache: KvCacheSet,
    /// Injected plus own entries per layer; the cache decoding continues from.
    pub decode_cache: KvCacheSet,
}

#[derive(Debug, Clone)]
struct LayerWeights {
    attn_norm: Vec<f32>,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    mlp_norm: Vec<f32>,
    w_gate: Tensor,
    w_up: Tensor,
    w_down: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    seed: u64,
    model_id: ModelId,
    embedding: Tensor,
    layers: Vec<LayerWeights>,
    final_norm: Vec<f32>,
    lm_head: Tensor,
}

const FILE_MAGIC: &[u8; 4] = b"KVMD";
const FILE_VERSION: u16 = 1;

impl Model {
    /// Weights uniform in `[-1/sqrt(d_model), 1/sqrt(d_model))`, norm gains 1.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (config.d_model as f32).sqrt();
        let mut draw = |shape: Vec<usize>| Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        let (d, dq, dkv, dff) = (config.d_model, config.d_model, config.kv_dim(), config.d_ff);

        let embedding = draw(vec![config.vocab_size, d]);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: vec![1.0; d],
                wq: draw(vec![d, dq]),
                wk: draw(vec![d, dkv]),
                wv: draw(vec![d, dkv]),
                wo: draw(vec![dq, d]),
                mlp_norm: vec![1.0; d],
                w_gate: draw(vec![d, dff]),
                w_up: draw(vec![d, dff]),
                w_down: draw(vec![dff, d]),
            })
            .collect();
        let lm_head = draw(vec![d, config.vocab_size]);
        Ok(Model {
            model_id: config.model_id(seed),
            seed,
            embedding,
            layers,
            final_norm: vec![1.0; d],
            lm_head,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn model_id(&self) -> ModelId {
        self.model_id
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    fn embed(&self, tokens: &[u32]) -> Result<Tensor> {
        let d = self.config.d_model;
        let mut out = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::config(format!(
                    "token {t} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            out.extend_from_slice(self.embedding.row(t as usize));
        }
        Tensor::new(vec![tokens.len(), d], out)
    }

    /// `[seq × heads·hd]` → `[heads × seq × hd]`.
    fn split_heads(x: &Tensor, heads: usize, hd: usize) -> Result<Tensor> {
        let seq = x.dim(0);
        let mut out = vec![0.0f32; x.len()];
        for s in 0..seq {
            let row = x.row(s);
            for h in 0..heads {
                let dst = (h * seq + s) * hd;
                out[dst..dst + hd].copy_from_slice(&row[h * hd..(h + 1) * hd]);
            }
        }
        Tensor::new(vec![heads, seq, hd], out)
    }

    fn check_past(&self, layer: usize, past: &LayerKv) -> Result<()> {
        if past.n_kv_heads() != self.config.n_kv_heads || past.head_dim() != self.config.head_dim {
            return Err(Error::shape(format!(
                "layer {layer}: injected kv is [{}, _, {}] but model expects [{}, _, {}]",
                past.n_kv_heads(),
                past.head_dim(),
                self.config.n_kv_heads,
                self.config.head_dim
            )));
        }
        Ok(())
    }

    /// Full forward pass with optional per-layer KV prefixes, capture and a
    /// residual-stream hook.
    pub fn forward(&self, req: ForwardRequest<'_>) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let ForwardRequest {
            tokens,
            mut positions,
            past,
            capture,
            mut hook,
        } = req;
        if tokens.is_empty() {
            return Err(Error::config("forward needs at least one token"));
        }
        if positions.len() != tokens.len() {
            return Err(Error::shape("one position per token required"));
        }
        if past.len() != cfg.n_layers {
            return Err(Error::shape(format!(
                "{} past slots for {} layers",
                past.len(),
                cfg.n_layers
            )));
        }
        for (l, p) in past.iter().enumerate() {
            if let Some(p) = p {
                self.check_past(l, p)?;
            }
        }

        let (h_n, kv_n, hd) = (cfg.n_heads, cfg.n_kv_heads, cfg.head_dim);
        let scale = 1.0 / (hd as f32).sqrt();
        let mut hidden = self.embed(tokens)?;
        let mut hidden_states = capture.hidden.then(Vec::new);
        let mut attention = capture.attention.then(Vec::new);
        let mut own_layers = Vec::with_capacity(cfg.n_layers);
        let mut attended_layers = Vec::with_capacity(cfg.n_layers);

        for (l, w) in self.layers.iter().enumerate() {
            if let Some(hook) = hook.as_deref_mut() {
                hook.at_boundary(l, &mut hidden, &mut positions)?;
                if hidden.dim(0) != positions.len() {
                    return Err(Error::shape(format!(
                        "hook at boundary {l} left {} rows but {} positions",
                        hidden.dim(0),
                        positions.len()
                    )));
                }
            }
            if let Some(hs) = hidden_states.as_mut() {
                hs.push(hidden.clone());
            }
            let seq = hidden.dim(0);

            let xn = rmsnorm_rows(&hidden, &w.attn_norm, cfg.rmsnorm_eps)?;
            let q = Self::split_heads(&matmul(&xn, &w.wq)?, h_n, hd)?;
            let k = Self::split_heads(&matmul(&xn, &w.wk)?, kv_n, hd)?;
            let v = Self::split_heads(&matmul(&xn, &w.wv)?, kv_n, hd)?;
            let q = rope_apply(&q, &positions, cfg.rope_theta)?;
            let k = rope_apply(&k, &positions, cfg.rope_theta)?;
            let own = LayerKv::new(l, k, v, positions.clone())?;
            let full = match past[l] {
                Some(p) => concat_inject(&own, p)?,
                None => own.clone(),
            };
            let kv_len = full.seq_len();

            // visibility[t][j]: key j visible to query t
            let mask: Vec<bool> = positions
                .iter()
                .flat_map(|&qp| full.positions().iter().map(move |&kp| kp <= qp))
                .collect();

            let key_t: Vec<Tensor> = (0..kv_n)
                .map(|g| Tensor::new(vec![kv_len, hd], full.head_keys(g).to_vec())?.transpose2d())
                .collect::<Result<_>>()?;
            let val: Vec<Tensor> = (0..kv_n)
                .map(|g| Tensor::new(vec![kv_len, hd], full.head_values(g).to_vec()))
                .collect::<Result<_>>()?;

            let mut attn_out = vec![0.0f32; seq * h_n * hd];
            let mut probs_all = attention.as_ref().map(|_| Vec::with_capacity(h_n * seq * kv_len));
            for h in 0..h_n {
                let g = cfg.kv_head_for(h);
                let q_h = Tensor::new(vec![seq, hd], q.data()[h * seq * hd..(h + 1) * seq * hd].to_vec())?;
                let mut scores = matmul(&q_h, &key_t[g])?;
                for (t, row) in scores.data_mut().chunks_mut(kv_len).enumerate() {
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = if mask[t * kv_len + j] { *s * scale } else { f32::NEG_INFINITY };
                    }
                    softmax_in_place(row)?;
                }
                let ctx = matmul(&scores, &val[g])?;
                for t in 0..seq {
                    let dst = t * h_n * hd + h * hd;
                    attn_out[dst..dst + hd].copy_from_slice(ctx.row(t));
                }
                if let Some(p) = probs_all.as_mut() {
                    p.extend_from_slice(scores.data());
                }
            }
            if let (Some(att), Some(p)) = (attention.as_mut(), probs_all) {
                att.push(Tensor::new(vec![h_n, seq, kv_len], p)?.with_name(format!("attn.{l}")));
            }

            let attn_out = Tensor::new(vec![seq, h_n * hd], attn_out)?;
            let o = matmul(&attn_out, &w.wo)?;
            for (x, y) in hidden.data_mut().iter_mut().zip(o.data()) {
                *x += y;
            }

            let xn = rmsnorm_rows(&hidden, &w.mlp_norm, cfg.rmsnorm_eps)?;
            let mut gate = matmul(&xn, &w.w_gate)?;
            let up = matmul(&xn, &w.w_up)?;
            for (g, u) in gate.data_mut().iter_mut().zip(up.data()) {
                *g = *g / (1.0 + (-*g).exp()) * u;
            }
            let down = matmul(&gate, &w.w_down)?;
            for (x, y) in hidden.data_mut().iter_mut().zip(down.data()) {
                *x += y;
            }
            if !hidden.all_finite() {
                return Err(Error::Numeric(format!("non-finite residual after layer {l}")));
            }

            own_layers.push(own);
            attended_layers.push(full);
        }

        if let Some(hook) = hook.as_deref_mut() {
            hook.at_boundary(cfg.n_layers, &mut hidden, &mut positions)?;
        }
        if let Some(hs) = hidden_states.as_mut() {
            hs.push(hidden.clone());
        }

        let logits = match capture.logits {
            LogitRows::None => None,
            LogitRows::All => {
                let normed = rmsnorm_rows(&hidden, &self.final_norm, cfg.rmsnorm_eps)?;
                Some(matmul(&normed, &self.lm_head)?)
            }
            LogitRows::Last => {
                let last = Tensor::new(vec![1, cfg.d_model], hidden.row(hidden.dim(0) - 1).to_vec())?;
                let normed = rmsnorm_rows(&last, &self.final_norm, cfg.rmsnorm_eps)?;
                Some(matmul(&normed, &self.lm_head)?)
            }
        };

        Ok(ForwardOutput {
            trace: ForwardTrace {
                hidden_states,
                attention,
                logits,
                positions,
            },
            own: KvCacheSet::new(own_layers)?,
            attended: KvCacheSet::new(attended_layers)?,
        })
    }

    /// Prefill `tokens` at positions `offset..offset+len`, with optional KV
    /// injected at some layers. Injected positions must all precede `offset`.
    pub fn prefill(
        &self,
        tokens: &[u32],
        offset: u32,
        injected: Option<&BTreeMap<usize, LayerKv>>,
        capture: Capture,
    ) -> Result<PrefillOutput> {
        let mut past = vec![None; self.config.n_layers];
        if let Some(inj) = injected {
            for (&l, kv) in inj {
                if l >= self.config.n_layers {
                    return Err(Error::shape(format!(
                        "injection at layer {l} but model has {} layers",
                        self.config.n_layers
                    )));
                }
                if kv.positions().iter().any(|&p| p >= offset) {
                    return Err(Error::Protocol(format!(
                        "position collision at layer {l}: injected positions reach {:?}, query starts at {offset}",
                        kv.last_position()
                    )));
                }
                past[l] = Some(kv);
            }
        }
        let positions = (0..tokens.len() as u32).map(|i| offset + i).collect();
        let out = self.forward(ForwardRequest {
            tokens,
            positions,
            past,
            capture,
            hook: None,
        })?;
        Ok(PrefillOutput {
            trace: out.trace,
            cache: out.own,
            decode_cache: out.attended,
        })
    }

    /// One token at `position` against `cache`; appends its KV to every layer
    /// and returns the next-token logits.
    pub fn decode_step(&self, token: u32, cache: &mut KvCacheSet, position: u32) -> Result<Vec<f32>> {
        if cache.n_layers() != self.config.n_layers {
            return Err(Error::shape(format!(
                "cache has {} layers, model {}",
                cache.n_layers(),
                self.config.n_layers
            )));
        }
        if let Some(maxp) = cache.max_position() {
            if position <= maxp {
                return Err(Error::Protocol(format!(
                    "stale position {position}: cache already holds position {maxp}"
                )));
            }
        }
        let out = self.forward(ForwardRequest {
            tokens: &[token],
            positions: vec![position],
            past: cache.layers.iter().map(Some).collect(),
            capture: Capture {
                logits: LogitRows::Last,
                ..Capture::default()
            },
            hook: None,
        })?;
        *cache = out.attended;
        Ok(out.trace.logits.expect("requested").into_data())
    }

    /// Greedy continuation from logits already computed for the next slot.
    pub fn continue_greedy(
        &self,
        first_logits: Vec<f32>,
        mut cache: KvCacheSet,
        next_position: u32,
        opts: &GenerateOptions,
    ) -> Result<Generation> {
        let mut tokens = Vec::with_capacity(opts.max_new);
        let mut step_logits = Vec::with_capacity(opts.max_new);
        let mut logits = first_logits;
        let mut pos = next_position;
        for i in 0..opts.max_new {
            let next = match &opts.forced {
                Some(f) => *f.get(i).ok_or_else(|| {
                    Error::config(format!("forced sequence has {} tokens, need {}", f.len(), opts.max_new))
                })?,
                None => argmax(&logits),
            };
            step_logits.push(std::mem::take(&mut logits));
            tokens.push(next);
            if opts.eos == Some(next) || i + 1 == opts.max_new {
                break;
            }
            logits = self.decode_step(next, &mut cache, pos)?;
            pos += 1;
        }
        Ok(Generation {
            tokens,
            step_logits,
            cache,
        })
    }

    /// Plain greedy generation from `prompt` at position 0.
    pub fn generate(&self, prompt: &[u32], opts: &GenerateOptions) -> Result<Generation> {
        let pre = self.prefill(
            prompt,
            0,
            None,
            Capture {
                logits: LogitRows::Last,
                ..Capture::default()
            },
        )?;
        let first = pre.trace.logits.expect("requested").into_data();
        self.continue_greedy(first, pre.decode_cache, prompt.len() as u32, opts)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(FILE_MAGIC);
        out.extend_from_slice(&FILE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.model_id.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&c.canonical_bytes());
        let mut put = |v: &[f32]| {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        put(self.embedding.data());
        for w in &self.layers {
            put(&w.attn_norm);
            put(w.wq.data());
            put(w.wk.data());
            put(w.wv.data());
            put(w.wo.data());
            put(&w.mlp_norm);
            put(w.w_gate.data());
            put(w.w_up.data());
            put(w.w_down.data());
        }
        put(&self.final_norm);
        put(self.lm_head.data());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        let mut r = ByteReader { buf: bytes, pos: 0 };
        if r.take(4)? != FILE_MAGIC {
            return Err(Error::config("not a model file (bad magic)"));
        }
        let version = r.u16()?;
        if version != FILE_VERSION {
            return Err(Error::config(format!("unsupported model file version {version}")));
        }
        let model_id = r.u64()?;
        let seed = r.u64()?;
        let mut dims = [0usize; 7];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let config = ModelConfig {
            n_layers: dims[0],
            n_heads: dims[1],
            n_kv_heads: dims[2],
            head_dim: dims[3],
            d_model: dims[4],
            d_ff: dims[5],
            vocab_size: dims[6],
            rope_theta: r.f32()?,
            rmsnorm_eps: r.f32()?,
        };
        config.validate()?;
        let (d, dkv, dff, v) = (config.d_model, config.kv_dim(), config.d_ff, config.vocab_size);
        let embedding = r.tensor(vec![v, d])?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_norm: r.floats(d)?,
                wq: r.tensor(vec![d, d])?,
                wk: r.tensor(vec![d, dkv])?,
                wv: r.tensor(vec![d, dkv])?,
                wo: r.tensor(vec![d, d])?,
                mlp_norm: r.floats(d)?,
                w_gate: r.tensor(vec![d, dff])?,
                w_up: r.tensor(vec![d, dff])?,
                w_down: r.tensor(vec![dff, d])?,
            });
        }
        let final_norm = r.floats(d)?;
        let lm_head = r.tensor(vec![d, v])?;
        if r.pos != bytes.len() {
            return Err(Error::config(format!(
                "{} trailing bytes in model file",
                bytes.len() - r.pos
            )));
        }
        Ok(Model {
            config,
            seed,
            model_id,
            embedding,
            layers,
            final_norm,
            lm_head,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Model::from_bytes(&bytes)
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::config("model file is truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn tensor(&mut self, shape: Vec<usize>) -> Result<Tensor> {
        let n = shape.iter().product();
        Tensor::new(shape, self.floats(n)?)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f32]) -> u32 {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best as u32
}

#[derive(Debug, Clone, Default)]
pub struct GenerateOptions {
    pub max_new: usize,
    pub eos: Option<u32>,
    /// Teacher-forced continuation: emit these tokens instead of the argmax.
    pub forced: Option<Vec<u32>>,
}

impl GenerateOptions {
    pub fn greedy(max_new: usize) -> Self {
        GenerateOptions {
            max_new,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub tokens: Vec<u32>,
    /// Logits each emitted token was chosen from.
    pub step_logits: Vec<Vec<f32>>,
    pub cache: KvCacheSet,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 8,
            d_model: 32,
            d_ff: 64,
            vocab_size: 50,
            ..ModelConfig::micro()
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::build(tiny(), 1).unwrap();
        let b = Model::build(tiny(), 1).unwrap();
        let c = Model::build(tiny(), 2).unwrap();
        assert_eq!(a.model_id(), b.model_id());
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.model_id(), c.model_id());
    }

    #[test]
    fn config_invariants() {
        let mut cfg = ModelConfig::micro();
        assert!(cfg.validate().is_ok());
        cfg.d_model = 60;
        assert!(matches!(Model::build(cfg.clone(), 0), Err(Error::Config(_))));
        cfg.d_model = 64;
        cfg.n_kv_heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.n_kv_heads = 2;
        cfg.n_layers = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn gqa_mapping() {
        let cfg = ModelConfig::micro();
        let got: Vec<usize> = (0..4).map(|h| cfg.kv_head_for(h)).collect();
        assert_eq!(got, vec![0, 0, 1, 1]);
    }

    #[test]
    fn causal_attention_without_injection() {
        let m = Model::build(tiny(), 3).unwrap();
        let out = m.prefill(&[1, 2, 3, 4], 0, None, Capture::everything()).unwrap();
        for att in out.trace.attention.unwrap() {
            assert_eq!(att.shape(), &[4, 4, 4]);
            for h in 0..4 {
                for t in 0..4 {
                    let row = &att.data()[(h * 4 + t) * 4..(h * 4 + t + 1) * 4];
                    assert!(row[t + 1..].iter().all(|&v| v == 0.0));
                    assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn injected_attention_shape() {
        let m = Model::build(tiny(), 3).unwrap();
        let ctx = m.prefill(&[5, 6, 7], 0, None, Capture::default()).unwrap();
        let inj: BTreeMap<_, _> = ctx.cache.layers().iter().map(|l| (l.layer_index, l.clone())).collect();
        let out = m.prefill(&[8, 9], 3, Some(&inj), Capture::everything()).unwrap();
        for att in out.trace.attention.unwrap() {
            assert_eq!(att.shape(), &[4, 2, 5]);
        }
        assert_eq!(out.cache.seq_lens(), vec![2; 3]);
        assert_eq!(out.decode_cache.seq_lens(), vec![5; 3]);
    }

    #[test]
    fn injection_position_collision() {
        let m = Model::build(tiny(), 3).unwrap();
        let ctx = m.prefill(&[5, 6, 7], 0, None, Capture::default()).unwrap();
        let inj: BTreeMap<_, _> = [(0, ctx.cache.layer(0).unwrap().clone())].into();
        assert!(matches!(
            m.prefill(&[8], 2, Some(&inj), Capture::default()),
            Err(Error::Protocol(_))
        ));
        let inj: BTreeMap<_, _> = [(7, ctx.cache.layer(0).unwrap().clone())].into();
        assert!(matches!(m.prefill(&[8], 3, Some(&inj), Capture::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn decode_matches_prefill() {
        let m = Model::build(tiny(), 4).unwrap();
        let toks = [3u32, 14, 15, 9, 2];
        let full = m.prefill(&toks, 0, None, Capture::default()).unwrap();
        let part = m.prefill(&toks[..4], 0, None, Capture::default()).unwrap();
        let mut cache = part.decode_cache.clone();
        let logits = m.decode_step(toks[4], &mut cache, 4).unwrap();
        let want = full.trace.logits.unwrap();
        let diff = logits
            .iter()
            .zip(want.row(4))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(diff <= 1e-4, "{diff}");
        assert_eq!(cache.seq_lens(), vec![5; 3]);

        let mut c1 = part.decode_cache.clone();
        let mut c2 = part.decode_cache.clone();
        assert_eq!(
            m.decode_step(1, &mut c1, 4).unwrap(),
            m.decode_step(1, &mut c2, 4).unwrap()
        );
    }

    #[test]
    fn decode_rejects_stale_position() {
        let m = Model::build(tiny(), 4).unwrap();
        let part = m.prefill(&[1, 2], 0, None, Capture::default()).unwrap();
        let mut cache = part.decode_cache;
        assert!(matches!(m.decode_step(1, &mut cache, 1), Err(Error::Protocol(_))));
    }

    #[test]
    fn generate_edge_cases() {
        let m = Model::build(tiny(), 4).unwrap();
        assert!(m.generate(&[1, 2], &GenerateOptions::greedy(0)).unwrap().tokens.is_empty());
        let a = m.generate(&[1, 2], &GenerateOptions::greedy(6)).unwrap();
        let b = m.generate(&[1, 2], &GenerateOptions::greedy(6)).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.tokens.len(), 6);
    }

    #[test]
    fn generate_matches_step_loop() {
        let m = Model::build(tiny(), 9).unwrap();
        let prompt = [4u32, 8, 15];
        let g = m.generate(&prompt, &GenerateOptions::greedy(5)).unwrap();

        let pre = m.prefill(&prompt, 0, None, Capture::default()).unwrap();
        let logits = pre.trace.logits.unwrap();
        let mut next = argmax(logits.row(2));
        let mut cache = pre.decode_cache;
        let mut want = vec![next];
        for i in 0..4 {
            let l = m.decode_step(next, &mut cache, 3 + i).unwrap();
            next = argmax(&l);
            want.push(next);
        }
        assert_eq!(g.tokens, want);
    }

    #[test]
    fn eos_stops_generation() {
        let m = Model::build(tiny(), 9).unwrap();
        let g = m.generate(&[4, 8], &GenerateOptions::greedy(5)).unwrap();
        let k = g.tokens.iter().position(|t| *t == g.tokens[g.tokens.len() - 1]).unwrap();
        let opts = GenerateOptions {
            max_new: 5,
            eos: Some(g.tokens[k]),
            forced: None,
        };
        let stopped = m.generate(&[4, 8], &opts).unwrap();
        assert_eq!(stopped.tokens, g.tokens[..=k].to_vec());
    }

    #[test]
    fn save_load_round_trip() {
        let m = Model::build(tiny(), 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.model_id(), m.model_id());
        assert_eq!(back.config(), m.config());
        let a = m.prefill(&[1, 2, 3], 0, None, Capture::default()).unwrap();
        let b = back.prefill(&[1, 2, 3], 0, None, Capture::default()).unwrap();
        assert!(a.trace.logits.unwrap().max_abs_diff(&b.trace.logits.unwrap()).unwrap() <= 1e-7);
        let mut bytes = m.to_bytes();
        bytes.pop();
        assert!(Model::from_bytes(&bytes).is_err());
    }

    #[test]
    fn gqa_heads_read_their_own_kv_group() {
        // Group 0 gets all-zero injected keys, so its query heads must spread
        // identical weight over the injected slots; group 1 keeps distinct keys.
        let m = Model::build(tiny(), 21).unwrap();
        let ctx = m.prefill(&[1, 2, 3], 0, None, Capture::default()).unwrap();
        let layer0 = ctx.cache.layer(0).unwrap();
        let (seq, hd) = (3, 8);
        let mut keys = layer0.keys().data().to_vec();
        for k in keys[..seq * hd].iter_mut() {
            *k = 0.0;
        }
        for k in keys[seq * hd..].iter_mut() {
            *k *= 40.0;
        }
        let kv = LayerKv::new(
            0,
            Tensor::new(vec![2, seq, hd], keys).unwrap(),
            layer0.values().clone(),
            layer0.positions().to_vec(),
        )
        .unwrap();
        let inj: BTreeMap<_, _> = [(0, kv)].into();
        let out = m.prefill(&[4], 3, Some(&inj), Capture::everything()).unwrap();
        let att = &out.trace.attention.as_ref().unwrap()[0];
        assert_eq!(att.shape(), &[4, 1, 4]);
        for h in 0..4 {
            let row = &att.data()[h * 4..h * 4 + 3];
            let flat = row.iter().all(|&v| v == row[0]);
            assert_eq!(flat, m.config().kv_head_for(h) == 0, "head {h}: {row:?}");
        }
    }
}
