//! Sender and receiver agents and the pipeline joining them.
//!
//! The sender prefills the context once and ships the KV pairs of a frozen
//! layer subset. The receiver prefills the query at positions that continue
//! after the context, attending at each selected layer to the shipped entries
//! followed by its own, then decodes greedily with the injected entries kept
//! in its cache.

pub mod tcp;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Stage, StageExt};
use crate::kv::{deserialize, extract_payload, serialize, DType, KvPayload};
use crate::model::{Capture, GenerateOptions, KvCacheSet, LayerKv, LogitRows, Model, ModelConfig};
use crate::tensor::flops::FlopMeter;
use crate::tensor::Tensor;

use tcp::{TcpConfig, TcpReceiver, TcpSender};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transport {
    #[default]
    InProcess,
    /// Serialized payload written to and read back from a file.
    File { path: PathBuf },
    /// Loopback TCP: a listener thread receives the frame. `addr` falls back
    /// to `KVCOMM_ADDR`, then an ephemeral localhost port.
    Tcp {
        #[serde(default)]
        addr: Option<String>,
        #[serde(default)]
        timeout_ms: Option<u64>,
    },
}

/// Sender and receiver must agree on every dimension a KV entry depends on.
pub fn check_compatible(sender: &ModelConfig, receiver: &ModelConfig) -> Result<()> {
    let pairs = [
        ("n_layers", sender.n_layers, receiver.n_layers),
        ("n_heads", sender.n_heads, receiver.n_heads),
        ("n_kv_heads", sender.n_kv_heads, receiver.n_kv_heads),
        ("head_dim", sender.head_dim, receiver.head_dim),
    ];
    for (name, s, r) in pairs {
        if s != r {
            return Err(Error::Protocol(format!("sender {name} = {s} but receiver {name} = {r}")));
        }
    }
    Ok(())
}

fn check_layers(layers: &[usize], n_layers: usize) -> Result<Vec<usize>> {
    let mut sorted = layers.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if let Some(bad) = sorted.iter().find(|&&l| l >= n_layers) {
        return Err(Error::Config(format!("layer {bad} out of range for {n_layers} layers")));
    }
    Ok(sorted)
}

/// A sender/receiver pair with a frozen layer set.
#[derive(Debug, Clone)]
pub struct Session<'a> {
    sender: &'a Model,
    receiver: &'a Model,
    layers: Vec<usize>,
    transport: Transport,
    dtype: DType,
}

impl<'a> Session<'a> {
    pub fn new(
        sender: &'a Model,
        receiver: &'a Model,
        layers: &[usize],
        transport: Transport,
        dtype: DType,
    ) -> Result<Self> {
        check_compatible(sender.config(), receiver.config())?;
        Ok(Session {
            sender,
            receiver,
            layers: check_layers(layers, sender.n_layers())?,
            transport,
            dtype,
        })
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn transport(&self) -> &Transport {
        &self.transport
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn sender(&self) -> &Model {
        self.sender
    }

    pub fn receiver(&self) -> &Model {
        self.receiver
    }
}

/// Prefill `context` at positions `0..|C|` and package the KV of `layers`.
pub fn sender_run(model: &Model, context: &[u32], layers: &[usize], dtype: DType) -> Result<KvPayload> {
    let layers = check_layers(layers, model.n_layers())?;
    let cfg = model.config();
    if context.is_empty() {
        let entries = layers
            .iter()
            .map(|&l| LayerKv::empty(l, cfg.n_kv_heads, cfg.head_dim))
            .collect();
        return KvPayload::new(model.model_id(), cfg.n_layers, dtype, cfg.n_kv_heads, cfg.head_dim, Vec::new(), entries);
    }
    let capture = Capture {
        logits: LogitRows::None,
        ..Capture::default()
    };
    let out = model.prefill(context, 0, None, capture)?;
    extract_payload(&out.cache, model.model_id(), &layers, dtype)
}

#[derive(Debug, Clone, Default)]
pub struct ReceiveOptions {
    pub generate: GenerateOptions,
    /// Keep logits for every query row, not just the last.
    pub query_logits: bool,
    /// Capture prefill attention weights.
    pub attention: bool,
}

#[derive(Debug, Clone)]
pub struct ReceiverOutput {
    pub tokens: Vec<u32>,
    /// Logits that produced each generated token.
    pub step_logits: Vec<Vec<f32>>,
    /// `[|Q| × vocab]` when requested.
    pub query_logits: Option<Tensor>,
    /// Per-layer `[H × |Q| × (injected + |Q|)]` when requested.
    pub attention: Option<Vec<Tensor>>,
    pub position_offset: u32,
    pub warnings: Vec<String>,
    pub prefill_flops: u64,
    pub decode_flops: u64,
    pub cache: KvCacheSet,
}

/// Position of the first query token. It continues after the context when
/// anything was injected; an empty payload leaves the query at 0 so the run
/// is exactly the query-only one.
pub fn position_offset(payload: &KvPayload) -> u32 {
    if payload.m() == 0 {
        0
    } else {
        payload.seq_len() as u32
    }
}

pub fn receiver_run(model: &Model, query: &[u32], payload: &KvPayload, opts: &ReceiveOptions) -> Result<ReceiverOutput> {
    if query.is_empty() {
        return Err(Error::Config("query must contain at least one token".into()));
    }
    let cfg = model.config();
    if payload.n_layers_total != cfg.n_layers
        || payload.n_kv_heads != cfg.n_kv_heads
        || payload.head_dim != cfg.head_dim
    {
        return Err(Error::Protocol(format!(
            "payload shaped for L={}, kv_heads={}, head_dim={} but receiver has L={}, kv_heads={}, head_dim={}",
            payload.n_layers_total, payload.n_kv_heads, payload.head_dim, cfg.n_layers, cfg.n_kv_heads, cfg.head_dim
        )));
    }
    let mut warnings = Vec::new();
    if payload.sender_model_id != model.model_id() {
        let w = format!(
            "payload from model {:016x} injected into model {:016x}",
            payload.sender_model_id,
            model.model_id()
        );
        tracing::warn!("{w}");
        warnings.push(w);
    }

    let injected: BTreeMap<usize, LayerKv> = payload
        .entries()
        .iter()
        .map(|e| (e.layer_index, e.clone()))
        .collect();
    let offset = position_offset(payload);
    let capture = Capture {
        logits: if opts.query_logits { LogitRows::All } else { LogitRows::Last },
        attention: opts.attention,
        hidden: false,
    };

    let meter = FlopMeter::start();
    let pre = model.prefill(query, offset, Some(&injected), capture)?;
    let prefill_flops = meter.elapsed();

    let logits = pre.trace.logits.expect("requested");
    let last = logits.row(logits.rows() - 1).to_vec();
    let meter = FlopMeter::start();
    let gen = model.continue_greedy(last, pre.decode_cache, offset + query.len() as u32, &opts.generate)?;
    let decode_flops = meter.elapsed();

    Ok(ReceiverOutput {
        tokens: gen.tokens,
        step_logits: gen.step_logits,
        query_logits: opts.query_logits.then_some(logits),
        attention: pre.trace.attention,
        position_offset: offset,
        warnings,
        prefill_flops,
        decode_flops,
        cache: gen.cache,
    })
}

/// Move serialized bytes across `transport` and decode them on the far side.
pub fn transmit(bytes: &[u8], transport: &Transport) -> Result<KvPayload> {
    match transport {
        Transport::InProcess => Ok(deserialize(bytes)?),
        Transport::File { path } => {
            std::fs::write(path, bytes)?;
            let back = std::fs::read(path)?;
            Ok(deserialize(&back)?)
        }
        Transport::Tcp { addr, timeout_ms } => {
            let env = TcpConfig::from_env()?;
            let addr = addr
                .clone()
                .or_else(|| std::env::var("KVCOMM_ADDR").ok())
                .unwrap_or_else(|| "127.0.0.1:0".to_string());
            let timeout = timeout_ms.map(Duration::from_millis).unwrap_or(env.timeout);
            let rx = TcpReceiver::bind(addr.as_str(), timeout)?;
            let local = rx.local_addr()?;
            let handle = thread::spawn(move || -> Result<KvPayload> {
                let mut conn = rx.accept()?;
                conn.recv()?
                    .ok_or_else(|| Error::Transport("sender closed before sending a payload".into()))
            });
            let sent = TcpSender::connect(local, timeout).and_then(|mut tx| tx.send(bytes));
            let received = handle
                .join()
                .map_err(|_| Error::Transport("receiver thread panicked".into()))?;
            // A nack on the sender side and the decode error on the receiver
            // side describe the same failure; prefer the more specific one.
            match (sent, received) {
                (_, Err(e)) => Err(e),
                (Err(e), Ok(_)) => Err(e),
                (Ok(()), Ok(p)) => Ok(p),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFlops {
    pub sender_prefill: u64,
    pub receiver_prefill: u64,
    pub receiver_decode: u64,
}

impl StageFlops {
    pub fn receiver(&self) -> u64 {
        self.receiver_prefill + self.receiver_decode
    }

    pub fn total(&self) -> u64 {
        self.sender_prefill + self.receiver()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub tokens: Vec<u32>,
    pub step_logits: Vec<Vec<f32>>,
    pub query_logits: Option<Tensor>,
    pub layers: Vec<usize>,
    pub wire_bytes: usize,
    pub flops: StageFlops,
    pub position_offset: u32,
    pub warnings: Vec<String>,
}

/// Sender prefill, serialization, transport, receiver prefill and decode.
/// Errors carry the stage they were raised in.
pub fn end_to_end(session: &Session<'_>, context: &[u32], query: &[u32], opts: &ReceiveOptions) -> Result<RunOutcome> {
    let meter = FlopMeter::start();
    let payload = sender_run(session.sender, context, &session.layers, session.dtype).at(Stage::Sender)?;
    let sender_prefill = meter.elapsed();

    let bytes = serialize(&payload);
    let received = transmit(&bytes, &session.transport).at(Stage::Transport)?;

    let out = receiver_run(session.receiver, query, &received, opts).at(Stage::Receiver)?;
    Ok(RunOutcome {
        tokens: out.tokens,
        step_logits: out.step_logits,
        query_logits: out.query_logits,
        layers: session.layers.clone(),
        wire_bytes: bytes.len(),
        flops: StageFlops {
            sender_prefill,
            receiver_prefill: out.prefill_flops,
            receiver_decode: out.decode_flops,
        },
        position_offset: out.position_offset,
        warnings: out.warnings,
    })
}
