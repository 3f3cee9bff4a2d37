//! Reference methods the KV exchange is measured against, and the
//! residual-stream interventions behind the motivating experiments.
//!
//! Hidden-state boundaries follow [`ResidualHook`]: boundary `b` is the input
//! of layer `b`, boundary `L` the final residual before the head. "The output
//! of layer `l`" is therefore boundary `l + 1`.

use serde::{Deserialize, Serialize};

use crate::comm::ReceiveOptions;
use crate::error::{Error, Result};
use crate::model::{Capture, ForwardRequest, GenerateOptions, LogitRows, Model, ResidualHook};
use crate::tensor::flops::FlopMeter;
use crate::tensor::Tensor;

/// Generated tokens plus everything the comparisons need.
#[derive(Debug, Clone)]
pub struct MethodOutput {
    pub tokens: Vec<u32>,
    pub step_logits: Vec<Vec<f32>>,
    /// Logit rows of the query span when requested.
    pub query_logits: Option<Tensor>,
    /// Prefill attention over the full processed sequence when requested.
    pub attention: Option<Vec<Tensor>>,
    pub prefill_flops: u64,
    pub decode_flops: u64,
}

/// Calls `f` once, at `boundary`.
struct AtBoundary<F> {
    boundary: usize,
    f: F,
}

impl<F> ResidualHook for AtBoundary<F>
where
    F: FnMut(&mut Tensor, &mut Vec<u32>) -> Result<()>,
{
    fn at_boundary(&mut self, boundary: usize, hidden: &mut Tensor, positions: &mut Vec<u32>) -> Result<()> {
        if boundary == self.boundary {
            (self.f)(hidden, positions)
        } else {
            Ok(())
        }
    }
}

/// Prefill `tokens` at `positions` through `hook`, then decode greedily.
/// Query logits are the last `query_len` rows.
fn hooked_run<'a>(
    model: &Model,
    tokens: &'a [u32],
    positions: Vec<u32>,
    hook: Option<&'a mut dyn ResidualHook>,
    query_len: usize,
    opts: &ReceiveOptions,
) -> Result<MethodOutput> {
    let meter = FlopMeter::start();
    let out = model.forward(ForwardRequest {
        tokens,
        positions,
        past: vec![None; model.n_layers()],
        capture: Capture {
            attention: opts.attention,
            hidden: false,
            logits: if opts.query_logits { LogitRows::All } else { LogitRows::Last },
        },
        hook,
    })?;
    let prefill_flops = meter.elapsed();
    let logits = out.trace.logits.expect("requested");
    let rows = logits.rows();
    let last = logits.row(rows - 1).to_vec();
    let next = out.trace.positions.last().copied().expect("non-empty") + 1;

    let meter = FlopMeter::start();
    let gen = model.continue_greedy(last, out.attended, next, &opts.generate)?;
    let decode_flops = meter.elapsed();

    let query_logits = if opts.query_logits {
        let vocab = logits.dim(1);
        let data = logits.data()[(rows - query_len) * vocab..].to_vec();
        Some(Tensor::new(vec![query_len, vocab], data)?)
    } else {
        None
    };
    Ok(MethodOutput {
        tokens: gen.tokens,
        step_logits: gen.step_logits,
        query_logits,
        attention: out.trace.attention,
        prefill_flops,
        decode_flops,
    })
}

fn non_empty(query: &[u32]) -> Result<()> {
    if query.is_empty() {
        Err(Error::Config("query must contain at least one token".into()))
    } else {
        Ok(())
    }
}

/// The receiver alone on the query.
pub fn run_baseline(receiver: &Model, query: &[u32], opts: &ReceiveOptions) -> Result<MethodOutput> {
    non_empty(query)?;
    hooked_run(receiver, query, (0..query.len() as u32).collect(), None, query.len(), opts)
}

/// The receiver on `[context; query]`.
pub fn run_skyline(receiver: &Model, context: &[u32], query: &[u32], opts: &ReceiveOptions) -> Result<MethodOutput> {
    non_empty(query)?;
    let mut seq = context.to_vec();
    seq.extend_from_slice(query);
    hooked_run(receiver, &seq, (0..seq.len() as u32).collect(), None, query.len(), opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcMode {
    Replace,
    Mean,
    Sum,
}

impl std::str::FromStr for AcMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replace" => Ok(AcMode::Replace),
            "mean" => Ok(AcMode::Mean),
            "sum" => Ok(AcMode::Sum),
            _ => Err(Error::Config(format!("unknown AC mode {s:?}"))),
        }
    }
}

/// Default AC layer: the output of the last layer, just before the head.
pub fn default_ac_layer(n_layers: usize) -> usize {
    n_layers - 1
}

/// Hidden state of the sender's last context token at the output of layer
/// `layer`, merged into the receiver's last query token at the same place.
pub fn run_ac(
    sender: &Model,
    receiver: &Model,
    context: &[u32],
    query: &[u32],
    mode: AcMode,
    layer: usize,
    opts: &ReceiveOptions,
) -> Result<MethodOutput> {
    non_empty(query)?;
    if context.is_empty() {
        return Err(Error::Config("AC needs a non-empty context".into()));
    }
    let n = receiver.n_layers();
    if layer >= n || layer >= sender.n_layers() {
        return Err(Error::Config(format!("AC layer {layer} out of range for {n} layers")));
    }
    if sender.config().d_model != receiver.config().d_model {
        return Err(Error::Protocol("AC needs equal hidden sizes".into()));
    }
    let boundary = layer + 1;
    let sent = sender.prefill(
        context,
        0,
        None,
        Capture {
            hidden: true,
            ..Capture::default()
        },
    )?;
    let hs = &sent.trace.hidden_states.expect("requested")[boundary];
    let h_s = hs.row(hs.dim(0) - 1).to_vec();

    let mut hook = AtBoundary {
        boundary,
        f: |hidden: &mut Tensor, _: &mut Vec<u32>| {
            let last = hidden.dim(0) - 1;
            for (r, s) in hidden.row_mut(last).iter_mut().zip(&h_s) {
                *r = match mode {
                    AcMode::Replace => *s,
                    AcMode::Mean => (*s + *r) / 2.0,
                    AcMode::Sum => *s + *r,
                };
            }
            Ok(())
        },
    };
    hooked_run(receiver, query, (0..query.len() as u32).collect(), Some(&mut hook), query.len(), opts)
}

/// Sender hidden states of every context token at boundary `layer_from`,
/// prepended to the receiver's sequence at boundary `layer_to` as positions
/// `0..|C|`. Query tokens sit at `|C|..` throughout.
pub fn run_hs_prepend(
    sender: &Model,
    receiver: &Model,
    context: &[u32],
    query: &[u32],
    layer_from: usize,
    layer_to: usize,
    opts: &ReceiveOptions,
) -> Result<MethodOutput> {
    non_empty(query)?;
    let (ls, lr) = (sender.n_layers(), receiver.n_layers());
    if layer_from >= ls || layer_to >= lr {
        return Err(Error::Config(format!(
            "prepend layers ({layer_from}, {layer_to}) out of range for ({ls}, {lr}) layers"
        )));
    }
    if sender.config().d_model != receiver.config().d_model {
        return Err(Error::Protocol("hidden-state prepending needs equal hidden sizes".into()));
    }
    if context.is_empty() {
        return run_baseline(receiver, query, opts);
    }
    let sent = sender.prefill(
        context,
        0,
        None,
        Capture {
            hidden: true,
            ..Capture::default()
        },
    )?;
    let prefix = sent.trace.hidden_states.expect("requested").swap_remove(layer_from);
    let c = context.len();

    let mut hook = AtBoundary {
        boundary: layer_to,
        f: |hidden: &mut Tensor, positions: &mut Vec<u32>| {
            let d = hidden.dim(1);
            let mut data = prefix.data().to_vec();
            data.extend_from_slice(hidden.data());
            *hidden = Tensor::new(vec![c + hidden.dim(0), d], data)?;
            let mut p: Vec<u32> = (0..c as u32).collect();
            p.extend_from_slice(positions);
            *positions = p;
            Ok(())
        },
    };
    let positions = (c as u32..(c + query.len()) as u32).collect();
    hooked_run(receiver, query, positions, Some(&mut hook), query.len(), opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMode {
    /// Zero the chosen position.
    Remove,
    /// Zero every position except the chosen one.
    Retain,
    /// Zero nothing; the identity reference.
    RetainAll,
}

impl std::str::FromStr for TokenMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "remove" => Ok(TokenMode::Remove),
            "retain" => Ok(TokenMode::Retain),
            "retain_all" | "retain-all" => Ok(TokenMode::RetainAll),
            _ => Err(Error::Config(format!("unknown token mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenImportance {
    /// KL(unmodified ‖ modified) of the final next-token distribution.
    pub kl: f64,
    pub top1_agree: bool,
}

pub fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// KL(p ‖ q) between the softmax distributions of two logit vectors.
pub fn kl_from_logits(p: &[f32], q: &[f32]) -> f64 {
    let (p, q) = (softmax_f64(p), softmax_f64(q));
    p.iter()
        .zip(&q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi.max(f64::MIN_POSITIVE)).ln())
        .sum::<f64>()
        .max(0.0)
}

fn last_logits<'a>(model: &Model, prompt: &'a [u32], hook: Option<&'a mut dyn ResidualHook>) -> Result<Vec<f32>> {
    let out = model.forward(ForwardRequest {
        tokens: prompt,
        positions: (0..prompt.len() as u32).collect(),
        past: vec![None; model.n_layers()],
        capture: Capture {
            logits: LogitRows::Last,
            ..Capture::default()
        },
        hook,
    })?;
    Ok(out.trace.logits.expect("requested").into_data())
}

/// Zero residual rows at the output of `layer` and compare the final-token
/// prediction with the unmodified run.
pub fn run_token_importance(model: &Model, prompt: &[u32], mode: TokenMode, position: usize, layer: usize) -> Result<TokenImportance> {
    if position >= prompt.len() {
        return Err(Error::Config(format!(
            "position {position} outside prompt of {} tokens",
            prompt.len()
        )));
    }
    if layer >= model.n_layers() {
        return Err(Error::Config(format!(
            "layer {layer} out of range for {} layers",
            model.n_layers()
        )));
    }
    let reference = last_logits(model, prompt, None)?;
    token_importance_against(model, prompt, &reference, mode, position, layer)
}

pub(crate) fn token_importance_against(
    model: &Model,
    prompt: &[u32],
    reference: &[f32],
    mode: TokenMode,
    position: usize,
    layer: usize,
) -> Result<TokenImportance> {
    let mut hook = AtBoundary {
        boundary: layer + 1,
        f: |hidden: &mut Tensor, _: &mut Vec<u32>| {
            for r in 0..hidden.dim(0) {
                let zero = match mode {
                    TokenMode::Remove => r == position,
                    TokenMode::Retain => r != position,
                    TokenMode::RetainAll => false,
                };
                if zero {
                    hidden.row_mut(r).fill(0.0);
                }
            }
            Ok(())
        },
    };
    let modified = last_logits(model, prompt, Some(&mut hook))?;
    Ok(TokenImportance {
        kl: kl_from_logits(reference, &modified),
        top1_agree: crate::model::argmax(reference) == crate::model::argmax(&modified),
    })
}

/// Largest absolute elementwise difference over two logit sequences.
pub fn max_logit_diff(a: &[Vec<f32>], b: &[Vec<f32>]) -> f32 {
    assert_eq!(a.len(), b.len(), "step counts differ");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "vocab sizes differ");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f32::max)
}

pub fn greedy(max_new: usize, query_logits: bool) -> ReceiveOptions {
    ReceiveOptions {
        generate: GenerateOptions::greedy(max_new),
        query_logits,
        attention: false,
    }
}
