//! Closed-form FLOP estimates and their reconciliation with the matmul
//! counter.
//!
//! A single decoder layer costs `N·d² + N²·d` to prefill `N` tokens and
//! `d² + (N + i)·d` to decode token `i` against `N` cached ones. Every
//! formula here is written with two symbolic coefficients in place of `d²`
//! and `d`, supplied by a [`CostConstants`]:
//!
//! | constant          | unit map | model map                                  |
//! |-------------------|----------|--------------------------------------------|
//! | `per_token`       | `d²`     | `2·d·d_q + 4·d·d_kv + 2·d_q·d + 6·d·d_ff`  |
//! | `per_pair`        | `d`      | `4·d_q`                                    |
//! | `per_logit_row`   | `0`      | `2·d·vocab`                                |
//!
//! The model map counts `2·m·k·n` per matmul: the Q, K, V and output
//! projections, the three MLP matrices, `Q·Kᵀ` and `P·V` over every
//! (query, key) pair, and one head projection per generated logit row.
//! Norms, RoPE, softmax and the residual adds are not matmuls and are left
//! out. With the unit map the totals are exactly the textbook expressions.

use serde::{Deserialize, Serialize};

use crate::baselines::run_skyline;
use crate::comm::{end_to_end, ReceiveOptions, Session, StageFlops, Transport};
use crate::error::{Error, Result};
use crate::kv::DType;
use crate::model::{GenerateOptions, Model, ModelConfig};

/// Symbols of the cost formulas. `t` counts decode passes of the receiver;
/// `t_s` and `t_r` are the tokens each side generates in a two-party debate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostParams {
    pub l: u64,
    pub m: u64,
    pub d: u64,
    pub c: u64,
    pub q: u64,
    pub t: u64,
    #[serde(default)]
    pub t_s: u64,
    #[serde(default)]
    pub t_r: u64,
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        if self.m > self.l {
            return Err(Error::Config(format!("M = {} exceeds L = {}", self.m, self.l)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostConstants {
    pub per_token: u128,
    pub per_pair: u128,
    pub per_logit_row: u128,
}

impl CostConstants {
    pub fn unit(d: u64) -> Self {
        let d = d as u128;
        CostConstants {
            per_token: d * d,
            per_pair: d,
            per_logit_row: 0,
        }
    }

    pub fn for_model(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model as u128;
        let dq = (cfg.n_heads * cfg.head_dim) as u128;
        let dkv = cfg.kv_dim() as u128;
        let dff = cfg.d_ff as u128;
        CostConstants {
            per_token: 2 * d * dq + 4 * d * dkv + 2 * dq * d + 6 * d * dff,
            per_pair: 4 * dq,
            per_logit_row: 2 * d * cfg.vocab_size as u128,
        }
    }

    /// One layer prefilling `n` tokens.
    pub fn prefill_layer(&self, n: u64) -> u128 {
        let n = n as u128;
        n * self.per_token + n * n * self.per_pair
    }

    /// One layer decoding token `i` against `n` earlier tokens.
    pub fn decode_token(&self, n: u64, i: u64) -> u128 {
        self.per_token + (n + i) as u128 * self.per_pair
    }
}

pub fn flops_prefill_layer(n: u64, d: u64) -> u128 {
    CostConstants::unit(d).prefill_layer(n)
}

pub fn flops_decode_token(n: u64, i: u64, d: u64) -> u128 {
    CostConstants::unit(d).decode_token(n, i)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    pub flops: u128,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Breakdown {
    pub terms: Vec<Term>,
    pub total: u128,
}

impl Breakdown {
    fn of(terms: &[(&str, u128)]) -> Self {
        Breakdown {
            terms: terms
                .iter()
                .map(|(n, f)| Term {
                    name: n.to_string(),
                    flops: *f,
                })
                .collect(),
            total: terms.iter().map(|t| t.1).sum(),
        }
    }

    pub fn term(&self, name: &str) -> Option<u128> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.flops)
    }
}

fn u(v: u64) -> u128 {
    v as u128
}

/// Sender prefill, receiver prefill with `M` injected layers, receiver decode.
pub fn flops_kvcomm(p: &CostParams, k: &CostConstants) -> Breakdown {
    let (l, m, c, q, t) = (u(p.l), u(p.m), u(p.c), u(p.q), u(p.t));
    let sender = l * (c * k.per_token + c * c * k.per_pair);
    let recv_prefill = l * q * k.per_token + (m * (c + q) * q + (l - m) * q * q) * k.per_pair + k.per_logit_row;
    let recv_decode =
        t * (l * k.per_token + (m * (c + q + t) + (l - m) * (q + t)) * k.per_pair) + t * k.per_logit_row;
    Breakdown::of(&[
        ("sender_prefill", sender),
        ("receiver_prefill", recv_prefill),
        ("receiver_decode", recv_decode),
    ])
}

/// Receiver prefill of `[C; Q]` and decode.
pub fn flops_skyline(p: &CostParams, k: &CostConstants) -> Breakdown {
    let (l, c, q, t) = (u(p.l), u(p.c), u(p.q), u(p.t));
    let n = c + q;
    let prefill = l * (n * k.per_token + n * n * k.per_pair) + k.per_logit_row;
    let decode = t * l * (k.per_token + (n + t) * k.per_pair) + t * k.per_logit_row;
    Breakdown::of(&[("receiver_prefill", prefill), ("receiver_decode", decode)])
}

/// Two-party debate: each side answers alone, then the receiver reads the
/// whole exchange plus the query and produces the final answer.
pub fn flops_nld(p: &CostParams, k: &CostConstants) -> Breakdown {
    let (l, c, q, t, ts, tr) = (u(p.l), u(p.c), u(p.q), u(p.t), u(p.t_s), u(p.t_r));
    let sender = l * (c * k.per_token + c * c * k.per_pair) + ts * l * (k.per_token + (c + ts) * k.per_pair) + ts * k.per_logit_row;
    let receiver = l * (q * k.per_token + q * q * k.per_pair) + tr * l * (k.per_token + (q + tr) * k.per_pair) + tr * k.per_logit_row;
    let h = ts + tr + q;
    let fin = l * (h * k.per_token + h * h * k.per_pair) + t * l * (k.per_token + (h + t) * k.per_pair) + (t + 1) * k.per_logit_row;
    Breakdown::of(&[
        ("sender_answer", sender),
        ("receiver_answer", receiver),
        ("final_answer", fin),
    ])
}

/// `|C|·d·(L(2|Q|+T) − M(|Q|+T))`, with `d` read as `per_pair`.
pub fn margin_over_skyline(p: &CostParams, k: &CostConstants) -> i128 {
    let (l, m, c, q, t) = (p.l as i128, p.m as i128, p.c as i128, p.q as i128, p.t as i128);
    c * k.per_pair as i128 * (l * (2 * q + t) - m * (q + t))
}

/// `L(2T_s+2T_r+|Q|)·d² + (L(T_s²+T_r²+(T_s+T_r+|Q|)²+T_s|C|+T_r|Q|+T(T_s+T_r)) − |C|M(|Q|+T))·d`.
pub fn margin_over_nld(p: &CostParams, k: &CostConstants) -> i128 {
    let (l, m, c, q, t, ts, tr) = (
        p.l as i128,
        p.m as i128,
        p.c as i128,
        p.q as i128,
        p.t as i128,
        p.t_s as i128,
        p.t_r as i128,
    );
    let h = ts + tr + q;
    let d2 = l * (2 * ts + 2 * tr + q) * k.per_token as i128;
    let d1 = (l * (ts * ts + tr * tr + h * h + ts * c + tr * q + t * (ts + tr)) - c * m * (q + t)) * k.per_pair as i128;
    d2 + d1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconcileRow {
    pub method: String,
    pub stage: String,
    pub analytic: u128,
    pub instrumented: u64,
    /// `|analytic − instrumented| / instrumented`.
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: CostParams,
    pub constants: CostConstants,
    pub kvcomm: Breakdown,
    pub skyline: Breakdown,
    pub rows: Vec<ReconcileRow>,
    pub kvcomm_instrumented: StageFlops,
    pub skyline_instrumented: Option<StageFlops>,
    /// Instrumented receiver-side Skyline FLOPs over KVComm FLOPs.
    pub receiver_ratio: Option<f64>,
    /// Instrumented Skyline FLOPs over KVComm FLOPs including the sender.
    pub total_ratio: Option<f64>,
}

fn rel_error(analytic: u128, instrumented: u64) -> f64 {
    if instrumented == 0 {
        return if analytic == 0 { 0.0 } else { f64::INFINITY };
    }
    (analytic as f64 - instrumented as f64).abs() / instrumented as f64
}

/// Put per-stage analytic estimates next to the counters from a run.
pub fn reconcile(kvcomm: &StageFlops, skyline: Option<&StageFlops>, p: &CostParams, k: &CostConstants) -> Result<CostReport> {
    p.validate()?;
    let kv = flops_kvcomm(p, k);
    let sky = flops_skyline(p, k);
    let mut rows = Vec::new();
    let mut push = |method: &str, stage: &str, analytic: u128, inst: u64| {
        rows.push(ReconcileRow {
            method: method.into(),
            stage: stage.into(),
            analytic,
            instrumented: inst,
            rel_error: rel_error(analytic, inst),
        })
    };
    let stages = |f: &StageFlops| [("sender_prefill", f.sender_prefill), ("receiver_prefill", f.receiver_prefill), ("receiver_decode", f.receiver_decode)];
    for (stage, inst) in stages(kvcomm) {
        push("kvcomm", stage, kv.term(stage).expect("term"), inst);
    }
    if let Some(s) = skyline {
        for (stage, inst) in stages(s).into_iter().skip(1) {
            push("skyline", stage, sky.term(stage).expect("term"), inst);
        }
    }
    let ratio = |a: u64, b: u64| (b > 0).then(|| a as f64 / b as f64);
    Ok(CostReport {
        params: *p,
        constants: *k,
        kvcomm: kv,
        skyline: sky,
        rows,
        kvcomm_instrumented: *kvcomm,
        skyline_instrumented: skyline.copied(),
        receiver_ratio: skyline.and_then(|s| ratio(s.receiver(), kvcomm.receiver())),
        total_ratio: skyline.and_then(|s| ratio(s.total(), kvcomm.total())),
    })
}

/// Run KVComm over `layers` and Skyline on the same sample with `t` decode
/// passes each, and reconcile both against the model constant map.
pub fn measure(sender: &Model, receiver: &Model, context: &[u32], query: &[u32], layers: &[usize], t: usize) -> Result<CostReport> {
    let opts = ReceiveOptions {
        generate: GenerateOptions::greedy(t + 1),
        ..ReceiveOptions::default()
    };
    let session = Session::new(sender, receiver, layers, Transport::InProcess, DType::F32)?;
    let run = end_to_end(&session, context, query, &opts)?;
    let sky = run_skyline(receiver, context, query, &opts)?;
    let sky_flops = StageFlops {
        sender_prefill: 0,
        receiver_prefill: sky.prefill_flops,
        receiver_decode: sky.decode_flops,
    };
    let cfg = receiver.config();
    let p = CostParams {
        l: cfg.n_layers as u64,
        m: session.layers().len() as u64,
        d: cfg.d_model as u64,
        c: context.len() as u64,
        q: query.len() as u64,
        t: (run.tokens.len() - 1) as u64,
        t_s: 0,
        t_r: 0,
    };
    reconcile(&run.flops, Some(&sky_flops), &p, &CostConstants::for_model(cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Capture, LogitRows};
    use crate::tensor::flops::FlopMeter;
    use proptest::prelude::*;

    #[test]
    fn unit_examples() {
        assert_eq!(flops_prefill_layer(1, 7), 49 + 7);
        let small = flops_prefill_layer(10, 8) - 100 * 8;
        let big = flops_prefill_layer(10, 16) - 100 * 16;
        assert_eq!(big, 4 * small);
        assert_eq!(flops_decode_token(5, 2, 4), 16 + 7 * 4);
    }

    /// Matmul shapes of one layer over `n` queries and `n` keys.
    fn layer_shapes(cfg: &ModelConfig, n: usize) -> Vec<(usize, usize, usize)> {
        let (d, hd, dkv) = (cfg.d_model, cfg.head_dim, cfg.kv_dim());
        let mut s = vec![(n, d, d), (n, d, dkv), (n, d, dkv)];
        for _ in 0..cfg.n_heads {
            s.push((n, hd, n));
            s.push((n, n, hd));
        }
        s.extend([(n, d, d), (n, d, cfg.d_ff), (n, d, cfg.d_ff), (n, cfg.d_ff, d)]);
        s
    }

    #[test]
    fn constant_map_matches_matmul_enumeration() {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 32,
            d_model: 128,
            d_ff: 512,
            vocab_size: 256,
            ..ModelConfig::micro()
        };
        let enumerated: u128 = layer_shapes(&cfg, 256).iter().map(|&(m, k, n)| 2 * (m * k * n) as u128).sum();
        assert_eq!(CostConstants::for_model(&cfg).prefill_layer(256), enumerated);

        // The counter agrees with the enumeration exactly.
        let model = Model::build(cfg.clone(), 1).unwrap();
        let tokens: Vec<u32> = (0..256).map(|i| i % 256).collect();
        let meter = FlopMeter::start();
        model
            .prefill(&tokens, 0, None, Capture { logits: LogitRows::None, ..Capture::default() })
            .unwrap();
        assert_eq!(meter.elapsed() as u128, enumerated);

        // MHA with d_ff = 0 collapses to 8·N·d² + 4·N²·d.
        let k = CostConstants {
            per_logit_row: 0,
            ..CostConstants::for_model(&ModelConfig { n_kv_heads: 4, d_ff: 0, ..cfg })
        };
        assert_eq!(k.prefill_layer(256), 8 * 256 * 128 * 128 + 4 * 256 * 256 * 128);
    }

    #[test]
    fn kvcomm_equals_skyline_without_context() {
        let p = CostParams { l: 8, m: 8, d: 64, c: 0, q: 12, t: 5, t_s: 0, t_r: 0 };
        let k = CostConstants::unit(64);
        assert_eq!(flops_kvcomm(&p, &k).total, flops_skyline(&p, &k).total);
    }

    #[test]
    fn margin_substitution() {
        let p = CostParams { l: 6, m: 6, d: 32, c: 10, q: 7, t: 7, t_s: 0, t_r: 0 };
        let k = CostConstants::unit(32);
        assert_eq!(margin_over_skyline(&p, &k), 10 * 32 * 7 * 6);
    }

    #[test]
    fn reconcile_requires_valid_params() {
        let p = CostParams { l: 2, m: 3, d: 4, c: 1, q: 1, t: 1, t_s: 0, t_r: 0 };
        assert!(reconcile(&StageFlops::default(), None, &p, &CostConstants::unit(4)).is_err());
    }

    #[test]
    fn measured_stages_track_the_formulas() {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            n_kv_heads: 1,
            head_dim: 16,
            d_model: 32,
            d_ff: 64,
            vocab_size: 64,
            ..ModelConfig::micro()
        };
        let m = Model::build(cfg, 3).unwrap();
        let c: Vec<u32> = (0..40).map(|i| i % 64).collect();
        let q: Vec<u32> = (0..8).collect();
        let r = measure(&m, &m, &c, &q, &[1], 4).unwrap();
        // Prefill stages are exact; decode overestimates attention by T(T−1)/2 pairs.
        for row in &r.rows {
            if row.stage.ends_with("prefill") {
                assert_eq!(row.analytic, row.instrumented as u128, "{row:?}");
            } else {
                assert!(row.analytic >= row.instrumented as u128 && row.rel_error < 0.05, "{row:?}");
            }
        }
        assert!(r.receiver_ratio.unwrap() > 1.0);
    }

    fn params() -> impl Strategy<Value = CostParams> {
        (1u64..64, 0u64..=64, 1u64..256, 0u64..4096, 1u64..512, 0u64..256, 0u64..256, 0u64..256).prop_map(
            |(l, m, d, c, q, t, t_s, t_r)| CostParams { l, m: m.min(l), d, c, q, t, t_s, t_r },
        )
    }

    proptest! {
        #[test]
        fn margin_identity_is_exact(p in params()) {
            for k in [CostConstants::unit(p.d), CostConstants { per_token: 7, per_pair: 3, per_logit_row: 11 }] {
                let diff = flops_skyline(&p, &k).total as i128 - flops_kvcomm(&p, &k).total as i128;
                prop_assert_eq!(diff, margin_over_skyline(&p, &k));
                prop_assert!(margin_over_skyline(&p, &k) >= 0);
            }
        }

        #[test]
        fn nld_margin_is_difference_of_totals(p in params()) {
            let k = CostConstants::unit(p.d);
            let diff = flops_nld(&p, &k).total as i128 - flops_kvcomm(&p, &k).total as i128;
            prop_assert_eq!(margin_over_nld(&p, &k), diff);
        }

        #[test]
        fn margin_decreases_in_m(p in params()) {
            prop_assume!(p.m < p.l);
            let k = CostConstants::unit(p.d);
            let next = CostParams { m: p.m + 1, ..p };
            let step = margin_over_skyline(&p, &k) - margin_over_skyline(&next, &k);
            prop_assert_eq!(step, (p.c * p.d * (p.q + p.t)) as i128);
        }

        #[test]
        fn totals_nondecreasing(p in params(), which in 0usize..7) {
            let k = CostConstants::unit(p.d);
            let mut n = p;
            match which {
                0 => { n.l += 1 }
                1 => { if n.m < n.l { n.m += 1 } }
                2 => { n.d += 1 }
                3 => { n.c += 1 }
                4 => { n.q += 1 }
                5 => { n.t += 1 }
                _ => { n.t_s += 1; n.t_r += 1 }
            }
            let k2 = CostConstants::unit(n.d);
            prop_assert!(flops_kvcomm(&n, &k2).total >= flops_kvcomm(&p, &k).total);
            prop_assert!(flops_skyline(&n, &k2).total >= flops_skyline(&p, &k).total);
            prop_assert!(flops_nld(&n, &k2).total >= flops_nld(&p, &k).total);
        }
    }
}
