//! KV payloads: building them from a sender cache, splicing them into a
//! receiver's attention, and the binary wire format.
//!
//! Wire layout, all integers little endian:
//!
//! ```text
//! "KVCM" | version u16 | sender_model_id u64 | n_layers_total u16 | M u16 |
//! dtype u8 | seq_len u32 | n_kv_heads u16 | head_dim u16 |
//! positions: seq_len × u32 |
//! M × { layer_index u16 | K [heads][seq][head_dim] | V [heads][seq][head_dim] } |
//! crc32 u32   (IEEE, over every byte after the magic)
//! ```
//!
//! Decoding checks the magic, then the checksum, then the version, then the
//! structure, so any corrupted byte past the magic surfaces as a checksum
//! failure. Length errors are reported only for frames whose checksum is
//! intact, i.e. frames that were produced inconsistent rather than damaged.

use std::fmt;
use std::str::FromStr;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, WireError};
use crate::model::{KvCacheSet, LayerKv, ModelId};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"KVCM";
pub const PROTOCOL_VERSION: u16 = 1;
/// Fixed header bytes, magic included.
pub const HEADER_LEN: usize = 4 + 2 + 8 + 2 + 2 + 1 + 4 + 2 + 2;
pub const CRC_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F32,
    F16,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<DType> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F16),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
        })
    }
}

impl FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f16" => Ok(DType::F16),
            other => Err(Error::Config(format!("unknown dtype {other:?}"))),
        }
    }
}

/// `[incoming; own]` along the sequence axis, for keys, values and positions.
pub fn concat_inject(own: &LayerKv, incoming: &LayerKv) -> Result<LayerKv> {
    if incoming.seq_len() == 0 {
        return Ok(own.clone());
    }
    if own.n_kv_heads() != incoming.n_kv_heads() || own.head_dim() != incoming.head_dim() {
        return Err(Error::shape(format!(
            "cannot inject [{}, _, {}] into [{}, _, {}]",
            incoming.n_kv_heads(),
            incoming.head_dim(),
            own.n_kv_heads(),
            own.head_dim()
        )));
    }
    if let (Some(last_in), Some(&first_own)) = (incoming.last_position(), own.positions().first()) {
        if last_in >= first_own {
            return Err(Error::Protocol(format!(
                "injected position {last_in} overlaps own position {first_own}"
            )));
        }
    }
    let (heads, hd) = (own.n_kv_heads(), own.head_dim());
    let (s_in, s_own) = (incoming.seq_len(), own.seq_len());
    let join = |a: &Tensor, b: &Tensor| {
        let mut out = Vec::with_capacity(a.len() + b.len());
        for h in 0..heads {
            out.extend_from_slice(&a.data()[h * s_in * hd..(h + 1) * s_in * hd]);
            out.extend_from_slice(&b.data()[h * s_own * hd..(h + 1) * s_own * hd]);
        }
        Tensor::new(vec![heads, s_in + s_own, hd], out)
    };
    let mut positions = incoming.positions().to_vec();
    positions.extend_from_slice(own.positions());
    LayerKv::new(
        own.layer_index,
        join(incoming.keys(), own.keys())?,
        join(incoming.values(), own.values())?,
        positions,
    )
}

/// Selected layers of a sender cache, ready for transmission.
#[derive(Debug, Clone, PartialEq)]
pub struct KvPayload {
    pub protocol_version: u16,
    pub sender_model_id: ModelId,
    pub n_layers_total: usize,
    pub dtype: DType,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub positions: Vec<u32>,
    entries: Vec<LayerKv>,
    checksum: u32,
}

impl KvPayload {
    pub fn new(
        sender_model_id: ModelId,
        n_layers_total: usize,
        dtype: DType,
        n_kv_heads: usize,
        head_dim: usize,
        positions: Vec<u32>,
        entries: Vec<LayerKv>,
    ) -> Result<Self> {
        let mut p = KvPayload {
            protocol_version: PROTOCOL_VERSION,
            sender_model_id,
            n_layers_total,
            dtype,
            n_kv_heads,
            head_dim,
            positions,
            entries,
            checksum: 0,
        };
        p.validate().map_err(Error::Wire)?;
        let bytes = p.encode();
        p.checksum = u32::from_le_bytes(bytes[bytes.len() - CRC_LEN..].try_into().unwrap());
        Ok(p)
    }

    pub fn entries(&self) -> &[LayerKv] {
        &self.entries
    }

    /// Number of transmitted layers.
    pub fn m(&self) -> usize {
        self.entries.len()
    }

    pub fn seq_len(&self) -> usize {
        self.positions.len()
    }

    pub fn layer_indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.layer_index).collect()
    }

    pub fn checksum(&self) -> u32 {
        self.checksum
    }

    pub fn encoded_len(&self) -> usize {
        encoded_len(self.m(), self.seq_len(), self.n_kv_heads, self.head_dim, self.dtype)
    }

    fn validate(&self) -> std::result::Result<(), WireError> {
        let bad = |m: String| Err(WireError::Invariant(m));
        if self.n_layers_total == 0 || self.n_layers_total > u16::MAX as usize {
            return bad(format!("n_layers_total {} out of range", self.n_layers_total));
        }
        if self.entries.len() > self.n_layers_total {
            return bad(format!(
                "{} entries for {} layers",
                self.entries.len(),
                self.n_layers_total
            ));
        }
        if self.n_kv_heads == 0 || self.head_dim == 0 {
            return bad("zero-sized heads".into());
        }
        if self.n_kv_heads > u16::MAX as usize || self.head_dim > u16::MAX as usize {
            return bad("head shape does not fit the header".into());
        }
        if self.positions.windows(2).any(|w| w[0] >= w[1]) {
            return bad("positions not strictly increasing".into());
        }
        let mut prev: Option<usize> = None;
        for e in &self.entries {
            if e.layer_index >= self.n_layers_total {
                return bad(format!("layer {} >= {}", e.layer_index, self.n_layers_total));
            }
            if prev.is_some_and(|p| p >= e.layer_index) {
                return bad("layer indices must be strictly ascending".into());
            }
            prev = Some(e.layer_index);
            if e.n_kv_heads() != self.n_kv_heads || e.head_dim() != self.head_dim {
                return bad(format!("layer {} has a different head shape", e.layer_index));
            }
            if e.positions() != self.positions.as_slice() {
                return bad(format!("layer {} has its own positions list", e.layer_index));
            }
        }
        Ok(())
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.protocol_version.to_le_bytes());
        out.extend_from_slice(&self.sender_model_id.to_le_bytes());
        out.extend_from_slice(&(self.n_layers_total as u16).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u16).to_le_bytes());
        out.push(self.dtype.tag());
        out.extend_from_slice(&(self.positions.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_kv_heads as u16).to_le_bytes());
        out.extend_from_slice(&(self.head_dim as u16).to_le_bytes());
        for p in &self.positions {
            out.extend_from_slice(&p.to_le_bytes());
        }
        for e in &self.entries {
            out.extend_from_slice(&(e.layer_index as u16).to_le_bytes());
            write_values(&mut out, e.keys().data(), self.dtype);
            write_values(&mut out, e.values().data(), self.dtype);
        }
        let crc = crc32fast::hash(&out[MAGIC.len()..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }
}

fn write_values(out: &mut Vec<u8>, values: &[f32], dtype: DType) {
    match dtype {
        DType::F32 => {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        DType::F16 => {
            for v in values {
                out.extend_from_slice(&f16::from_f32(*v).to_le_bytes());
            }
        }
    }
}

/// Exact serialized size of a payload with `m` layers.
pub fn encoded_len(m: usize, seq_len: usize, n_kv_heads: usize, head_dim: usize, dtype: DType) -> usize {
    let tensor = n_kv_heads * seq_len * head_dim * dtype.size();
    HEADER_LEN + 4 * seq_len + m * (2 + 2 * tensor) + CRC_LEN
}

fn quantize(t: &Tensor, dtype: DType) -> Result<Tensor> {
    match dtype {
        DType::F32 => Ok(t.clone()),
        DType::F16 => Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|v| f16::from_f32(*v).to_f32()).collect(),
        ),
    }
}

/// Deep copy of the requested layers of `cache`. With [`DType::F16`] the
/// tensors are rounded to half precision here, so the payload already holds
/// exactly what the receiver will decode.
pub fn extract_payload(
    cache: &KvCacheSet,
    sender_model_id: ModelId,
    layers: &[usize],
    dtype: DType,
) -> Result<KvPayload> {
    let first = cache
        .layer(0)
        .ok_or_else(|| Error::shape("cannot extract from an empty cache"))?;
    let mut sorted = layers.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut entries = Vec::with_capacity(sorted.len());
    for &l in &sorted {
        let kv = cache.layer(l).ok_or_else(|| {
            Error::config(format!("layer {l} out of range for {} layers", cache.n_layers()))
        })?;
        if kv.positions() != first.positions() {
            return Err(Error::shape(format!(
                "layer {l} positions differ from layer 0; payload layers must come from one prefill"
            )));
        }
        entries.push(LayerKv::new(
            l,
            quantize(kv.keys(), dtype)?,
            quantize(kv.values(), dtype)?,
            kv.positions().to_vec(),
        )?);
    }
    KvPayload::new(
        sender_model_id,
        cache.n_layers(),
        dtype,
        first.n_kv_heads(),
        first.head_dim(),
        first.positions().to_vec(),
        entries,
    )
}

pub fn serialize(payload: &KvPayload) -> Vec<u8> {
    payload.encode()
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], WireError> {
        if self.buf.len() - self.pos < n {
            return Err(WireError::Truncated {
                needed: self.pos + n,
                available: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> std::result::Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> std::result::Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn values(&mut self, n: usize, dtype: DType) -> std::result::Result<Vec<f32>, WireError> {
        let raw = self.take(n * dtype.size())?;
        Ok(match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::F16 => raw
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes(c.try_into().unwrap()).to_f32())
                .collect(),
        })
    }
}

pub fn deserialize(bytes: &[u8]) -> std::result::Result<KvPayload, WireError> {
    if bytes.len() < MAGIC.len() {
        return Err(WireError::Truncated {
            needed: MAGIC.len(),
            available: bytes.len(),
        });
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(WireError::BadMagic);
    }
    if bytes.len() < MAGIC.len() + CRC_LEN {
        return Err(WireError::Truncated {
            needed: MAGIC.len() + CRC_LEN,
            available: bytes.len(),
        });
    }
    let body_end = bytes.len() - CRC_LEN;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[MAGIC.len()..body_end]);
    if stored != computed {
        return Err(WireError::Crc { stored, computed });
    }

    let body = &bytes[..body_end];
    let mut c = Cursor { buf: body, pos: MAGIC.len() };
    let version = c.u16()?;
    if version != PROTOCOL_VERSION {
        return Err(WireError::BadVersion(version));
    }
    let sender_model_id = c.u64()?;
    let n_layers_total = c.u16()? as usize;
    let m = c.u16()? as usize;
    let dtype_tag = c.u8()?;
    let dtype = DType::from_tag(dtype_tag)
        .ok_or_else(|| WireError::Invariant(format!("unknown dtype tag {dtype_tag}")))?;
    let seq_len = c.u32()? as usize;
    let n_kv_heads = c.u16()? as usize;
    let head_dim = c.u16()? as usize;

    let tensor_len = n_kv_heads
        .checked_mul(seq_len)
        .and_then(|v| v.checked_mul(head_dim))
        .ok_or_else(|| WireError::Invariant("tensor size overflows".into()))?;
    let expected = (tensor_len.checked_mul(2 * dtype.size()))
        .and_then(|t| t.checked_add(2))
        .and_then(|r| r.checked_mul(m))
        .and_then(|r| r.checked_add(HEADER_LEN + 4 * seq_len))
        .ok_or_else(|| WireError::Invariant("payload size overflows".into()))?;
    if body.len() < expected {
        return Err(WireError::Truncated {
            needed: expected + CRC_LEN,
            available: bytes.len(),
        });
    }
    if body.len() > expected {
        return Err(WireError::TrailingBytes(body.len() - expected));
    }

    let positions: Vec<u32> = (0..seq_len).map(|_| c.u32()).collect::<std::result::Result<_, _>>()?;
    let mut entries = Vec::with_capacity(m);
    for _ in 0..m {
        let layer = c.u16()? as usize;
        let k = c.values(tensor_len, dtype)?;
        let v = c.values(tensor_len, dtype)?;
        let shape = vec![n_kv_heads, seq_len, head_dim];
        let kv = Tensor::new(shape.clone(), k)
            .and_then(|k| Ok((k, Tensor::new(shape, v)?)))
            .and_then(|(k, v)| LayerKv::new(layer, k, v, positions.clone()))
            .map_err(|e| WireError::Invariant(e.to_string()))?;
        entries.push(kv);
    }

    let payload = KvPayload {
        protocol_version: version,
        sender_model_id,
        n_layers_total,
        dtype,
        n_kv_heads,
        head_dim,
        positions,
        entries,
        checksum: stored,
    };
    payload.validate()?;
    Ok(payload)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Capture, Model, ModelConfig};

    fn kv(layer: usize, seq: usize, start: u32, fill: f32) -> LayerKv {
        let shape = vec![2, seq, 4];
        let n = 2 * seq * 4;
        LayerKv::new(
            layer,
            Tensor::from_fn(shape.clone(), |i| fill + i as f32),
            Tensor::from_fn(shape, |i| -fill - i as f32),
            (start..start + seq as u32).collect(),
        )
        .map(|k| {
            assert_eq!(k.keys().len(), n);
            k
        })
        .unwrap()
    }

    #[test]
    fn concat_puts_incoming_first() {
        let incoming = kv(0, 3, 0, 100.0);
        let own = kv(0, 2, 3, 0.0);
        let out = concat_inject(&own, &incoming).unwrap();
        assert_eq!(out.seq_len(), 5);
        assert_eq!(out.positions(), &[0, 1, 2, 3, 4]);
        assert_eq!(out.slice(0..3).unwrap(), incoming);
        assert_eq!(out.slice(3..5).unwrap().keys(), own.keys());
        assert_eq!(out.slice(3..5).unwrap().values(), own.values());
    }

    #[test]
    fn concat_empty_incoming_is_noop() {
        let own = kv(1, 2, 3, 0.0);
        let out = concat_inject(&own, &LayerKv::empty(1, 2, 4)).unwrap();
        assert_eq!(out, own);
    }

    #[test]
    fn concat_rejects_overlap_and_shape() {
        let own = kv(0, 2, 3, 0.0);
        assert!(matches!(concat_inject(&own, &kv(0, 4, 0, 1.0)), Err(Error::Protocol(_))));
        let odd = LayerKv::new(
            0,
            Tensor::zeros(vec![1, 1, 4]),
            Tensor::zeros(vec![1, 1, 4]),
            vec![0],
        )
        .unwrap();
        assert!(matches!(concat_inject(&own, &odd), Err(Error::Shape(_))));
    }

    #[test]
    fn concat_is_associative() {
        let a = kv(0, 2, 0, 10.0);
        let b = kv(0, 3, 2, 20.0);
        let own = kv(0, 2, 5, 0.0);
        let stepwise = concat_inject(&concat_inject(&own, &b).unwrap(), &a).unwrap();
        let joined = concat_inject(&own, &concat_inject(&b, &a).unwrap()).unwrap();
        assert_eq!(stepwise, joined);
    }

    fn sender_cache() -> (Model, KvCacheSet) {
        let cfg = ModelConfig {
            n_layers: 4,
            ..ModelConfig::micro()
        };
        let m = Model::build(cfg, 5).unwrap();
        let cache = m.prefill(&[1, 2, 3, 4, 5], 0, None, Capture::default()).unwrap().cache;
        (m, cache)
    }

    #[test]
    fn extract_all_and_none() {
        let (m, cache) = sender_cache();
        let all = extract_payload(&cache, m.model_id(), &[0, 1, 2, 3], DType::F32).unwrap();
        assert_eq!(all.m(), 4);
        assert_eq!(all.entries()[2], cache.layers()[2]);
        let none = extract_payload(&cache, m.model_id(), &[], DType::F32).unwrap();
        assert_eq!(none.m(), 0);
        assert_eq!(deserialize(&serialize(&none)).unwrap(), none);
        assert!(matches!(
            extract_payload(&cache, m.model_id(), &[4], DType::F32),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn round_trip_f32_and_f16() {
        let (m, cache) = sender_cache();
        let p = extract_payload(&cache, m.model_id(), &[1, 3], DType::F32).unwrap();
        let bytes = serialize(&p);
        assert_eq!(bytes.len(), p.encoded_len());
        assert_eq!(deserialize(&bytes).unwrap(), p);

        let h = extract_payload(&cache, m.model_id(), &[0, 2], DType::F16).unwrap();
        let hb = serialize(&h);
        assert_eq!(hb.len(), h.encoded_len());
        let back = deserialize(&hb).unwrap();
        assert_eq!(back, h);
        assert_eq!(serialize(&back), hb);
    }

    #[test]
    fn flipped_byte_is_crc_error() {
        let (m, cache) = sender_cache();
        let bytes = serialize(&extract_payload(&cache, m.model_id(), &[1], DType::F32).unwrap());
        let mut bad = bytes.clone();
        bad[100] ^= 0x01;
        assert!(matches!(deserialize(&bad), Err(WireError::Crc { .. })));
        bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(deserialize(&bad), Err(WireError::BadMagic));
    }

    fn reseal(bytes: &mut [u8]) {
        let end = bytes.len() - CRC_LEN;
        let crc = crc32fast::hash(&bytes[MAGIC.len()..end]);
        bytes[end..].copy_from_slice(&crc.to_le_bytes());
    }

    #[test]
    fn header_overclaiming_records_is_truncation() {
        let (m, cache) = sender_cache();
        let mut bytes = serialize(&extract_payload(&cache, m.model_id(), &[1], DType::F32).unwrap());
        bytes[16..18].copy_from_slice(&2u16.to_le_bytes());
        reseal(&mut bytes);
        assert!(matches!(deserialize(&bytes), Err(WireError::Truncated { .. })));
    }

    #[test]
    fn bad_version_and_invariants() {
        let (m, cache) = sender_cache();
        let good = serialize(&extract_payload(&cache, m.model_id(), &[1, 2], DType::F32).unwrap());

        let mut v2 = good.clone();
        v2[4..6].copy_from_slice(&2u16.to_le_bytes());
        reseal(&mut v2);
        assert_eq!(deserialize(&v2), Err(WireError::BadVersion(2)));

        // Swap the layer indices of the two records so they are descending.
        let mut swapped = good.clone();
        let rec = 2 + 2 * 2 * 5 * 16 * 4;
        let first = HEADER_LEN + 4 * 5;
        swapped[first..first + 2].copy_from_slice(&2u16.to_le_bytes());
        swapped[first + rec..first + rec + 2].copy_from_slice(&1u16.to_le_bytes());
        reseal(&mut swapped);
        assert!(matches!(deserialize(&swapped), Err(WireError::Invariant(_))));

        let mut trailing = good[..good.len() - CRC_LEN].to_vec();
        trailing.extend_from_slice(&[0, 0, 0, 0]);
        trailing.extend_from_slice(&[0; 4]);
        reseal(&mut trailing);
        assert!(matches!(deserialize(&trailing), Err(WireError::TrailingBytes(4))));

        assert!(matches!(deserialize(b"KV"), Err(WireError::Truncated { .. })));
    }

    #[test]
    fn size_formula() {
        let (m, cache) = sender_cache();
        for layers in [vec![], vec![0], vec![0, 1, 2, 3]] {
            for dtype in [DType::F32, DType::F16] {
                let p = extract_payload(&cache, m.model_id(), &layers, dtype).unwrap();
                let want = 27 + 4 * 5 + layers.len() * (2 + 2 * 2 * 5 * 16 * dtype.size()) + 4;
                assert_eq!(serialize(&p).len(), want);
            }
        }
    }
}
