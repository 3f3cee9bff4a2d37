//! Dense f32 tensors and the handful of kernels the model needs.
//!
//! Kernels are pure and deterministic: each output row of [`matmul`] is
//! accumulated in a fixed `k` order independent of how many rows are being
//! multiplied, so slicing a batch never changes a row's bits.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Process-wide and per-thread matmul FLOP accounting.
///
/// Every [`matmul`] call adds exactly `2·m·k·n` to both the global counter
/// and the calling thread's counter. Stage accounting reads the thread-local
/// counter so concurrent work on other threads does not leak in.
pub mod flops {
    use std::cell::Cell;
    use std::sync::atomic::{AtomicU64, Ordering};

    static GLOBAL: AtomicU64 = AtomicU64::new(0);

    thread_local! {
        static LOCAL: Cell<u64> = const { Cell::new(0) };
    }

    pub(crate) fn record(n: u64) {
        GLOBAL.fetch_add(n, Ordering::Relaxed);
        LOCAL.with(|c| c.set(c.get() + n));
    }

    pub fn global_total() -> u64 {
        GLOBAL.load(Ordering::Relaxed)
    }

    pub fn thread_total() -> u64 {
        LOCAL.with(|c| c.get())
    }

    /// Snapshot of the calling thread's counter.
    #[derive(Debug, Clone, Copy)]
    pub struct FlopMeter {
        start: u64,
    }

    impl FlopMeter {
        pub fn start() -> Self {
            FlopMeter {
                start: thread_total(),
            }
        }

        pub fn elapsed(&self) -> u64 {
            thread_total() - self.start
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    name: Option<String>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("name", &self.name)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::shape("tensor needs at least one dimension"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} elements but buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            name: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            name: None,
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f32) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(&mut f).collect(),
            name: None,
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let name = self.name;
        let mut t = Tensor::new(shape, self.data)?;
        t.name = name;
        Ok(t)
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.shape[self.shape.len() - 1];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.shape[self.shape.len() - 1];
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        let (m, n) = self.as_matrix()?;
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "cannot compare {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    fn as_matrix(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }
}

const PAR_THRESHOLD: usize = 1 << 16;

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.as_matrix()?;
    let (k2, n) = b.as_matrix()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dims differ: [{m}x{k}] · [{k2}x{n}]"
        )));
    }
    flops::record(2 * (m as u64) * (k as u64) * (n as u64));

    let mut out = vec![0.0f32; m * n];
    if n == 0 {
        return Tensor::new(vec![m, n], out);
    }
    let row_kernel = |(i, out_row): (usize, &mut [f32])| {
        let a_row = &a.data[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row_kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(row_kernel);
    }
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("matmul produced a non-finite value".into()));
    }
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax with max subtraction. `-inf` marks masked entries; a row
/// with every entry masked is an error.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let n = *x
        .shape
        .last()
        .ok_or_else(|| Error::shape("softmax of a scalar"))?;
    let mut out = x.data.clone();
    if n == 0 {
        return Err(Error::Numeric("fully masked row".into()));
    }
    for row in out.chunks_mut(n) {
        softmax_in_place(row)?;
    }
    let mut t = Tensor::new(x.shape.clone(), out)?;
    t.name = x.name.clone();
    Ok(t)
}

pub(crate) fn softmax_in_place(row: &mut [f32]) -> Result<()> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        return Err(Error::Numeric("fully masked row".into()));
    }
    if !max.is_finite() {
        return Err(Error::Numeric("non-finite softmax input".into()));
    }
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
    Ok(())
}

/// `x / sqrt(mean(x²) + eps) * gamma`.
pub fn rmsnorm(x: &[f32], gamma: &[f32], eps: f32) -> Result<Vec<f32>> {
    if x.is_empty() || x.len() != gamma.len() {
        return Err(Error::shape(format!(
            "rmsnorm over {} values with {} gains",
            x.len(),
            gamma.len()
        )));
    }
    let mean_sq = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let scale = 1.0 / (mean_sq + eps).sqrt();
    Ok(x.iter().zip(gamma).map(|(v, g)| v * scale * g).collect())
}

/// [`rmsnorm`] applied to every row of a 2-D tensor.
pub fn rmsnorm_rows(x: &Tensor, gamma: &[f32], eps: f32) -> Result<Tensor> {
    let (m, d) = x.as_matrix()?;
    let mut out = Vec::with_capacity(m * d);
    for i in 0..m {
        out.extend(rmsnorm(x.row(i), gamma, eps)?);
    }
    Tensor::new(vec![m, d], out)
}

/// Rotary embedding over a `[heads × seq × head_dim]` tensor.
///
/// Dimension `i` is paired with `i + head_dim/2`; the pair at index `i` is
/// rotated by `position · theta_base^(-2i/head_dim)`.
pub fn rope_apply(x: &Tensor, positions: &[u32], theta_base: f32) -> Result<Tensor> {
    let [heads, seq, head_dim] = x.shape[..] else {
        return Err(Error::shape(format!(
            "rope expects [heads, seq, head_dim], got {:?}",
            x.shape
        )));
    };
    if head_dim % 2 != 0 {
        return Err(Error::config(format!("rope needs an even head_dim, got {head_dim}")));
    }
    if positions.len() != seq {
        return Err(Error::shape(format!(
            "{} positions for sequence length {seq}",
            positions.len()
        )));
    }
    let half = head_dim / 2;
    // Angles in f64 so large positions keep their phase accuracy.
    let inv_freq: Vec<f64> = (0..half)
        .map(|i| 1.0 / (theta_base as f64).powf(2.0 * i as f64 / head_dim as f64))
        .collect();
    let tables: Vec<(Vec<f32>, Vec<f32>)> = positions
        .iter()
        .map(|&p| {
            inv_freq
                .iter()
                .map(|f| {
                    let angle = p as f64 * f;
                    (angle.cos() as f32, angle.sin() as f32)
                })
                .unzip()
        })
        .collect();

    let mut out = x.data.clone();
    for h in 0..heads {
        for (s, (cos, sin)) in tables.iter().enumerate() {
            let base = (h * seq + s) * head_dim;
            let v = &mut out[base..base + head_dim];
            for i in 0..half {
                let (a, b) = (v[i], v[i + half]);
                v[i] = a * cos[i] - b * sin[i];
                v[i + half] = a * sin[i] + b * cos[i];
            }
        }
    }
    let mut t = Tensor::new(x.shape.clone(), out)?;
    t.name = x.name.clone();
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] as f64 * b.data()[p * n + j] as f64;
                }
            }
        }
        out
    }

    #[test]
    fn identity_times_b_is_b() {
        let eye = Tensor::from_fn(vec![3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(vec![3, 4], &mut rng);
        assert_eq!(matmul(&eye, &b).unwrap().data(), b.data());
    }

    #[test]
    fn scalar_product() {
        let a = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let b = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(vec![5, 4], &mut rng);
        let b = random(vec![4, 3], &mut rng);
        let got = matmul(&a, &b).unwrap();
        for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((*g as f64 - e).abs() <= 1e-6, "{g} vs {e}");
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_flops_counted_exactly() {
        let a = Tensor::zeros(vec![5, 4]);
        let b = Tensor::zeros(vec![4, 3]);
        let meter = flops::FlopMeter::start();
        matmul(&a, &b).unwrap();
        assert_eq!(meter.elapsed(), 2 * 5 * 4 * 3);
        matmul(&a, &b).unwrap();
        assert_eq!(meter.elapsed(), 4 * 5 * 4 * 3);
    }

    #[test]
    fn matmul_rows_independent_of_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(vec![300, 64], &mut rng);
        let b = random(vec![64, 96], &mut rng);
        let full = matmul(&a, &b).unwrap();
        let tail = Tensor::new(vec![1, 64], a.row(299).to_vec()).unwrap();
        let single = matmul(&tail, &b).unwrap();
        assert_eq!(full.row(299), single.data());
    }

    #[test]
    fn softmax_uniform_and_hand_value() {
        let x = Tensor::new(vec![1, 4], vec![0.5; 4]).unwrap();
        for v in softmax_rows(&x).unwrap().data() {
            assert!((v - 0.25).abs() < 1e-7);
        }
        let x = Tensor::new(vec![1, 2], vec![0.0, std::f32::consts::LN_2]).unwrap();
        let y = softmax_rows(&x).unwrap();
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-6);
        assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_masked_rows() {
        let x = Tensor::new(vec![2, 3], vec![1.0, f32::NEG_INFINITY, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let y = softmax_rows(&x).unwrap();
        assert_eq!(y.data()[1], 0.0);
        assert!((y.data()[0] - 0.5).abs() < 1e-7);

        let x = Tensor::new(vec![1, 2], vec![f32::NEG_INFINITY; 2]).unwrap();
        assert!(matches!(softmax_rows(&x), Err(Error::Numeric(_))));
    }

    #[test]
    fn rmsnorm_edge_cases() {
        let zero = rmsnorm(&[0.0; 4], &[1.0; 4], 1e-6).unwrap();
        assert_eq!(zero, vec![0.0; 4]);
        let unit = [1.0, -1.0, 1.0, -1.0];
        let out = rmsnorm(&unit, &[1.0; 4], 0.0).unwrap();
        assert_eq!(out, unit.to_vec());
    }

    #[test]
    fn rmsnorm_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f32> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g: Vec<f32> = (0..8).map(|_| rng.random_range(0.5..1.5)).collect();
        let got = rmsnorm(&x, &g, 1e-5).unwrap();
        let mut ss = 0.0f64;
        for v in &x {
            ss += (*v as f64) * (*v as f64);
        }
        let denom = (ss / 8.0 + 1e-5).sqrt();
        for i in 0..8 {
            let want = x[i] as f64 / denom * g[i] as f64;
            assert!((got[i] as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(vec![2, 3, 8], &mut rng);
        let y = rope_apply(&x, &[0, 0, 0], 10000.0).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn rope_rejects_odd_head_dim() {
        let x = Tensor::zeros(vec![1, 1, 3]);
        assert!(matches!(rope_apply(&x, &[0], 10000.0), Err(Error::Config(_))));
    }

    fn dot(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in prop::collection::vec(-30.0f32..30.0, 1..40), shift in -50.0f32..50.0) {
            let n = row.len();
            let x = Tensor::new(vec![1, n], row.clone()).unwrap();
            let y = softmax_rows(&x).unwrap();
            let s: f32 = y.data().iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let shifted = Tensor::new(vec![1, n], row.iter().map(|v| v + shift).collect()).unwrap();
            let z = softmax_rows(&shifted).unwrap();
            prop_assert!(y.max_abs_diff(&z).unwrap() <= 1e-5);
        }

        #[test]
        fn rope_preserves_norm(v in prop::collection::vec(-3.0f32..3.0, 16), p in 0u32..4096) {
            let x = Tensor::new(vec![1, 1, 16], v.clone()).unwrap();
            let y = rope_apply(&x, &[p], 10000.0).unwrap();
            let n0 = dot(&v, &v).sqrt();
            let n1 = dot(y.data(), y.data()).sqrt();
            prop_assert!((n0 - n1).abs() <= 1e-5 * n0.max(1.0));
        }

        #[test]
        fn rope_depends_on_relative_position(
            q in prop::collection::vec(-1.0f32..1.0, 16),
            k in prop::collection::vec(-1.0f32..1.0, 16),
            p in 0u32..512,
            s in 0u32..64,
        ) {
            let qt = Tensor::new(vec![1, 1, 16], q).unwrap();
            let kt = Tensor::new(vec![1, 1, 16], k).unwrap();
            let shifted = dot(
                rope_apply(&qt, &[p + s], 10000.0).unwrap().data(),
                rope_apply(&kt, &[p], 10000.0).unwrap().data(),
            );
            let base = dot(
                rope_apply(&qt, &[s], 10000.0).unwrap().data(),
                rope_apply(&kt, &[0], 10000.0).unwrap().data(),
            );
            prop_assert!((shifted - base).abs() <= 1e-5, "{} vs {}", shifted, base);
        }
    }
}
