//! Deterministic numeric primitives: flat parameter vectors, seeded
//! splittable randomness, and the small amount of linear algebra the
//! round engine and the attacks need.

use rand::Rng as _;
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input")]
    Empty,
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
}

/// Flat vector of 64-bit model parameters. Carries parameters, model
/// updates, gradients and attack payloads alike; every binary operation
/// requires equal lengths and all public operations keep entries finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVec(Vec<f64>);

impl ParamVec {
    pub fn from_values(values: Vec<f64>) -> Result<Self, NumError> {
        check_finite(&values)?;
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    /// a*x + y, elementwise.
    pub fn axpy(a: f64, x: &ParamVec, y: &ParamVec) -> Result<ParamVec, NumError> {
        if x.len() != y.len() {
            return Err(NumError::LengthMismatch {
                left: x.len(),
                right: y.len(),
            });
        }
        let values: Vec<f64> = x
            .0
            .iter()
            .zip(&y.0)
            .map(|(&xi, &yi)| a * xi + yi)
            .collect();
        ParamVec::from_values(values)
    }

    /// Elementwise arithmetic mean over a non-empty set of equal-length vectors.
    pub fn mean<'a, I>(vs: I) -> Result<ParamVec, NumError>
    where
        I: IntoIterator<Item = &'a ParamVec>,
    {
        let mut iter = vs.into_iter();
        let first = iter.next().ok_or(NumError::Empty)?;
        let mut acc = first.0.clone();
        let mut count = 1usize;
        for v in iter {
            if v.len() != acc.len() {
                return Err(NumError::LengthMismatch {
                    left: acc.len(),
                    right: v.len(),
                });
            }
            for (a, &b) in acc.iter_mut().zip(&v.0) {
                *a += b;
            }
            count += 1;
        }
        let inv = 1.0 / count as f64;
        for a in acc.iter_mut() {
            *a *= inv;
        }
        ParamVec::from_values(acc)
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|&v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &ParamVec) -> Result<ParamVec, NumError> {
        ParamVec::axpy(-1.0, other, self)
    }

    pub fn add(&self, other: &ParamVec) -> Result<ParamVec, NumError> {
        ParamVec::axpy(1.0, other, self)
    }

    pub fn scale(&self, a: f64) -> Result<ParamVec, NumError> {
        ParamVec::from_values(self.0.iter().map(|&v| a * v).collect())
    }

    /// 64-bit FNV-1a over the little-endian byte image, as 16 hex digits.
    pub fn fnv1a_hex(&self) -> String {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.0 {
            for b in v.to_le_bytes() {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        format!("{hash:016x}")
    }
}

impl std::ops::Index<usize> for ParamVec {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

fn check_finite(values: &[f64]) -> Result<(), NumError> {
    for (index, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(NumError::NonFinite { index });
        }
    }
    Ok(())
}

/// Dense row-major matrix of 64-bit floats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_data(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumError> {
        if data.len() != rows * cols {
            return Err(NumError::LengthMismatch {
                left: data.len(),
                right: rows * cols,
            });
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, NumError> {
        if self.cols != other.rows {
            return Err(NumError::LengthMismatch {
                left: self.cols,
                right: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }
}

/// Counter-based seeded randomness. A `(seed, stream)` pair fully
/// determines the draw sequence on every platform, and distinct streams
/// of the same seed are independent, so per-node streams can run in
/// parallel without changing results.
#[derive(Clone, Debug)]
pub struct StreamRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl StreamRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    /// Fresh stream of the same seed.
    pub fn derive(&self, stream: u64) -> Self {
        Self::new(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in [lo, hi).
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform in 0..n.
    pub fn range_usize(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self, mean: f64, std_dev: f64) -> f64 {
        if std_dev == 0.0 {
            return mean;
        }
        Normal::new(mean, std_dev)
            .expect("finite normal parameters")
            .sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        // Fisher-Yates, fixed traversal order for reproducibility.
        for i in (1..items.len()).rev() {
            let j = self.inner.random_range(0..=i);
            items.swap(i, j);
        }
    }

    /// k distinct indices drawn uniformly from 0..n, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = self.inner.random_range(i..n);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
