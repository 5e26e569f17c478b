//! Dense row-major `f64` arrays of rank at most three.
//!
//! Only the handful of operations the attention and solver code need are
//! provided. Logit matrices may carry [`NEG_INF`] to mark masked entries;
//! [`softmax_rows`] maps those to exactly zero.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Masking sentinel for logits.
pub const NEG_INF: f64 = f64::NEG_INFINITY;

#[inline]
pub fn is_sentinel(x: f64) -> bool {
    x == NEG_INF
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::Shape(format!("rank {} unsupported", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Standard-normal entries drawn from a ChaCha8 stream seeded with `seed`.
    pub fn randn(shape: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::randn_with(shape, &mut rng)
    }

    pub fn randn_with<R: rand::Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of the trailing extents (the row width of a matrix view).
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    fn expect_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "{what}: expected a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.expect_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(&[c, r], out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `v` to every row.
    pub fn add_row_vector(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.cols() {
            return Err(Error::Shape(format!(
                "row vector of width {} against {} columns",
                v.len(),
                self.cols()
            )));
        }
        for row in self.data.chunks_exact_mut(v.len()) {
            for (a, b) in row.iter_mut().zip(v) {
                *a += b;
            }
        }
        Ok(())
    }

    /// `a * self + b * other`, elementwise.
    pub fn lincomb(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        self.same_shape(other, "lincomb")?;
        Ok(self.zip_map(other, |x, y| a * x + b * y))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// `‖self − reference‖ / ‖reference‖`; zero when both vanish.
    pub fn relative_l2(&self, reference: &Self) -> Result<f64> {
        let diff = self.sub(reference)?.norm();
        let base = reference.norm();
        Ok(if base == 0.0 {
            if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            diff / base
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Copies rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.rows() {
            return Err(Error::Shape(format!(
                "row range {start}..{end} out of {}",
                self.rows()
            )));
        }
        let c = self.cols();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self::new(&shape, self.data[start * c..end * c].to_vec())
    }
}

/// Row-block layout of a concatenated tensor: `count` images of `m` rows each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockIndex {
    pub m: usize,
    pub count: usize,
}

impl BlockIndex {
    pub fn new(m: usize, count: usize) -> Result<Self> {
        if m == 0 || count == 0 {
            return Err(Error::Shape(format!("empty block layout m={m} count={count}")));
        }
        Ok(Self { m, count })
    }

    pub fn triplet(m: usize) -> Result<Self> {
        Self::new(m, 3)
    }

    pub fn total_rows(&self) -> usize {
        self.m * self.count
    }

    pub fn range(&self, block: usize) -> std::ops::Range<usize> {
        block * self.m..(block + 1) * self.m
    }
}

/// `a · b` for matrices. Each output entry accumulates over the inner index
/// in ascending order starting from `0.0`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_matrix("matmul lhs")?;
    let (k2, n) = b.expect_matrix("matmul rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner extents differ: {m}x{k} · {k2}x{n}"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// Softmax of one row in place. Sentinel entries become exactly zero and are
/// excluded from the max used for stabilisation.
pub(crate) fn softmax_in_place(row: &mut [f64]) -> Result<()> {
    let max = row
        .iter()
        .copied()
        .filter(|&x| !is_sentinel(x))
        .fold(NEG_INF, f64::max);
    if is_sentinel(max) {
        return Err(Error::FullyMaskedRow);
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        let e = *x - max;
        // Weights below e^-700 are flushed to zero.
        *x = if is_sentinel(*x) || e < -700.0 { 0.0 } else { e.exp() };
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
    Ok(())
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (_, n) = logits.expect_matrix("softmax_rows")?;
    let mut out = logits.clone();
    if n == 0 {
        return Err(Error::FullyMaskedRow);
    }
    for row in out.data.chunks_exact_mut(n) {
        softmax_in_place(row)?;
    }
    Ok(out)
}

/// Stacks equally shaped parts along the first extent.
pub fn block_concat(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("block_concat of nothing".into()))?;
    if parts.iter().any(|p| p.shape != first.shape) {
        return Err(Error::Shape("block_concat: ragged parts".into()));
    }
    let mut shape = first.shape.clone();
    shape[0] *= parts.len();
    let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
    Tensor::new(&shape, data)
}

/// Inverse of [`block_concat`].
pub fn block_split(whole: &Tensor, index: BlockIndex) -> Result<Vec<Tensor>> {
    if whole.rows() != index.total_rows() {
        return Err(Error::Shape(format!(
            "block_split: {} rows but layout needs {}",
            whole.rows(),
            index.total_rows()
        )));
    }
    (0..index.count)
        .map(|b| {
            let r = index.range(b);
            whole.slice_rows(r.start, r.end)
        })
        .collect()
}
