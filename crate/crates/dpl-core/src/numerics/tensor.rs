//! Dense row-major `f64` matrices and the value-level operations built on them.
//!
//! Everything is double precision: the decomposition-equivalence tolerances
//! this project reports are only meaningful in f64.

use crate::error::{Error, Result};
use crate::numerics::rng::RngStream;

/// Dense real matrix with shape metadata, row-major storage.
///
/// Invariants enforced at construction: both dimensions are positive,
/// `data.len() == rows * cols`, and every entry is finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2D {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape(format!(
                "tensor dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidShape(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidShape(format!(
                "non-finite entry in {rows}x{cols} tensor"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Result<Self> {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(n, n)?;
        for i in 0..n {
            t.set(i, i, 1.0);
        }
        Ok(t)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidShape("no rows given".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidShape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), cols, data)
    }

    /// Entries drawn i.i.d. from N(0, std^2).
    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Result<Self> {
        let data = (0..rows * cols).map(|_| rng.normal() * std).collect();
        Self::new(rows, cols, data)
    }

    pub fn random_uniform(
        rows: usize,
        cols: usize,
        lo: f64,
        hi: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let data = (0..rows * cols).map(|_| rng.uniform_in(lo, hi)).collect();
        Self::new(rows, cols, data)
    }

    /// Xavier-uniform: U(-a, a) with a = sqrt(6 / (rows + cols)).
    pub fn random_xavier(rows: usize, cols: usize, rng: &mut RngStream) -> Result<Self> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        Self::random_uniform(rows, cols, -a, a, rng)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Tensor2D) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor2D> {
        Tensor2D::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor2D, f: impl Fn(f64, f64) -> f64) -> Result<Tensor2D> {
        if !self.same_shape(other) {
            return Err(Error::InvalidShape(format!(
                "shape mismatch {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor2D::new(self.rows, self.cols, data)
    }

    pub fn add(&self, other: &Tensor2D) -> Result<Tensor2D> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor2D) -> Result<Tensor2D> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor2D> {
        self.map(|v| v * factor)
    }

    /// self += alpha * other, in place.
    pub fn axpy_in_place(&mut self, alpha: f64, other: &Tensor2D) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::InvalidShape("axpy shape mismatch".into()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn transpose(&self) -> Tensor2D {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.get(r, c);
            }
        }
        Tensor2D {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor2D> {
        if start + len > self.rows || len == 0 {
            return Err(Error::InvalidShape(format!(
                "row slice {start}..{} out of 0..{}",
                start + len,
                self.rows
            )));
        }
        let data = self.data[start * self.cols..(start + len) * self.cols].to_vec();
        Tensor2D::new(len, self.cols, data)
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor2D> {
        if start + len > self.cols || len == 0 {
            return Err(Error::InvalidShape(format!(
                "col slice {start}..{} out of 0..{}",
                start + len,
                self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            data.extend_from_slice(&self.data[r * self.cols + start..r * self.cols + start + len]);
        }
        Tensor2D::new(self.rows, len, data)
    }

    pub fn concat_rows(parts: &[&Tensor2D]) -> Result<Tensor2D> {
        if parts.is_empty() {
            return Err(Error::InvalidShape("concat of zero parts".into()));
        }
        let cols = parts[0].cols;
        if parts.iter().any(|p| p.cols != cols) {
            return Err(Error::InvalidShape("row concat with unequal widths".into()));
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Tensor2D::new(rows, cols, data)
    }

    pub fn concat_cols(parts: &[&Tensor2D]) -> Result<Tensor2D> {
        if parts.is_empty() {
            return Err(Error::InvalidShape("concat of zero parts".into()));
        }
        let rows = parts[0].rows;
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::InvalidShape("col concat with unequal heights".into()));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Tensor2D::new(rows, cols, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor2D) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::InvalidShape("max_abs_diff shape mismatch".into()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Largest row infinity-norm; used for the sigma-perturbation bound.
    pub fn max_row_inf_norm(&self) -> f64 {
        (0..self.rows)
            .map(|r| self.row(r).iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .fold(0.0, f64::max)
    }

    /// FNV-1a over the raw bit patterns; order-sensitive, so equal checksums
    /// on equal shapes mean bitwise-identical contents.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::numerics::fnv1a64_init();
        h = crate::numerics::fnv1a64_u64(h, self.rows as u64);
        h = crate::numerics::fnv1a64_u64(h, self.cols as u64);
        for v in &self.data {
            h = crate::numerics::fnv1a64_u64(h, v.to_bits());
        }
        h
    }
}

/// Boolean visibility matrix used by masked attention; `true` = key visible.
#[derive(Clone, Debug, PartialEq)]
pub struct BoolMat {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BoolMat {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::InvalidShape("bad mask shape".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn all_true(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![true; rows * cols])
    }

    /// Lower-triangular visibility (query i sees keys 0..=i).
    pub fn causal(n: usize) -> Result<Self> {
        let mut data = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                data[i * n + j] = true;
            }
        }
        Self::new(n, n, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    /// Block layout [[a, b], [c, d]]; all four must tile consistently.
    pub fn from_blocks(a: &BoolMat, b: &BoolMat, c: &BoolMat, d: &BoolMat) -> Result<BoolMat> {
        if a.rows != b.rows || c.rows != d.rows || a.cols != c.cols || b.cols != d.cols {
            return Err(Error::InvalidShape("mask blocks do not tile".into()));
        }
        let rows = a.rows + c.rows;
        let cols = a.cols + b.cols;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..a.rows {
            data.extend_from_slice(&a.data[r * a.cols..(r + 1) * a.cols]);
            data.extend_from_slice(&b.data[r * b.cols..(r + 1) * b.cols]);
        }
        for r in 0..c.rows {
            data.extend_from_slice(&c.data[r * c.cols..(r + 1) * c.cols]);
            data.extend_from_slice(&d.data[r * d.cols..(r + 1) * d.cols]);
        }
        BoolMat::new(rows, cols, data)
    }
}

/// Standard matrix product with a fixed (ascending-k) summation order so
/// results are bit-reproducible across runs.
pub fn matmul(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.rows {
        return Err(Error::InvalidShape(format!(
            "matmul {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut data = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.get(i, k);
            if aik == 0.0 {
                continue;
            }
            let brow = b.row(k);
            let out = &mut data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Tensor2D::new(a.rows, b.cols, data)
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax_rows(m: &Tensor2D) -> Result<Tensor2D> {
    softmax_rows_masked(m, None)
}

/// Row-wise softmax where masked-out entries get probability zero.
/// A fully-true mask reproduces the unmasked result exactly.
pub fn softmax_rows_masked(m: &Tensor2D, mask: Option<&BoolMat>) -> Result<Tensor2D> {
    if let Some(mk) = mask {
        if mk.rows() != m.rows() || mk.cols() != m.cols() {
            return Err(Error::InvalidShape("mask shape mismatch".into()));
        }
    }
    let visible = |r: usize, c: usize| mask.map_or(true, |mk| mk.get(r, c));
    let mut out = vec![0.0; m.rows() * m.cols()];
    for r in 0..m.rows() {
        let mut max = f64::NEG_INFINITY;
        for c in 0..m.cols() {
            if visible(r, c) {
                max = max.max(m.get(r, c));
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::InvalidShape(format!("row {r} is fully masked")));
        }
        let mut sum = 0.0;
        for c in 0..m.cols() {
            if visible(r, c) {
                let e = (m.get(r, c) - max).exp();
                out[r * m.cols() + c] = e;
                sum += e;
            }
        }
        for c in 0..m.cols() {
            out[r * m.cols() + c] /= sum;
        }
    }
    Tensor2D::new(m.rows(), m.cols(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dims_and_bad_lengths() {
        assert!(Tensor2D::new(0, 3, vec![]).is_err());
        assert!(Tensor2D::new(2, 0, vec![]).is_err());
        assert!(Tensor2D::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Tensor2D::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn softmax_symmetry() {
        let m = Tensor2D::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_large_entries_do_not_overflow() {
        let m = Tensor2D::from_rows(&[vec![1000.0, 1000.0, 1000.0]]).unwrap();
        let s = softmax_rows(&m).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_hand_value() {
        // e^0 / (e^0 + 3) = 0.25 when the second logit is ln 3.
        let m = Tensor2D::from_rows(&[vec![0.0, 3.0f64.ln()]]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert!((s.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let m = Tensor2D::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let mask = BoolMat::new(1, 2, vec![false, false]).unwrap();
        assert!(softmax_rows_masked(&m, Some(&mask)).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let m = Tensor2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let i2 = Tensor2D::identity(2).unwrap();
        assert_eq!(matmul(&i2, &m).unwrap(), m);

        let a = Tensor2D::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor2D::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Tensor2D::zeros(2, 3).unwrap();
        let b = Tensor2D::zeros(2, 3).unwrap();
        assert!(matches!(matmul(&a, &b), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let mut rng = RngStream::new(11);
        let a = Tensor2D::random_normal(5, 4, 1.0, &mut rng).unwrap();
        let b = Tensor2D::random_normal(4, 3, 1.0, &mut rng).unwrap();
        let c = matmul(&a, &b).unwrap();
        // Independent oracle: per-entry dot products, ascending k.
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                assert_eq!(c.get(i, j), acc);
            }
        }
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let a = Tensor2D::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor2D::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let cat = Tensor2D::concat_rows(&[&a, &b]).unwrap();
        assert_eq!(cat.slice_rows(0, 1).unwrap(), a);
        assert_eq!(cat.slice_rows(1, 2).unwrap(), b);

        let cc = Tensor2D::concat_cols(&[&a, &a]).unwrap();
        assert_eq!(cc.data(), &[1.0, 2.0, 1.0, 2.0]);
        assert_eq!(cc.slice_cols(2, 2).unwrap(), a);
    }
}
