//! Minimal dense linear algebra for the encoder: matmul, row-wise masked
//! softmax, layer normalization and the FFN forward. Row-major, deterministic
//! summation order, no BLAS.

use thiserror::Error;

use crate::patterns::MaskMatrix;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NumericsError {
    #[error("shape mismatch: {context} ({a_rows}x{a_cols} vs {b_rows}x{b_cols})")]
    ShapeMismatch {
        context: &'static str,
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
    },
    #[error("softmax row {0} is fully masked")]
    AllMaskedRow(usize),
    #[error("input contains non-finite values")]
    NonFiniteInput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Matrix {
            rows: r,
            cols: c,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.get(i, j);
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, s: T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// L2-normalize each row in place. Zero rows are left untouched.
    pub fn normalize_rows(&mut self) {
        for i in 0..self.rows {
            let row = self.row_mut(i);
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm > T::zero() {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
    }

    /// Widen to f64 (for verification paths).
    pub fn to_f64(&self) -> Matrix<f64> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.to_f64_lossy()).collect(),
        }
    }
}

pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, NumericsError> {
    if a.cols != b.rows {
        return Err(NumericsError::ShapeMismatch {
            context: "matmul",
            a_rows: a.rows,
            a_cols: a.cols,
            b_rows: b.rows,
            b_cols: b.cols,
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.get(i, k);
            if aik == T::zero() {
                continue;
            }
            let brow = b.row(k);
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// Row-wise softmax over unmasked entries. Masked positions are exactly zero
/// in the output; the row max is taken over unmasked entries only.
pub fn masked_softmax_rows<T: Scalar>(
    logits: &Matrix<T>,
    mask: &MaskMatrix,
) -> Result<Matrix<T>, NumericsError> {
    if logits.rows != mask.rows || logits.cols != mask.cols {
        return Err(NumericsError::ShapeMismatch {
            context: "masked_softmax",
            a_rows: logits.rows,
            a_cols: logits.cols,
            b_rows: mask.rows,
            b_cols: mask.cols,
        });
    }
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for i in 0..logits.rows {
        let mut max: Option<T> = None;
        for j in 0..logits.cols {
            if mask.is_member(i, j) {
                let v = logits.get(i, j);
                max = Some(max.map_or(v, |m: T| m.max(v)));
            }
        }
        let max = max.ok_or(NumericsError::AllMaskedRow(i))?;
        let mut sum = T::zero();
        for j in 0..logits.cols {
            if mask.is_member(i, j) {
                let e = (logits.get(i, j) - max).exp();
                out.set(i, j, e);
                sum += e;
            }
        }
        for j in 0..logits.cols {
            if mask.is_member(i, j) {
                let v = out.get(i, j) / sum;
                out.set(i, j, v);
            }
        }
    }
    Ok(out)
}

/// Per-row layer normalization with the biased (1/d) variance estimator.
pub fn layer_norm<T: Scalar>(x: &Matrix<T>, gain: &[T], bias: &[T], eps: T) -> Matrix<T> {
    assert_eq!(gain.len(), x.cols);
    assert_eq!(bias.len(), x.cols);
    let d = T::from_f64(x.cols as f64);
    let mut out = Matrix::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
        let inv_std = (var + eps).sqrt().recip();
        let orow = out.row_mut(i);
        for j in 0..x.cols {
            orow[j] = (row[j] - mean) * inv_std * gain[j] + bias[j];
        }
    }
    out
}

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

/// Derivative of the tanh-approximation GELU.
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * k * x * x)
}

/// x -> GELU(x W1 + b1) W2 + b2.
pub fn ffn_forward<T: Scalar>(
    x: &Matrix<T>,
    w1: &Matrix<T>,
    b1: &[T],
    w2: &Matrix<T>,
    b2: &[T],
) -> Result<Matrix<T>, NumericsError> {
    let mut hidden = matmul(x, w1)?;
    for i in 0..hidden.rows {
        let row = hidden.row_mut(i);
        for (v, &b) in row.iter_mut().zip(b1) {
            *v = gelu(*v + b);
        }
    }
    let mut out = matmul(&hidden, w2)?;
    for i in 0..out.rows {
        let row = out.row_mut(i);
        for (v, &b) in row.iter_mut().zip(b2) {
            *v += b;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patterns::{build_explicit_patterns, pattern_to_mask};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix<f64> {
        Matrix {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn matmul_identity() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let i = Matrix::<f64>::identity(2);
        assert_eq!(matmul(&i, &a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_dot() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let b = Matrix::from_rows(&[vec![3.0], vec![4.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data, vec![11.0]);
    }

    #[test]
    fn matmul_against_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 4, 2);
        let got = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                assert!((got.get(i, j) - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Matrix::<f32>::zeros(2, 3);
        let b = Matrix::<f32>::zeros(2, 3);
        assert!(matches!(
            matmul(&a, &b),
            Err(NumericsError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn matmul_transpose_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_matrix(&mut rng, 3, 5);
        let b = random_matrix(&mut rng, 5, 2);
        let ab_t = matmul(&a, &b).unwrap().transpose();
        let bt_at = matmul(&b.transpose(), &a.transpose()).unwrap();
        for (x, y) in ab_t.data.iter().zip(&bt_at.data) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    fn mask_for(sets: &[Vec<usize>], n: usize) -> MaskMatrix {
        pattern_to_mask(&build_explicit_patterns(n, sets).unwrap())
    }

    #[test]
    fn softmax_single_survivor() {
        let logits = Matrix::from_rows(&[vec![0.0f32, 0.0]]);
        let mask = mask_for(&[vec![0]], 2);
        let out = masked_softmax_rows(&logits, &mask).unwrap();
        assert_eq!(out.data, vec![1.0, 0.0]);
    }

    #[test]
    fn softmax_uniform() {
        let logits = Matrix::from_rows(&[vec![0.0f64, 0.0, 0.0]]);
        let mask = mask_for(&[vec![0, 1, 2]], 3);
        let out = masked_softmax_rows(&logits, &mask).unwrap();
        for v in out.data {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let logits = Matrix::from_rows(&[vec![1.0f64, 2.0, 3.0]]);
        let mask = mask_for(&[vec![0, 1, 2]], 3);
        let out = masked_softmax_rows(&logits, &mask).unwrap();
        let expect = [0.09003, 0.24473, 0.66524];
        for (v, e) in out.data.iter().zip(expect) {
            assert!((v - e).abs() < 1e-5);
        }
        assert!((out.data.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_all_masked_row_errors() {
        let logits = Matrix::from_rows(&[vec![0.0f32, 0.0], vec![0.0, 0.0]]);
        let mask = MaskMatrix::from_membership(2, 2, vec![true, true, false, false]);
        assert_eq!(
            masked_softmax_rows(&logits, &mask),
            Err(NumericsError::AllMaskedRow(1))
        );
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_bias() {
        let x = Matrix::from_rows(&[vec![5.0f64; 4]]);
        let out = layer_norm(&x, &[1.0; 4], &[0.0; 4], 1e-5);
        for v in out.data {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_already_normalized() {
        let x = Matrix::from_rows(&[vec![1.0f64, -1.0]]);
        let out = layer_norm(&x, &[1.0; 2], &[0.0; 2], 1e-12);
        assert!((out.data[0] - 1.0).abs() < 1e-5);
        assert!((out.data[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_hand_computation() {
        let x = Matrix::from_rows(&[vec![1.0f64, 2.0, 3.0]]);
        let eps = 1e-5;
        let out = layer_norm(&x, &[2.0; 3], &[1.0; 3], eps);
        let mean = 2.0;
        let var = 2.0 / 3.0;
        for j in 0..3 {
            let expect = (x.data[j] - mean) / (var + eps).sqrt() * 2.0 + 1.0;
            assert!((out.data[j] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_output_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 4, 16);
        let out = layer_norm(&x, &[1.0; 16], &[0.0; 16], 1e-12);
        for i in 0..4 {
            let row = out.row(i);
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn ffn_zero_weights() {
        let x = Matrix::from_rows(&[vec![1.0f32, 2.0]]);
        let w1 = Matrix::zeros(2, 8);
        let w2 = Matrix::zeros(8, 2);
        let out = ffn_forward(&x, &w1, &[0.0; 8], &w2, &[0.0; 2]).unwrap();
        assert_eq!(out.data, vec![0.0, 0.0]);
    }

    #[test]
    fn ffn_gelu_zero() {
        let x = Matrix::from_rows(&[vec![0.0f64]]);
        let w1 = Matrix::identity(1);
        let w2 = Matrix::identity(1);
        let out = ffn_forward(&x, &w1, &[0.0], &w2, &[0.0]).unwrap();
        assert!(out.data[0].abs() < 1e-12);
    }

    #[test]
    #[allow(clippy::needless_range_loop)] // the indexed scalar loop is the oracle
    fn ffn_against_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_matrix(&mut rng, 2, 4);
        let w1 = random_matrix(&mut rng, 4, 16);
        let b1: Vec<f64> = (0..16).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let w2 = random_matrix(&mut rng, 16, 4);
        let b2: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let got = ffn_forward(&x, &w1, &b1, &w2, &b2).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                let mut acc = b2[j];
                for h in 0..16 {
                    let mut pre = b1[h];
                    for k in 0..4 {
                        pre += x.get(i, k) * w1.get(k, h);
                    }
                    acc += gelu(pre) * w2.get(h, j);
                }
                assert!((got.get(i, j) - acc).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-2.0f64, -0.7, 0.0, 0.3, 1.9] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }
}
