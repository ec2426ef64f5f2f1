//! Cross-granularity encoder: one masked-attention forward pass turns n
//! sentence embeddings plus an m x n pattern mask into all m chunk
//! embeddings at once.
//!
//! Per layer, with H the query stream (layer 0 starts from the learnable
//! chunk embedding replicated m times) and E the sentence matrix:
//!
//!   Q = H Wq,  K = E Wk,  V = E Wv
//!   A = softmax(Q K^T / sqrt(d) + P)
//!   Vm = LayerNorm(H + A V)
//!   Out = LayerNorm(Vm + FFN(Vm))
//!
//! Keys and values re-derive from E at every layer; only the query stream
//! carries forward. That keeps mask locality exact: row i of the output
//! depends on nothing outside pattern i.

use rand::Rng;
use thiserror::Error;

use crate::numerics::{gelu, matmul, masked_softmax_rows, Matrix, NumericsError};
use crate::patterns::MaskMatrix;
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// FFN hidden width multiplier.
pub const FFN_MULT: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("sentence embedding matrix contains non-finite values")]
    NonFiniteInput,
    #[error("dimension mismatch: weights d={weights_d}, embeddings d={input_d}")]
    DimensionMismatch { weights_d: usize, input_d: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerWeights<T> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    /// Learnable chunk embedding; layer 0's is replicated m times to seed
    /// the query stream.
    pub h_chk: Vec<T>,
    pub ln1_gain: Vec<T>,
    pub ln1_bias: Vec<T>,
    pub ln2_gain: Vec<T>,
    pub ln2_bias: Vec<T>,
    pub ffn_w1: Matrix<T>,
    pub ffn_b1: Vec<T>,
    pub ffn_w2: Matrix<T>,
    pub ffn_b2: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights<T> {
    pub layers: Vec<EncoderLayerWeights<T>>,
    pub d: usize,
    pub normalize_output: bool,
}

impl<T: Scalar> EncoderLayerWeights<T> {
    pub fn zeros(d: usize) -> Self {
        let dff = d * FFN_MULT;
        EncoderLayerWeights {
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            h_chk: vec![T::zero(); d],
            ln1_gain: vec![T::one(); d],
            ln1_bias: vec![T::zero(); d],
            ln2_gain: vec![T::one(); d],
            ln2_bias: vec![T::zero(); d],
            ffn_w1: Matrix::zeros(d, dff),
            ffn_b1: vec![T::zero(); dff],
            ffn_w2: Matrix::zeros(dff, d),
            ffn_b2: vec![T::zero(); d],
        }
    }
}

/// Box-Muller in f64 so initialization is identical across scalar types.
fn gaussian<T: Scalar>(rng: &mut impl Rng, std: f64) -> T {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    T::from_f64(z * std)
}

impl<T: Scalar> EncoderWeights<T> {
    /// Gaussian(0, 0.02) init for projections, FFN and h_chk; layernorm
    /// gains 1, biases 0.
    pub fn init_random(d: usize, num_layers: usize, rng: &mut impl Rng) -> Self {
        const STD: f64 = 0.02;
        let layers = (0..num_layers)
            .map(|_| {
                let mut layer = EncoderLayerWeights::zeros(d);
                for m in [&mut layer.w_q, &mut layer.w_k, &mut layer.w_v] {
                    for v in &mut m.data {
                        *v = gaussian(rng, STD);
                    }
                }
                for v in &mut layer.h_chk {
                    *v = gaussian(rng, STD);
                }
                for v in &mut layer.ffn_w1.data {
                    *v = gaussian(rng, STD);
                }
                for v in &mut layer.ffn_w2.data {
                    *v = gaussian(rng, STD);
                }
                layer
            })
            .collect();
        EncoderWeights {
            layers,
            d,
            normalize_output: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChunkEmbeddings<T> {
    /// m x d, row i corresponds to pattern i of the mask used in the forward.
    pub matrix: Matrix<T>,
    pub normalized: bool,
}

/// Everything the backward pass needs from one layer's forward.
#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    pub h_in: Matrix<T>,
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    /// Softmax output A (masked entries exactly zero).
    pub attn: Matrix<T>,
    pub attn_out: Matrix<T>,
    pub pre_ln1: Matrix<T>,
    pub ln1: LayerNormCache<T>,
    /// Vm, the post-ln1 state feeding the FFN and the second residual.
    pub mid: Matrix<T>,
    /// Pre-activation FFN hidden (x W1 + b1).
    pub ffn_pre: Matrix<T>,
    /// Post-GELU hidden.
    pub ffn_hidden: Matrix<T>,
    pub pre_ln2: Matrix<T>,
    pub ln2: LayerNormCache<T>,
    pub out: Matrix<T>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    /// Normalized rows before gain/bias.
    pub xhat: Matrix<T>,
    pub inv_std: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub layers: Vec<LayerCache<T>>,
    /// Final pre-normalization output (equals `output` when normalization is
    /// off).
    pub pre_norm: Matrix<T>,
    /// Row norms of `pre_norm`, recorded when normalization is on.
    pub norms: Vec<T>,
    pub output: Matrix<T>,
}

pub fn layer_norm_cached<T: Scalar>(
    x: &Matrix<T>,
    gain: &[T],
    bias: &[T],
    eps: T,
) -> (Matrix<T>, LayerNormCache<T>) {
    let d = T::from_f64(x.cols as f64);
    let mut out = Matrix::zeros(x.rows, x.cols);
    let mut xhat = Matrix::zeros(x.rows, x.cols);
    let mut inv_stds = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
        let inv_std = (var + eps).sqrt().recip();
        inv_stds.push(inv_std);
        for j in 0..x.cols {
            let h = (row[j] - mean) * inv_std;
            xhat.set(i, j, h);
            out.set(i, j, h * gain[j] + bias[j]);
        }
    }
    (out, LayerNormCache { xhat, inv_std: inv_stds })
}

fn add_bias_rows<T: Scalar>(m: &mut Matrix<T>, bias: &[T]) {
    for i in 0..m.rows {
        for (v, &b) in m.row_mut(i).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// A V for one layer: softmax(H Wq (E Wk)^T / sqrt(d) + P) (E Wv).
/// This is the pre-residual attention output, exposed for oracle checks.
pub fn attention_pre_residual<T: Scalar>(
    layer: &EncoderLayerWeights<T>,
    h: &Matrix<T>,
    e: &Matrix<T>,
    mask: &MaskMatrix,
) -> Result<Matrix<T>, EncoderError> {
    let q = matmul(h, &layer.w_q)?;
    let k = matmul(e, &layer.w_k)?;
    let v = matmul(e, &layer.w_v)?;
    let scale = T::from_f64(1.0 / (e.cols as f64).sqrt());
    let logits = matmul(&q, &k.transpose())?.scale(scale);
    let attn = masked_softmax_rows(&logits, mask)?;
    Ok(matmul(&attn, &v)?)
}

pub fn forward<T: Scalar>(
    weights: &EncoderWeights<T>,
    e: &Matrix<T>,
    mask: &MaskMatrix,
) -> Result<ChunkEmbeddings<T>, EncoderError> {
    forward_cached(weights, e, mask).map(|(emb, _)| emb)
}

pub fn forward_cached<T: Scalar>(
    weights: &EncoderWeights<T>,
    e: &Matrix<T>,
    mask: &MaskMatrix,
) -> Result<(ChunkEmbeddings<T>, ForwardCache<T>), EncoderError> {
    if !e.is_finite() {
        return Err(EncoderError::NonFiniteInput);
    }
    if e.cols != weights.d {
        return Err(EncoderError::DimensionMismatch {
            weights_d: weights.d,
            input_d: e.cols,
        });
    }
    let m = mask.rows;
    let d = weights.d;
    let eps = T::from_f64(LAYER_NORM_EPS);
    let scale = T::from_f64(1.0 / (d as f64).sqrt());

    // Layer 0 query stream: h_chk replicated m times.
    let mut h = Matrix::zeros(m, d);
    for i in 0..m {
        h.row_mut(i).copy_from_slice(&weights.layers[0].h_chk);
    }

    let mut caches = Vec::with_capacity(weights.layers.len());
    for layer in &weights.layers {
        let h_in = h.clone();
        let q = matmul(&h, &layer.w_q)?;
        let k = matmul(e, &layer.w_k)?;
        let v = matmul(e, &layer.w_v)?;
        let logits = matmul(&q, &k.transpose())?.scale(scale);
        let attn = masked_softmax_rows(&logits, mask)?;
        let attn_out = matmul(&attn, &v)?;
        let pre_ln1 = h.add(&attn_out);
        let (mid, ln1) = layer_norm_cached(&pre_ln1, &layer.ln1_gain, &layer.ln1_bias, eps);

        let mut ffn_pre = matmul(&mid, &layer.ffn_w1)?;
        add_bias_rows(&mut ffn_pre, &layer.ffn_b1);
        let ffn_hidden = Matrix {
            rows: ffn_pre.rows,
            cols: ffn_pre.cols,
            data: ffn_pre.data.iter().map(|&x| gelu(x)).collect(),
        };
        let mut ffn_out = matmul(&ffn_hidden, &layer.ffn_w2)?;
        add_bias_rows(&mut ffn_out, &layer.ffn_b2);

        let pre_ln2 = mid.add(&ffn_out);
        let (out, ln2) = layer_norm_cached(&pre_ln2, &layer.ln2_gain, &layer.ln2_bias, eps);

        caches.push(LayerCache {
            h_in,
            q,
            k,
            v,
            attn,
            attn_out,
            pre_ln1,
            ln1,
            mid,
            ffn_pre,
            ffn_hidden,
            pre_ln2,
            ln2,
            out: out.clone(),
        });
        h = out;
    }

    let pre_norm = h.clone();
    let mut norms = Vec::new();
    if weights.normalize_output {
        norms = (0..h.rows)
            .map(|i| h.row(i).iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        h.normalize_rows();
    }
    let output = h;
    Ok((
        ChunkEmbeddings {
            matrix: output.clone(),
            normalized: weights.normalize_output,
        },
        ForwardCache {
            layers: caches,
            pre_norm,
            norms,
            output,
        },
    ))
}

/// Truncate sentence embeddings to the encoder's dimension and re-normalize
/// each row (dimension pruning for wider base embedders).
pub fn prune_dimensions<T: Scalar>(e: &Matrix<T>, d: usize) -> Matrix<T> {
    assert!(d <= e.cols, "cannot prune {} columns up to {}", e.cols, d);
    let mut out = Matrix::zeros(e.rows, d);
    for i in 0..e.rows {
        out.row_mut(i).copy_from_slice(&e.row(i)[..d]);
    }
    out.normalize_rows();
    out
}
