//! Distillation training: cosine loss against teacher chunk embeddings,
//! manual backpropagation through the encoder, AdamW, and the warmup+cosine
//! learning-rate schedule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{
    forward_cached, EncoderError, EncoderLayerWeights, EncoderWeights, ForwardCache,
};
use crate::numerics::{gelu_grad, matmul, Matrix};
use crate::patterns::{ChunkPattern, MaskMatrix, PatternSet};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum TrainingError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("zero vector in cosine loss")]
    ZeroVector,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("teacher shape mismatch: expected {expected} rows, got {got}")]
    TeacherShape { expected: usize, got: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub granularities: Vec<usize>,
    pub validation_interval: usize,
    pub seed: u64,
    pub embedding_dim: usize,
    pub num_layers: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2,
            batch_size: 1,
            base_lr: 1e-4,
            warmup_fraction: 1.0 / 3.0,
            granularities: vec![2, 4, 8, 16, 32],
            validation_interval: 1000,
            seed: 0,
            embedding_dim: 64,
            num_layers: 2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// 1 - mean cosine over the pairs.
pub fn cosine_loss<T: Scalar>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<T, TrainingError> {
    assert!(!pairs.is_empty());
    let mut total = T::zero();
    for (a, b) in pairs {
        let na = a.iter().map(|&v| v * v).sum::<T>().sqrt();
        let nb = b.iter().map(|&v| v * v).sum::<T>().sqrt();
        if na == T::zero() || nb == T::zero() {
            return Err(TrainingError::ZeroVector);
        }
        let dot = a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>();
        total += dot / (na * nb);
    }
    Ok(T::one() - total / T::from_f64(pairs.len() as f64))
}

/// Parameter gradients, mirroring [`EncoderWeights`], plus the gradient with
/// respect to the sentence embeddings.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub layers: Vec<EncoderLayerWeights<T>>,
    pub d_e: Matrix<T>,
}

fn zero_layer_grads<T: Scalar>(d: usize) -> EncoderLayerWeights<T> {
    let mut layer = EncoderLayerWeights::zeros(d);
    // `zeros` initializes layernorm gains to one; gradients start at zero.
    layer.ln1_gain.iter_mut().for_each(|v| *v = T::zero());
    layer.ln2_gain.iter_mut().for_each(|v| *v = T::zero());
    layer
}

/// Backward pass of the layernorm: returns d_x and accumulates d_gain/d_bias.
fn layer_norm_backward<T: Scalar>(
    d_out: &Matrix<T>,
    xhat: &Matrix<T>,
    inv_std: &[T],
    gain: &[T],
    d_gain: &mut [T],
    d_bias: &mut [T],
) -> Matrix<T> {
    let rows = d_out.rows;
    let cols = d_out.cols;
    let d = T::from_f64(cols as f64);
    let mut dx = Matrix::zeros(rows, cols);
    for (i, &r) in inv_std.iter().enumerate().take(rows) {
        let dy = d_out.row(i);
        let xh = xhat.row(i);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..cols {
            let dxh = dy[j] * gain[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh[j];
            d_gain[j] += dy[j] * xh[j];
            d_bias[j] += dy[j];
        }
        let drow = dx.row_mut(i);
        for j in 0..cols {
            let dxh = dy[j] * gain[j];
            drow[j] = r / d * (d * dxh - sum_dxhat - xh[j] * sum_dxhat_xhat);
        }
    }
    dx
}

/// Loss and gradients for one document: all pattern rows against their
/// teacher rows under the cosine loss. Outputs are compared after row
/// normalization regardless of the forward's `normalize_output` flag.
pub fn backward<T: Scalar>(
    weights: &EncoderWeights<T>,
    e: &Matrix<T>,
    mask: &MaskMatrix,
    teachers: &Matrix<T>,
) -> Result<(T, Gradients<T>), TrainingError> {
    let (_, cache) = forward_cached(weights, e, mask)?;
    backward_from_cache(weights, e, mask, teachers, &cache)
}

fn backward_from_cache<T: Scalar>(
    weights: &EncoderWeights<T>,
    e: &Matrix<T>,
    mask: &MaskMatrix,
    teachers: &Matrix<T>,
    cache: &ForwardCache<T>,
) -> Result<(T, Gradients<T>), TrainingError> {
    let m = mask.rows;
    let d = weights.d;
    if teachers.rows != m {
        return Err(TrainingError::TeacherShape {
            expected: m,
            got: teachers.rows,
        });
    }

    // Normalize the pre-normalization output (the forward's own normalization
    // is equivalent when enabled).
    let pre = &cache.pre_norm;
    let mut norms = Vec::with_capacity(m);
    let mut vhat = Matrix::zeros(m, d);
    for i in 0..m {
        let n = pre.row(i).iter().map(|&v| v * v).sum::<T>().sqrt();
        if n == T::zero() {
            return Err(TrainingError::ZeroVector);
        }
        norms.push(n);
        for j in 0..d {
            vhat.set(i, j, pre.get(i, j) / n);
        }
    }

    let m_t = T::from_f64(m as f64);
    let mut loss = T::zero();
    // d loss / d vhat = -t / m, then through the normalization:
    // d pre = (g - vhat (vhat . g)) / |pre|.
    let mut d_out = Matrix::zeros(m, d);
    for (i, &norm) in norms.iter().enumerate() {
        let t = teachers.row(i);
        let tn = t.iter().map(|&v| v * v).sum::<T>().sqrt();
        if tn == T::zero() {
            return Err(TrainingError::ZeroVector);
        }
        let cos = t
            .iter()
            .zip(vhat.row(i))
            .map(|(&a, &b)| a * b)
            .sum::<T>()
            / tn;
        loss += cos;
        let vh = vhat.row(i);
        let mut vdotg = T::zero();
        let mut g = vec![T::zero(); d];
        for j in 0..d {
            g[j] = -(t[j] / tn) / m_t;
            vdotg += vh[j] * g[j];
        }
        for j in 0..d {
            d_out.set(i, j, (g[j] - vh[j] * vdotg) / norm);
        }
    }
    let loss = T::one() - loss / m_t;

    let mut grads = Gradients {
        layers: (0..weights.layers.len()).map(|_| zero_layer_grads(d)).collect(),
        d_e: Matrix::zeros(e.rows, e.cols),
    };
    let scale = T::from_f64(1.0 / (d as f64).sqrt());

    // Walk layers in reverse; d_out holds the gradient w.r.t. the layer's
    // output on entry and w.r.t. its input query stream on exit.
    for (l, layer) in weights.layers.iter().enumerate().rev() {
        let lc = &cache.layers[l];
        let lg = &mut grads.layers[l];

        // Out = LN2(mid + ffn_out)
        let d_pre_ln2 = layer_norm_backward(
            &d_out,
            &lc.ln2.xhat,
            &lc.ln2.inv_std,
            &layer.ln2_gain,
            &mut lg.ln2_gain,
            &mut lg.ln2_bias,
        );

        // FFN branch: ffn_out = gelu(mid W1 + b1) W2 + b2
        for i in 0..m {
            for (b, &dv) in lg.ffn_b2.iter_mut().zip(d_pre_ln2.row(i)) {
                *b += dv;
            }
        }
        lg.ffn_w2
            .add_assign(&matmul(&lc.ffn_hidden.transpose(), &d_pre_ln2).unwrap());
        let d_hidden = matmul(&d_pre_ln2, &layer.ffn_w2.transpose()).unwrap();
        let mut d_ffn_pre = d_hidden;
        for (dv, &x) in d_ffn_pre.data.iter_mut().zip(&lc.ffn_pre.data) {
            *dv *= gelu_grad(x);
        }
        for i in 0..m {
            for (b, &dv) in lg.ffn_b1.iter_mut().zip(d_ffn_pre.row(i)) {
                *b += dv;
            }
        }
        lg.ffn_w1
            .add_assign(&matmul(&lc.mid.transpose(), &d_ffn_pre).unwrap());

        // mid feeds both the FFN and the residual around it.
        let mut d_mid = matmul(&d_ffn_pre, &layer.ffn_w1.transpose()).unwrap();
        d_mid.add_assign(&d_pre_ln2);

        // mid = LN1(h_in + attn_out)
        let d_pre_ln1 = layer_norm_backward(
            &d_mid,
            &lc.ln1.xhat,
            &lc.ln1.inv_std,
            &layer.ln1_gain,
            &mut lg.ln1_gain,
            &mut lg.ln1_bias,
        );

        // attn_out = A V
        let d_attn = matmul(&d_pre_ln1, &lc.v.transpose()).unwrap();
        let d_v = matmul(&lc.attn.transpose(), &d_pre_ln1).unwrap();

        // Softmax backward per row; masked entries have A = 0 so their
        // logit gradients vanish.
        let mut d_logits = Matrix::zeros(m, mask.cols);
        for i in 0..m {
            let a = lc.attn.row(i);
            let da = d_attn.row(i);
            let inner = a.iter().zip(da).map(|(&x, &y)| x * y).sum::<T>();
            let drow = d_logits.row_mut(i);
            for j in 0..mask.cols {
                drow[j] = a[j] * (da[j] - inner);
            }
        }

        let d_q = matmul(&d_logits, &lc.k).unwrap().scale(scale);
        let d_k = matmul(&d_logits.transpose(), &lc.q).unwrap().scale(scale);

        lg.w_q
            .add_assign(&matmul(&lc.h_in.transpose(), &d_q).unwrap());
        lg.w_k.add_assign(&matmul(&e.transpose(), &d_k).unwrap());
        lg.w_v.add_assign(&matmul(&e.transpose(), &d_v).unwrap());
        grads
            .d_e
            .add_assign(&matmul(&d_k, &layer.w_k.transpose()).unwrap());
        grads
            .d_e
            .add_assign(&matmul(&d_v, &layer.w_v.transpose()).unwrap());

        // Gradient into the query stream: residual + attention query path.
        let mut d_h = matmul(&d_q, &layer.w_q.transpose()).unwrap();
        d_h.add_assign(&d_pre_ln1);

        if l == 0 {
            // Layer 0's query stream is h_chk replicated m times.
            for i in 0..m {
                for (g, &dv) in lg.h_chk.iter_mut().zip(d_h.row(i)) {
                    *g += dv;
                }
            }
        } else {
            d_out = d_h;
        }
    }

    Ok((loss, grads))
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    /// First/second moment per parameter tensor, in visitation order.
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: usize,
    pub params: AdamWParams,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(weights: &EncoderWeights<T>, params: AdamWParams) -> Self {
        let mut m = Vec::new();
        for_each_tensor(weights, |t| m.push(vec![T::zero(); t.len()]));
        let v = m.clone();
        OptimizerState {
            m,
            v,
            step: 0,
            params,
        }
    }
}

/// Visit every parameter tensor of the weights in a fixed order.
fn for_each_tensor<T: Scalar>(w: &EncoderWeights<T>, mut f: impl FnMut(&[T])) {
    for layer in &w.layers {
        f(&layer.w_q.data);
        f(&layer.w_k.data);
        f(&layer.w_v.data);
        f(&layer.h_chk);
        f(&layer.ln1_gain);
        f(&layer.ln1_bias);
        f(&layer.ln2_gain);
        f(&layer.ln2_bias);
        f(&layer.ffn_w1.data);
        f(&layer.ffn_b1);
        f(&layer.ffn_w2.data);
        f(&layer.ffn_b2);
    }
}

fn tensor_pairs_mut<'a, T: Scalar>(
    w: &'a mut EncoderWeights<T>,
    g: &'a Gradients<T>,
) -> Vec<(&'a mut [T], &'a [T])> {
    let mut pairs: Vec<(&mut [T], &[T])> = Vec::new();
    for (layer, grad) in w.layers.iter_mut().zip(&g.layers) {
        pairs.push((&mut layer.w_q.data, &grad.w_q.data));
        pairs.push((&mut layer.w_k.data, &grad.w_k.data));
        pairs.push((&mut layer.w_v.data, &grad.w_v.data));
        pairs.push((&mut layer.h_chk, &grad.h_chk));
        pairs.push((&mut layer.ln1_gain, &grad.ln1_gain));
        pairs.push((&mut layer.ln1_bias, &grad.ln1_bias));
        pairs.push((&mut layer.ln2_gain, &grad.ln2_gain));
        pairs.push((&mut layer.ln2_bias, &grad.ln2_bias));
        pairs.push((&mut layer.ffn_w1.data, &grad.ffn_w1.data));
        pairs.push((&mut layer.ffn_b1, &grad.ffn_b1));
        pairs.push((&mut layer.ffn_w2.data, &grad.ffn_w2.data));
        pairs.push((&mut layer.ffn_b2, &grad.ffn_b2));
    }
    pairs
}

/// One AdamW update over a single tensor. Decoupled weight decay is applied
/// before the moment update.
pub fn adamw_update_tensor<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    step: usize,
    hp: &AdamWParams,
    lr: f64,
) -> Result<(), TrainingError> {
    let lr_t = T::from_f64(lr);
    let b1 = T::from_f64(hp.beta1);
    let b2 = T::from_f64(hp.beta2);
    let eps = T::from_f64(hp.eps);
    let wd = T::from_f64(hp.weight_decay);
    let bc1 = T::one() - T::from_f64(hp.beta1.powi(step as i32));
    let bc2 = T::one() - T::from_f64(hp.beta2.powi(step as i32));
    for i in 0..params.len() {
        let g = grads[i];
        if !g.is_finite() {
            return Err(TrainingError::NonFiniteGradient);
        }
        params[i] = params[i] - lr_t * wd * params[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// AdamW step over all encoder parameters, with `lr` overriding the stored
/// learning rate (scheduling).
pub fn adamw_step<T: Scalar>(
    weights: &mut EncoderWeights<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<(), TrainingError> {
    state.step += 1;
    let step = state.step;
    let hp = state.params;
    for (idx, (p, g)) in tensor_pairs_mut(weights, grads).into_iter().enumerate() {
        adamw_update_tensor(p, g, &mut state.m[idx], &mut state.v[idx], step, &hp, lr)?;
    }
    Ok(())
}

/// Linear warmup to `base_lr` over the first ceil(total * warmup_fraction)
/// steps, then cosine decay to zero at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64, warmup_fraction: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let warmup = ((total_steps as f64) * warmup_fraction).ceil() as usize;
    if step <= warmup && warmup > 0 {
        return base_lr * step as f64 / warmup as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// One training document: sentence embeddings plus the patterns to distill.
#[derive(Debug, Clone)]
pub struct TrainDoc<T> {
    pub e: Matrix<T>,
    pub pattern_set: PatternSet,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

pub type TeacherFn<'a, T> = &'a dyn Fn(&Matrix<T>, &ChunkPattern) -> Vec<T>;

fn doc_teachers<T: Scalar>(doc: &TrainDoc<T>, teacher: TeacherFn<T>) -> Matrix<T> {
    let rows: Vec<Vec<T>> = doc
        .pattern_set
        .patterns
        .iter()
        .map(|p| teacher(&doc.e, p))
        .collect();
    Matrix::from_rows(&rows)
}

pub fn validation_loss<T: Scalar>(
    weights: &EncoderWeights<T>,
    docs: &[TrainDoc<T>],
    teacher: TeacherFn<T>,
) -> Result<f64, TrainingError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for doc in docs {
        let mask = crate::patterns::pattern_to_mask(&doc.pattern_set);
        let (_, cache) = forward_cached(weights, &doc.e, &mask)?;
        let teachers = doc_teachers(doc, teacher);
        let mut out = cache.output.clone();
        if !weights.normalize_output {
            out.normalize_rows();
        }
        for i in 0..out.rows {
            let pair = [(teachers.row(i).to_vec(), out.row(i).to_vec())];
            total += cosine_loss(&pair)?.to_f64_lossy();
            count += 1;
        }
    }
    if count == 0 {
        return Err(TrainingError::EmptyCorpus);
    }
    Ok(total / count as f64)
}

/// Batch-size-1 training: one document (all its patterns averaged in the
/// loss) per optimizer step. Deterministic under a fixed seed.
pub fn train<T: Scalar>(
    train_docs: &[TrainDoc<T>],
    val_docs: &[TrainDoc<T>],
    teacher: TeacherFn<T>,
    cfg: &TrainConfig,
) -> Result<(EncoderWeights<T>, Vec<StepRecord>), TrainingError> {
    if train_docs.is_empty() {
        return Err(TrainingError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = EncoderWeights::init_random(cfg.embedding_dim, cfg.num_layers, &mut rng);
    let mut state = OptimizerState::new(
        &weights,
        AdamWParams {
            lr: cfg.base_lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        },
    );
    let total_steps = cfg.epochs * train_docs.len();
    let mut history = Vec::new();
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_docs.len()).collect();
        order.shuffle(&mut rng);
        for &doc_idx in &order {
            let doc = &train_docs[doc_idx];
            let mask = crate::patterns::pattern_to_mask(&doc.pattern_set);
            let teachers = doc_teachers(doc, teacher);
            let (loss, grads) = backward(&weights, &doc.e, &mask, &teachers)?;
            step += 1;
            let lr = lr_at(step, total_steps, cfg.base_lr, cfg.warmup_fraction);
            adamw_step(&mut weights, &grads, &mut state, lr)?;
            let val_loss = if cfg.validation_interval > 0
                && step.is_multiple_of(cfg.validation_interval)
                && !val_docs.is_empty()
            {
                Some(validation_loss(&weights, val_docs, teacher)?)
            } else {
                None
            };
            history.push(StepRecord {
                step,
                train_loss: loss.to_f64_lossy(),
                val_loss,
            });
        }
    }
    Ok((weights, history))
}
