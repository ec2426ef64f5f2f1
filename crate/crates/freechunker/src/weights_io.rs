//! Weight container file: an 8-byte little-endian header length, a JSON
//! header listing every tensor's name, shape, dtype and byte offset, then a
//! payload of little-endian 32-bit floats.
//!
//! Tensor names, per layer `i`:
//!   layer{i}.w_q, layer{i}.w_k, layer{i}.w_v            (d x d)
//!   layer{i}.h_chk                                      (d)
//!   layer{i}.ln1_gain, layer{i}.ln1_bias                (d)
//!   layer{i}.ln2_gain, layer{i}.ln2_bias                (d)
//!   layer{i}.ffn_w1 (d x 4d), layer{i}.ffn_b1 (4d)
//!   layer{i}.ffn_w2 (4d x d), layer{i}.ffn_b2 (d)

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderLayerWeights, EncoderWeights};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum WeightsIoError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("header parse: {0}")]
    Header(#[from] serde_json::Error),
    #[error("unsupported dtype {0:?} for tensor {1}")]
    UnsupportedDtype(String, String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name}: expected {expected} values, got {got}")]
    ShapeMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    d: usize,
    num_layers: usize,
    normalize_output: bool,
    tensors: Vec<TensorEntry>,
}

fn tensor_list<T: Scalar>(w: &EncoderWeights<T>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    let as_f32 = |data: &[T]| -> Vec<f32> { data.iter().map(|v| v.to_f64_lossy() as f32).collect() };
    for (i, layer) in w.layers.iter().enumerate() {
        let mut push = |name: &str, shape: Vec<usize>, data: Vec<f32>| {
            out.push((format!("layer{i}.{name}"), shape, data));
        };
        push("w_q", vec![layer.w_q.rows, layer.w_q.cols], as_f32(&layer.w_q.data));
        push("w_k", vec![layer.w_k.rows, layer.w_k.cols], as_f32(&layer.w_k.data));
        push("w_v", vec![layer.w_v.rows, layer.w_v.cols], as_f32(&layer.w_v.data));
        push("h_chk", vec![layer.h_chk.len()], as_f32(&layer.h_chk));
        push("ln1_gain", vec![layer.ln1_gain.len()], as_f32(&layer.ln1_gain));
        push("ln1_bias", vec![layer.ln1_bias.len()], as_f32(&layer.ln1_bias));
        push("ln2_gain", vec![layer.ln2_gain.len()], as_f32(&layer.ln2_gain));
        push("ln2_bias", vec![layer.ln2_bias.len()], as_f32(&layer.ln2_bias));
        push(
            "ffn_w1",
            vec![layer.ffn_w1.rows, layer.ffn_w1.cols],
            as_f32(&layer.ffn_w1.data),
        );
        push("ffn_b1", vec![layer.ffn_b1.len()], as_f32(&layer.ffn_b1));
        push(
            "ffn_w2",
            vec![layer.ffn_w2.rows, layer.ffn_w2.cols],
            as_f32(&layer.ffn_w2.data),
        );
        push("ffn_b2", vec![layer.ffn_b2.len()], as_f32(&layer.ffn_b2));
    }
    out
}

pub fn save_weights<T: Scalar, W: Write>(
    weights: &EncoderWeights<T>,
    mut out: W,
) -> Result<(), WeightsIoError> {
    let tensors = tensor_list(weights);
    let mut entries = Vec::new();
    let mut offset = 0usize;
    for (name, shape, data) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            dtype: "f32".to_string(),
            offset,
        });
        offset += data.len() * 4;
    }
    let header = Header {
        d: weights.d,
        num_layers: weights.layers.len(),
        normalize_output: weights.normalize_output,
        tensors: entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    for (_, _, data) in &tensors {
        for v in data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_weights<T: Scalar, R: Read>(mut input: R) -> Result<EncoderWeights<T>, WeightsIoError> {
    let mut len_bytes = [0u8; 8];
    input.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    input.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;

    let read_tensor = |name: &str| -> Result<(Vec<usize>, Vec<T>), WeightsIoError> {
        let entry = header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| WeightsIoError::MissingTensor(name.to_string()))?;
        if entry.dtype != "f32" {
            return Err(WeightsIoError::UnsupportedDtype(
                entry.dtype.clone(),
                name.to_string(),
            ));
        }
        let count: usize = entry.shape.iter().product();
        let bytes = payload
            .get(entry.offset..entry.offset + count * 4)
            .ok_or_else(|| WeightsIoError::ShapeMismatch {
                name: name.to_string(),
                expected: count,
                got: (payload.len().saturating_sub(entry.offset)) / 4,
            })?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| T::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        Ok((entry.shape.clone(), data))
    };

    let matrix = |name: &str| -> Result<Matrix<T>, WeightsIoError> {
        let (shape, data) = read_tensor(name)?;
        Ok(Matrix {
            rows: shape[0],
            cols: shape[1],
            data,
        })
    };
    let vector = |name: &str| -> Result<Vec<T>, WeightsIoError> { Ok(read_tensor(name)?.1) };

    let mut layers = Vec::with_capacity(header.num_layers);
    for i in 0..header.num_layers {
        let p = |field: &str| format!("layer{i}.{field}");
        layers.push(EncoderLayerWeights {
            w_q: matrix(&p("w_q"))?,
            w_k: matrix(&p("w_k"))?,
            w_v: matrix(&p("w_v"))?,
            h_chk: vector(&p("h_chk"))?,
            ln1_gain: vector(&p("ln1_gain"))?,
            ln1_bias: vector(&p("ln1_bias"))?,
            ln2_gain: vector(&p("ln2_gain"))?,
            ln2_bias: vector(&p("ln2_bias"))?,
            ffn_w1: matrix(&p("ffn_w1"))?,
            ffn_b1: vector(&p("ffn_b1"))?,
            ffn_w2: matrix(&p("ffn_w2"))?,
            ffn_b2: vector(&p("ffn_b2"))?,
        });
    }
    Ok(EncoderWeights {
        layers,
        d: header.d,
        normalize_output: header.normalize_output,
    })
}
