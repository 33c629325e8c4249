//! Symmetric per-tensor int8 quantization.

use serde::{Deserialize, Serialize};

use super::store::WeightStore;
use super::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub values: Vec<i8>,
    pub scale: f32,
}

/// `scale = max|x| / 127`, `q = round(x / scale)`. An all-zero tensor gets
/// scale 1.
pub fn quantize(t: &Tensor<f32>) -> QuantizedTensor {
    let max = t.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = if max > 0.0 { max / 127.0 } else { 1.0 };
    let values = t
        .data()
        .iter()
        .map(|&v| (v / scale).round().clamp(-127.0, 127.0) as i8)
        .collect();
    QuantizedTensor {
        shape: t.shape().to_vec(),
        values,
        scale,
    }
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor<f32> {
    Tensor::new(
        q.shape.clone(),
        q.values.iter().map(|&v| v as f32 * q.scale).collect(),
    )
    .expect("shape preserved")
}

/// Replaces every tensor by its int8 reconstruction and marks the store as
/// 8-bit. Exact zeros stay zero, so pruning masks survive.
pub fn quantize_store(ws: &WeightStore<f32>) -> WeightStore<f32> {
    let mut out = ws.clone();
    for (_, t) in out.iter_mut() {
        *t = dequantize(&quantize(t));
    }
    out.bits = 8;
    out
}
