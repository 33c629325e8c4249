#![allow(dead_code)]

use microsearch::microgradnet::{backward, forward, ArchGraph, RunOptions, Tensor, WeightStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Norm-relative error `|a - b| / max(|a|, |b|, 1e-4)` over a whole tensor.
/// The floor keeps gradients that vanish analytically (e.g. a bias feeding
/// batch-statistics normalization) from dividing noise by noise.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-4)
}

/// Scalar probe `sum_i c_i * logits_i`, with posterior noise drawn from a
/// fixed stream when `noise_seed` is set (so the objective is deterministic).
pub fn probe(
    graph: &ArchGraph,
    ws: &WeightStore<f64>,
    x: &Tensor<f64>,
    coeffs: &[f64],
    noise_seed: Option<u64>,
    train: bool,
) -> f64 {
    let mut rng = noise_seed.map(ChaCha8Rng::seed_from_u64);
    let opts = RunOptions {
        train,
        sample: rng.as_mut().map(|r| r as &mut dyn rand::RngCore),
        instrument: false,
    };
    let out = forward(graph, ws, x, opts).unwrap();
    out.logits
        .data()
        .iter()
        .zip(coeffs)
        .map(|(a, b)| a * b)
        .sum()
}

/// Per-parameter relative error between the reverse pass and central
/// differences of [`probe`].
pub fn check(
    graph: &ArchGraph,
    ws: &WeightStore<f64>,
    x: &Tensor<f64>,
    noise_seed: Option<u64>,
    train: bool,
) -> Vec<(String, f64)> {
    let n_out = x.shape()[0] * graph.output_len();
    let coeffs: Vec<f64> = (0..n_out)
        .map(|i| ((i * 7919 % 13) as f64 - 6.0) / 6.0)
        .collect();
    let mut rng = noise_seed.map(ChaCha8Rng::seed_from_u64);
    let opts = RunOptions {
        train,
        sample: rng.as_mut().map(|r| r as &mut dyn rand::RngCore),
        instrument: false,
    };
    let fwd = forward(graph, ws, x, opts).unwrap();
    let grads = backward(graph, ws, &fwd, &coeffs).unwrap();
    let mut out = Vec::new();
    for (k, g) in &grads {
        let mut fd = vec![0.0; g.len()];
        for (i, slot) in fd.iter_mut().enumerate() {
            let mut plus = ws.clone();
            plus.get_mut(k).unwrap().data_mut()[i] += FD_STEP;
            let mut minus = ws.clone();
            minus.get_mut(k).unwrap().data_mut()[i] -= FD_STEP;
            *slot = (probe(graph, &plus, x, &coeffs, noise_seed, train)
                - probe(graph, &minus, x, &coeffs, noise_seed, train))
                / (2.0 * FD_STEP);
        }
        out.push((k.clone(), rel_error(g.data(), &fd)));
    }
    out
}
