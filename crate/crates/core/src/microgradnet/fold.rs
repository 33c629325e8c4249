use std::collections::BTreeSet;

use super::graph::{ArchGraph, LayerSpec};
use super::ops::BN_EPS;
use super::store::{key, WeightStore};
use super::tensor::Scalar;
use super::NnError;

/// Weight key whose rows are the node's output channels.
fn output_weight(op: &LayerSpec) -> Option<&'static str> {
    match op {
        LayerSpec::Conv2d { .. } | LayerSpec::DownsampledConv2d { .. } => Some("weight"),
        LayerSpec::SeparableConv2d { .. } => Some("pointwise"),
        _ => None,
    }
}

/// Merges every batchnorm that directly follows a convolution (its only
/// consumer) into that convolution's weights and bias, and removes the
/// batchnorm node. Other batchnorm nodes are left in place.
pub fn fold_batchnorm<T: Scalar>(
    graph: &ArchGraph,
    ws: &WeightStore<T>,
) -> Result<(ArchGraph, WeightStore<T>), NnError> {
    let consumers = graph.consumers();
    let mut out = ws.clone();
    let mut drop = BTreeSet::new();
    for (id, node) in graph.nodes().iter().enumerate() {
        if !matches!(node.op, LayerSpec::BatchNorm) {
            continue;
        }
        let src = node.inputs[0];
        let prev = graph.node(src);
        let Some(wname) = output_weight(&prev.op) else {
            continue;
        };
        if consumers[src].len() != 1 {
            continue;
        }
        let get = |p: &str| ws.require(&key(&node.name, p)).map(|t| t.data().to_vec());
        let (gamma, beta, mean, var) = (
            get("gamma")?,
            get("beta")?,
            get("running_mean")?,
            get("running_var")?,
        );
        let scale: Vec<T> = gamma
            .iter()
            .zip(&var)
            .map(|(&g, &v)| g / (v + T::lit(BN_EPS)).sqrt())
            .collect();
        let w = out
            .get_mut(&key(&prev.name, wname))
            .ok_or_else(|| NnError::MissingParam(key(&prev.name, wname)))?;
        let row = w.row_len();
        for (c, chunk) in w.data_mut().chunks_mut(row).enumerate() {
            chunk.iter_mut().for_each(|v| *v = *v * scale[c]);
        }
        let b = out
            .get_mut(&key(&prev.name, "bias"))
            .ok_or_else(|| NnError::MissingParam(key(&prev.name, "bias")))?;
        for (c, v) in b.data_mut().iter_mut().enumerate() {
            *v = (*v - mean[c]) * scale[c] + beta[c];
        }
        for p in ["gamma", "beta", "running_mean", "running_var"] {
            out.remove(&key(&node.name, p));
        }
        drop.insert(id);
    }
    let (folded, _) = graph.without_nodes(&drop)?;
    Ok((folded, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microgradnet::{forward, GraphBuilder, Padding, RunOptions, Tensor};
    use rand::SeedableRng;

    #[test]
    fn folded_network_matches_inference_batchnorm() {
        let mut b = GraphBuilder::input([2, 5, 5]);
        let c = b
            .push(
                "c",
                LayerSpec::Conv2d {
                    kernel: 3,
                    out_channels: 3,
                    padding: Padding::Same,
                },
                &[0],
            )
            .unwrap();
        let bn = b.push("bn", LayerSpec::BatchNorm, &[c]).unwrap();
        let r = b.push("r", LayerSpec::Relu, &[bn]).unwrap();
        let fc = b
            .push(
                "fc",
                LayerSpec::FullyConnected {
                    out_features: 2,
                    input_select: None,
                },
                &[r],
            )
            .unwrap();
        let g = b.finish(fc).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut ws = WeightStore::<f64>::init(&g, &mut rng);
        ws.insert(
            "bn/gamma",
            Tensor::new(vec![3], vec![0.5, 2.0, -1.0]).unwrap(),
        );
        ws.insert(
            "bn/beta",
            Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap(),
        );
        ws.insert(
            "bn/running_mean",
            Tensor::new(vec![3], vec![0.2, 0.0, -0.4]).unwrap(),
        );
        ws.insert(
            "bn/running_var",
            Tensor::new(vec![3], vec![1.5, 0.3, 2.0]).unwrap(),
        );
        let x = Tensor::from_fn(&[4, 2, 5, 5], |i| ((i * 31 % 17) as f64 - 8.0) / 4.0);
        let reference = forward(&g, &ws, &x, RunOptions::eval()).unwrap().logits;
        let (fg, fws) = fold_batchnorm(&g, &ws).unwrap();
        assert_eq!(fg.nodes().len(), g.nodes().len() - 1);
        let folded = forward(&fg, &fws, &x, RunOptions::eval()).unwrap().logits;
        for (a, b) in reference.data().iter().zip(folded.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
