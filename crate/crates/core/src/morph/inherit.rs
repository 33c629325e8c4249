use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::microgradnet::{ArchGraph, Tensor, WeightStore, GROUP_MU, LOG_SIGMA2_SUFFIX};
use crate::pruner::{checkpoint, init_posterior, CheckpointError, Method};

#[derive(Debug, Error)]
pub enum InheritError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Inherited entries over all posterior entries, per candidate node.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Coverage {
    pub per_node: BTreeMap<String, (usize, usize)>,
}

impl Coverage {
    pub fn inherited(&self) -> usize {
        self.per_node.values().map(|v| v.0).sum()
    }

    pub fn total(&self) -> usize {
        self.per_node.values().map(|v| v.1).sum()
    }

    pub fn fraction(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            0.0
        } else {
            self.inherited() as f64 / t as f64
        }
    }

    pub fn node_fraction(&self, node: &str) -> Option<f64> {
        self.per_node
            .get(node)
            .map(|&(i, t)| if t == 0 { 0.0 } else { i as f64 / t as f64 })
    }
}

/// Copies `src[idx]` into `dst[idx]` for every index inside both shapes.
/// Tensors of different rank share nothing.
fn copy_overlap(src: &Tensor<f32>, dst: &mut Tensor<f32>) -> usize {
    let (ss, ds) = (src.shape().to_vec(), dst.shape().to_vec());
    if ss.len() != ds.len() {
        return 0;
    }
    let common: Vec<usize> = ss.iter().zip(&ds).map(|(a, b)| *a.min(b)).collect();
    let n: usize = common.iter().product();
    if n == 0 {
        return 0;
    }
    let strides = |shape: &[usize]| {
        let mut s = vec![1; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * shape[i + 1];
        }
        s
    };
    let (sst, dst_st) = (strides(&ss), strides(&ds));
    let mut idx = vec![0; common.len()];
    let sd = src.data();
    let dd = dst.data_mut();
    for _ in 0..n {
        let so: usize = idx.iter().zip(&sst).map(|(i, s)| i * s).sum();
        let doff: usize = idx.iter().zip(&dst_st).map(|(i, s)| i * s).sum();
        dd[doff] = sd[so];
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < common[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    n
}

fn node_keys(phi: &WeightStore<f32>, node: &str) -> Vec<String> {
    let prefix = format!("{node}/");
    phi.keys()
        .filter(|k| k.starts_with(&prefix) && !k[prefix.len()..].contains('/'))
        .cloned()
        .collect()
}

/// Candidate posterior with every entry that the reference holds at the
/// same node (same name and op kind), parameter and index taken from the
/// reference; everything else freshly initialized.
pub fn inherit(
    reference: &ArchGraph,
    ref_phi: &WeightStore<f32>,
    candidate: &ArchGraph,
    method: Method,
    rng: &mut impl Rng,
) -> (WeightStore<f32>, Coverage) {
    let matched: BTreeMap<&str, bool> = candidate
        .nodes()
        .iter()
        .map(|n| {
            let same = reference
                .find(&n.name)
                .is_some_and(|r| reference.node(r).op.kind_name() == n.op.kind_name());
            (n.name.as_str(), same)
        })
        .collect();
    // Weights first so fresh variances are derived from the inherited means.
    let mut ws = WeightStore::<f32>::init(candidate, rng);
    let is_companion = |k: &str| k.ends_with(LOG_SIGMA2_SUFFIX) || k.ends_with(GROUP_MU);
    let mut copied = BTreeMap::<String, usize>::new();
    let transfer =
        |ws: &mut WeightStore<f32>, companions: bool, copied: &mut BTreeMap<String, usize>| {
            for node in candidate
                .nodes()
                .iter()
                .filter(|n| matched[n.name.as_str()])
            {
                for k in node_keys(ws, &node.name) {
                    if is_companion(&k) != companions {
                        continue;
                    }
                    if let (Some(src), Some(dst)) = (ref_phi.get(&k), ws.get_mut(&k)) {
                        *copied.entry(node.name.clone()).or_default() += copy_overlap(src, dst);
                    }
                }
            }
        };
    transfer(&mut ws, false, &mut copied);
    let mut phi = init_posterior(candidate, &ws, method);
    transfer(&mut phi, true, &mut copied);
    let mut coverage = Coverage::default();
    for node in candidate.nodes() {
        let total: usize = node_keys(&phi, &node.name)
            .iter()
            .filter_map(|k| phi.get(k))
            .map(|t| t.len())
            .sum();
        if total > 0 {
            coverage.per_node.insert(
                node.name.clone(),
                (copied.get(&node.name).copied().unwrap_or(0), total),
            );
        }
    }
    (phi, coverage)
}

/// As [`inherit`], reading the reference posterior from a checkpoint that
/// must have been written for `reference`.
pub fn inherit_checkpoint(
    path: &Path,
    reference: &ArchGraph,
    candidate: &ArchGraph,
    method: Method,
    rng: &mut impl Rng,
) -> Result<(WeightStore<f32>, Coverage), InheritError> {
    let ck = checkpoint::load(path, Some(reference))?;
    Ok(inherit(reference, &ck.weights, candidate, method, rng))
}
