use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::microgradnet::{
    key, ArchGraph, LayerSpec, NnError, ParamRole, WeightStore, GROUP_LOG_SIGMA2, GROUP_MU,
    LOG_SIGMA2_SUFFIX,
};

use super::kl::log_alpha;

/// Per-node log-scale keep thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub per_node: BTreeMap<String, f64>,
    pub default: f64,
}

impl Thresholds {
    pub fn uniform(tau: f64) -> Self {
        Self {
            per_node: BTreeMap::new(),
            default: tau,
        }
    }

    pub fn for_node(&self, node: &str) -> f64 {
        self.per_node.get(node).copied().unwrap_or(self.default)
    }
}

/// Sparse weights `omega-bar` on a (possibly reduced) graph.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunedNetwork {
    pub graph: ArchGraph,
    pub weights: WeightStore<f32>,
    /// Entries that must stay exactly zero while fine-tuning (`false`).
    pub masks: BTreeMap<String, Vec<bool>>,
    /// Surviving group indices per node (grouped pruning only), in the
    /// node's original indexing.
    pub kept_groups: BTreeMap<String, Vec<usize>>,
    /// Nodes whose every group fell above threshold; the best one was kept.
    pub flagged: Vec<String>,
}

impl PrunedNetwork {
    /// `|E_p|`: non-zero weight entries.
    pub fn surviving_edges(&self) -> usize {
        self.weights.nonzero_weights(&self.graph)
    }

    pub fn layer_nonzeros(&self) -> BTreeMap<String, usize> {
        layer_nonzeros(&self.graph, &self.weights)
    }

    pub fn nonzero_groups(&self) -> usize {
        nonzero_groups(&self.graph, &self.weights)
    }
}

pub fn layer_nonzeros(graph: &ArchGraph, ws: &WeightStore<f32>) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (id, node) in graph.nodes().iter().enumerate() {
        let specs = graph.param_specs(id);
        if !specs.iter().any(|p| p.role == ParamRole::Weight) {
            continue;
        }
        let n = specs
            .iter()
            .filter(|p| p.role == ParamRole::Weight)
            .filter_map(|p| ws.get(&key(&node.name, p.name)))
            .map(|t| t.count_nonzero())
            .sum();
        out.insert(node.name.clone(), n);
    }
    out
}

/// Groups (convolution output maps, FC input neurons) with any non-zero
/// weight, counted directly on the weights.
pub fn nonzero_groups(graph: &ArchGraph, ws: &WeightStore<f32>) -> usize {
    let mut total = 0;
    for node in graph.nodes() {
        let Some(p) = group_param(&node.op) else {
            continue;
        };
        let Some(w) = ws.get(&key(&node.name, p)) else {
            continue;
        };
        total += w
            .data()
            .chunks(w.row_len())
            .filter(|row| row.iter().any(|&v| v != 0.0))
            .count();
    }
    total
}

/// Tensor whose leading axis enumerates the node's groups.
fn group_param(op: &LayerSpec) -> Option<&'static str> {
    match op {
        LayerSpec::Conv2d { .. }
        | LayerSpec::DownsampledConv2d { .. }
        | LayerSpec::FullyConnected { .. } => Some("weight"),
        LayerSpec::SeparableConv2d { .. } => Some("pointwise"),
        _ => None,
    }
}

fn is_conv_like(op: &LayerSpec) -> bool {
    matches!(
        op,
        LayerSpec::Conv2d { .. }
            | LayerSpec::DownsampledConv2d { .. }
            | LayerSpec::SeparableConv2d { .. }
    )
}

/// Keeps weight `ij` (value `mu_ij`) iff `log beta_ij <= tau_l`.
pub fn extract_mask_spvd(
    graph: &ArchGraph,
    phi: &WeightStore<f32>,
    thresholds: &Thresholds,
) -> PrunedNetwork {
    let mut weights = phi.point_estimate();
    let mut masks = BTreeMap::new();
    for (id, node) in graph.nodes().iter().enumerate() {
        let tau = thresholds.for_node(&node.name);
        for p in graph
            .param_specs(id)
            .into_iter()
            .filter(|p| p.role == ParamRole::Weight)
        {
            let k = key(&node.name, p.name);
            let (Some(mu), Some(ls)) = (phi.get(&k), phi.get(&format!("{k}{LOG_SIGMA2_SUFFIX}")))
            else {
                continue;
            };
            let keep: Vec<bool> = mu
                .data()
                .iter()
                .zip(ls.data())
                .map(|(&m, &s)| log_alpha(m as f64, s as f64) <= tau)
                .collect();
            let w = weights.get_mut(&k).expect("point estimate keeps weights");
            w.data_mut().iter_mut().zip(&keep).for_each(|(v, &kept)| {
                if !kept {
                    *v = 0.0
                }
            });
            masks.insert(k, keep);
        }
    }
    PrunedNetwork {
        graph: graph.clone(),
        weights,
        masks,
        kept_groups: BTreeMap::new(),
        flagged: Vec::new(),
    }
}

/// Consumers reached from a convolution through channel-preserving steps.
struct Reach {
    passthrough: Vec<usize>,
    sinks: Vec<usize>,
    /// Some path ends in a merge, the graph output, or another step whose
    /// channel layout cannot shrink independently.
    blocked: bool,
}

fn reach(graph: &ArchGraph, consumers: &[Vec<usize>], from: usize) -> Reach {
    let mut r = Reach {
        passthrough: Vec::new(),
        sinks: Vec::new(),
        blocked: from == graph.output(),
    };
    let mut stack = consumers[from].clone();
    while let Some(c) = stack.pop() {
        match graph.node(c).op {
            LayerSpec::BatchNorm | LayerSpec::Relu | LayerSpec::MaxPool { .. } => {
                r.passthrough.push(c);
                r.blocked |= c == graph.output();
                stack.extend(&consumers[c]);
            }
            ref op if is_conv_like(op) || matches!(op, LayerSpec::FullyConnected { .. }) => {
                r.sinks.push(c)
            }
            _ => r.blocked = true,
        }
    }
    r
}

/// Grouped extraction: a group survives iff its scale's `log alpha <= tau_l`.
/// Group scale means are folded into the weights; pruned convolution maps
/// are cut from the graph along with the downstream slices that read them,
/// and pruned FC inputs become an input selection. Maps that feed a merge
/// keep their slot and are zeroed instead.
pub fn extract_mask_bc(
    graph: &ArchGraph,
    phi: &WeightStore<f32>,
    thresholds: &Thresholds,
) -> Result<PrunedNetwork, NnError> {
    let nodes = graph.nodes();
    let mut ws = phi.point_estimate();
    let mut kept_groups = BTreeMap::new();
    let mut flagged = Vec::new();
    let mut out_keep: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    // FC node -> (original weight row, position in the node's input tensor).
    let mut fc_rows: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();

    for (id, node) in nodes.iter().enumerate() {
        let Some(gp) = group_param(&node.op) else {
            continue;
        };
        let name = &node.name;
        let groups = ws.require(&key(name, gp))?.shape()[0];
        let mut keep: Vec<usize> = (0..groups).collect();
        if let Some(mu) = phi.get(&key(name, GROUP_MU)) {
            let mu = mu.data().to_vec();
            let la: Vec<f64> = match phi.get(&key(name, GROUP_LOG_SIGMA2)) {
                Some(ls) => mu
                    .iter()
                    .zip(ls.data())
                    .map(|(&m, &s)| log_alpha(m as f64, s as f64))
                    .collect(),
                None => vec![f64::NEG_INFINITY; groups],
            };
            let tau = thresholds.for_node(name);
            keep = (0..groups).filter(|&g| la[g] <= tau).collect();
            if keep.is_empty() {
                let best = (0..groups)
                    .min_by(|&a, &b| la[a].total_cmp(&la[b]))
                    .expect("non-empty layer");
                keep = vec![best];
                flagged.push(name.clone());
            }
            ws.get_mut(&key(name, gp))
                .expect("checked")
                .map_axis(0, |g, v| v * mu[g]);
            if is_conv_like(&node.op) {
                ws.require(&key(name, "bias"))?;
                ws.get_mut(&key(name, "bias"))
                    .expect("checked")
                    .map_axis(0, |g, v| v * mu[g]);
            }
            kept_groups.insert(name.clone(), keep.clone());
        }
        match &node.op {
            LayerSpec::FullyConnected { input_select, .. } => {
                let pos = |j: usize| input_select.as_ref().map_or(j, |s| s[j]);
                fc_rows.insert(id, keep.iter().map(|&j| (j, pos(j))).collect());
            }
            _ => {
                out_keep.insert(id, keep);
            }
        }
    }

    let consumers = graph.consumers();
    let mut masks: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    let mut in_keep: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut bn_keep: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let ids: Vec<usize> = out_keep.keys().copied().collect();
    for p in ids {
        let keep = out_keep[&p].clone();
        let cout = nodes[p].out_shape[0];
        if keep.len() == cout {
            continue;
        }
        let r = reach(graph, &consumers, p);
        if r.blocked {
            let alive: Vec<bool> = (0..cout).map(|c| keep.contains(&c)).collect();
            let name = &nodes[p].name;
            let gp = group_param(&nodes[p].op).expect("conv-like");
            let mut tensors = vec![key(name, gp), key(name, "bias")];
            for &b in &r.passthrough {
                if matches!(nodes[b].op, LayerSpec::BatchNorm) {
                    tensors.push(key(&nodes[b].name, "gamma"));
                    tensors.push(key(&nodes[b].name, "beta"));
                }
            }
            for k in tensors {
                let t = ws
                    .get_mut(&k)
                    .ok_or_else(|| NnError::MissingParam(k.clone()))?;
                t.map_axis(0, |c, v| if alive[c] { v } else { 0.0 });
                let row = t.row_len();
                masks.insert(k, (0..t.len()).map(|i| alive[i / row]).collect());
            }
            out_keep.insert(p, (0..cout).collect());
            continue;
        }
        for &b in &r.passthrough {
            if matches!(nodes[b].op, LayerSpec::BatchNorm) {
                bn_keep.insert(b, keep.clone());
            }
        }
        for &s in &r.sinks {
            if let Some(rows) = fc_rows.get_mut(&s) {
                let src = &nodes[nodes[s].inputs[0]].out_shape;
                let plane: usize = src[1..].iter().product();
                let rank: BTreeMap<usize, usize> =
                    keep.iter().enumerate().map(|(i, &c)| (c, i)).collect();
                rows.retain(|&(_, pos)| rank.contains_key(&(pos / plane)));
                rows.iter_mut()
                    .for_each(|(_, pos)| *pos = rank[&(*pos / plane)] * plane + *pos % plane);
            } else {
                in_keep.insert(s, keep.clone());
            }
        }
    }

    let mut rebuilt = Vec::with_capacity(nodes.len());
    for (id, node) in nodes.iter().enumerate() {
        let name = &node.name;
        let mut op = node.op.clone();
        if let Some(keep) = out_keep.get(&id).filter(|k| k.len() < node.out_shape[0]) {
            let gp = group_param(&op).expect("conv-like");
            for k in [key(name, gp), key(name, "bias")] {
                let t = ws.require(&k)?.select(0, keep);
                ws.insert(k, t);
            }
            match &mut op {
                LayerSpec::Conv2d { out_channels, .. }
                | LayerSpec::DownsampledConv2d { out_channels, .. }
                | LayerSpec::SeparableConv2d { out_channels, .. } => *out_channels = keep.len(),
                _ => unreachable!("only convolutions carry output groups"),
            }
        }
        if let Some(keep) = bn_keep.get(&id) {
            for p in ["gamma", "beta", "running_mean", "running_var"] {
                let t = ws.require(&key(name, p))?.select(0, keep);
                ws.insert(key(name, p), t);
            }
        }
        if let Some(keep) = in_keep.get(&id) {
            let slices: &[(&str, usize)] = match op {
                LayerSpec::Conv2d { .. } => &[("weight", 1)],
                LayerSpec::DownsampledConv2d { .. } => &[("reduce_weight", 1)],
                _ => &[("depthwise", 0), ("pointwise", 1)],
            };
            for &(p, axis) in slices {
                let t = ws.require(&key(name, p))?.select(axis, keep);
                ws.insert(key(name, p), t);
            }
        }
        if let Some(rows) = fc_rows.get(&id) {
            let idx: Vec<usize> = rows.iter().map(|&(r, _)| r).collect();
            let t = ws.require(&key(name, "weight"))?.select(0, &idx);
            ws.insert(key(name, "weight"), t);
            if let LayerSpec::FullyConnected { input_select, .. } = &mut op {
                *input_select = Some(rows.iter().map(|&(_, p)| p).collect());
            }
        }
        rebuilt.push((name.clone(), op, node.inputs.clone()));
    }
    // Identity selections are dropped once the reduced input shapes are known.
    let mut reduced = ArchGraph::from_nodes(rebuilt.clone(), graph.output())?;
    let mut changed = false;
    for (_, op, inputs) in rebuilt.iter_mut() {
        if let LayerSpec::FullyConnected {
            input_select: sel @ Some(_),
            ..
        } = op
        {
            let fan: usize = reduced.node(inputs[0]).out_shape.iter().product();
            if sel.as_ref().is_some_and(|s| s.len() == fan) {
                *sel = None;
                changed = true;
            }
        }
    }
    if changed {
        reduced = ArchGraph::from_nodes(rebuilt, graph.output())?;
    }
    ws.check_against(&reduced)?;
    Ok(PrunedNetwork {
        graph: reduced,
        weights: ws,
        masks,
        kept_groups,
        flagged,
    })
}
