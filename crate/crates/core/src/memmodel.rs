//! Static memory accounting: model size and per-step working memory under
//! the two RAM usage models, computed from graph structure and weights only.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::microgradnet::{
    fold_batchnorm, key, ArchGraph, LayerSpec, NnError, ParamRole, Scalar, WeightStore,
};

pub use crate::microgradnet::LayerFootprint;

pub const BITS_PER_KB: f64 = 8192.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WmModel {
    /// Inputs (plus held tensors) and weights resident.
    #[serde(rename = "1")]
    InputWeights,
    /// Inputs (plus held tensors) and outputs resident.
    #[serde(rename = "2")]
    InputOutput,
}

impl WmModel {
    pub fn from_index(i: u8) -> Option<Self> {
        match i {
            1 => Some(WmModel::InputWeights),
            2 => Some(WmModel::InputOutput),
            _ => None,
        }
    }

    /// Resident elements of one step.
    pub fn elements(self, f: &LayerFootprint) -> usize {
        match self {
            WmModel::InputWeights => f.input + f.held + f.weights,
            WmModel::InputOutput => f.input + f.held + f.output,
        }
    }
}

pub fn bits_to_kb(bits: u64) -> f64 {
    bits as f64 / BITS_PER_KB
}

/// Combined input count of a merge: its operands are concatenated.
pub fn merge_input_count(operands: &[usize]) -> usize {
    operands.iter().sum()
}

fn nonzero<T: Scalar>(ws: &WeightStore<T>, node: &str, params: &[&str]) -> usize {
    params
        .iter()
        .filter_map(|p| ws.get(&key(node, p)))
        .map(|t| t.count_nonzero())
        .sum()
}

/// One row per computing step, derived from inferred shapes and the schedule.
/// Batchnorm and ReLU run in place and produce no row of their own; a
/// batchnorm that was not folded into its convolution is the exception and
/// is charged as an affine step. Two-stage convolutions produce two rows.
pub fn footprints<T: Scalar>(graph: &ArchGraph, ws: &WeightStore<T>) -> Vec<LayerFootprint> {
    let nodes = graph.nodes();
    let mut last_use = vec![None; nodes.len()];
    for (i, n) in nodes.iter().enumerate() {
        for &s in &n.inputs {
            last_use[s] = Some(i);
        }
    }
    let size = |i: usize| nodes[i].out_len();
    // Tensors produced before step `i` that a later step still reads. The
    // step's own operands count as its input, not as held, until released.
    let held_at = |i: usize, after_own: bool| -> usize {
        (0..i)
            .filter(|&j| {
                last_use[j].is_some_and(|l| l > i) && (after_own || !nodes[i].inputs.contains(&j))
            })
            .map(size)
            .sum()
    };
    let mut rows = Vec::new();
    for (i, n) in nodes.iter().enumerate() {
        let input = match &n.op {
            LayerSpec::FullyConnected {
                input_select: Some(sel),
                ..
            } => sel.len(),
            _ => merge_input_count(&n.inputs.iter().map(|&s| size(s)).collect::<Vec<_>>()),
        };
        let row = |name: String, input, held, output, weights| LayerFootprint {
            node: i,
            name,
            input,
            held,
            output,
            weights,
        };
        let name = &n.name;
        match &n.op {
            LayerSpec::Input { .. } | LayerSpec::Relu => {}
            LayerSpec::BatchNorm => {
                rows.push(row(
                    name.clone(),
                    input,
                    held_at(i, false),
                    size(i),
                    nonzero(ws, name, &["gamma", "beta"]),
                ));
            }
            LayerSpec::DownsampledConv2d {
                reduced_channels, ..
            } => {
                let src = &nodes[n.inputs[0]].out_shape;
                let mid = reduced_channels * src[1] * src[2];
                let w1 = nonzero(ws, name, &["reduce_weight", "reduce_bias"]);
                rows.push(row(
                    format!("{name}/reduce"),
                    input,
                    held_at(i, false),
                    mid,
                    w1,
                ));
                let w2 = nonzero(ws, name, &["weight", "bias"]);
                rows.push(row(
                    format!("{name}/conv"),
                    mid,
                    held_at(i, true),
                    size(i),
                    w2,
                ));
            }
            LayerSpec::SeparableConv2d { .. } => {
                let src = &nodes[n.inputs[0]].out_shape;
                let mid = src[0] * n.out_shape[1] * n.out_shape[2];
                rows.push(row(
                    format!("{name}/depthwise"),
                    input,
                    held_at(i, false),
                    mid,
                    nonzero(ws, name, &["depthwise"]),
                ));
                let w2 = nonzero(ws, name, &["pointwise", "bias"]);
                rows.push(row(
                    format!("{name}/pointwise"),
                    mid,
                    held_at(i, true),
                    size(i),
                    w2,
                ));
            }
            op => {
                let w = if op.is_weighted() {
                    nonzero(ws, name, &["weight", "bias"])
                } else {
                    0
                };
                rows.push(row(name.clone(), input, held_at(i, false), size(i), w));
            }
        }
    }
    rows
}

/// Non-zero stored parameters (weights, biases, unfolded batchnorm affine
/// terms) times `bits`.
pub fn model_size<T: Scalar>(graph: &ArchGraph, ws: &WeightStore<T>, bits: u32) -> u64 {
    let mut count = 0usize;
    for (id, node) in graph.nodes().iter().enumerate() {
        for p in graph.param_specs(id) {
            if matches!(p.role, ParamRole::BnRunningMean | ParamRole::BnRunningVar) {
                continue;
            }
            count += ws
                .get(&key(&node.name, p.name))
                .map_or(0, |t| t.count_nonzero());
        }
    }
    count as u64 * bits as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkingMemory {
    pub per_layer_bits: Vec<u64>,
    pub max_bits: u64,
    /// Index of the first row attaining the maximum.
    pub binding: Option<usize>,
}

pub fn working_memory(model: WmModel, rows: &[LayerFootprint], bits: u32) -> WorkingMemory {
    let per_layer_bits: Vec<u64> = rows
        .iter()
        .map(|f| model.elements(f) as u64 * bits as u64)
        .collect();
    let max_bits = per_layer_bits.iter().copied().max().unwrap_or(0);
    let binding = per_layer_bits.iter().position(|&b| b == max_bits);
    WorkingMemory {
        per_layer_bits,
        max_bits,
        binding,
    }
}

pub fn working_memory_v1(rows: &[LayerFootprint], bits: u32) -> WorkingMemory {
    working_memory(WmModel::InputWeights, rows, bits)
}

pub fn working_memory_v2(rows: &[LayerFootprint], bits: u32) -> WorkingMemory {
    working_memory(WmModel::InputOutput, rows, bits)
}

/// Folds batchnorm into convolutions: the form in which memory is counted.
pub fn deployable<T: Scalar>(
    graph: &ArchGraph,
    ws: &WeightStore<T>,
) -> Result<(ArchGraph, WeightStore<T>), NnError> {
    fold_batchnorm(graph, ws)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ReportRow {
    pub layer: String,
    pub node: usize,
    pub input: usize,
    pub held: usize,
    pub output: usize,
    pub weights: usize,
    pub ms_kb: f64,
    pub wm1_kb: f64,
    pub wm2_kb: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct MemoryReport {
    pub bits_per_element: u32,
    pub model_size_bits: u64,
    pub model_size_kb: f64,
    pub rows: Vec<ReportRow>,
    pub wm1_max_bits: u64,
    pub wm1_max_kb: f64,
    pub wm1_binding: Option<String>,
    pub wm2_max_bits: u64,
    pub wm2_max_kb: f64,
    pub wm2_binding: Option<String>,
}

impl MemoryReport {
    /// Report for an already-deployable graph (batchnorm folded).
    pub fn compute<T: Scalar>(graph: &ArchGraph, ws: &WeightStore<T>, bits: u32) -> Self {
        let fp = footprints(graph, ws);
        let v1 = working_memory_v1(&fp, bits);
        let v2 = working_memory_v2(&fp, bits);
        let model_size_bits = model_size(graph, ws, bits);
        let rows = fp
            .iter()
            .zip(v1.per_layer_bits.iter().zip(&v2.per_layer_bits))
            .map(|(f, (&a, &b))| ReportRow {
                layer: f.name.clone(),
                node: f.node,
                input: f.input,
                held: f.held,
                output: f.output,
                weights: f.weights,
                ms_kb: bits_to_kb(f.weights as u64 * bits as u64),
                wm1_kb: bits_to_kb(a),
                wm2_kb: bits_to_kb(b),
            })
            .collect();
        let name = |i: Option<usize>| i.map(|i| fp[i].name.clone());
        Self {
            bits_per_element: bits,
            model_size_bits,
            model_size_kb: bits_to_kb(model_size_bits),
            rows,
            wm1_max_bits: v1.max_bits,
            wm1_max_kb: bits_to_kb(v1.max_bits),
            wm1_binding: name(v1.binding),
            wm2_max_bits: v2.max_bits,
            wm2_max_kb: bits_to_kb(v2.max_bits),
            wm2_binding: name(v2.binding),
        }
    }

    pub fn max_bits(&self, model: WmModel) -> u64 {
        match model {
            WmModel::InputWeights => self.wm1_max_bits,
            WmModel::InputOutput => self.wm2_max_bits,
        }
    }

    /// Fixed-width text table: one line per step plus totals.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<28} {:>8} {:>8} {:>8} {:>8} {:>9} {:>9} {:>9}\n",
            "layer", "x", "held", "y", "w", "MS(KB)", "WM1(KB)", "WM2(KB)"
        );
        for r in &self.rows {
            s += &format!(
                "{:<28} {:>8} {:>8} {:>8} {:>8} {:>9.3} {:>9.3} {:>9.3}\n",
                r.layer, r.input, r.held, r.output, r.weights, r.ms_kb, r.wm1_kb, r.wm2_kb
            );
        }
        s += &format!(
            "MS = {:.3} KB   WM1 = {:.3} KB ({})   WM2 = {:.3} KB ({})\n",
            self.model_size_kb,
            self.wm1_max_kb,
            self.wm1_binding.as_deref().unwrap_or("-"),
            self.wm2_max_kb,
            self.wm2_binding.as_deref().unwrap_or("-"),
        );
        s
    }
}

/// Per-layer `[before, after]` pairs of a pruning step, keyed by row name;
/// layers removed by pruning report `None` after.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct PrePostRow {
    pub layer: String,
    pub ms_kb: [Option<f64>; 2],
    pub wm1_kb: [Option<f64>; 2],
    pub wm2_kb: [Option<f64>; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct PrePostReport {
    pub rows: Vec<PrePostRow>,
    pub ms_kb: [f64; 2],
    pub wm1_kb: [f64; 2],
    pub wm2_kb: [f64; 2],
}

impl PrePostReport {
    pub fn new(pre: &MemoryReport, post: &MemoryReport) -> Self {
        let after: BTreeMap<&str, &ReportRow> =
            post.rows.iter().map(|r| (r.layer.as_str(), r)).collect();
        let rows = pre
            .rows
            .iter()
            .map(|r| {
                let a = after.get(r.layer.as_str());
                PrePostRow {
                    layer: r.layer.clone(),
                    ms_kb: [Some(r.ms_kb), a.map(|a| a.ms_kb)],
                    wm1_kb: [Some(r.wm1_kb), a.map(|a| a.wm1_kb)],
                    wm2_kb: [Some(r.wm2_kb), a.map(|a| a.wm2_kb)],
                }
            })
            .collect();
        Self {
            rows,
            ms_kb: [pre.model_size_kb, post.model_size_kb],
            wm1_kb: [pre.wm1_max_kb, post.wm1_max_kb],
            wm2_kb: [pre.wm2_max_kb, post.wm2_max_kb],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microgradnet::{GraphBuilder, Padding, Tensor};
    use proptest::prelude::*;

    fn fp(input: usize, output: usize, weights: usize) -> LayerFootprint {
        LayerFootprint {
            node: 1,
            name: "l".into(),
            input,
            held: 0,
            output,
            weights,
        }
    }

    #[test]
    fn fc_layer_model_one() {
        let wm = working_memory_v1(&[fp(100, 10, 1000)], 8);
        assert_eq!(wm.max_bits / 8, 1100);
    }

    #[test]
    fn conv_layer_model_two() {
        let wm = working_memory_v2(&[fp(784, 6272, 80)], 8);
        assert_eq!(wm.max_bits / 8, 7056);
    }

    #[test]
    fn empty_layer_costs_nothing() {
        assert_eq!(working_memory_v1(&[fp(0, 0, 0)], 8).max_bits, 0);
    }

    #[test]
    fn merge_operands_concatenate() {
        assert_eq!(merge_input_count(&[64, 32]), 96);
        assert_eq!(merge_input_count(&[0, 32]), 32);
    }

    #[test]
    fn model_size_counts_nonzeros_only() {
        let mut b = GraphBuilder::input([1, 4, 4]);
        let c = b
            .push(
                "c",
                LayerSpec::Conv2d {
                    kernel: 3,
                    out_channels: 2,
                    padding: Padding::Same,
                },
                &[0],
            )
            .unwrap();
        let g = b.finish(c).unwrap();
        let mut ws = WeightStore::<f32>::default();
        ws.insert("c/weight", Tensor::zeros(&[2, 1, 3, 3]));
        ws.insert("c/bias", Tensor::zeros(&[2]));
        assert_eq!(model_size(&g, &ws, 8), 0);
        let w = Tensor::from_fn(&[2, 1, 3, 3], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        ws.insert("c/weight", w);
        assert_eq!(model_size(&g, &ws, 8), 6 * 8);
    }

    #[test]
    fn kb_is_bits_over_8192() {
        assert_eq!(bits_to_kb(510 * 8), 510.0 / 1024.0);
    }

    proptest! {
        #[test]
        fn max_dominates_every_layer(rows in prop::collection::vec((0usize..5000, 0usize..5000, 0usize..5000, 0usize..500), 1..30)) {
            let rows: Vec<LayerFootprint> = rows
                .into_iter()
                .map(|(x, y, w, h)| LayerFootprint { node: 0, name: String::new(), input: x, held: h, output: y, weights: w })
                .collect();
            for model in [WmModel::InputWeights, WmModel::InputOutput] {
                let wm = working_memory(model, &rows, 8);
                prop_assert!(wm.per_layer_bits.iter().all(|&b| b <= wm.max_bits));
                prop_assert_eq!(wm.per_layer_bits[wm.binding.unwrap()], wm.max_bits);
            }
            let v1 = working_memory_v1(&rows, 8);
            let v2 = working_memory_v2(&rows, 8);
            for (i, r) in rows.iter().enumerate() {
                if r.weights == r.output {
                    prop_assert_eq!(v1.per_layer_bits[i], v2.per_layer_bits[i]);
                }
            }
        }
    }
}
