//! Architecture graphs: typed layer nodes stored in execution order.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    Same,
    Valid,
}

impl Padding {
    /// `(before, after, out_extent)` for one spatial axis with stride 1.
    pub fn resolve(self, extent: usize, kernel: usize) -> Option<(usize, usize, usize)> {
        match self {
            Padding::Same => {
                let total = kernel - 1;
                Some((total / 2, total - total / 2, extent))
            }
            Padding::Valid => (extent >= kernel).then(|| (0, 0, extent - kernel + 1)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DownsampleMode {
    /// Max over the channel axis, leaving one channel.
    Depth,
    /// Spatial max pooling with window and stride `rate`.
    Spatial { rate: usize },
}

/// How a sum merge aligns its operands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeLayout {
    /// All operands are `[C_i, H, W]` with equal spatial extents; maps index channels.
    Channel,
    /// Operands are flattened; maps index features.
    Flat,
}

/// The operation a node performs. Each variant carries exactly the
/// parameters its kind needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Input {
        shape: [usize; 3],
    },
    InputDownsample {
        mode: DownsampleMode,
    },
    Conv2d {
        kernel: usize,
        out_channels: usize,
        padding: Padding,
    },
    /// A 1x1 channel-reducing convolution followed by a regular convolution.
    DownsampledConv2d {
        kernel: usize,
        out_channels: usize,
        padding: Padding,
        reduced_channels: usize,
    },
    /// Depthwise `kernel x kernel` convolution followed by a 1x1 pointwise one.
    SeparableConv2d {
        kernel: usize,
        out_channels: usize,
        padding: Padding,
    },
    /// Flattens its input. `input_select` keeps only the listed input features.
    FullyConnected {
        out_features: usize,
        input_select: Option<Vec<usize>>,
    },
    BatchNorm,
    Relu,
    MaxPool {
        window: usize,
    },
    /// Elementwise sum after scattering operand `i` through `maps[i]` into
    /// an output of `width` channels (or features). Unmapped slots are zero.
    MergeSum {
        layout: MergeLayout,
        maps: Vec<Vec<usize>>,
        width: usize,
    },
    MergeConcat {
        layout: MergeLayout,
    },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Input { .. } => "Input",
            LayerSpec::InputDownsample { .. } => "InputDownsample",
            LayerSpec::Conv2d { .. } => "Conv2D",
            LayerSpec::DownsampledConv2d { .. } => "DownsampledConv2D",
            LayerSpec::SeparableConv2d { .. } => "SeparableConv2D",
            LayerSpec::FullyConnected { .. } => "FullyConnected",
            LayerSpec::BatchNorm => "BatchNorm",
            LayerSpec::Relu => "ReLU",
            LayerSpec::MaxPool { .. } => "MaxPool",
            LayerSpec::MergeSum { .. } => "MergeSum",
            LayerSpec::MergeConcat { .. } => "MergeConcat",
        }
    }

    /// Operations that overwrite their input buffer at inference time.
    pub fn is_in_place(&self) -> bool {
        matches!(self, LayerSpec::BatchNorm | LayerSpec::Relu)
    }

    pub fn is_weighted(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv2d { .. }
                | LayerSpec::DownsampledConv2d { .. }
                | LayerSpec::SeparableConv2d { .. }
                | LayerSpec::FullyConnected { .. }
        )
    }
}

/// Role of a named parameter tensor within its node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Prunable weight; carries a variational variance in posterior mode.
    Weight,
    Bias,
    BnScale,
    BnShift,
    BnRunningMean,
    BnRunningVar,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::BnRunningMean | ParamRole::BnRunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    /// Number of inputs feeding each output, for initialization.
    pub fan_in: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub op: LayerSpec,
    pub inputs: Vec<usize>,
    /// Output shape without the batch axis: `[C, H, W]` or `[D]`.
    pub out_shape: Vec<usize>,
}

impl Node {
    pub fn out_len(&self) -> usize {
        self.out_shape.iter().product()
    }
}

/// A validated directed acyclic graph. Nodes are stored in a topological
/// order that doubles as the execution schedule; node 0 is the input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchGraph {
    nodes: Vec<Node>,
    output: usize,
}

impl ArchGraph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    pub fn output(&self) -> usize {
        self.output
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match self.nodes[0].op {
            LayerSpec::Input { shape } => shape,
            _ => unreachable!("validated graph starts with an input node"),
        }
    }

    pub fn output_len(&self) -> usize {
        self.nodes[self.output].out_len()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Consumers of every node, in schedule order.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for &src in &node.inputs {
                out[src].push(i);
            }
        }
        out
    }

    /// Number of layers that compute something (excludes the input node).
    pub fn num_layers(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Parameter tensors of node `id`.
    pub fn param_specs(&self, id: usize) -> Vec<ParamSpec> {
        let node = &self.nodes[id];
        let in_shape = node
            .inputs
            .first()
            .map(|&i| self.nodes[i].out_shape.clone())
            .unwrap_or_default();
        param_specs(&node.op, &in_shape, &node.out_shape)
    }

    /// Dense weight-entry count |E| (biases and batchnorm excluded).
    pub fn edge_count(&self) -> usize {
        (0..self.nodes.len())
            .flat_map(|i| self.param_specs(i))
            .filter(|p| p.role == ParamRole::Weight)
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }

    /// Stable digest of the structure (names, ops, wiring, shapes).
    pub fn structure_hash(&self) -> [u8; 32] {
        let encoded = serde_json::to_vec(self).expect("graph serializes");
        let digest = Sha256::digest(&encoded);
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }

    /// Rebuilds the graph from nodes given with `out_shape` left unset,
    /// re-running shape inference and all structural checks.
    pub fn from_nodes(
        nodes: Vec<(String, LayerSpec, Vec<usize>)>,
        output: usize,
    ) -> Result<Self, NnError> {
        let mut builder = GraphBuilder::default();
        for (name, op, inputs) in nodes {
            builder.push_spec(&name, op, &inputs)?;
        }
        builder.finish(output)
    }

    /// Removes `drop` nodes (each must have exactly one input) and rewires
    /// their consumers to that input.
    pub fn without_nodes(
        &self,
        drop: &BTreeSet<usize>,
    ) -> Result<(Self, Vec<Option<usize>>), NnError> {
        let mut remap: Vec<Option<usize>> = vec![None; self.nodes.len()];
        let mut resolved: Vec<usize> = vec![0; self.nodes.len()];
        let mut kept = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if drop.contains(&i) {
                if node.inputs.len() != 1 {
                    return Err(NnError::Graph(format!(
                        "cannot elide multi-input node {}",
                        node.name
                    )));
                }
                resolved[i] = resolved[node.inputs[0]];
                continue;
            }
            let inputs = node.inputs.iter().map(|&s| resolved[s]).collect();
            remap[i] = Some(kept.len());
            resolved[i] = kept.len();
            kept.push((node.name.clone(), node.op.clone(), inputs));
        }
        let output = resolved[self.output];
        Ok((Self::from_nodes(kept, output)?, remap))
    }
}

pub(crate) fn param_specs(
    op: &LayerSpec,
    in_shape: &[usize],
    out_shape: &[usize],
) -> Vec<ParamSpec> {
    use ParamRole::*;
    let spec = |name, shape: Vec<usize>, role, fan_in| ParamSpec {
        name,
        shape,
        role,
        fan_in,
    };
    match *op {
        LayerSpec::Conv2d {
            kernel,
            out_channels,
            ..
        } => {
            let cin = in_shape[0];
            let fan = cin * kernel * kernel;
            vec![
                spec(
                    "weight",
                    vec![out_channels, cin, kernel, kernel],
                    Weight,
                    fan,
                ),
                spec("bias", vec![out_channels], Bias, fan),
            ]
        }
        LayerSpec::DownsampledConv2d {
            kernel,
            out_channels,
            reduced_channels,
            ..
        } => {
            let cin = in_shape[0];
            let fan = reduced_channels * kernel * kernel;
            vec![
                spec(
                    "reduce_weight",
                    vec![reduced_channels, cin, 1, 1],
                    Weight,
                    cin,
                ),
                spec("reduce_bias", vec![reduced_channels], Bias, cin),
                spec(
                    "weight",
                    vec![out_channels, reduced_channels, kernel, kernel],
                    Weight,
                    fan,
                ),
                spec("bias", vec![out_channels], Bias, fan),
            ]
        }
        LayerSpec::SeparableConv2d {
            kernel,
            out_channels,
            ..
        } => {
            let cin = in_shape[0];
            vec![
                spec(
                    "depthwise",
                    vec![cin, 1, kernel, kernel],
                    Weight,
                    kernel * kernel,
                ),
                spec("pointwise", vec![out_channels, cin, 1, 1], Weight, cin),
                spec("bias", vec![out_channels], Bias, cin),
            ]
        }
        LayerSpec::FullyConnected {
            out_features,
            ref input_select,
        } => {
            let fan = input_select
                .as_ref()
                .map_or_else(|| in_shape.iter().product(), |s| s.len());
            vec![
                spec("weight", vec![fan, out_features], Weight, fan),
                spec("bias", vec![out_features], Bias, fan),
            ]
        }
        LayerSpec::BatchNorm => {
            let c = out_shape[0];
            vec![
                spec("gamma", vec![c], BnScale, 1),
                spec("beta", vec![c], BnShift, 1),
                spec("running_mean", vec![c], BnRunningMean, 1),
                spec("running_var", vec![c], BnRunningVar, 1),
            ]
        }
        _ => Vec::new(),
    }
}

/// Incremental graph construction with shape inference.
#[derive(Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
}

impl GraphBuilder {
    pub fn input(shape: [usize; 3]) -> Self {
        let mut b = Self::default();
        b.nodes.push(Node {
            name: "input".into(),
            op: LayerSpec::Input { shape },
            inputs: Vec::new(),
            out_shape: shape.to_vec(),
        });
        b
    }

    pub fn shape_of(&self, id: usize) -> &[usize] {
        &self.nodes[id].out_shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn push(
        &mut self,
        name: impl Into<String>,
        op: LayerSpec,
        inputs: &[usize],
    ) -> Result<usize, NnError> {
        self.push_spec(&name.into(), op, inputs)
    }

    fn push_spec(&mut self, name: &str, op: LayerSpec, inputs: &[usize]) -> Result<usize, NnError> {
        let id = self.nodes.len();
        if self.nodes.iter().any(|n| n.name == name) {
            return Err(NnError::Graph(format!("duplicate node name {name}")));
        }
        if let Some(&bad) = inputs.iter().find(|&&i| i >= id) {
            return Err(NnError::Graph(format!(
                "node {name} reads node {bad} which is not scheduled before it"
            )));
        }
        let in_shapes: Vec<&[usize]> = inputs
            .iter()
            .map(|&i| self.nodes[i].out_shape.as_slice())
            .collect();
        let out_shape = infer_shape_of(name, &op, &in_shapes)?;
        self.nodes.push(Node {
            name: name.to_string(),
            op,
            inputs: inputs.to_vec(),
            out_shape,
        });
        Ok(id)
    }

    pub fn finish(self, output: usize) -> Result<ArchGraph, NnError> {
        let nodes = self.nodes;
        if nodes.is_empty() || !matches!(nodes[0].op, LayerSpec::Input { .. }) {
            return Err(NnError::Graph("graph must start with an input node".into()));
        }
        if output >= nodes.len() {
            return Err(NnError::Graph(format!("output node {output} out of range")));
        }
        if nodes
            .iter()
            .skip(1)
            .any(|n| matches!(n.op, LayerSpec::Input { .. }))
        {
            return Err(NnError::Graph("only one input node allowed".into()));
        }
        // Every node must be reachable from the input and reach the output.
        let mut reaches_output = vec![false; nodes.len()];
        reaches_output[output] = true;
        for i in (0..nodes.len()).rev() {
            if reaches_output[i] {
                for &s in &nodes[i].inputs {
                    reaches_output[s] = true;
                }
            }
        }
        if let Some(dead) = nodes.iter().zip(&reaches_output).find(|(_, &r)| !r) {
            return Err(NnError::Graph(format!(
                "node {} does not feed the output",
                dead.0.name
            )));
        }
        for n in nodes.iter().skip(1) {
            if n.inputs.is_empty() {
                return Err(NnError::Graph(format!("node {} has no inputs", n.name)));
            }
        }
        Ok(ArchGraph { nodes, output })
    }
}

fn mismatch(node: &str, expected: impl Into<String>, got: &[&[usize]]) -> NnError {
    NnError::ShapeMismatch {
        node: node.to_string(),
        expected: expected.into(),
        got: format!("{got:?}"),
    }
}

pub(crate) fn infer_shape_of(
    name: &str,
    op: &LayerSpec,
    ins: &[&[usize]],
) -> Result<Vec<usize>, NnError> {
    let single_3d = || -> Result<[usize; 3], NnError> {
        match ins {
            [s] if s.len() == 3 => Ok([s[0], s[1], s[2]]),
            _ => Err(mismatch(name, "one [C, H, W] input", ins)),
        }
    };
    let spatial =
        |padding: Padding, kernel: usize, h: usize, w: usize| -> Result<(usize, usize), NnError> {
            if kernel == 0 {
                return Err(NnError::Graph(format!("{name}: kernel must be positive")));
            }
            match (padding.resolve(h, kernel), padding.resolve(w, kernel)) {
                (Some((_, _, ho)), Some((_, _, wo))) => Ok((ho, wo)),
                _ => Err(mismatch(
                    name,
                    format!("spatial extent >= kernel {kernel} for valid padding"),
                    ins,
                )),
            }
        };
    let positive = |what: &str, v: usize| -> Result<(), NnError> {
        if v == 0 {
            Err(NnError::Graph(format!("{name}: {what} must be positive")))
        } else {
            Ok(())
        }
    };
    Ok(match op {
        LayerSpec::Input { shape } => {
            if !ins.is_empty() {
                return Err(mismatch(name, "no inputs", ins));
            }
            positive("input extent", shape.iter().product())?;
            shape.to_vec()
        }
        LayerSpec::InputDownsample { mode } => {
            let [c, h, w] = single_3d()?;
            match *mode {
                DownsampleMode::Depth => vec![1, h, w],
                DownsampleMode::Spatial { rate } => {
                    positive("downsampling rate", rate)?;
                    vec![c, h.div_ceil(rate), w.div_ceil(rate)]
                }
            }
        }
        LayerSpec::Conv2d {
            kernel,
            out_channels,
            padding,
        }
        | LayerSpec::SeparableConv2d {
            kernel,
            out_channels,
            padding,
        } => {
            let [_, h, w] = single_3d()?;
            positive("out-channels", *out_channels)?;
            let (ho, wo) = spatial(*padding, *kernel, h, w)?;
            vec![*out_channels, ho, wo]
        }
        LayerSpec::DownsampledConv2d {
            kernel,
            out_channels,
            padding,
            reduced_channels,
        } => {
            let [_, h, w] = single_3d()?;
            positive("out-channels", *out_channels)?;
            positive("reduced channels", *reduced_channels)?;
            let (ho, wo) = spatial(*padding, *kernel, h, w)?;
            vec![*out_channels, ho, wo]
        }
        LayerSpec::FullyConnected {
            out_features,
            input_select,
        } => {
            let [s] = ins else {
                return Err(mismatch(name, "one input", ins));
            };
            positive("out-features", *out_features)?;
            let fan: usize = s.iter().product();
            if let Some(sel) = input_select {
                if sel.is_empty()
                    || sel.iter().any(|&i| i >= fan)
                    || sel.windows(2).any(|w| w[0] >= w[1])
                {
                    return Err(mismatch(
                        name,
                        format!("strictly increasing selection within {fan} features"),
                        ins,
                    ));
                }
            }
            vec![*out_features]
        }
        LayerSpec::BatchNorm => single_3d()?.to_vec(),
        LayerSpec::Relu => match ins {
            [s] => s.to_vec(),
            _ => return Err(mismatch(name, "one input", ins)),
        },
        LayerSpec::MaxPool { window } => {
            let [c, h, w] = single_3d()?;
            positive("pool window", *window)?;
            vec![c, h.div_ceil(*window), w.div_ceil(*window)]
        }
        LayerSpec::MergeSum {
            layout,
            maps,
            width,
        } => {
            if ins.len() < 2 || maps.len() != ins.len() {
                return Err(mismatch(name, "at least two inputs with one map each", ins));
            }
            positive("merge width", *width)?;
            let axis_len: Vec<usize> = match layout {
                MergeLayout::Channel => {
                    let spatial = channel_layout_spatial(ins)
                        .ok_or_else(|| mismatch(name, "[C_i, H, W] inputs", ins))?;
                    let _ = spatial;
                    ins.iter().map(|s| s[0]).collect()
                }
                MergeLayout::Flat => ins.iter().map(|s| s.iter().product()).collect(),
            };
            for (map, &len) in maps.iter().zip(&axis_len) {
                if map.len() != len || map.iter().any(|&j| j >= *width) {
                    return Err(mismatch(
                        name,
                        format!("maps into {width} slots matching operand sizes"),
                        ins,
                    ));
                }
                let distinct: BTreeSet<_> = map.iter().collect();
                if distinct.len() != map.len() {
                    return Err(NnError::Graph(format!("{name}: merge map targets repeat")));
                }
            }
            match layout {
                MergeLayout::Channel => {
                    let (h, w) = channel_layout_spatial(ins).unwrap();
                    vec![*width, h, w]
                }
                MergeLayout::Flat => vec![*width],
            }
        }
        LayerSpec::MergeConcat { layout } => {
            if ins.is_empty() {
                return Err(mismatch(name, "at least one input", ins));
            }
            match layout {
                MergeLayout::Channel => {
                    let (h, w) = channel_layout_spatial(ins)
                        .ok_or_else(|| mismatch(name, "[C_i, H, W] inputs", ins))?;
                    vec![ins.iter().map(|s| s[0]).sum(), h, w]
                }
                MergeLayout::Flat => vec![ins.iter().map(|s| s.iter().product::<usize>()).sum()],
            }
        }
    })
}

fn channel_layout_spatial(ins: &[&[usize]]) -> Option<(usize, usize)> {
    let first = ins.first()?;
    if first.len() != 3 {
        return None;
    }
    let (h, w) = (first[1], first[2]);
    ins.iter()
        .all(|s| s.len() == 3 && s[1] == h && s[2] == w)
        .then_some((h, w))
}

/// Identity maps that zero-pad every operand to the widest one.
pub fn padded_merge(ins: &[&[usize]]) -> LayerSpec {
    let layout = if channel_layout_spatial(ins).is_some() {
        MergeLayout::Channel
    } else {
        MergeLayout::Flat
    };
    let sizes: Vec<usize> = ins
        .iter()
        .map(|s| match layout {
            MergeLayout::Channel => s[0],
            MergeLayout::Flat => s.iter().product(),
        })
        .collect();
    let width = sizes.iter().copied().max().unwrap_or(0);
    LayerSpec::MergeSum {
        layout,
        maps: sizes.iter().map(|&n| (0..n).collect()).collect(),
        width,
    }
}

pub fn concat_merge(ins: &[&[usize]]) -> LayerSpec {
    let layout = if channel_layout_spatial(ins).is_some() {
        MergeLayout::Channel
    } else {
        MergeLayout::Flat
    };
    LayerSpec::MergeConcat { layout }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_keeps_extent_for_even_kernels() {
        assert_eq!(Padding::Same.resolve(8, 4), Some((1, 2, 8)));
        assert_eq!(Padding::Valid.resolve(3, 4), None);
    }

    #[test]
    fn builder_rejects_forward_references_and_dead_nodes() {
        let mut b = GraphBuilder::input([1, 4, 4]);
        assert!(b.push("bad", LayerSpec::Relu, &[3]).is_err());
        let r = b.push("relu", LayerSpec::Relu, &[0]).unwrap();
        let _dead = b.push("dead", LayerSpec::Relu, &[0]).unwrap();
        assert!(b.finish(r).is_err());
    }

    #[test]
    fn conv_shape_mismatch_names_the_node() {
        let mut b = GraphBuilder::input([1, 2, 2]);
        let err = b
            .push(
                "c1",
                LayerSpec::Conv2d {
                    kernel: 3,
                    out_channels: 2,
                    padding: Padding::Valid,
                },
                &[0],
            )
            .unwrap_err();
        assert!(err.to_string().contains("c1"), "{err}");
    }

    #[test]
    fn elide_rewires_consumers() {
        let mut b = GraphBuilder::input([2, 4, 4]);
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
        let p = b
            .push("p", LayerSpec::MaxPool { window: 2 }, &[bn])
            .unwrap();
        let g = b.finish(p).unwrap();
        let (h, remap) = g.without_nodes(&[bn].into_iter().collect()).unwrap();
        assert_eq!(h.nodes().len(), 3);
        assert_eq!(h.node(2).inputs, vec![1]);
        assert_eq!(remap[bn], None);
    }
}
