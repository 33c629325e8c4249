use crate::microgradnet::{
    concat_merge, padded_merge, ArchGraph, DownsampleMode, GraphBuilder, LayerSpec, Padding,
};

use super::{
    block_param, layer_param, Configuration, SearchSpaceDescriptor, SpaceError, Violation,
};

/// Input geometry and class count the graph is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Task {
    pub input: [usize; 3],
    pub classes: usize,
}

/// Log-variance threshold applied to FC layers, whose thresholds are not searched.
pub const FC_THRESHOLD: f64 = 3.0;

pub fn conv_node_name(k: usize, l: usize) -> String {
    format!("block-{k}/conv-{l}")
}

/// Pruning threshold for a weighted node of a built graph.
pub fn layer_threshold(config: &Configuration, node: &str) -> f64 {
    let parsed = node
        .strip_prefix("block-")
        .and_then(|rest| rest.split_once("/conv-"))
        .and_then(|(k, l)| Some((k.parse::<usize>().ok()?, l.parse::<usize>().ok()?)));
    parsed
        .and_then(|(k, l)| config.real(&layer_param("pruning-thresholds", k, l)))
        .unwrap_or(FC_THRESHOLD)
}

fn fc_width(fraction: f64, total: i64, fan_in: usize) -> usize {
    ((fraction * total as f64 / fan_in as f64).round() as usize).max(1)
}

/// Materializes a valid configuration. Node names are stable across
/// configurations so posterior inheritance can match them.
pub fn build_graph(
    space: &SearchSpaceDescriptor,
    config: &Configuration,
    task: Task,
) -> Result<ArchGraph, SpaceError> {
    space.validate(config).map_err(SpaceError::Invalid)?;
    let need = |name: &str| -> Result<&super::Value, SpaceError> {
        config
            .get(name)
            .ok_or_else(|| SpaceError::Invalid(vec![Violation::Missing { param: name.into() }]))
    };
    let flag = |name: &str| need(name).map(|v| v.as_bool().unwrap_or(false));
    let int = |name: &str| need(name).map(|v| v.as_int().unwrap_or(0));

    let mut b = GraphBuilder::input(task.input);
    let mut cur = 0;
    if flag("downsample-input-in-depth")? {
        cur = b.push(
            "input/depth-pool",
            LayerSpec::InputDownsample {
                mode: DownsampleMode::Depth,
            },
            &[cur],
        )?;
    }
    if flag("downsample-input")? {
        let rate = int("input-downsampling-rate")? as usize;
        cur = b.push(
            "input/spatial-pool",
            LayerSpec::InputDownsample {
                mode: DownsampleMode::Spatial { rate },
            },
            &[cur],
        )?;
    }
    let total = int("total-fc-layer-weights")?;
    let mut branches = Vec::new();
    let mut right = None;
    if flag("right-branch")? {
        let fan: usize = b.shape_of(cur).iter().product();
        let w = fc_width(
            need("weight-fraction-right-branch")?
                .as_real()
                .unwrap_or(0.0),
            total,
            fan,
        );
        let fc = b.push(
            "branch-right/fc",
            LayerSpec::FullyConnected {
                out_features: w,
                input_select: None,
            },
            &[cur],
        )?;
        right = Some(b.push("branch-right/relu", LayerSpec::Relu, &[fc])?);
    }
    let bn = flag("batch-norm")?;
    let residual = flag("residual-connections")?;
    let blocks = int("num-conv-blocks")? as usize;
    for k in 1..=blocks {
        let layers = int(&block_param("num-conv-layers", k))? as usize;
        let mut pair_input = cur;
        for l in 1..=layers {
            let kernel = int(&layer_param("kernel-size", k, l))? as usize;
            let filters = int(&layer_param("num-filters", k, l))? as usize;
            let ty = need(&layer_param("layer-type", k, l))?
                .as_cat()
                .unwrap_or_default()
                .to_string();
            let op = match ty.as_str() {
                "DownsampledConv2D" => {
                    let frac = need(&layer_param("downsample", k, l))?
                        .as_real()
                        .unwrap_or(0.5);
                    let cin = b.shape_of(cur)[0];
                    let reduced = ((frac * cin as f64).ceil() as usize).clamp(1, cin);
                    LayerSpec::DownsampledConv2d {
                        kernel,
                        out_channels: filters,
                        padding: Padding::Same,
                        reduced_channels: reduced,
                    }
                }
                "SeparableConv2D" => LayerSpec::SeparableConv2d {
                    kernel,
                    out_channels: filters,
                    padding: Padding::Same,
                },
                _ => LayerSpec::Conv2d {
                    kernel,
                    out_channels: filters,
                    padding: Padding::Same,
                },
            };
            if l % 2 == 1 {
                pair_input = cur;
            }
            cur = b.push(conv_node_name(k, l), op, &[cur])?;
            if bn {
                cur = b.push(format!("block-{k}/bn-{l}"), LayerSpec::BatchNorm, &[cur])?;
            }
            if residual && l % 2 == 0 {
                let merge = padded_merge(&[b.shape_of(pair_input), b.shape_of(cur)]);
                cur = b.push(format!("block-{k}/add-{l}"), merge, &[pair_input, cur])?;
            }
            cur = b.push(format!("block-{k}/relu-{l}"), LayerSpec::Relu, &[cur])?;
        }
        let window = int(&block_param("pooling-window", k))? as usize;
        cur = b.push(
            format!("block-{k}/pool"),
            LayerSpec::MaxPool { window },
            &[cur],
        )?;
        if k == 1 && flag("left-branch")? {
            let fan: usize = b.shape_of(cur).iter().product();
            let w = fc_width(
                need("weight-fraction-left-branch")?
                    .as_real()
                    .unwrap_or(0.0),
                total,
                fan,
            );
            let fc = b.push(
                "branch-left/fc",
                LayerSpec::FullyConnected {
                    out_features: w,
                    input_select: None,
                },
                &[cur],
            )?;
            branches.push(b.push("branch-left/relu", LayerSpec::Relu, &[fc])?);
        }
    }
    if int("num-fc-layers")? == 1 {
        let fan: usize = b.shape_of(cur).iter().product();
        let w = fc_width(
            need("weight-fraction-main-branch")?
                .as_real()
                .unwrap_or(0.0),
            total,
            fan,
        );
        let fc = b.push(
            "main/fc",
            LayerSpec::FullyConnected {
                out_features: w,
                input_select: None,
            },
            &[cur],
        )?;
        cur = b.push("main/relu", LayerSpec::Relu, &[fc])?;
    }
    branches.extend(right);
    if !branches.is_empty() {
        let mut ins = vec![cur];
        ins.extend(&branches);
        let shapes: Vec<&[usize]> = ins.iter().map(|&i| b.shape_of(i)).collect();
        let op = match need("merge-type")?.as_cat() {
            Some("Concatenate") => concat_merge(&shapes),
            _ => force_flat_sum(&shapes),
        };
        cur = b.push("merge", op, &ins)?;
    }
    let out = b.push(
        "output/fc",
        LayerSpec::FullyConnected {
            out_features: task.classes,
            input_select: None,
        },
        &[cur],
    )?;
    Ok(b.finish(out)?)
}

/// Branch merges always operate on flattened features.
fn force_flat_sum(shapes: &[&[usize]]) -> LayerSpec {
    let flat: Vec<Vec<usize>> = shapes
        .iter()
        .map(|s| vec![s.iter().product::<usize>()])
        .collect();
    let refs: Vec<&[usize]> = flat.iter().map(Vec::as_slice).collect();
    padded_merge(&refs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::searchspace::Value;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn minimal() -> Configuration {
        let mut c = Configuration::default();
        for (k, v) in [
            ("downsample-input-in-depth", Value::Bool(false)),
            ("downsample-input", Value::Bool(false)),
            ("pretraining", Value::Bool(true)),
            ("zero-regularization-epochs", Value::Int(5)),
            ("alpha", Value::Real(0.5)),
            ("batch-norm", Value::Bool(false)),
            ("residual-connections", Value::Bool(false)),
            ("num-conv-blocks", Value::Int(1)),
            ("num-conv-layers-block-1", Value::Int(1)),
            ("pooling-window-block-1", Value::Int(2)),
            ("layer-type-block-1-layer-1", Value::Cat("Conv2D".into())),
            ("kernel-size-block-1-layer-1", Value::Int(3)),
            ("num-filters-block-1-layer-1", Value::Int(4)),
            ("pruning-thresholds-block-1-layer-1", Value::Real(3.0)),
            ("num-fc-layers", Value::Int(0)),
            ("total-fc-layer-weights", Value::Int(1000)),
            ("left-branch", Value::Bool(false)),
            ("right-branch", Value::Bool(false)),
        ] {
            c.set(k, v);
        }
        c
    }

    #[test]
    fn minimal_config_is_a_chain() {
        let s = SearchSpaceDescriptor::standard();
        let g = build_graph(
            &s,
            &minimal(),
            Task {
                input: [1, 8, 8],
                classes: 2,
            },
        )
        .unwrap();
        let kinds: Vec<_> = g.nodes().iter().map(|n| n.op.kind_name()).collect();
        assert_eq!(
            kinds,
            ["Input", "Conv2D", "ReLU", "MaxPool", "FullyConnected"]
        );
    }

    #[test]
    fn fc_width_follows_budget() {
        let s = SearchSpaceDescriptor::standard();
        let mut c = minimal();
        c.set("num-fc-layers", Value::Int(1));
        c.set("weight-fraction-main-branch", Value::Real(0.5));
        c.set("total-fc-layer-weights", Value::Int(8000));
        let g = build_graph(
            &s,
            &c,
            Task {
                input: [1, 8, 8],
                classes: 2,
            },
        )
        .unwrap();
        let fc = g.node(g.find("main/fc").unwrap());
        // fan-in 4 x 4 x 4 = 64, 0.5 * 8000 / 64 = 62.5 -> 63
        assert_eq!(fc.out_shape, vec![63]);
        c.set("weight-fraction-main-branch", Value::Real(0.0));
        assert!(build_graph(
            &s,
            &c,
            Task {
                input: [1, 8, 8],
                classes: 2
            }
        )
        .is_err());
    }

    #[test]
    fn training_only_parameters_do_not_change_the_graph() {
        let s = SearchSpaceDescriptor::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let task = Task {
            input: [1, 8, 8],
            classes: 2,
        };
        for _ in 0..50 {
            let a = s.sample_random(&mut rng);
            let mut b = a.clone();
            b.set("alpha", Value::Real(0.01));
            b.set("zero-regularization-epochs", Value::Int(30));
            b.set("pruning-thresholds-block-1-layer-1", Value::Real(-6.0));
            assert_eq!(
                build_graph(&s, &a, task).unwrap(),
                build_graph(&s, &b, task).unwrap()
            );
        }
    }
}
