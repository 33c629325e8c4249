mod common;

use microsearch::microgradnet::{
    backward, concat_merge, forward, padded_merge, ArchGraph, DownsampleMode, GraphBuilder,
    LayerSpec, MergeLayout, Padding, RunOptions, Tensor, WeightStore, GROUP_LOG_SIGMA2, GROUP_MU,
    LOG_SIGMA2_SUFFIX,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LAYER_TOL: f64 = 1e-5;

fn conv(kernel: usize, out_channels: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        kernel,
        out_channels,
        padding: Padding::Same,
    }
}

fn fc(out_features: usize) -> LayerSpec {
    LayerSpec::FullyConnected {
        out_features,
        input_select: None,
    }
}

fn setup(graph: &ArchGraph, seed: u64) -> (WeightStore<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ws = WeightStore::<f64>::init(graph, &mut rng);
    // Non-trivial biases and batchnorm affine parameters.
    for (k, t) in ws.iter_mut() {
        if k.ends_with("bias") || k.ends_with("beta") || k.ends_with("gamma") {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
    }
    let [c, h, w] = graph.input_shape();
    let x = Tensor::from_fn(&[3, c, h, w], |_| rng.random_range(-1.0..1.0));
    (ws, x)
}

fn assert_close(graph: &ArchGraph, seed: u64, train: bool) {
    let (ws, x) = setup(graph, seed);
    for (k, err) in common::check(graph, &ws, &x, None, train) {
        assert!(err < LAYER_TOL, "{k}: relative error {err:e}");
    }
}

#[test]
fn conv_relu_even_kernel_and_ceil_pool() {
    let mut b = GraphBuilder::input([2, 5, 5]);
    let c1 = b.push("c1", conv(3, 3), &[0]).unwrap();
    let r = b.push("r", LayerSpec::Relu, &[c1]).unwrap();
    let c2 = b.push("c2", conv(2, 4), &[r]).unwrap();
    let p = b
        .push("p", LayerSpec::MaxPool { window: 2 }, &[c2])
        .unwrap();
    let c3 = b
        .push(
            "c3",
            LayerSpec::Conv2d {
                kernel: 2,
                out_channels: 2,
                padding: Padding::Valid,
            },
            &[p],
        )
        .unwrap();
    let out = b.push("out", fc(3), &[c3]).unwrap();
    assert_close(&b.finish(out).unwrap(), 1, false);
}

#[test]
fn downsampled_convolution() {
    let mut b = GraphBuilder::input([2, 4, 4]);
    let c1 = b.push("c1", conv(3, 5), &[0]).unwrap();
    let d = b
        .push(
            "d",
            LayerSpec::DownsampledConv2d {
                kernel: 3,
                out_channels: 4,
                padding: Padding::Same,
                reduced_channels: 2,
            },
            &[c1],
        )
        .unwrap();
    let out = b.push("out", fc(2), &[d]).unwrap();
    assert_close(&b.finish(out).unwrap(), 2, false);
}

#[test]
fn separable_convolution() {
    let mut b = GraphBuilder::input([2, 5, 4]);
    let c1 = b.push("c1", conv(2, 3), &[0]).unwrap();
    let s = b
        .push(
            "s",
            LayerSpec::SeparableConv2d {
                kernel: 4,
                out_channels: 4,
                padding: Padding::Same,
            },
            &[c1],
        )
        .unwrap();
    let out = b.push("out", fc(2), &[s]).unwrap();
    assert_close(&b.finish(out).unwrap(), 3, false);
}

#[test]
fn batchnorm_in_train_and_eval_mode() {
    let mut b = GraphBuilder::input([2, 4, 4]);
    let c1 = b.push("c1", conv(3, 3), &[0]).unwrap();
    let bn = b.push("bn", LayerSpec::BatchNorm, &[c1]).unwrap();
    let r = b.push("r", LayerSpec::Relu, &[bn]).unwrap();
    let out = b.push("out", fc(2), &[r]).unwrap();
    let g = b.finish(out).unwrap();
    assert_close(&g, 4, true);
    assert_close(&g, 5, false);
}

#[test]
fn input_downsampling_in_depth_and_space() {
    let mut b = GraphBuilder::input([2, 6, 6]);
    let c1 = b.push("c1", conv(3, 3), &[0]).unwrap();
    let d = b
        .push(
            "d",
            LayerSpec::InputDownsample {
                mode: DownsampleMode::Depth,
            },
            &[c1],
        )
        .unwrap();
    let c2 = b.push("c2", conv(3, 2), &[d]).unwrap();
    let s = b
        .push(
            "s",
            LayerSpec::InputDownsample {
                mode: DownsampleMode::Spatial { rate: 4 },
            },
            &[c2],
        )
        .unwrap();
    let out = b.push("out", fc(2), &[s]).unwrap();
    assert_close(&b.finish(out).unwrap(), 6, false);
}

#[test]
fn residual_channel_sum_with_zero_padding() {
    let mut b = GraphBuilder::input([2, 4, 4]);
    let c1 = b.push("c1", conv(3, 3), &[0]).unwrap();
    let c2 = b.push("c2", conv(3, 5), &[c1]).unwrap();
    let m = padded_merge(&[b.shape_of(c1), b.shape_of(c2)]);
    assert!(matches!(
        m,
        LayerSpec::MergeSum {
            layout: MergeLayout::Channel,
            ..
        }
    ));
    let add = b.push("add", m, &[c1, c2]).unwrap();
    let r = b.push("r", LayerSpec::Relu, &[add]).unwrap();
    let out = b.push("out", fc(2), &[r]).unwrap();
    assert_close(&b.finish(out).unwrap(), 7, false);
}

#[test]
fn branches_with_selection_concat_and_flat_sum() {
    for (seed, concat) in [(8, true), (9, false)] {
        let mut b = GraphBuilder::input([1, 5, 5]);
        let c1 = b.push("c1", conv(3, 2), &[0]).unwrap();
        let p = b
            .push("p", LayerSpec::MaxPool { window: 3 }, &[c1])
            .unwrap();
        let main = b.push("main", fc(4), &[p]).unwrap();
        let sel = LayerSpec::FullyConnected {
            out_features: 3,
            input_select: Some(vec![0, 2, 3, 7]),
        };
        let left = b.push("left", sel, &[p]).unwrap();
        let right = b.push("right", fc(5), &[c1]).unwrap();
        let shapes = [b.shape_of(main), b.shape_of(left), b.shape_of(right)];
        let m = if concat {
            concat_merge(&shapes)
        } else {
            padded_merge(&shapes)
        };
        let merge = b.push("merge", m, &[main, left, right]).unwrap();
        let out = b.push("out", fc(2), &[merge]).unwrap();
        assert_close(&b.finish(out).unwrap(), seed, false);
    }
}

#[test]
fn sampled_posterior_with_group_scales() {
    let mut b = GraphBuilder::input([2, 4, 4]);
    let c1 = b.push("c1", conv(3, 3), &[0]).unwrap();
    let s = b
        .push(
            "s",
            LayerSpec::SeparableConv2d {
                kernel: 3,
                out_channels: 3,
                padding: Padding::Same,
            },
            &[c1],
        )
        .unwrap();
    let r = b.push("r", LayerSpec::Relu, &[s]).unwrap();
    let f = b.push("f", fc(4), &[r]).unwrap();
    let g = b.finish(f).unwrap();
    let (mut ws, x) = setup(&g, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let weights: Vec<(String, Vec<usize>)> = ws
        .iter()
        .filter(|(k, _)| {
            k.ends_with("weight") || k.ends_with("depthwise") || k.ends_with("pointwise")
        })
        .map(|(k, t)| (k.clone(), t.shape().to_vec()))
        .collect();
    for (k, shape) in weights {
        ws.insert(
            format!("{k}{LOG_SIGMA2_SUFFIX}"),
            Tensor::from_fn(&shape, |_| rng.random_range(-4.0..-1.0)),
        );
    }
    for (node, groups) in [("c1", 3), ("s", 3), ("f", 48)] {
        ws.insert(
            format!("{node}/{GROUP_MU}"),
            Tensor::from_fn(&[groups], |_| rng.random_range(0.5..1.5)),
        );
        ws.insert(
            format!("{node}/{GROUP_LOG_SIGMA2}"),
            Tensor::from_fn(&[groups], |_| rng.random_range(-5.0..-2.0)),
        );
    }
    let report = common::check(&g, &ws, &x, Some(99), false);
    assert!(report.iter().any(|(k, _)| k.ends_with(LOG_SIGMA2_SUFFIX)));
    assert!(report.iter().any(|(k, _)| k.ends_with(GROUP_MU)));
    for (k, err) in report {
        assert!(err < LAYER_TOL, "{k}: relative error {err:e}");
    }
}

#[test]
fn relu_passes_no_gradient_at_negative_input() {
    let mut b = GraphBuilder::input([2, 1, 1]);
    let f1 = b.push("f1", fc(2), &[0]).unwrap();
    let r = b.push("r", LayerSpec::Relu, &[f1]).unwrap();
    let f2 = b.push("f2", fc(1), &[r]).unwrap();
    let g = b.finish(f2).unwrap();
    let mut ws = WeightStore::<f64>::default();
    ws.insert(
        "f1/weight",
        Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
    );
    ws.insert("f1/bias", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
    ws.insert(
        "f2/weight",
        Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap(),
    );
    ws.insert("f2/bias", Tensor::zeros(&[1]));
    let x = Tensor::new(vec![1, 2, 1, 1], vec![-1.0, 2.0]).unwrap();
    let fwd = forward(&g, &ws, &x, RunOptions::eval()).unwrap();
    let grads = backward(&g, &ws, &fwd, &[1.0]).unwrap();
    assert_eq!(grads["f1/bias"].data(), &[0.0, 1.0]);
}
