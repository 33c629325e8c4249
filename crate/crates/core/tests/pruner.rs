mod common;

use microsearch::memmodel::footprints;
use microsearch::microgradnet::{
    accuracy, forward, padded_merge, softmax_cross_entropy, ArchGraph, Dataset, GraphBuilder,
    LayerSpec, Padding, RunOptions, Tensor, TrainHyperparams, WeightStore, GROUP_LOG_SIGMA2,
    GROUP_MU, LOG_SIGMA2_SUFFIX,
};
use microsearch::pruner::{
    checkpoint, extract_mask_bc, extract_mask_spvd, init_posterior, kl_divergence, log_alpha,
    nonzero_groups, prune, variational_objective, AnnealSchedule, Method, PruneConfig, Thresholds,
    FINE_TUNE_FRACTION,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OBJECTIVE_TOL: f64 = 1e-4;

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

/// conv(2 -> 4) - relu - conv(4 -> 3) - pool - fc(2): 72 + 108 + 24 weights.
fn small_cnn() -> ArchGraph {
    let mut b = GraphBuilder::input([2, 4, 4]);
    let c1 = b.push("c1", conv(3, 4), &[0]).unwrap();
    let r = b.push("r", LayerSpec::Relu, &[c1]).unwrap();
    let c2 = b.push("c2", conv(3, 3), &[r]).unwrap();
    let p = b
        .push("p", LayerSpec::MaxPool { window: 2 }, &[c2])
        .unwrap();
    let out = b.push("out", fc(2), &[p]).unwrap();
    b.finish(out).unwrap()
}

fn randomized_posterior(graph: &ArchGraph, method: Method, seed: u64) -> WeightStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phi = init_posterior(graph, &WeightStore::<f64>::init(graph, &mut rng), method);
    for (k, t) in phi.iter_mut() {
        let shift = if k.ends_with(GROUP_MU) {
            (0.5, 1.5)
        } else if k.ends_with(LOG_SIGMA2_SUFFIX) {
            (-5.0, -1.0)
        } else {
            (-0.3, 0.3)
        };
        t.data_mut().iter_mut().for_each(|v| {
            *v = if k.ends_with(GROUP_MU) || k.ends_with(LOG_SIGMA2_SUFFIX) {
                rng.random_range(shift.0..shift.1)
            } else {
                *v + rng.random_range(shift.0..shift.1)
            }
        });
    }
    phi
}

fn objective_fd(method: Method, seed: u64) {
    let g = small_cnn();
    let phi = randomized_posterior(&g, method, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let x = Tensor::from_fn(&[3, 2, 4, 4], |_| rng.random_range(-1.0..1.0));
    let labels = [0, 1, 1];
    let eval = |ws: &WeightStore<f64>| {
        let mut noise = ChaCha8Rng::seed_from_u64(77);
        variational_objective(&g, ws, &x, &labels, 0.7, 10, method, &mut noise).unwrap()
    };
    let (_, grads) = eval(&phi);
    assert!(grads.keys().any(|k| k.ends_with(LOG_SIGMA2_SUFFIX)));
    for (k, gk) in &grads {
        let mut fd = vec![0.0; gk.len()];
        for (i, slot) in fd.iter_mut().enumerate() {
            let mut plus = phi.clone();
            plus.get_mut(k).unwrap().data_mut()[i] += common::FD_STEP;
            let mut minus = phi.clone();
            minus.get_mut(k).unwrap().data_mut()[i] -= common::FD_STEP;
            *slot = (eval(&plus).0 - eval(&minus).0) / (2.0 * common::FD_STEP);
        }
        let err = common::rel_error(gk.data(), &fd);
        assert!(err < OBJECTIVE_TOL, "{k}: relative error {err:e}");
    }
}

#[test]
fn spvd_objective_gradient_matches_finite_differences() {
    objective_fd(Method::Spvd, 1);
}

#[test]
fn bc_objective_gradient_matches_finite_differences() {
    objective_fd(Method::Bc, 2);
}

#[test]
fn zero_gamma_is_plain_cross_entropy_and_gamma_adds_kl() {
    let g = small_cnn();
    let phi = randomized_posterior(&g, Method::Spvd, 3);
    let x = Tensor::from_fn(&[2, 2, 4, 4], |i| (i as f64 * 0.37).sin());
    let labels = [1, 0];
    let at = |gamma: f64| {
        variational_objective(
            &g,
            &phi,
            &x,
            &labels,
            gamma,
            100,
            Method::Spvd,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap()
        .0
    };
    let mut noise = ChaCha8Rng::seed_from_u64(5);
    let fwd = forward(
        &g,
        &phi,
        &x,
        RunOptions {
            train: true,
            sample: Some(&mut noise),
            instrument: false,
        },
    )
    .unwrap();
    let (ce, _) = softmax_cross_entropy(&fwd.logits, &labels);
    assert_eq!(at(0.0), ce);
    let kl = kl_divergence(&g, &phi, Method::Spvd);
    assert!(kl > 0.0);
    assert!(at(0.5) > at(0.0));
    assert!(at(1.0) > at(0.5));
    assert!((at(1.0) - ce - kl / 100.0).abs() < 1e-12);
}

fn as_f32(ws: &WeightStore<f64>) -> WeightStore<f32> {
    ws.cast()
}

#[test]
fn spvd_mask_is_the_elementwise_indicator() {
    let g = small_cnn();
    let phi = as_f32(&randomized_posterior(&g, Method::Spvd, 4));
    let th = Thresholds {
        per_node: [("c1".to_string(), -3.0), ("c2".to_string(), -1.5)].into(),
        default: 3.0,
    };
    let net = extract_mask_spvd(&g, &phi, &th);
    for (node, tau) in [("c1", -3.0), ("c2", -1.5), ("out", 3.0)] {
        let k = format!("{node}/weight");
        let mu = phi.get(&k).unwrap().data();
        let ls = phi.get(&format!("{k}{LOG_SIGMA2_SUFFIX}")).unwrap().data();
        let w = net.weights.get(&k).unwrap().data();
        for i in 0..mu.len() {
            let la = ls[i] as f64 - ((mu[i] as f64).powi(2) + 1e-16).ln();
            let expect = if la <= tau { mu[i] } else { 0.0 };
            assert_eq!(w[i], expect);
            assert_eq!(net.masks[&k][i], la <= tau);
        }
    }
    assert!(!net
        .weights
        .keys()
        .any(|k| k.contains("log_sigma2") || k.contains("group")));
    let survivors: usize = net
        .masks
        .values()
        .map(|m| m.iter().filter(|&&b| b).count())
        .sum();
    assert_eq!(net.surviving_edges(), survivors);
}

#[test]
fn spvd_threshold_rule_examples() {
    let g = small_cnn();
    let mut phi = as_f32(&randomized_posterior(&g, Method::Spvd, 6));
    let keys: Vec<String> = phi
        .keys()
        .filter(|k| k.ends_with("weight"))
        .cloned()
        .collect();
    for k in &keys {
        let mu = phi.get(k).unwrap().clone();
        let ls = mu.map(|m| (-6.0 - 1e-3 + ((m as f64).powi(2) + 1e-16).ln()) as f32);
        phi.insert(format!("{k}{LOG_SIGMA2_SUFFIX}"), ls);
    }
    let net = extract_mask_spvd(&g, &phi, &Thresholds::uniform(3.0));
    assert_eq!(net.weights, phi.point_estimate());
    let k = &keys[0];
    let mu = phi.get(k).unwrap().clone();
    phi.insert(
        format!("{k}{LOG_SIGMA2_SUFFIX}"),
        mu.map(|m| (5.0 + ((m as f64).powi(2)).ln()) as f32),
    );
    let net = extract_mask_spvd(&g, &phi, &Thresholds::uniform(3.0));
    assert_eq!(net.weights.get(k).unwrap().count_nonzero(), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn raising_a_threshold_never_removes_survivors(seed in 0u64..1000, lo in -6.0f64..3.0, d in 0.0f64..3.0) {
        let g = small_cnn();
        let phi = as_f32(&randomized_posterior(&g, Method::Spvd, seed));
        let a = extract_mask_spvd(&g, &phi, &Thresholds::uniform(lo)).layer_nonzeros();
        let b = extract_mask_spvd(&g, &phi, &Thresholds::uniform(lo + d)).layer_nonzeros();
        for (k, n) in a {
            prop_assert!(b[&k] >= n);
        }
    }
}

/// Posterior with chosen groups pushed above any threshold.
fn grouped(graph: &ArchGraph, prune_groups: &[(&str, &[usize])], seed: u64) -> WeightStore<f32> {
    let mut phi = as_f32(&randomized_posterior(graph, Method::Bc, seed));
    for (node, groups) in prune_groups {
        let mu = phi.get(&format!("{node}/{GROUP_MU}")).unwrap().clone();
        let ls = phi.get_mut(&format!("{node}/{GROUP_LOG_SIGMA2}")).unwrap();
        for &gi in *groups {
            let m = mu.data()[gi] as f64;
            ls.data_mut()[gi] = (4.0 + (m * m).ln()) as f32;
        }
    }
    phi
}

/// Same network evaluated with pruned group scales set to zero and no
/// structural change.
fn zeroed_reference(
    graph: &ArchGraph,
    phi: &WeightStore<f32>,
    prune_groups: &[(&str, &[usize])],
    x: &Tensor<f32>,
) -> Vec<f32> {
    let mut ws = phi.clone();
    let drop: Vec<String> = ws
        .keys()
        .filter(|k| k.ends_with(LOG_SIGMA2_SUFFIX))
        .cloned()
        .collect();
    for k in drop {
        ws.remove(&k);
    }
    for (node, groups) in prune_groups {
        let mu = ws.get_mut(&format!("{node}/{GROUP_MU}")).unwrap();
        groups.iter().for_each(|&gi| mu.data_mut()[gi] = 0.0);
    }
    forward(graph, &ws, x, RunOptions::eval())
        .unwrap()
        .logits
        .into_data()
}

fn assert_logits_close(a: &[f32], b: &[f32]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < 1e-5 * (1.0 + x.abs()), "{a:?} vs {b:?}");
    }
}

#[test]
fn grouped_pruning_cuts_channels_and_downstream_slices() {
    let g = small_cnn();
    let plan: &[(&str, &[usize])] = &[("c1", &[1, 3]), ("c2", &[0]), ("out", &[2, 5])];
    let phi = grouped(&g, plan, 7);
    let net = extract_mask_bc(&g, &phi, &Thresholds::uniform(0.0)).unwrap();
    let r = &net.graph;
    assert_eq!(r.node(r.find("c1").unwrap()).out_shape, vec![2, 4, 4]);
    assert_eq!(net.weights.get("c2/weight").unwrap().shape(), &[2, 2, 3, 3]);
    // 12 pooled inputs: map 0 of c2 held positions 0..4 (including pruned
    // input 2); input 5 is pruned on its own.
    assert_eq!(net.weights.get("out/weight").unwrap().shape(), &[7, 2]);
    assert!(net.flagged.is_empty());
    assert!(net.masks.is_empty());
    let x = Tensor::from_fn(&[5, 2, 4, 4], |i| ((i * 31 % 17) as f32 - 8.0) / 8.0);
    let reduced = forward(r, &net.weights, &x, RunOptions::eval())
        .unwrap()
        .logits
        .into_data();
    assert_logits_close(&reduced, &zeroed_reference(&g, &phi, plan, &x));
    assert_eq!(net.nonzero_groups(), 2 + 2 + 7);
    assert_eq!(nonzero_groups(r, &net.weights), net.nonzero_groups());
}

#[test]
fn no_group_above_threshold_leaves_graph_unchanged() {
    let g = small_cnn();
    let phi = grouped(&g, &[], 8);
    let net = extract_mask_bc(&g, &phi, &Thresholds::uniform(3.0)).unwrap();
    assert_eq!(net.graph, g);
}

#[test]
fn halving_output_maps_halves_layer_output() {
    let g = small_cnn();
    let phi = grouped(&g, &[("c1", &[0, 2])], 9);
    let before = footprints(&g, &phi.point_estimate());
    let net = extract_mask_bc(&g, &phi, &Thresholds::uniform(0.0)).unwrap();
    let after = footprints(&net.graph, &net.weights);
    let row = |rows: &[microsearch::memmodel::LayerFootprint], name: &str| {
        rows.iter().find(|f| f.name == name).unwrap().clone()
    };
    assert_eq!(row(&after, "c1").output * 2, row(&before, "c1").output);
    assert_eq!(row(&after, "c2").input * 2, row(&before, "c2").input);
}

#[test]
fn fully_pruned_layer_keeps_its_best_group() {
    let g = small_cnn();
    let mut phi = grouped(&g, &[("c2", &[0, 1, 2])], 10);
    phi.get_mut(&format!("c2/{GROUP_LOG_SIGMA2}"))
        .unwrap()
        .data_mut()[1] -= 1.0;
    let net = extract_mask_bc(&g, &phi, &Thresholds::uniform(0.0)).unwrap();
    assert_eq!(net.flagged, vec!["c2".to_string()]);
    assert_eq!(net.kept_groups["c2"], vec![1]);
    assert_eq!(
        net.graph.node(net.graph.find("c2").unwrap()).out_shape[0],
        1
    );
}

#[test]
fn maps_feeding_a_merge_are_zeroed_in_place() {
    let mut b = GraphBuilder::input([1, 4, 4]);
    let c1 = b.push("c1", conv(3, 3), &[0]).unwrap();
    let c2 = b.push("c2", conv(3, 3), &[c1]).unwrap();
    let m = padded_merge(&[b.shape_of(c1), b.shape_of(c2)]);
    let add = b.push("add", m, &[c1, c2]).unwrap();
    let r = b.push("r", LayerSpec::Relu, &[add]).unwrap();
    let out = b.push("out", fc(2), &[r]).unwrap();
    let g = b.finish(out).unwrap();
    let plan: &[(&str, &[usize])] = &[("c1", &[1])];
    let phi = grouped(&g, plan, 11);
    let net = extract_mask_bc(&g, &phi, &Thresholds::uniform(0.0)).unwrap();
    assert_eq!(net.graph, g);
    assert!(net.masks["c1/weight"]
        .iter()
        .enumerate()
        .all(|(i, &k)| k == (i / 9 != 1)));
    let x = Tensor::from_fn(&[3, 1, 4, 4], |i| (i as f32 * 0.3).cos());
    let y = forward(&net.graph, &net.weights, &x, RunOptions::eval())
        .unwrap()
        .logits
        .into_data();
    assert_logits_close(&y, &zeroed_reference(&g, &phi, plan, &x));
}

#[test]
fn checkpoint_file_round_trip_and_graph_check() {
    let g = small_cnn();
    let phi = as_f32(&randomized_posterior(&g, Method::Bc, 12));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("phi.bin");
    checkpoint::save(&path, &g, &phi).unwrap();
    assert_eq!(checkpoint::load(&path, Some(&g)).unwrap().weights, phi);
    let mut b = GraphBuilder::input([2, 4, 4]);
    let c = b.push("c1", conv(3, 5), &[0]).unwrap();
    let other = b.finish(c).unwrap();
    assert!(matches!(
        checkpoint::load(&path, Some(&other)),
        Err(checkpoint::CheckpointError::GraphMismatch)
    ));
}

/// Two Gaussian blobs in 16 dimensions, linearly separable.
fn toy(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 16);
    for i in 0..n {
        let y = i % 2;
        labels.push(y);
        for d in 0..16 {
            let centre = if d < 4 {
                if y == 0 {
                    -1.5
                } else {
                    1.5
                }
            } else {
                0.0
            };
            data.push(centre + rng.random_range(-1.0f32..1.0));
        }
    }
    Dataset::new(Tensor::new(vec![n, 1, 4, 4], data).unwrap(), labels, 2).unwrap()
}

fn toy_net() -> ArchGraph {
    let mut b = GraphBuilder::input([1, 4, 4]);
    let h = b.push("h", fc(16), &[0]).unwrap();
    let r = b.push("r", LayerSpec::Relu, &[h]).unwrap();
    let out = b.push("out", fc(2), &[r]).unwrap();
    b.finish(out).unwrap()
}

#[test]
fn toy_fc_net_prunes_half_its_weights_at_dense_accuracy() {
    let g = toy_net();
    let (train, val) = (toy(400, 1), toy(400, 2));
    let hp = TrainHyperparams {
        epochs: 30,
        batch_size: 32,
        learning_rate: 1e-2,
        seed: 3,
        ..Default::default()
    };
    let init = WeightStore::<f32>::init(&g, &mut ChaCha8Rng::seed_from_u64(4));
    let dense = microsearch::microgradnet::train(&g, &init, &train, &val, &hp).unwrap();
    let cfg = PruneConfig {
        method: Method::Spvd,
        schedule: AnnealSchedule {
            zero_epochs: 5,
            anneal_epochs: 10,
            gamma_final: 1.0,
        },
        thresholds: Thresholds::uniform(3.0),
        train: TrainHyperparams {
            epochs: 15,
            ..hp.clone()
        },
        fine_tune_fraction: FINE_TUNE_FRACTION,
        track_validation: false,
    };
    let out = prune(&g, &init, &train, &val, &cfg).unwrap();
    let total = g.edge_count();
    let kept = out.network.surviving_edges();
    assert!(kept * 2 <= total, "kept {kept} of {total}");
    assert!(
        out.val_accuracy >= dense.val_accuracy - 0.01,
        "{} vs dense {}",
        out.val_accuracy,
        dense.val_accuracy
    );
    assert_eq!(
        accuracy(&out.network.graph, &out.network.weights, &val).unwrap(),
        out.val_accuracy
    );
    for (k, m) in &out.network.masks {
        let w = out.network.weights.get(k).unwrap().data();
        assert!(m.iter().zip(w).all(|(&keep, &v)| keep || v == 0.0));
    }
}

#[test]
fn zero_gamma_applies_no_pruning_pressure() {
    let g = toy_net();
    let (train, val) = (toy(200, 5), toy(200, 6));
    let init = WeightStore::<f32>::init(&g, &mut ChaCha8Rng::seed_from_u64(7));
    let cfg = PruneConfig {
        method: Method::Spvd,
        schedule: AnnealSchedule {
            zero_epochs: 2,
            anneal_epochs: 0,
            gamma_final: 0.0,
        },
        thresholds: Thresholds::uniform(3.0),
        train: TrainHyperparams {
            epochs: 3,
            batch_size: 32,
            learning_rate: 1e-2,
            seed: 1,
            ..Default::default()
        },
        fine_tune_fraction: FINE_TUNE_FRACTION,
        track_validation: true,
    };
    let out = prune(&g, &init, &train, &val, &cfg).unwrap();
    assert_eq!(out.network.surviving_edges(), g.edge_count());
    assert_eq!(out.val_curve.len(), 5);
    assert!(out.posterior.keys().all(|k| !k.contains("group")));
    let la: Vec<f64> = {
        let mu = out.posterior.get("h/weight").unwrap().data();
        let ls = out.posterior.get("h/weight.log_sigma2").unwrap().data();
        mu.iter()
            .zip(ls)
            .map(|(&m, &s)| log_alpha(m as f64, s as f64))
            .collect()
    };
    assert!(la.iter().all(|&a| a < 0.0));
}

#[test]
fn grouped_reduction_matches_zeroed_groups_on_search_graphs() {
    use microsearch::searchspace::{build_graph, SearchSpaceDescriptor, Task};
    let space = SearchSpaceDescriptor::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for i in 0..40 {
        let config = space.sample_random(&mut rng);
        let g = build_graph(
            &space,
            &config,
            Task {
                input: [1, 8, 8],
                classes: 3,
            },
        )
        .unwrap();
        let mut phi = init_posterior(&g, &WeightStore::<f32>::init(&g, &mut rng), Method::Bc);
        // Non-trivial batchnorm statistics so a surviving shift would show.
        for (k, t) in phi.iter_mut() {
            if k.ends_with("beta") || k.ends_with("running_mean") || k.ends_with(GROUP_MU) {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v += rng.random_range(-0.5..0.5));
            }
        }
        let mut zeroed = phi.clone();
        let group_nodes: Vec<String> = phi
            .keys()
            .filter_map(|k| k.strip_suffix(&format!("/{GROUP_MU}")).map(str::to_string))
            .collect();
        for node in &group_nodes {
            let n = phi.get(&format!("{node}/{GROUP_MU}")).unwrap().len();
            let pruned: Vec<bool> = (0..n).map(|j| j > 0 && rng.random_bool(0.4)).collect();
            let ls = phi.get_mut(&format!("{node}/{GROUP_LOG_SIGMA2}")).unwrap();
            pruned
                .iter()
                .enumerate()
                .filter(|(_, &p)| p)
                .for_each(|(j, _)| ls.data_mut()[j] = 10.0);
            let mu = zeroed.get_mut(&format!("{node}/{GROUP_MU}")).unwrap();
            pruned
                .iter()
                .enumerate()
                .filter(|(_, &p)| p)
                .for_each(|(j, _)| mu.data_mut()[j] = 0.0);
            // A pruned map takes its batchnorm affine terms with it.
            if let Some(bn) = node
                .strip_prefix("block-")
                .and_then(|r| r.split_once("/conv-"))
                .map(|(k, l)| format!("block-{k}/bn-{l}"))
            {
                for p in ["gamma", "beta"] {
                    if let Some(t) = zeroed.get_mut(&format!("{bn}/{p}")) {
                        pruned
                            .iter()
                            .enumerate()
                            .filter(|(_, &q)| q)
                            .for_each(|(j, _)| t.data_mut()[j] = 0.0);
                    }
                }
            }
        }
        let drop: Vec<String> = zeroed
            .keys()
            .filter(|k| k.ends_with(LOG_SIGMA2_SUFFIX))
            .cloned()
            .collect();
        drop.iter().for_each(|k| {
            zeroed.remove(k);
        });
        let net = extract_mask_bc(&g, &phi, &Thresholds::uniform(3.0)).unwrap();
        assert!(net.flagged.is_empty());
        let x = Tensor::from_fn(&[4, 1, 8, 8], |_| rng.random_range(-1.0..1.0));
        let want = forward(&g, &zeroed, &x, RunOptions::eval())
            .unwrap()
            .logits
            .into_data();
        let got = forward(&net.graph, &net.weights, &x, RunOptions::eval())
            .unwrap()
            .logits
            .into_data();
        for (a, b) in got.iter().zip(&want) {
            assert!(
                (a - b).abs() < 1e-4 * (1.0 + b.abs()),
                "config {i}: {got:?} vs {want:?}"
            );
        }
        assert!(net.graph.edge_count() <= g.edge_count());
    }
}
