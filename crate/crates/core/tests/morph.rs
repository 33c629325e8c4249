use std::collections::BTreeSet;

use microsearch::microgradnet::{
    ArchGraph, WeightStore, GROUP_LOG_SIGMA2, GROUP_MU, LOG_SIGMA2_SUFFIX,
};
use microsearch::morph::{
    apply_morph, inherit, inherit_checkpoint, invert, morph_count, propose_morph,
    stage_allowed_morphs, InheritError, MorphKind,
};
use microsearch::pruner::{checkpoint, init_posterior, CheckpointError, Method};
use microsearch::searchspace::{
    build_graph, conv_node_name, layer_param, Configuration, SearchSpaceDescriptor, Task, Value,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TASK: Task = Task {
    input: [1, 8, 8],
    classes: 2,
};

fn graph(space: &SearchSpaceDescriptor, c: &Configuration) -> ArchGraph {
    build_graph(space, c, TASK).unwrap()
}

/// A trained-looking posterior: every value perturbed so no entry can
/// coincide with a fresh initialization.
fn posterior(g: &ArchGraph, method: Method, rng: &mut ChaCha8Rng) -> WeightStore<f32> {
    let mut phi = init_posterior(g, &WeightStore::init(g, rng), method);
    let keys: Vec<String> = phi.keys().cloned().collect();
    for k in keys {
        for v in phi.get_mut(&k).unwrap().data_mut() {
            *v += rng.random_range(0.5f32..1.5);
        }
    }
    phi
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    strides(shape)
        .iter()
        .map(|s| {
            let i = flat / s;
            flat %= s;
            i
        })
        .collect()
}

fn ravel(idx: &[usize], shape: &[usize]) -> Option<usize> {
    if idx.len() != shape.len() || idx.iter().zip(shape).any(|(i, d)| i >= d) {
        return None;
    }
    Some(idx.iter().zip(strides(shape)).map(|(i, s)| i * s).sum())
}

fn node_of(key: &str) -> &str {
    key.rsplit_once('/').unwrap().0
}

/// Every candidate entry is either the reference entry at the same node,
/// parameter and index (node kinds equal), or the fresh initial value.
/// Returns the number of inherited entries.
fn audit(
    reference: &ArchGraph,
    ref_phi: &WeightStore<f32>,
    candidate: &ArchGraph,
    phi: &WeightStore<f32>,
    seed: u64,
    method: Method,
) -> usize {
    let fresh = WeightStore::<f32>::init(candidate, &mut ChaCha8Rng::seed_from_u64(seed));
    let expected_keys: BTreeSet<String> = init_posterior(candidate, &fresh, method)
        .keys()
        .cloned()
        .collect();
    assert_eq!(phi.keys().cloned().collect::<BTreeSet<_>>(), expected_keys);
    let mut inherited = 0;
    for (k, t) in phi.iter() {
        let node = node_of(k);
        let cid = candidate.find(node).unwrap();
        let same_kind = reference.find(node).is_some_and(|r| {
            reference.node(r).op.kind_name() == candidate.node(cid).op.kind_name()
        });
        let src = if same_kind { ref_phi.get(k) } else { None };
        for (flat, &v) in t.data().iter().enumerate() {
            let idx = unravel(flat, t.shape());
            if let Some(off) = src.and_then(|s| ravel(&idx, s.shape())) {
                assert_eq!(
                    v,
                    src.unwrap().data()[off],
                    "{k}{idx:?} not the reference value"
                );
                inherited += 1;
                continue;
            }
            let want = if let Some(base) = k
                .strip_suffix(LOG_SIGMA2_SUFFIX)
                .filter(|_| !k.ends_with(GROUP_LOG_SIGMA2))
            {
                let mu = phi.get(base).unwrap().data()[flat] as f64;
                (-6.0 + (mu * mu + 1e-16).ln()) as f32
            } else if k.ends_with(GROUP_MU) {
                1.0
            } else if k.ends_with(GROUP_LOG_SIGMA2) {
                -6.0
            } else {
                fresh.get(k).unwrap().data()[flat]
            };
            assert!(
                (v - want).abs() <= 1e-5 * want.abs().max(1.0),
                "{k}{idx:?}: {v} is neither inherited nor fresh ({want})"
            );
        }
    }
    inherited
}

#[test]
fn identity_inherits_everything() {
    let space = SearchSpaceDescriptor::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for method in [Method::Spvd, Method::Bc] {
        for _ in 0..10 {
            let c = space.sample_random(&mut rng);
            let g = graph(&space, &c);
            let phi = posterior(&g, method, &mut rng);
            let (out, cov) = inherit(&g, &phi, &g, method, &mut rng);
            assert_eq!(cov.fraction(), 1.0);
            assert_eq!(out, phi);
        }
    }
}

fn with_layer(space: &SearchSpaceDescriptor, seed: u64, lt: &str, filters: i64) -> Configuration {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = space.sample_random(&mut rng);
    c.set(&layer_param("layer-type", 1, 1), Value::Cat(lt.into()));
    c.set(&layer_param("num-filters", 1, 1), Value::Int(filters));
    c.repair(space, &mut rng);
    c
}

#[test]
fn widening_keeps_leading_filters() {
    let space = SearchSpaceDescriptor::standard();
    let a = with_layer(&space, 5, "Conv2D", 30);
    let mut b = a.clone();
    b.set(&layer_param("num-filters", 1, 1), Value::Int(50));
    let (ga, gb) = (graph(&space, &a), graph(&space, &b));
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let phi = posterior(&ga, Method::Spvd, &mut rng);
    let (out, cov) = inherit(
        &ga,
        &phi,
        &gb,
        Method::Spvd,
        &mut ChaCha8Rng::seed_from_u64(7),
    );
    let node = conv_node_name(1, 1);
    let w = format!("{node}/weight");
    let (old, new) = (phi.get(&w).unwrap(), out.get(&w).unwrap());
    assert_eq!(old.shape()[0], 30);
    assert_eq!(new.shape()[0], 50);
    let row = old.row_len();
    assert_eq!(&new.data()[..30 * row], old.data());
    assert!(new.data()[30 * row..]
        .iter()
        .zip(old.data())
        .all(|(x, y)| x != y));
    assert!((cov.node_fraction(&node).unwrap() - 0.6).abs() < 1e-12);
    audit(&ga, &phi, &gb, &out, 7, Method::Spvd);
}

#[test]
fn kind_change_inherits_nothing_at_that_node() {
    let space = SearchSpaceDescriptor::standard();
    let a = with_layer(&space, 8, "Conv2D", 12);
    let mut b = a.clone();
    b.set(
        &layer_param("layer-type", 1, 1),
        Value::Cat("SeparableConv2D".into()),
    );
    let (ga, gb) = (graph(&space, &a), graph(&space, &b));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let phi = posterior(&ga, Method::Bc, &mut rng);
    let (out, cov) = inherit(
        &ga,
        &phi,
        &gb,
        Method::Bc,
        &mut ChaCha8Rng::seed_from_u64(10),
    );
    let changed = conv_node_name(1, 1);
    assert_eq!(cov.node_fraction(&changed), Some(0.0));
    for node in cov.per_node.keys().filter(|n| **n != changed) {
        assert_eq!(cov.node_fraction(node), Some(1.0), "{node}");
    }
    audit(&ga, &phi, &gb, &out, 10, Method::Bc);
}

#[test]
fn no_entry_is_fabricated_across_random_morphs() {
    let space = SearchSpaceDescriptor::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let all = stage_allowed_morphs(1);
    for i in 0..150u64 {
        let method = if i % 2 == 0 { Method::Spvd } else { Method::Bc };
        let a = space.sample_random(&mut rng);
        let (b, _) = propose_morph(&space, &a, &all, &mut rng).unwrap();
        let (ga, gb) = (graph(&space, &a), graph(&space, &b));
        let phi = posterior(&ga, method, &mut rng);
        let seed = 1000 + i;
        let (out, cov) = inherit(&ga, &phi, &gb, method, &mut ChaCha8Rng::seed_from_u64(seed));
        assert_eq!(audit(&ga, &phi, &gb, &out, seed, method), cov.inherited());
        assert_eq!(cov.total(), out.iter().map(|(_, t)| t.len()).sum::<usize>());
    }
}

#[test]
fn proposals_are_valid_bounded_and_invertible() {
    let space = SearchSpaceDescriptor::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let all = stage_allowed_morphs(1);
    let mut counts = [0usize; 4];
    for _ in 0..600 {
        let a = space.sample_random(&mut rng);
        let (b, recs) = propose_morph(&space, &a, &all, &mut rng).unwrap();
        assert!(space.validate(&b).is_ok(), "{:?}", space.validate(&b));
        assert_ne!(a, b);
        let n = morph_count(&recs);
        assert!((1..=3).contains(&n));
        counts[n] += 1;
        assert_eq!(invert(&b, &recs), a);
        for r in &recs {
            assert_eq!(
                a.get(&r.target),
                recs.iter()
                    .find(|x| x.target == r.target)
                    .unwrap()
                    .old
                    .as_ref()
            );
        }
    }
    // Morph counts are uniform on {1, 2, 3}.
    for &c in &counts[1..] {
        assert!((150..=250).contains(&c), "{counts:?}");
    }
}

#[test]
fn proposals_are_reproducible() {
    let space = SearchSpaceDescriptor::standard();
    let a = space.sample_random(&mut ChaCha8Rng::seed_from_u64(13));
    let all = stage_allowed_morphs(1);
    let p1 = propose_morph(&space, &a, &all, &mut ChaCha8Rng::seed_from_u64(14));
    let p2 = propose_morph(&space, &a, &all, &mut ChaCha8Rng::seed_from_u64(14));
    assert_eq!(p1, p2);
}

#[test]
fn stage_two_keeps_the_architecture() {
    let space = SearchSpaceDescriptor::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let allowed = stage_allowed_morphs(2);
    for _ in 0..200 {
        let a = space.sample_random(&mut rng);
        let (b, recs) = propose_morph(&space, &a, &allowed, &mut rng).unwrap();
        assert!(recs.iter().all(|r| r.kind.is_pruning()));
        assert!(recs.iter().all(|r| r.target == "alpha"
            || r.target.ends_with("-epochs")
            || r.target.starts_with("pruning-thresholds-")));
        assert_eq!(
            graph(&space, &a).structure_hash(),
            graph(&space, &b).structure_hash()
        );
    }
}

#[test]
fn inapplicable_kinds_fall_back() {
    let space = SearchSpaceDescriptor::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut a = with_layer(&space, 17, "Conv2D", 8);
    a.set("num-conv-blocks", Value::Int(1));
    a.set("num-conv-layers-block-1", Value::Int(1));
    a.repair(&space, &mut rng);
    let only: BTreeSet<_> = [MorphKind::DownsamplingRate].into();
    assert!(apply_morph(&space, &a, MorphKind::DownsamplingRate, &mut rng).is_none());
    assert!(propose_morph(&space, &a, &only, &mut rng).is_none());
    let with_fallback: BTreeSet<_> = [MorphKind::DownsamplingRate, MorphKind::BatchNorm].into();
    for _ in 0..20 {
        let (_, recs) = propose_morph(&space, &a, &with_fallback, &mut rng).unwrap();
        assert!(recs.iter().all(|r| r.kind == MorphKind::BatchNorm));
    }
}

#[test]
fn each_kind_changes_its_parameter() {
    let space = SearchSpaceDescriptor::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut seen = BTreeSet::new();
    for _ in 0..400 {
        let a = space.sample_random(&mut rng);
        for kind in MorphKind::ALL {
            if let Some((b, recs)) = apply_morph(&space, &a, kind, &mut rng) {
                assert!(space.validate(&b).is_ok());
                assert!(!recs.is_empty());
                seen.insert(kind);
            }
        }
    }
    assert_eq!(seen.len(), MorphKind::ALL.len());
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let space = SearchSpaceDescriptor::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let a = with_layer(&space, 20, "Conv2D", 10);
    let b = with_layer(&space, 20, "Conv2D", 11);
    let (ga, gb) = (graph(&space, &a), graph(&space, &b));
    let phi = posterior(&ga, Method::Spvd, &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ref.phi");
    checkpoint::save(&path, &ga, &phi).unwrap();
    let (ok, _) = inherit_checkpoint(&path, &ga, &gb, Method::Spvd, &mut rng).unwrap();
    assert!(ok.check_against(&gb).is_ok());
    let err = inherit_checkpoint(&path, &gb, &ga, Method::Spvd, &mut rng).unwrap_err();
    assert!(matches!(
        err,
        InheritError::Checkpoint(CheckpointError::GraphMismatch)
    ));
}
