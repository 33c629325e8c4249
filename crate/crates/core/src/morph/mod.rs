//! Local modifications of reference configurations and transplanting of
//! posterior parameters from reference to candidate.

mod inherit;

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::searchspace::{
    block_param, grid_value, layer_param, Configuration, ParamKind, SearchSpaceDescriptor, Value,
    LAYER_TYPES,
};

pub use inherit::{inherit, inherit_checkpoint, Coverage, InheritError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MorphKind {
    NumFcLayers,
    NumConvBlocks,
    LayerType,
    NumConvFilters,
    KernelSize,
    DownsamplingRate,
    BatchNorm,
    ResidualConnections,
    LeftBranch,
    RightBranch,
    TotalFcLayerWeights,
    MergeType,
    Threshold,
    WeightFraction,
    Alpha,
    NumConvLayers,
    ZeroRegularizationEpochs,
    AnnealingEpochs,
}

impl MorphKind {
    pub const ALL: [MorphKind; 18] = [
        MorphKind::NumFcLayers,
        MorphKind::NumConvBlocks,
        MorphKind::LayerType,
        MorphKind::NumConvFilters,
        MorphKind::KernelSize,
        MorphKind::DownsamplingRate,
        MorphKind::BatchNorm,
        MorphKind::ResidualConnections,
        MorphKind::LeftBranch,
        MorphKind::RightBranch,
        MorphKind::TotalFcLayerWeights,
        MorphKind::MergeType,
        MorphKind::Threshold,
        MorphKind::WeightFraction,
        MorphKind::Alpha,
        MorphKind::NumConvLayers,
        MorphKind::ZeroRegularizationEpochs,
        MorphKind::AnnealingEpochs,
    ];

    /// Kinds that touch only pruning and regularization parameters.
    pub const PRUNING: [MorphKind; 4] = [
        MorphKind::Threshold,
        MorphKind::Alpha,
        MorphKind::ZeroRegularizationEpochs,
        MorphKind::AnnealingEpochs,
    ];

    pub fn is_pruning(self) -> bool {
        Self::PRUNING.contains(&self)
    }
}

pub fn stage_allowed_morphs(stage: u8) -> BTreeSet<MorphKind> {
    match stage {
        2 => MorphKind::PRUNING.into_iter().collect(),
        _ => MorphKind::ALL.into_iter().collect(),
    }
}

/// One parameter change; `None` means absent (inactive).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct MorphRecord {
    /// Index of the morph within its proposal.
    pub step: usize,
    pub kind: MorphKind,
    pub target: String,
    pub old: Option<Value>,
    pub new: Option<Value>,
}

pub const MAX_MORPHS: usize = 3;
/// Attempts per kind before falling back to another kind.
pub const RETRIES: usize = 8;
pub const BRANCH_FRACTION_ON_ENABLE: f64 = 0.05;

fn conv_layers(c: &Configuration) -> Vec<(usize, usize)> {
    let blocks = c.int("num-conv-blocks").unwrap_or(0) as usize;
    (1..=blocks)
        .flat_map(|k| {
            (1..=c.int(&block_param("num-conv-layers", k)).unwrap_or(0) as usize)
                .map(move |l| (k, l))
        })
        .collect()
}

fn int_bounds(space: &SearchSpaceDescriptor, name: &str) -> (i64, i64, i64) {
    match space.get(name).map(|p| &p.kind) {
        Some(ParamKind::Int { lo, hi, step }) => (*lo, *hi, *step),
        _ => (0, 0, 1),
    }
}

fn toggle(c: &mut Configuration, name: &str) -> bool {
    let v = !c.bool(name).unwrap_or(false);
    c.set(name, Value::Bool(v));
    v
}

/// Steps a grid-valued parameter by `units` grid points.
fn step_grid(
    space: &SearchSpaceDescriptor,
    c: &mut Configuration,
    name: &str,
    units: i64,
) -> Option<()> {
    let Some(ParamKind::Grid { lo_k, hi_k, inv }) = space.get(name).map(|p| p.kind.clone()) else {
        return None;
    };
    let k = (c.real(name)? * inv as f64).round() as i64 + units;
    (lo_k..=hi_k)
        .contains(&k)
        .then(|| c.set(name, Value::Real(grid_value(k, inv))))
}

fn step_int(
    space: &SearchSpaceDescriptor,
    c: &mut Configuration,
    name: &str,
    delta: i64,
) -> Option<()> {
    let (lo, hi, _) = int_bounds(space, name);
    let v = c.int(name)? + delta;
    (lo..=hi).contains(&v).then(|| c.set(name, Value::Int(v)))
}

/// Uniform resample to a different in-range value.
fn resample(
    space: &SearchSpaceDescriptor,
    c: &mut Configuration,
    name: &str,
    rng: &mut impl Rng,
) -> Option<()> {
    let kind = &space.get(name)?.kind;
    let old = c.get(name)?.clone();
    let v = kind.sample(rng);
    (v != old).then(|| c.set(name, v))
}

fn sign(rng: &mut impl Rng) -> i64 {
    if rng.random_bool(0.5) {
        1
    } else {
        -1
    }
}

/// One attempt at `kind`; `None` when the draw is not applicable or leaves
/// the range.
fn attempt(
    space: &SearchSpaceDescriptor,
    c: &Configuration,
    kind: MorphKind,
    rng: &mut impl Rng,
) -> Option<Configuration> {
    let mut n = c.clone();
    let layers = conv_layers(c);
    match kind {
        MorphKind::NumFcLayers => step_int(space, &mut n, "num-fc-layers", sign(rng))?,
        MorphKind::NumConvBlocks => {
            let d = sign(rng);
            step_int(space, &mut n, "num-conv-blocks", d)?;
            if d > 0 {
                let k = n.int("num-conv-blocks")? as usize;
                n.set(&block_param("num-conv-layers", k), Value::Int(1));
            }
        }
        MorphKind::LayerType => {
            let &(k, l) = layers.choose(rng)?;
            let name = layer_param("layer-type", k, l);
            let cur = n.cat(&name)?.to_string();
            let others: Vec<&str> = LAYER_TYPES.iter().copied().filter(|t| *t != cur).collect();
            n.set(&name, Value::Cat(others.choose(rng)?.to_string()));
        }
        MorphKind::NumConvFilters => {
            let &(k, l) = layers.choose(rng)?;
            resample(space, &mut n, &layer_param("num-filters", k, l), rng)?;
        }
        MorphKind::KernelSize => {
            let &(k, l) = layers.choose(rng)?;
            resample(space, &mut n, &layer_param("kernel-size", k, l), rng)?;
        }
        MorphKind::DownsamplingRate => {
            let ds: Vec<_> = layers
                .iter()
                .filter(|&&(k, l)| {
                    c.cat(&layer_param("layer-type", k, l)) == Some("DownsampledConv2D")
                })
                .collect();
            let &&(k, l) = ds.choose(rng)?;
            resample(space, &mut n, &layer_param("downsample", k, l), rng)?;
        }
        MorphKind::BatchNorm => {
            toggle(&mut n, "batch-norm");
        }
        MorphKind::ResidualConnections => {
            toggle(&mut n, "residual-connections");
        }
        MorphKind::LeftBranch | MorphKind::RightBranch => {
            let side = if kind == MorphKind::LeftBranch {
                "left"
            } else {
                "right"
            };
            if toggle(&mut n, &format!("{side}-branch")) {
                n.set(
                    &format!("weight-fraction-{side}-branch"),
                    Value::Real(BRANCH_FRACTION_ON_ENABLE),
                );
            }
        }
        MorphKind::TotalFcLayerWeights => {
            step_int(space, &mut n, "total-fc-layer-weights", 5000 * sign(rng))?
        }
        MorphKind::MergeType => {
            let cur = n.cat("merge-type")?.to_string();
            let Some(ParamKind::Categorical { choices }) = space.get("merge-type").map(|p| &p.kind)
            else {
                return None;
            };
            let other = choices.iter().find(|s| **s != cur)?.clone();
            n.set("merge-type", Value::Cat(other));
        }
        MorphKind::Threshold => {
            let &(k, l) = layers.choose(rng)?;
            step_grid(
                space,
                &mut n,
                &layer_param("pruning-thresholds", k, l),
                5 * sign(rng),
            )?;
        }
        MorphKind::WeightFraction => {
            let mut any = false;
            for side in ["main", "left", "right"] {
                let name = format!("weight-fraction-{side}-branch");
                let Some(v) = n.real(&name) else { continue };
                let nv = v + 0.05 * sign(rng) as f64;
                if space.get(&name)?.kind.contains(&Value::Real(nv)) && nv > 0.0 {
                    n.set(&name, Value::Real(nv));
                    any = true;
                }
            }
            if !any {
                return None;
            }
        }
        MorphKind::Alpha => step_grid(space, &mut n, "alpha", 10 * sign(rng))?,
        MorphKind::NumConvLayers => {
            let blocks = c.int("num-conv-blocks")? as usize;
            let k = rng.random_range(1..=blocks);
            step_int(space, &mut n, &block_param("num-conv-layers", k), sign(rng))?;
        }
        MorphKind::ZeroRegularizationEpochs => {
            resample(space, &mut n, "zero-regularization-epochs", rng)?
        }
        MorphKind::AnnealingEpochs => resample(space, &mut n, "annealing-epochs", rng)?,
    }
    n.repair(space, rng);
    (n != *c && space.validate(&n).is_ok()).then_some(n)
}

fn diff(
    step: usize,
    kind: MorphKind,
    before: &Configuration,
    after: &Configuration,
) -> Vec<MorphRecord> {
    let names: BTreeSet<&String> = before.values.keys().chain(after.values.keys()).collect();
    names
        .into_iter()
        .filter(|k| before.get(k) != after.get(k))
        .map(|k| MorphRecord {
            step,
            kind,
            target: k.clone(),
            old: before.get(k).cloned(),
            new: after.get(k).cloned(),
        })
        .collect()
}

/// Applies one morph of `kind`, retrying with fresh targets and directions.
pub fn apply_morph(
    space: &SearchSpaceDescriptor,
    config: &Configuration,
    kind: MorphKind,
    rng: &mut impl Rng,
) -> Option<(Configuration, Vec<MorphRecord>)> {
    (0..RETRIES)
        .find_map(|_| attempt(space, config, kind, rng))
        .map(|n| {
            let r = diff(0, kind, config, &n);
            (n, r)
        })
}

/// Applies 1 to 3 (uniform) morphs drawn from `allowed`. Kinds that cannot
/// apply to the current configuration are replaced by other allowed kinds.
/// Returns `None` only if no allowed kind changes the reference.
pub fn propose_morph(
    space: &SearchSpaceDescriptor,
    reference: &Configuration,
    allowed: &BTreeSet<MorphKind>,
    rng: &mut impl Rng,
) -> Option<(Configuration, Vec<MorphRecord>)> {
    let kinds: Vec<MorphKind> = allowed.iter().copied().collect();
    for _ in 0..RETRIES {
        let count = rng.random_range(1..=MAX_MORPHS);
        let mut cur = reference.clone();
        let mut records = Vec::new();
        for step in 0..count {
            let mut pool = kinds.clone();
            let applied = loop {
                if pool.is_empty() {
                    break None;
                }
                let kind = pool.swap_remove(rng.random_range(0..pool.len()));
                if let Some((next, _)) = apply_morph(space, &cur, kind, rng) {
                    break Some((kind, next));
                }
            };
            let Some((kind, next)) = applied else { break };
            records.extend(diff(step, kind, &cur, &next));
            cur = next;
        }
        // Later morphs can undo earlier ones.
        if cur != *reference {
            return Some((cur, records));
        }
    }
    None
}

/// Undoes `records` (as returned for `config`'s proposal).
pub fn invert(config: &Configuration, records: &[MorphRecord]) -> Configuration {
    let mut c = config.clone();
    for r in records.iter().rev() {
        match &r.old {
            Some(v) => c.set(&r.target, v.clone()),
            None => {
                c.remove(&r.target);
            }
        }
    }
    c
}

/// Number of morphs behind a record list.
pub fn morph_count(records: &[MorphRecord]) -> usize {
    records
        .iter()
        .map(|r| r.step)
        .collect::<BTreeSet<_>>()
        .len()
}
