//! The configuration space: parameter catalog with hierarchical activation,
//! uniform sampling, validation and materialization into graphs.

mod build;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::microgradnet::{Dataset, NnError};

pub use build::{build_graph, conv_node_name, layer_threshold, Task, FC_THRESHOLD};

pub const MAX_BLOCKS: usize = 2;
pub const MAX_LAYERS: usize = 3;
pub const LAYER_TYPES: [&str; 3] = ["Conv2D", "DownsampledConv2D", "SeparableConv2D"];
pub const MERGE_TYPES: [&str; 2] = ["Sum", "Concatenate"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Real(f64),
    Cat(String),
}

impl Value {
    pub fn as_bool(&self) -> Option<bool> {
        match *self {
            Value::Bool(b) => Some(b),
            _ => None,
        }
    }
    pub fn as_int(&self) -> Option<i64> {
        match *self {
            Value::Int(v) => Some(v),
            _ => None,
        }
    }
    pub fn as_real(&self) -> Option<f64> {
        match *self {
            Value::Real(v) => Some(v),
            Value::Int(v) => Some(v as f64),
            _ => None,
        }
    }
    pub fn as_cat(&self) -> Option<&str> {
        match self {
            Value::Cat(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{}", if *b { "True" } else { "False" }),
            Value::Int(v) => write!(f, "{v}"),
            Value::Real(v) => write!(f, "{v}"),
            Value::Cat(s) => f.write_str(s),
        }
    }
}

/// Range of one parameter. Real grids are stored as `inv` steps per unit so
/// grid points are canonical (`k / inv`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ParamKind {
    Bool,
    Int {
        lo: i64,
        hi: i64,
        step: i64,
    },
    /// Grid `[lo_k / inv, hi_k / inv]` in unit steps of `1 / inv`.
    Grid {
        lo_k: i64,
        hi_k: i64,
        inv: u32,
    },
    /// Continuous interval; `open_lo` excludes the lower end.
    Real {
        lo: f64,
        hi: f64,
        open_lo: bool,
    },
    Categorical {
        choices: Vec<String>,
    },
}

impl ParamKind {
    pub fn contains(&self, v: &Value) -> bool {
        match (self, v) {
            (ParamKind::Bool, Value::Bool(_)) => true,
            (ParamKind::Int { lo, hi, step }, Value::Int(x)) => {
                x >= lo && x <= hi && (x - lo) % step == 0
            }
            (ParamKind::Grid { lo_k, hi_k, inv }, Value::Real(x)) => {
                let k = (x * *inv as f64).round();
                k >= *lo_k as f64 && k <= *hi_k as f64 && grid_value(k as i64, *inv) == *x
            }
            (ParamKind::Real { lo, hi, open_lo }, Value::Real(x)) => {
                x.is_finite() && x <= hi && if *open_lo { x > lo } else { x >= lo }
            }
            (ParamKind::Categorical { choices }, Value::Cat(s)) => choices.contains(s),
            _ => false,
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Value {
        match self {
            ParamKind::Bool => Value::Bool(rng.random_bool(0.5)),
            ParamKind::Int { lo, hi, step } => {
                Value::Int(lo + step * rng.random_range(0..=(hi - lo) / step))
            }
            ParamKind::Grid { lo_k, hi_k, inv } => {
                Value::Real(grid_value(rng.random_range(*lo_k..=*hi_k), *inv))
            }
            ParamKind::Real { lo, hi, open_lo } => {
                let u: f64 = rng.random();
                Value::Real(if *open_lo {
                    hi - u * (hi - lo)
                } else {
                    lo + u * (hi - lo)
                })
            }
            ParamKind::Categorical { choices } => {
                Value::Cat(choices[rng.random_range(0..choices.len())].clone())
            }
        }
    }

    /// Number of distinct values for discrete kinds.
    pub fn cardinality(&self) -> Option<u64> {
        match self {
            ParamKind::Bool => Some(2),
            ParamKind::Int { lo, hi, step } => Some(((hi - lo) / step + 1) as u64),
            ParamKind::Grid { lo_k, hi_k, .. } => Some((hi_k - lo_k + 1) as u64),
            ParamKind::Real { .. } => None,
            ParamKind::Categorical { choices } => Some(choices.len() as u64),
        }
    }

    /// Bounds as reals, used for kernel-distance scaling.
    pub fn numeric_bounds(&self) -> Option<(f64, f64)> {
        match self {
            ParamKind::Int { lo, hi, .. } => Some((*lo as f64, *hi as f64)),
            ParamKind::Grid { lo_k, hi_k, inv } => {
                Some((grid_value(*lo_k, *inv), grid_value(*hi_k, *inv)))
            }
            ParamKind::Real { lo, hi, .. } => Some((*lo, *hi)),
            _ => None,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            ParamKind::Bool => "True/False".into(),
            ParamKind::Int { lo, hi, step } => format!("[{lo}:{step}:{hi}]"),
            ParamKind::Grid { lo_k, hi_k, inv } => {
                format!(
                    "[{}:{}:{}]",
                    grid_value(*lo_k, *inv),
                    grid_value(1, *inv),
                    grid_value(*hi_k, *inv)
                )
            }
            ParamKind::Real { lo, hi, open_lo } => {
                format!("{}{lo}:{hi}]", if *open_lo { "(" } else { "[" })
            }
            ParamKind::Categorical { choices } => format!("{choices:?}"),
        }
    }
}

/// Canonical grid point `k / inv`.
pub fn grid_value(k: i64, inv: u32) -> f64 {
    k as f64 / inv as f64
}

/// When a parameter is active, in terms of parameters declared before it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    Always,
    Equals { param: String, value: Value },
    AtLeast { param: String, value: i64 },
    All(Vec<Condition>),
    Any(Vec<Condition>),
}

impl Condition {
    fn eq(param: &str, value: Value) -> Self {
        Condition::Equals {
            param: param.into(),
            value,
        }
    }
    fn at_least(param: &str, value: i64) -> Self {
        Condition::AtLeast {
            param: param.into(),
            value,
        }
    }

    pub fn holds(&self, values: &BTreeMap<String, Value>) -> bool {
        match self {
            Condition::Always => true,
            Condition::Equals { param, value } => values.get(param) == Some(value),
            Condition::AtLeast { param, value } => values
                .get(param)
                .and_then(Value::as_int)
                .is_some_and(|v| v >= *value),
            Condition::All(cs) => cs.iter().all(|c| c.holds(values)),
            Condition::Any(cs) => cs.iter().any(|c| c.holds(values)),
        }
    }

    /// Parameters this condition reads.
    pub fn parents(&self) -> Vec<&str> {
        match self {
            Condition::Always => Vec::new(),
            Condition::Equals { param, .. } | Condition::AtLeast { param, .. } => {
                vec![param.as_str()]
            }
            Condition::All(cs) | Condition::Any(cs) => {
                cs.iter().flat_map(Condition::parents).collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ParamDef {
    pub name: String,
    #[serde(flatten)]
    pub kind: ParamKind,
    pub active_if: Condition,
}

/// Ordered parameter catalog; parents precede children.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpaceDescriptor {
    pub parameters: Vec<ParamDef>,
}

pub fn layer_param(prefix: &str, k: usize, l: usize) -> String {
    format!("{prefix}-block-{k}-layer-{l}")
}

pub fn block_param(prefix: &str, k: usize) -> String {
    format!("{prefix}-block-{k}")
}

impl SearchSpaceDescriptor {
    /// The full catalog used by the search.
    pub fn standard() -> Self {
        let mut p = Vec::new();
        let mut add = |name: &str, kind: ParamKind, active_if: Condition| {
            p.push(ParamDef {
                name: name.into(),
                kind,
                active_if,
            })
        };
        let int = |lo, hi| ParamKind::Int { lo, hi, step: 1 };
        let t = || Value::Bool(true);
        let f = || Value::Bool(false);
        add(
            "downsample-input-in-depth",
            ParamKind::Bool,
            Condition::Always,
        );
        add("downsample-input", ParamKind::Bool, Condition::Always);
        add(
            "input-downsampling-rate",
            int(2, 4),
            Condition::eq("downsample-input", t()),
        );
        add("pretraining", ParamKind::Bool, Condition::Always);
        add("zero-regularization-epochs", int(5, 30), Condition::Always);
        add(
            "annealing-epochs",
            int(15, 25),
            Condition::eq("pretraining", f()),
        );
        add(
            "alpha",
            ParamKind::Grid {
                lo_k: 1,
                hi_k: 100,
                inv: 100,
            },
            Condition::Always,
        );
        add("batch-norm", ParamKind::Bool, Condition::Always);
        add("residual-connections", ParamKind::Bool, Condition::Always);
        add(
            "num-conv-blocks",
            int(1, MAX_BLOCKS as i64),
            Condition::Always,
        );
        for k in 1..=MAX_BLOCKS {
            let block_on = Condition::at_least("num-conv-blocks", k as i64);
            let layers = block_param("num-conv-layers", k);
            add(&layers, int(1, MAX_LAYERS as i64), block_on.clone());
            add(
                &block_param("pooling-window", k),
                int(2, 3),
                block_on.clone(),
            );
            for l in 1..=MAX_LAYERS {
                let on = Condition::All(vec![
                    block_on.clone(),
                    Condition::at_least(&layers, l as i64),
                ]);
                let lt = layer_param("layer-type", k, l);
                add(
                    &lt,
                    ParamKind::Categorical {
                        choices: LAYER_TYPES.map(String::from).to_vec(),
                    },
                    on.clone(),
                );
                add(&layer_param("kernel-size", k, l), int(2, 5), on.clone());
                add(&layer_param("num-filters", k, l), int(1, 100), on.clone());
                add(
                    &layer_param("downsample", k, l),
                    ParamKind::Real {
                        lo: 0.0,
                        hi: 0.5,
                        open_lo: true,
                    },
                    Condition::All(vec![
                        on.clone(),
                        Condition::eq(&lt, Value::Cat("DownsampledConv2D".into())),
                    ]),
                );
                add(
                    &layer_param("pruning-thresholds", k, l),
                    ParamKind::Grid {
                        lo_k: -60,
                        hi_k: 30,
                        inv: 10,
                    },
                    on,
                );
            }
        }
        add("num-fc-layers", int(0, 1), Condition::Always);
        add(
            "total-fc-layer-weights",
            ParamKind::Int {
                lo: 1000,
                hi: 800_000,
                step: 1000,
            },
            Condition::Always,
        );
        add(
            "weight-fraction-main-branch",
            ParamKind::Real {
                lo: 0.0,
                hi: 1.0,
                open_lo: false,
            },
            Condition::at_least("num-fc-layers", 1),
        );
        add("left-branch", ParamKind::Bool, Condition::Always);
        add("right-branch", ParamKind::Bool, Condition::Always);
        let frac = || ParamKind::Real {
            lo: 0.01,
            hi: 1.0,
            open_lo: false,
        };
        add(
            "weight-fraction-left-branch",
            frac(),
            Condition::eq("left-branch", t()),
        );
        add(
            "weight-fraction-right-branch",
            frac(),
            Condition::eq("right-branch", t()),
        );
        add(
            "merge-type",
            ParamKind::Categorical {
                choices: MERGE_TYPES.map(String::from).to_vec(),
            },
            Condition::Any(vec![
                Condition::eq("left-branch", t()),
                Condition::eq("right-branch", t()),
            ]),
        );
        Self { parameters: p }
    }

    pub fn get(&self, name: &str) -> Option<&ParamDef> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("descriptor serializes")
    }

    /// Every condition references a parameter declared earlier.
    pub fn check_hierarchy(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for p in &self.parameters {
            for parent in p.active_if.parents() {
                if !seen.contains(parent) {
                    return Err(format!("{} depends on undeclared {parent}", p.name));
                }
            }
            seen.insert(p.name.as_str());
        }
        Ok(())
    }

    /// Samples parents before children; inactive parameters get no value.
    pub fn sample_random(&self, rng: &mut impl Rng) -> Configuration {
        let mut values = BTreeMap::new();
        for p in &self.parameters {
            if p.active_if.holds(&values) {
                values.insert(p.name.clone(), p.kind.sample(rng));
            }
        }
        Configuration { values }
    }

    pub fn active_parameters(&self, config: &Configuration) -> BTreeSet<String> {
        self.parameters
            .iter()
            .filter(|p| p.active_if.holds(&config.values))
            .map(|p| p.name.clone())
            .collect()
    }

    /// Every violation, in catalog order; empty means valid.
    pub fn violations(&self, config: &Configuration) -> Vec<Violation> {
        let mut out = Vec::new();
        for name in config.values.keys() {
            if self.get(name).is_none() {
                out.push(Violation::Unknown {
                    param: name.clone(),
                });
            }
        }
        for p in &self.parameters {
            let active = p.active_if.holds(&config.values);
            match (active, config.values.get(&p.name)) {
                (true, None) => out.push(Violation::Missing {
                    param: p.name.clone(),
                }),
                (false, Some(_)) => out.push(Violation::Inactive {
                    param: p.name.clone(),
                }),
                (true, Some(v)) if !p.kind.contains(v) => out.push(Violation::OutOfRange {
                    param: p.name.clone(),
                    value: v.to_string(),
                    range: p.kind.describe(),
                }),
                _ => {}
            }
        }
        if config.int("num-fc-layers") == Some(1)
            && config.real("weight-fraction-main-branch") == Some(0.0)
        {
            out.push(Violation::EmptyFcLayer {
                fractions: vec!["weight-fraction-main-branch".into()],
            });
        }
        out
    }

    pub fn validate(&self, config: &Configuration) -> Result<(), Vec<Violation>> {
        let v = self.violations(config);
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Error)]
#[serde(tag = "violation", rename_all = "kebab-case")]
pub enum Violation {
    #[error("{param}: value {value} outside {range}")]
    OutOfRange {
        param: String,
        value: String,
        range: String,
    },
    #[error("{param}: active but missing")]
    Missing { param: String },
    #[error("{param}: present but inactive")]
    Inactive { param: String },
    #[error("{param}: not a parameter of the space")]
    Unknown { param: String },
    #[error("FC layer would have no units; check {fractions:?}")]
    EmptyFcLayer { fractions: Vec<String> },
}

/// A full design point: one value per active parameter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Configuration {
    pub values: BTreeMap<String, Value>,
}

impl Configuration {
    pub fn get(&self, name: &str) -> Option<&Value> {
        self.values.get(name)
    }
    pub fn bool(&self, name: &str) -> Option<bool> {
        self.get(name).and_then(Value::as_bool)
    }
    pub fn int(&self, name: &str) -> Option<i64> {
        self.get(name).and_then(Value::as_int)
    }
    pub fn real(&self, name: &str) -> Option<f64> {
        self.get(name).and_then(Value::as_real)
    }
    pub fn cat(&self, name: &str) -> Option<&str> {
        self.get(name).and_then(Value::as_cat)
    }
    pub fn set(&mut self, name: &str, v: Value) {
        self.values.insert(name.to_string(), v);
    }
    pub fn remove(&mut self, name: &str) -> Option<Value> {
        self.values.remove(name)
    }

    /// Samples values for parameters that became active and drops those that
    /// became inactive, keeping every other value.
    pub fn repair(&mut self, space: &SearchSpaceDescriptor, rng: &mut impl Rng) {
        for p in &space.parameters {
            let active = p.active_if.holds(&self.values);
            match (active, self.values.contains_key(&p.name)) {
                (true, false) => {
                    let v = p.kind.sample(rng);
                    self.values.insert(p.name.clone(), v);
                }
                (false, true) => {
                    self.values.remove(&p.name);
                }
                _ => {}
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error("invalid configuration: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Graph(#[from] NnError),
    #[error("invalid class partition: {0}")]
    Partition(String),
}

/// Relabels to two classes: label 0 for classes in `first`, 1 for `second`.
pub fn binarize_labels(
    data: &Dataset,
    first: &[usize],
    second: &[usize],
) -> Result<Dataset, SpaceError> {
    if first.is_empty() || second.is_empty() {
        return Err(SpaceError::Partition("both sides must be non-empty".into()));
    }
    let mut side = vec![None; data.classes];
    for (s, group) in [first, second].iter().enumerate() {
        for &c in group.iter() {
            if c >= data.classes {
                return Err(SpaceError::Partition(format!("class {c} does not exist")));
            }
            if side[c].replace(s).is_some() {
                return Err(SpaceError::Partition(format!("class {c} listed twice")));
            }
        }
    }
    if let Some(c) = side.iter().position(Option::is_none) {
        return Err(SpaceError::Partition(format!(
            "class {c} missing from partition"
        )));
    }
    let labels = data.labels.iter().map(|&l| side[l].unwrap()).collect();
    Dataset::new(data.images.clone(), labels, 2).map_err(SpaceError::Graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hierarchy_is_declared_parents_first() {
        SearchSpaceDescriptor::standard().check_hierarchy().unwrap();
    }

    #[test]
    fn ranges_match_catalog() {
        let s = SearchSpaceDescriptor::standard();
        assert_eq!(
            s.get("num-conv-blocks").unwrap().kind,
            ParamKind::Int {
                lo: 1,
                hi: 2,
                step: 1
            }
        );
        assert_eq!(
            s.get("num-filters-block-1-layer-1").unwrap().kind,
            ParamKind::Int {
                lo: 1,
                hi: 100,
                step: 1
            }
        );
        let thr = &s.get("pruning-thresholds-block-2-layer-3").unwrap().kind;
        assert_eq!(thr.cardinality(), Some(91));
        assert_eq!(thr.numeric_bounds(), Some((-6.0, 3.0)));
        assert_eq!(
            s.get("alpha").unwrap().kind.numeric_bounds(),
            Some((0.01, 1.0))
        );
        assert_eq!(
            s.get("total-fc-layer-weights").unwrap().kind.cardinality(),
            Some(800)
        );
    }

    #[test]
    fn downsampling_rate_absent_when_downsampling_off() {
        let s = SearchSpaceDescriptor::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen_off = false;
        for _ in 0..200 {
            let c = s.sample_random(&mut rng);
            if c.bool("downsample-input") == Some(false) {
                seen_off = true;
                assert!(c.get("input-downsampling-rate").is_none());
            }
        }
        assert!(seen_off);
    }

    #[test]
    fn validation_reports_range_and_inactive_violations() {
        let s = SearchSpaceDescriptor::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut c = s.sample_random(&mut rng);
        c.set("num-conv-blocks", Value::Int(3));
        assert!(s.violations(&c).iter().any(
            |v| matches!(v, Violation::OutOfRange { param, .. } if param == "num-conv-blocks")
        ));

        let mut c = s.sample_random(&mut rng);
        c.set("left-branch", Value::Bool(false));
        c.remove("merge-type");
        c.repair(&s, &mut rng);
        c.set("weight-fraction-left-branch", Value::Real(0.3));
        assert!(s.violations(&c).contains(&Violation::Inactive {
            param: "weight-fraction-left-branch".into()
        }));
    }

    #[test]
    fn off_grid_threshold_is_rejected() {
        let kind = ParamKind::Grid {
            lo_k: -60,
            hi_k: 30,
            inv: 10,
        };
        assert!(kind.contains(&Value::Real(-0.3)));
        assert!(!kind.contains(&Value::Real(-0.35)));
        assert!(!kind.contains(&Value::Real(3.1)));
    }

    #[test]
    fn binarize_rejects_bad_partitions() {
        let images = crate::microgradnet::Tensor::zeros(&[4, 1, 1, 1]);
        let d = Dataset::new(images, vec![0, 1, 2, 2], 3).unwrap();
        assert!(binarize_labels(&d, &[0], &[1]).is_err());
        assert!(binarize_labels(&d, &[0, 1, 2], &[]).is_err());
        let b = binarize_labels(&d, &[0, 2], &[1]).unwrap();
        assert_eq!(b.labels, vec![0, 1, 0, 0]);
    }
}
