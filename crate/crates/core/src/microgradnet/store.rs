use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{ArchGraph, ParamRole};
use super::tensor::{Scalar, Tensor};
use super::NnError;

/// Variational log-variance companion of a weight tensor: `"<node>/<param>.log_sigma2"`.
pub const LOG_SIGMA2_SUFFIX: &str = ".log_sigma2";
/// Per-group multiplicative scale mean and log-variance used by structured pruning.
pub const GROUP_MU: &str = "group.mu";
pub const GROUP_LOG_SIGMA2: &str = "group.log_sigma2";

pub fn key(node: &str, param: &str) -> String {
    format!("{node}/{param}")
}

/// Named parameter tensors keyed `"<node>/<param>"`, plus the bit width the
/// values are meant to be stored at (32 for float, 8 after quantization).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightStore<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
    pub bits: u32,
}

impl<T: Scalar> Default for WeightStore<T> {
    fn default() -> Self {
        Self {
            tensors: BTreeMap::new(),
            bits: 32,
        }
    }
}

impl<T: Scalar> WeightStore<T> {
    /// Fan-in scaled uniform weights (`U(-b, b)`, `b = sqrt(6 / fan_in)`),
    /// zero biases, identity batchnorm.
    pub fn init(graph: &ArchGraph, rng: &mut impl Rng) -> Self {
        let mut store = Self::default();
        for (id, node) in graph.nodes().iter().enumerate() {
            for p in graph.param_specs(id) {
                let t = match p.role {
                    ParamRole::Weight => {
                        let b = (6.0 / p.fan_in as f64).sqrt();
                        Tensor::from_fn(&p.shape, |_| T::lit(rng.random_range(-b..b)))
                    }
                    ParamRole::Bias | ParamRole::BnShift | ParamRole::BnRunningMean => {
                        Tensor::zeros(&p.shape)
                    }
                    ParamRole::BnScale | ParamRole::BnRunningVar => {
                        Tensor::full(&p.shape, T::one())
                    }
                };
                store.tensors.insert(key(&node.name, p.name), t);
            }
        }
        store
    }

    pub fn get(&self, key: &str) -> Option<&Tensor<T>> {
        self.tensors.get(key)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(key)
    }

    pub fn require(&self, key: &str) -> Result<&Tensor<T>, NnError> {
        self.tensors
            .get(key)
            .ok_or_else(|| NnError::MissingParam(key.to_string()))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.tensors.contains_key(key)
    }

    pub fn insert(&mut self, key: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(key.into(), t)
    }

    pub fn remove(&mut self, key: &str) -> Option<Tensor<T>> {
        self.tensors.remove(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> WeightStore<U> {
        WeightStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            bits: self.bits,
        }
    }

    /// Drops variational companions, leaving only deterministic parameters.
    pub fn point_estimate(&self) -> Self {
        let tensors = self
            .tensors
            .iter()
            .filter(|(k, _)| !k.ends_with(LOG_SIGMA2_SUFFIX) && !k.ends_with(GROUP_MU))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Self {
            tensors,
            bits: self.bits,
        }
    }

    /// Every parameter the graph requires is present with the right shape.
    pub fn check_against(&self, graph: &ArchGraph) -> Result<(), NnError> {
        for (id, node) in graph.nodes().iter().enumerate() {
            for p in graph.param_specs(id) {
                let k = key(&node.name, p.name);
                let t = self.require(&k)?;
                if t.shape() != p.shape.as_slice() {
                    return Err(NnError::ParamShape {
                        key: k,
                        expected: p.shape,
                        got: t.shape().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Non-zero prunable weight entries over the graph's weight tensors.
    pub fn nonzero_weights(&self, graph: &ArchGraph) -> usize {
        graph
            .nodes()
            .iter()
            .enumerate()
            .flat_map(|(id, node)| graph.param_specs(id).into_iter().map(move |p| (node, p)))
            .filter(|(_, p)| p.role == ParamRole::Weight)
            .filter_map(|(node, p)| self.get(&key(&node.name, p.name)))
            .map(|t| t.count_nonzero())
            .sum()
    }
}
