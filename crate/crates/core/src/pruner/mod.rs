//! Variational pruning: per-weight sparse variational dropout and grouped
//! Bayesian compression, with annealed regularization, threshold masks and a
//! short masked fine-tune.

pub mod checkpoint;
mod kl;
mod mask;

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::microgradnet::{
    accuracy, backward, forward, key, run_epoch, softmax_cross_entropy, Adam, ArchGraph, Dataset,
    EpochOptions, Grads, LayerSpec, NnError, ParamRole, RunOptions, Scalar, Tensor,
    TrainHyperparams, WeightStore, GROUP_LOG_SIGMA2, GROUP_MU, LOG_SIGMA2_SUFFIX,
};
use crate::searchspace::{layer_threshold, Configuration};

pub use checkpoint::{Checkpoint, CheckpointError};
pub use kl::{
    add_kl_grad, kl_divergence, kl_log_uniform, kl_log_uniform_grad, log_alpha, K1, K2, K3,
};
pub use mask::{
    extract_mask_bc, extract_mask_spvd, layer_nonzeros, nonzero_groups, PrunedNetwork, Thresholds,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Unstructured: one variance per weight.
    Spvd,
    /// Structured: shared scales per output map / FC input neuron.
    Bc,
}

/// `log beta` given to weights that have no inherited variance.
pub const INIT_LOG_BETA: f64 = -6.0;
pub const FINE_TUNE_FRACTION: f64 = 0.1;

/// gamma = 0 for `zero_epochs`, then a linear ramp to `gamma_final` over
/// `anneal_epochs`, then constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct AnnealSchedule {
    pub zero_epochs: usize,
    pub anneal_epochs: usize,
    pub gamma_final: f64,
}

impl AnnealSchedule {
    /// With `pretraining` the zero-regularization phase runs and gamma then
    /// steps to its final value; without it gamma ramps from the first epoch.
    /// Epoch counts are multiplied by `scale` (rounded, at least 1 when the
    /// phase is present).
    pub fn from_config(config: &Configuration, scale: f64) -> Self {
        let scaled = |v: i64| ((v as f64 * scale).round() as usize).max(1);
        let gamma_final = config.real("alpha").unwrap_or(1.0);
        if config.bool("pretraining").unwrap_or(true) {
            Self {
                zero_epochs: scaled(config.int("zero-regularization-epochs").unwrap_or(5)),
                anneal_epochs: 0,
                gamma_final,
            }
        } else {
            Self {
                zero_epochs: 0,
                anneal_epochs: scaled(config.int("annealing-epochs").unwrap_or(15)),
                gamma_final,
            }
        }
    }

    pub fn gamma(&self, epoch: usize) -> f64 {
        anneal_gamma(epoch, self)
    }

    pub fn len(&self) -> usize {
        self.zero_epochs + self.anneal_epochs
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn anneal_gamma(epoch: usize, s: &AnnealSchedule) -> f64 {
    if epoch < s.zero_epochs {
        0.0
    } else if epoch >= s.zero_epochs + s.anneal_epochs {
        s.gamma_final
    } else {
        s.gamma_final * (epoch - s.zero_epochs) as f64 / s.anneal_epochs as f64
    }
}

impl Thresholds {
    /// Searched per-convolution thresholds; FC layers use the fixed default.
    pub fn from_config(config: &Configuration, graph: &ArchGraph) -> Self {
        let per_node = graph
            .nodes()
            .iter()
            .filter(|n| n.op.is_weighted())
            .map(|n| (n.name.clone(), layer_threshold(config, &n.name)))
            .collect();
        Self {
            per_node,
            default: crate::searchspace::FC_THRESHOLD,
        }
    }
}

fn group_count(op: &LayerSpec, graph: &ArchGraph, id: usize) -> Option<usize> {
    match op {
        LayerSpec::Conv2d { out_channels, .. }
        | LayerSpec::DownsampledConv2d { out_channels, .. }
        | LayerSpec::SeparableConv2d { out_channels, .. } => Some(*out_channels),
        LayerSpec::FullyConnected { .. } => graph.param_specs(id).first().map(|p| p.shape[0]),
        _ => None,
    }
}

/// Adds missing variational parameters: per-weight `log sigma^2` at
/// `log beta = -6` and, for grouped pruning, unit group scales at the same
/// `log alpha`. Entries already present (inherited) are kept.
pub fn init_posterior<T: Scalar>(
    graph: &ArchGraph,
    ws: &WeightStore<T>,
    method: Method,
) -> WeightStore<T> {
    let mut phi = ws.clone();
    for (id, node) in graph.nodes().iter().enumerate() {
        for p in graph
            .param_specs(id)
            .into_iter()
            .filter(|p| p.role == ParamRole::Weight)
        {
            let k = key(&node.name, p.name);
            let ls_key = format!("{k}{LOG_SIGMA2_SUFFIX}");
            if phi.contains(&ls_key) {
                continue;
            }
            let Some(mu) = phi.get(&k) else { continue };
            let ls = mu.map(|m| {
                let m = m.to_f64().unwrap_or(0.0);
                T::lit(INIT_LOG_BETA + (m * m + kl::MU_SQ_FLOOR).ln())
            });
            phi.insert(ls_key, ls);
        }
        if method == Method::Bc {
            let Some(groups) = group_count(&node.op, graph, id) else {
                continue;
            };
            if !phi.contains(&key(&node.name, GROUP_MU)) {
                phi.insert(key(&node.name, GROUP_MU), Tensor::full(&[groups], T::one()));
            }
            if !phi.contains(&key(&node.name, GROUP_LOG_SIGMA2)) {
                phi.insert(
                    key(&node.name, GROUP_LOG_SIGMA2),
                    Tensor::full(&[groups], T::lit(INIT_LOG_BETA)),
                );
            }
        }
    }
    phi
}

/// One-sample estimate of `CE + gamma * KL / n_train` on a batch, with its
/// gradient in every parameter (posterior noise drawn from `rng`,
/// batchnorm in training mode).
#[allow(clippy::too_many_arguments)]
pub fn variational_objective<T: Scalar>(
    graph: &ArchGraph,
    phi: &WeightStore<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    gamma: f64,
    n_train: usize,
    method: Method,
    rng: &mut dyn RngCore,
) -> Result<(f64, Grads<T>), NnError> {
    let fwd = forward(
        graph,
        phi,
        batch,
        RunOptions {
            train: true,
            sample: Some(rng),
            instrument: false,
        },
    )?;
    let (ce, d) = softmax_cross_entropy(&fwd.logits, labels);
    let mut grads = backward(graph, phi, &fwd, &d)?;
    let reg = add_kl_grad(
        graph,
        phi,
        method,
        gamma / n_train.max(1) as f64,
        &mut grads,
    );
    let loss = ce + reg;
    if !loss.is_finite() {
        return Err(NnError::Diverged { epoch: 0 });
    }
    Ok((loss, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct PruneConfig {
    pub method: Method,
    pub schedule: AnnealSchedule,
    pub thresholds: Thresholds,
    /// `epochs` counts the variational epochs after the schedule, at the
    /// final gamma.
    pub train: TrainHyperparams,
    pub fine_tune_fraction: f64,
    /// Record posterior-mean validation accuracy after every variational epoch.
    pub track_validation: bool,
}

impl PruneConfig {
    pub fn variational_epochs(&self) -> usize {
        self.schedule.len() + self.train.epochs
    }

    pub fn fine_tune_epochs(&self) -> usize {
        (self.fine_tune_fraction * self.variational_epochs() as f64).ceil() as usize
    }
}

#[derive(Clone, Debug)]
pub struct PruneOutcome {
    pub network: PrunedNetwork,
    /// Trained posterior on the unpruned graph, for inheritance.
    pub posterior: WeightStore<f32>,
    pub pre_prune_accuracy: f64,
    pub val_accuracy: f64,
    pub val_curve: Vec<f64>,
    pub epochs: usize,
}

/// Variational training under the annealed prior, mask extraction, then a
/// masked fine-tune. `init` may carry inherited posterior parameters.
pub fn prune(
    graph: &ArchGraph,
    init: &WeightStore<f32>,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &PruneConfig,
) -> Result<PruneOutcome, NnError> {
    cfg.train.validate()?;
    init.check_against(graph)?;
    let mut phi = init_posterior(graph, init, cfg.method);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut adam = Adam::new(cfg.train.learning_rate);
    let n = train_set.len();
    let total = cfg.variational_epochs();
    let mut val_curve = Vec::new();
    for epoch in 0..total {
        let gamma = cfg.schedule.gamma(epoch);
        let reg = |ws: &WeightStore<f32>, g: &mut Grads<f32>| {
            add_kl_grad(graph, ws, cfg.method, gamma / n.max(1) as f64, g)
        };
        let opts = EpochOptions {
            sample: true,
            regularizer: (gamma > 0.0).then_some(&reg as _),
            frozen: None,
        };
        run_epoch(
            graph,
            &mut phi,
            &mut adam,
            train_set,
            cfg.train.batch_size,
            &mut rng,
            &opts,
            epoch,
        )?;
        if cfg.track_validation {
            val_curve.push(accuracy(graph, &phi, val_set)?);
        }
    }
    let pre_prune_accuracy = match val_curve.last() {
        Some(&a) => a,
        None => accuracy(graph, &phi, val_set)?,
    };
    let mut network = match cfg.method {
        Method::Spvd => extract_mask_spvd(graph, &phi, &cfg.thresholds),
        Method::Bc => extract_mask_bc(graph, &phi, &cfg.thresholds)?,
    };
    let tune = cfg.fine_tune_epochs();
    let mut adam = Adam::new(cfg.train.learning_rate);
    let opts = EpochOptions {
        sample: false,
        regularizer: None,
        frozen: Some(&network.masks),
    };
    for epoch in 0..tune {
        run_epoch(
            &network.graph,
            &mut network.weights,
            &mut adam,
            train_set,
            cfg.train.batch_size,
            &mut rng,
            &opts,
            total + epoch,
        )?;
    }
    let val_accuracy = accuracy(&network.graph, &network.weights, val_set)?;
    Ok(PruneOutcome {
        network,
        posterior: phi,
        pre_prune_accuracy,
        val_accuracy,
        val_curve,
        epochs: total + tune,
    })
}

/// Survivor counts per masked tensor.
pub fn mask_survivors(masks: &BTreeMap<String, Vec<bool>>) -> BTreeMap<String, usize> {
    masks
        .iter()
        .map(|(k, m)| (k.clone(), m.iter().filter(|&&b| b).count()))
        .collect()
}
