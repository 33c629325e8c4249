use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::kernel::{Encoder, KernelHyper};
use super::ledger::{
    front_ids, Ledger, LedgerError, Metrics, Origin, Outcome, Record, Seeds, LEDGER_SCHEMA,
};
use super::objectives::{LambdaPrior, ObjectiveSet, ObjectiveVector};
use super::thompson::{thompson_select, Selection, Surrogate};
use crate::memmodel::{deployable, footprints, model_size, working_memory, WmModel, BITS_PER_KB};
use crate::microgradnet::{
    accuracy, quantize_store, ArchGraph, Dataset, TrainHyperparams, WeightStore,
};
use crate::morph::{inherit, propose_morph, stage_allowed_morphs, MorphRecord};
use crate::pruner::{
    checkpoint, prune, AnnealSchedule, CheckpointError, Method, PruneConfig, Thresholds,
};
use crate::searchspace::{build_graph, Configuration, SearchSpaceDescriptor, Task};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid search settings: {0}")]
    Settings(String),
    #[error("ledger does not belong to these settings: {0}")]
    Mismatch(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct StageSpec {
    pub budget: usize,
    /// Probability of a model-based (rather than uniform random) proposal.
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StagePlan {
    pub stages: [StageSpec; 3],
}

pub const DEFAULT_STAGE_SHARE: [f64; 3] = [0.6, 0.2, 0.2];
pub const DEFAULT_RHO: [f64; 3] = [0.7, 0.9, 0.9];

impl StagePlan {
    /// Splits `total` by the default shares; rounding slack goes to stage 1.
    pub fn split(total: usize) -> Self {
        let b2 = (total as f64 * DEFAULT_STAGE_SHARE[1]).round() as usize;
        let b3 = (total as f64 * DEFAULT_STAGE_SHARE[2]).round() as usize;
        let b1 = total.saturating_sub(b2 + b3);
        let s = |budget, rho| StageSpec { budget, rho };
        Self {
            stages: [
                s(b1, DEFAULT_RHO[0]),
                s(b2, DEFAULT_RHO[1]),
                s(b3, DEFAULT_RHO[2]),
            ],
        }
    }

    pub fn total(&self) -> usize {
        self.stages.iter().map(|s| s.budget).sum()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.total() == 0 {
            return Err("stage plan has no budget".into());
        }
        if self.stages.iter().any(|s| !(0.0..=1.0).contains(&s.rho)) {
            return Err("stage rho must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Stage (1-based) of iteration `it`, or `None` past the budget.
    pub fn stage_of(&self, it: usize) -> Option<u8> {
        let mut end = 0;
        for (m, s) in self.stages.iter().enumerate() {
            end += s.budget;
            if it < end {
                return Some(m as u8 + 1);
            }
        }
        None
    }
}

/// How a single configuration is trained, pruned and measured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvalSettings {
    pub method: Method,
    /// Multiplies the configuration's zero-regularization / annealing epochs.
    pub epoch_scale: f64,
    /// `epochs` are extra variational epochs after the schedule; `seed` is
    /// replaced per evaluation.
    pub train: TrainHyperparams,
    pub fine_tune_fraction: f64,
    pub wm_model: WmModel,
    /// Storage width used for the size objectives.
    pub bits: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SearchSettings {
    pub plan: StagePlan,
    pub objectives: ObjectiveSet,
    pub lambda: LambdaPrior,
    /// Objective normalizers applied before scalarization and hypervolume.
    pub norm: Vec<f64>,
    /// Hypervolume reference point in normalized units.
    pub hv_reference: Vec<f64>,
    pub pool_morphs: usize,
    pub pool_random: usize,
    pub gp_restarts: usize,
    pub seed: u64,
    /// Evaluations run concurrently; 1 is the deterministic serial mode.
    pub workers: usize,
    pub eval: EvalSettings,
}

impl SearchSettings {
    pub fn validate(&self) -> Result<(), String> {
        self.plan.validate()?;
        self.lambda.validate()?;
        let n = self.objectives.len();
        if self.lambda.bounds.len() != n || self.norm.len() != n || self.hv_reference.len() != n {
            return Err(format!(
                "weight boxes, normalizers and reference need {n} entries"
            ));
        }
        if self.norm.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err("normalizers must be positive".into());
        }
        if self.pool_morphs + self.pool_random == 0 {
            return Err("candidate pool is empty".into());
        }
        if self.workers == 0 {
            return Err("need at least one worker".into());
        }
        if !(self.eval.epoch_scale > 0.0) || self.eval.fine_tune_fraction < 0.0 {
            return Err("epoch scale must be positive and fine-tune fraction non-negative".into());
        }
        self.eval.train.validate().map_err(|e| e.to_string())
    }
}

/// Train / validation / test splits for one task.
#[derive(Clone, Debug)]
pub struct SearchData {
    pub task: Task,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// A trained, pruned, quantized configuration.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub graph: ArchGraph,
    /// Trained posterior over `graph`, the source for inheritance.
    pub posterior: WeightStore<f32>,
    /// Pruned, batchnorm-folded, int8-reconstructed network that was measured.
    pub deployed: (ArchGraph, WeightStore<f32>),
}

/// Trains and prunes `config` (from `init` if given, else freshly), folds
/// batchnorm, quantizes, then measures error and memory.
pub fn evaluate(
    space: &SearchSpaceDescriptor,
    config: &Configuration,
    data: &SearchData,
    eval: &EvalSettings,
    inherit_from: Option<(&ArchGraph, &WeightStore<f32>)>,
    seed: u64,
) -> Result<Evaluation, String> {
    let graph = build_graph(space, config, data.task).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (init, inherited) = match inherit_from {
        Some((rg, rphi)) => {
            let (phi, cov) = inherit(rg, rphi, &graph, eval.method, &mut rng);
            (phi, Some(cov.fraction()))
        }
        None => (WeightStore::init(&graph, &mut rng), None),
    };
    let cfg = PruneConfig {
        method: eval.method,
        schedule: AnnealSchedule::from_config(config, eval.epoch_scale),
        thresholds: Thresholds::from_config(config, &graph),
        train: TrainHyperparams {
            seed: rng.random(),
            ..eval.train.clone()
        },
        fine_tune_fraction: eval.fine_tune_fraction,
        track_validation: false,
    };
    let out = prune(&graph, &init, &data.train, &data.val, &cfg).map_err(|e| e.to_string())?;
    let (dg, dw) =
        deployable(&out.network.graph, &out.network.weights).map_err(|e| e.to_string())?;
    let dw = if eval.bits == 8 {
        quantize_store(&dw)
    } else {
        dw
    };
    let val_accuracy = accuracy(&dg, &dw, &data.val).map_err(|e| e.to_string())?;
    let test_accuracy = accuracy(&dg, &dw, &data.test).map_err(|e| e.to_string())?;
    let rows = footprints(&dg, &dw);
    let objectives = ObjectiveVector {
        error: 1.0 - val_accuracy,
        model_size_bits: model_size(&dg, &dw, eval.bits) as f64,
        working_memory_bits: working_memory(eval.wm_model, &rows, eval.bits).max_bits as f64,
    };
    let metrics = Metrics {
        objectives,
        val_accuracy,
        test_accuracy,
        edges: graph.edge_count(),
        nonzero_weights: dw.nonzero_weights(&dg),
        epochs: out.epochs,
        inherited,
    };
    Ok(Evaluation {
        metrics,
        graph,
        posterior: out.posterior,
        deployed: (dg, dw),
    })
}

/// Trained posteriors by ledger id, optionally mirrored to checkpoint files.
#[derive(Debug, Default)]
pub struct PosteriorStore {
    cache: BTreeMap<usize, (ArchGraph, WeightStore<f32>)>,
    dir: Option<PathBuf>,
}

impl PosteriorStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: PathBuf) -> std::io::Result<Self> {
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            cache: BTreeMap::new(),
            dir: Some(dir),
        })
    }

    fn path(&self, id: usize) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{id:05}.phi")))
    }

    pub fn put(
        &mut self,
        id: usize,
        graph: ArchGraph,
        phi: WeightStore<f32>,
    ) -> Result<(), CheckpointError> {
        if let Some(p) = self.path(id) {
            checkpoint::save(&p, &graph, &phi)?;
        }
        self.cache.insert(id, (graph, phi));
        Ok(())
    }

    /// Cached posterior, or the checkpoint file checked against `graph`.
    pub fn get(
        &mut self,
        id: usize,
        graph: &ArchGraph,
    ) -> Result<Option<&(ArchGraph, WeightStore<f32>)>, CheckpointError> {
        if !self.cache.contains_key(&id) {
            let Some(p) = self.path(id).filter(|p| p.exists()) else {
                return Ok(None);
            };
            let ck = checkpoint::load(&p, Some(graph))?;
            self.cache.insert(id, (graph.clone(), ck.weights));
        }
        Ok(self.cache.get(&id))
    }
}

/// Independent stream for `(seed, iteration, purpose)`.
pub fn derive_seed(seed: u64, iteration: usize, purpose: u8) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((iteration as u64).to_le_bytes());
    h.update([purpose]);
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

struct Proposal {
    stage: u8,
    origin: Origin,
    selection: Option<Selection>,
    lambda: Option<Vec<f64>>,
    config: Configuration,
}

/// Per-objective surrogates over the successful records, in the
/// configured objectives.
pub fn fit_surrogates(
    encoder: &Encoder,
    records: &[Record],
    n_objectives: usize,
    restarts: usize,
    rng: &mut impl Rng,
) -> Vec<Surrogate> {
    let ok: Vec<&Record> = records.iter().filter(|r| r.metrics().is_some()).collect();
    if ok.len() < 2 {
        return Vec::new();
    }
    let xs: Vec<_> = ok.iter().map(|r| encoder.embed(&r.config)).collect();
    (0..n_objectives)
        .filter_map(|k| {
            let ys: Vec<f64> = ok
                .iter()
                .map(|r| r.metrics().unwrap().objectives.get(k))
                .collect();
            Surrogate::fit(k, xs.clone(), &ys, KernelHyper::default(), restarts, rng)
        })
        .collect()
}

fn propose(
    space: &SearchSpaceDescriptor,
    encoder: &Encoder,
    settings: &SearchSettings,
    records: &[Record],
    stage: u8,
    rng: &mut ChaCha8Rng,
) -> Proposal {
    let spec = settings.plan.stages[stage as usize - 1];
    let n_obj = settings.objectives.len();
    let refs: Vec<usize> = if stage == 3 {
        front_ids(records, n_obj)
    } else {
        records
            .iter()
            .filter(|r| r.metrics().is_some())
            .map(|r| r.id)
            .collect()
    };
    let random = |rng: &mut ChaCha8Rng| Proposal {
        stage,
        origin: Origin::Random,
        selection: None,
        lambda: None,
        config: space.sample_random(rng),
    };
    if refs.is_empty() || rng.random::<f64>() >= spec.rho {
        return random(rng);
    }
    let allowed = stage_allowed_morphs(stage);
    let mut pool: Vec<(Configuration, Origin)> = Vec::new();
    for _ in 0..settings.pool_morphs {
        let r = refs[rng.random_range(0..refs.len())];
        if let Some((c, morphs)) = propose_morph(space, &records[r].config, &allowed, rng) {
            pool.push((
                c,
                Origin::Morph {
                    reference: r,
                    morphs,
                },
            ));
        }
    }
    for _ in 0..settings.pool_random {
        pool.push((space.sample_random(rng), Origin::Random));
    }
    if pool.is_empty() {
        return random(rng);
    }
    let surrogates = fit_surrogates(encoder, records, n_obj, settings.gp_restarts, rng);
    let lambda = settings.lambda.sample(rng);
    let embedded: Vec<_> = pool.iter().map(|(c, _)| encoder.embed(c)).collect();
    let selection = if surrogates.len() == n_obj {
        thompson_select(&surrogates, &embedded, &lambda, &settings.norm, rng)
    } else {
        thompson_select(&[], &embedded, &lambda, &settings.norm, rng)
    };
    let (config, origin) = pool.swap_remove(selection.index);
    Proposal {
        stage,
        origin,
        selection: Some(selection),
        lambda: Some(lambda),
        config,
    }
}

fn reference_posterior(
    space: &SearchSpaceDescriptor,
    task: Task,
    records: &[Record],
    store: &mut PosteriorStore,
    origin: &Origin,
) -> Result<Option<(ArchGraph, WeightStore<f32>)>, SearchError> {
    let Origin::Morph { reference, .. } = origin else {
        return Ok(None);
    };
    let graph = build_graph(space, &records[*reference].config, task)
        .map_err(|e| SearchError::Mismatch(format!("reference {reference}: {e}")))?;
    match store.get(*reference, &graph)? {
        Some(source) => Ok(Some(source.clone())),
        None => Err(SearchError::Mismatch(format!(
            "no stored posterior for reference {reference}"
        ))),
    }
}

/// Morph lineage of a record, oldest first.
pub fn lineage(records: &[Record], id: usize) -> Vec<(usize, Vec<MorphRecord>)> {
    let mut chain = Vec::new();
    let mut cur = Some(id);
    while let Some(i) = cur {
        let morphs = match &records[i].origin {
            Origin::Morph { morphs, .. } => morphs.clone(),
            Origin::Random => Vec::new(),
        };
        chain.push((i, morphs));
        cur = records[i].reference();
    }
    chain.reverse();
    chain
}

/// Runs (or continues) the search until the plan's budget is spent or
/// `stop_after` more records were appended. Every record is appended to
/// `ledger` as soon as its evaluation finishes. Returns the front ids.
pub fn run_search(
    space: &SearchSpaceDescriptor,
    settings: &SearchSettings,
    data: &SearchData,
    ledger: &mut Ledger,
    store: &mut PosteriorStore,
    stop_after: Option<usize>,
) -> Result<Vec<usize>, SearchError> {
    settings.validate().map_err(SearchError::Settings)?;
    let encoder = Encoder::new(space);
    let total = settings.plan.total();
    if ledger.len() > total {
        return Err(SearchError::Mismatch(format!(
            "{} records exceed the budget of {total}",
            ledger.len()
        )));
    }
    let end = stop_after.map_or(total, |n| (ledger.len() + n).min(total));
    while ledger.len() < end {
        let basis = ledger.len();
        let batch_end = (basis + settings.workers).min(end);
        let mut jobs = Vec::new();
        for it in basis..batch_end {
            let stage = settings.plan.stage_of(it).expect("within budget");
            let proposal_seed = derive_seed(settings.seed, it, 0);
            let mut rng = ChaCha8Rng::seed_from_u64(proposal_seed);
            let p = propose(
                space,
                &encoder,
                settings,
                &ledger.records()[..basis],
                stage,
                &mut rng,
            );
            let source = reference_posterior(space, data.task, ledger.records(), store, &p.origin)?;
            let seeds = Seeds {
                proposal: proposal_seed,
                training: derive_seed(settings.seed, it, 1),
            };
            jobs.push((it, p, source, seeds));
        }
        let results: Vec<Result<Evaluation, String>> = if jobs.len() == 1 {
            let (_, p, src, seeds) = &jobs[0];
            vec![evaluate(
                space,
                &p.config,
                data,
                &settings.eval,
                src.as_ref().map(|(g, w)| (g, w)),
                seeds.training,
            )]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = jobs
                    .iter()
                    .map(|(_, p, src, seeds)| {
                        s.spawn(move || {
                            evaluate(
                                space,
                                &p.config,
                                data,
                                &settings.eval,
                                src.as_ref().map(|(g, w)| (g, w)),
                                seeds.training,
                            )
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| {
                        h.join()
                            .unwrap_or_else(|_| Err("evaluation panicked".into()))
                    })
                    .collect()
            })
        };
        for ((it, p, _, seeds), res) in jobs.into_iter().zip(results) {
            let outcome = match res {
                Ok(ev) => {
                    store.put(it, ev.graph, ev.posterior)?;
                    Outcome::Ok(ev.metrics)
                }
                Err(error) => Outcome::Failed { error },
            };
            ledger.append(Record {
                schema: LEDGER_SCHEMA,
                id: it,
                stage: p.stage,
                origin: p.origin,
                basis,
                selection: p.selection,
                lambda: p.lambda,
                config: p.config,
                outcome,
                seeds,
            })?;
        }
    }
    Ok(front_ids(ledger.records(), settings.objectives.len()))
}

/// Kilobytes of a bit count, as printed in front tables.
pub fn kb(bits: f64) -> f64 {
    bits / BITS_PER_KB
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_plan_split_and_lookup() {
        let p = StagePlan::split(30);
        assert_eq!(p.stages.map(|s| s.budget), [18, 6, 6]);
        assert_eq!(p.stage_of(0), Some(1));
        assert_eq!(p.stage_of(17), Some(1));
        assert_eq!(p.stage_of(18), Some(2));
        assert_eq!(p.stage_of(24), Some(3));
        assert_eq!(p.stage_of(30), None);
        let degenerate = StagePlan {
            stages: [
                StageSpec {
                    budget: 1,
                    rho: 0.0,
                },
                StageSpec {
                    budget: 0,
                    rho: 0.9,
                },
                StageSpec {
                    budget: 0,
                    rho: 0.9,
                },
            ],
        };
        assert_eq!(degenerate.total(), 1);
        assert_eq!(degenerate.stage_of(1), None);
        assert_eq!(StagePlan::split(7).total(), 7);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 0, 1));
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 1, 0));
        assert_eq!(derive_seed(5, 3, 1), derive_seed(5, 3, 1));
    }
}
