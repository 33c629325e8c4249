//! Multi-objective Bayesian search: GP surrogates per objective, random
//! scalarizations, Thompson sampling over pools of morphed candidates, and
//! Pareto-front bookkeeping across three stages.

mod gp;
mod kernel;
mod ledger;
mod objectives;
mod pareto;
mod search;
mod thompson;

pub use gp::{gram, robust_cholesky, Gp, Posterior, HYPER_BOUNDS};
pub use kernel::{Embedding, Encoder, KernelHyper};
pub use ledger::{
    front_ids, ledger_hypervolume, Ledger, LedgerError, Metrics, Origin, Outcome, Record, Seeds,
    LEDGER_SCHEMA,
};
pub use objectives::{
    scalarize, scalarized_argmin, transform, untransform, LambdaPrior, ObjectiveSet,
    ObjectiveVector, ERROR_CLAMP,
};
pub use pareto::{dominates, hypervolume, pareto_front};
pub use search::{
    derive_seed, evaluate, fit_surrogates, kb, lineage, run_search, EvalSettings, Evaluation,
    PosteriorStore, SearchData, SearchError, SearchSettings, StagePlan, StageSpec, DEFAULT_RHO,
    DEFAULT_STAGE_SHARE,
};
pub use thompson::{thompson_select, Selection, Surrogate};
