use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::RunConfig;
use super::data::{DataError, DatasetBundle};
use super::export::{pareto_rows, pareto_svg, scatter_rows, write_csv};
use crate::memmodel::{deployable, MemoryReport};
use crate::microgradnet::{ParamRole, Tensor, WeightStore};
use crate::mobo::{
    derive_seed, evaluate, ledger_hypervolume, run_search, Evaluation, Ledger, PosteriorStore,
    Record, SearchData, SearchError,
};
use crate::searchspace::{build_graph, Configuration, SearchSpaceDescriptor, Task};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Export(#[from] csv::Error),
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// File layout of one search run.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("run.json")
    }

    pub fn ledger(&self) -> PathBuf {
        self.root.join("ledger.ndjson")
    }

    pub fn posteriors(&self) -> PathBuf {
        self.root.join("posteriors")
    }

    /// Wall-clock per evaluation batch; kept apart so the ledger stays
    /// reproducible.
    pub fn timings(&self) -> PathBuf {
        self.root.join("timings.ndjson")
    }

    pub fn pareto_csv(&self) -> PathBuf {
        self.root.join("pareto.csv")
    }

    pub fn pareto_svg(&self) -> PathBuf {
        self.root.join("pareto.svg")
    }

    pub fn scatter_csv(&self) -> PathBuf {
        self.root.join("scatter.csv")
    }

    pub fn load_config(&self) -> Result<RunConfig, HarnessError> {
        RunConfig::load(&self.config()).map_err(HarnessError::Config)
    }

    pub fn records(&self) -> Result<Vec<Record>, HarnessError> {
        Ledger::load(&self.ledger()).map_err(|e| HarnessError::Search(e.into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Timing {
    pub ids: Vec<usize>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub records: Vec<Record>,
    pub front: Vec<usize>,
    /// Hypervolume after each record.
    pub hypervolume: Vec<f64>,
}

pub fn search_data(bundle: &DatasetBundle) -> SearchData {
    SearchData {
        task: bundle.task(),
        train: bundle.train.clone(),
        val: bundle.val.clone(),
        test: bundle.test.clone(),
    }
}

fn check_config(cfg: &RunConfig) -> Result<(), HarnessError> {
    cfg.validate().map_err(|errs| {
        HarnessError::Config(format!("invalid run config:\n  {}", errs.join("\n  ")))
    })
}

/// Starts a run in `dir`, or continues it if `dir` already holds a run
/// with the same configuration.
pub fn start(
    cfg: &RunConfig,
    dir: &RunDir,
    stop_after: Option<usize>,
) -> Result<RunSummary, HarnessError> {
    check_config(cfg)?;
    std::fs::create_dir_all(&dir.root).map_err(io_at(&dir.root))?;
    let path = dir.config();
    if path.exists() {
        let existing = dir.load_config()?;
        if &existing != cfg {
            return Err(HarnessError::Config(format!(
                "{} holds a run with a different configuration; use resume or another directory",
                dir.root.display()
            )));
        }
    } else {
        std::fs::write(&path, cfg.to_json()).map_err(io_at(&path))?;
    }
    drive(cfg, dir, stop_after)
}

/// Continues the run stored in `dir` with its recorded configuration,
/// optionally with a different worker count.
pub fn resume(
    dir: &RunDir,
    workers: Option<usize>,
    stop_after: Option<usize>,
) -> Result<RunSummary, HarnessError> {
    let mut cfg = dir.load_config()?;
    if let Some(w) = workers {
        cfg.workers = w;
    }
    check_config(&cfg)?;
    drive(&cfg, dir, stop_after)
}

fn drive(
    cfg: &RunConfig,
    dir: &RunDir,
    stop_after: Option<usize>,
) -> Result<RunSummary, HarnessError> {
    let space = cfg.space().map_err(HarnessError::Config)?;
    let settings = cfg.settings().map_err(HarnessError::Config)?;
    let data = search_data(&cfg.load_dataset()?);
    let mut ledger = Ledger::open(&dir.ledger()).map_err(SearchError::from)?;
    for r in ledger.records() {
        let want = (
            derive_seed(cfg.seed, r.id, 0),
            derive_seed(cfg.seed, r.id, 1),
        );
        if (r.seeds.proposal, r.seeds.training) != want {
            return Err(SearchError::Mismatch(format!(
                "record {} was produced with another master seed",
                r.id
            ))
            .into());
        }
    }
    let mut store = PosteriorStore::on_disk(dir.posteriors()).map_err(io_at(&dir.posteriors()))?;
    let total = settings.plan.total();
    let end = stop_after.map_or(total, |n| (ledger.len() + n).min(total));
    let timings = dir.timings();
    while ledger.len() < end {
        let before = ledger.len();
        let t0 = Instant::now();
        let batch = settings.workers.min(end - before);
        run_search(
            &space,
            &settings,
            &data,
            &mut ledger,
            &mut store,
            Some(batch),
        )?;
        let line = serde_json::to_string(&Timing {
            ids: (before..ledger.len()).collect(),
            seconds: t0.elapsed().as_secs_f64(),
        })
        .expect("timing serializes");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&timings)
            .map_err(io_at(&timings))?;
        writeln!(f, "{line}").map_err(io_at(&timings))?;
    }
    Ok(summarize(cfg, ledger.records().to_vec()))
}

pub fn summarize(cfg: &RunConfig, records: Vec<Record>) -> RunSummary {
    let n = cfg.objectives.len();
    let norm = &cfg.search.norm[..n];
    let reference = &cfg.search.hv_reference[..n];
    let hypervolume = (1..=records.len())
        .map(|k| ledger_hypervolume(&records[..k], norm, reference))
        .collect();
    RunSummary {
        front: crate::mobo::front_ids(&records, n),
        records,
        hypervolume,
    }
}

/// Writes the Pareto CSV and SVG and the edges-versus-nonzeros scatter.
pub fn export(dir: &RunDir, n_objectives: usize) -> Result<(), HarnessError> {
    let records = dir.records()?;
    write_csv(&dir.pareto_csv(), &pareto_rows(&records, n_objectives))?;
    write_csv(&dir.scatter_csv(), &scatter_rows(&records, n_objectives))?;
    let svg = dir.pareto_svg();
    std::fs::write(&svg, pareto_svg(&records, n_objectives)).map_err(io_at(&svg))
}

/// Trains, prunes and measures one configuration on the run's dataset.
pub fn evaluate_config(
    cfg: &RunConfig,
    space: &SearchSpaceDescriptor,
    config: &Configuration,
) -> Result<Evaluation, HarnessError> {
    let settings = cfg.settings().map_err(HarnessError::Config)?;
    space.validate(config).map_err(|v| {
        let msgs: Vec<String> = v.iter().map(ToString::to_string).collect();
        HarnessError::Config(format!("invalid configuration: {}", msgs.join("; ")))
    })?;
    let data = search_data(&cfg.load_dataset()?);
    evaluate(
        space,
        config,
        &data,
        &settings.eval,
        None,
        derive_seed(cfg.seed, 0, 1),
    )
    .map_err(HarnessError::Config)
}

/// Memory of the dense, untrained network: every parameter counted as
/// stored, batchnorm folded.
pub fn dense_report(
    space: &SearchSpaceDescriptor,
    config: &Configuration,
    task: Task,
    bits: u32,
) -> Result<MemoryReport, HarnessError> {
    let graph =
        build_graph(space, config, task).map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut ws = WeightStore::<f32>::init(&graph, &mut ChaCha8Rng::seed_from_u64(0));
    for (id, node) in graph.nodes().iter().enumerate() {
        for p in graph.param_specs(id) {
            if matches!(p.role, ParamRole::Bias | ParamRole::BnShift) {
                ws.insert(
                    crate::microgradnet::key(&node.name, p.name),
                    Tensor::full(&p.shape, 0.5),
                );
            }
        }
    }
    let (dg, dw) = deployable(&graph, &ws).map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(MemoryReport::compute(&dg, &dw, bits))
}
