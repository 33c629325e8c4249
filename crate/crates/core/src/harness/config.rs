use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{
    load_csv, load_idx_dir, resize, split_dataset, synthetic_textures, DataError, DatasetBundle,
    Normalization, RawData, SplitSizes,
};
use crate::memmodel::{WmModel, BITS_PER_KB};
use crate::microgradnet::{Optimizer, TrainHyperparams};
use crate::mobo::{EvalSettings, LambdaPrior, ObjectiveSet, SearchSettings, StagePlan};
use crate::pruner::Method;
use crate::searchspace::{ParamKind, SearchSpaceDescriptor};

/// Overrides the configured output directory when set.
pub const OUTPUT_DIR_ENV: &str = "MICROSEARCH_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "format")]
pub enum DataSource {
    /// Directory of `*images*idx3*` / `*labels*idx1*` pairs, gzipped or not.
    Idx {
        path: PathBuf,
    },
    Csv {
        path: PathBuf,
    },
    SyntheticTexture {
        samples: usize,
        side: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Partition {
    pub first: Vec<usize>,
    pub second: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Area-averaged resize to `side x side` before splitting.
    #[serde(default)]
    pub resize: Option<usize>,
    #[serde(default = "default_norm")]
    pub normalize: Normalization,
    /// Relabel to two classes after splitting.
    #[serde(default)]
    pub binarize: Option<Partition>,
    pub splits: SplitSizes,
}

fn default_norm() -> Normalization {
    Normalization::PerFeature
}

/// Upper bounds that shrink the catalog for desk-scale runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct SpaceLimits {
    #[serde(default)]
    pub max_filters: Option<i64>,
    #[serde(default)]
    pub max_fc_weights: Option<i64>,
}

impl SpaceLimits {
    pub fn apply(&self, mut space: SearchSpaceDescriptor) -> Result<SearchSpaceDescriptor, String> {
        for p in &mut space.parameters {
            let cap = if p.name.starts_with("num-filters") {
                self.max_filters
            } else if p.name == "total-fc-layer-weights" {
                self.max_fc_weights
            } else {
                None
            };
            if let (Some(cap), ParamKind::Int { lo, hi, step }) = (cap, &mut p.kind) {
                if cap < *lo {
                    return Err(format!("{}: cap {cap} is below the minimum {lo}", p.name));
                }
                *hi = (*hi).min(*lo + (cap - *lo) / *step * *step);
            }
        }
        Ok(space)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainingConfig {
    pub method: Method,
    /// Multiplies the configuration's schedule epochs.
    pub epoch_scale: f64,
    /// Variational epochs after the schedule.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub fine_tune_fraction: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            method: Method::Spvd,
            epoch_scale: 0.2,
            epochs: 2,
            batch_size: 64,
            learning_rate: 3e-3,
            fine_tune_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct SearchTuning {
    pub pool_morphs: usize,
    pub pool_random: usize,
    pub gp_restarts: usize,
    /// Per-objective weight box; unit boxes when absent.
    #[serde(default)]
    pub lambda: Option<LambdaPrior>,
    /// Objective normalizers (error, bits, bits).
    pub norm: [f64; 3],
    pub hv_reference: [f64; 3],
}

impl Default for SearchTuning {
    fn default() -> Self {
        let kb64 = 64.0 * BITS_PER_KB;
        Self {
            pool_morphs: 64,
            pool_random: 16,
            gp_restarts: 2,
            lambda: None,
            norm: [1.0, kb64, kb64],
            hv_reference: [1.0, 1.0, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub objectives: ObjectiveSet,
    /// 1: input + weights resident; 2: input + output resident.
    pub wm_model: u8,
    /// Total evaluations; split 60/20/20 when `stages` is absent.
    pub budget: usize,
    #[serde(default)]
    pub stages: Option<StagePlan>,
    pub seed: u64,
    #[serde(default = "one")]
    pub workers: usize,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub space: SpaceLimits,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub search: SearchTuning,
}

fn one() -> usize {
    1
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| format!("run config: {e}"))
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Built-in desk-scale setups: `mnist-8x8`, `mnist-14x14`,
    /// `mnist-binary-8x8` (digits 0-4 vs 5-9) and `texture`.
    pub fn preset(name: &str) -> Option<Self> {
        let mnist = |side: usize, binary: bool| DatasetConfig {
            source: DataSource::Idx {
                path: PathBuf::from("data/mnist-5k"),
            },
            resize: Some(side),
            normalize: Normalization::PerFeature,
            binarize: binary.then(|| Partition {
                first: (0..5).collect(),
                second: (5..10).collect(),
            }),
            splits: SplitSizes {
                train: 2000,
                val: 500,
                test: 1000,
            },
        };
        let dataset = match name {
            "mnist-8x8" => mnist(8, false),
            "mnist-14x14" => mnist(14, false),
            "mnist-binary-8x8" => mnist(8, true),
            "texture" => DatasetConfig {
                source: DataSource::SyntheticTexture {
                    samples: 1200,
                    side: 16,
                },
                resize: None,
                normalize: Normalization::PerFeature,
                binarize: None,
                splits: SplitSizes {
                    train: 800,
                    val: 200,
                    test: 200,
                },
            },
            _ => return None,
        };
        Some(Self {
            dataset,
            objectives: ObjectiveSet::Three,
            wm_model: 1,
            budget: 30,
            stages: None,
            seed: 0,
            workers: 1,
            output_dir: PathBuf::from(format!("runs/{name}")),
            space: SpaceLimits {
                max_filters: Some(16),
                max_fc_weights: Some(20_000),
            },
            training: TrainingConfig::default(),
            search: SearchTuning::default(),
        })
    }

    pub fn wm(&self) -> Result<WmModel, String> {
        WmModel::from_index(self.wm_model)
            .ok_or_else(|| format!("wm-model must be 1 or 2, got {}", self.wm_model))
    }

    pub fn plan(&self) -> StagePlan {
        self.stages
            .clone()
            .unwrap_or_else(|| StagePlan::split(self.budget))
    }

    /// The environment override, else the configured directory.
    pub fn output_dir(&self) -> PathBuf {
        std::env::var_os(OUTPUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_dir.clone())
    }

    pub fn space(&self) -> Result<SearchSpaceDescriptor, String> {
        self.space.apply(SearchSpaceDescriptor::standard())
    }

    pub fn settings(&self) -> Result<SearchSettings, String> {
        let n = self.objectives.len();
        let t = &self.training;
        let s = SearchSettings {
            plan: self.plan(),
            objectives: self.objectives,
            lambda: self
                .search
                .lambda
                .clone()
                .unwrap_or_else(|| LambdaPrior::unit(n)),
            norm: self.search.norm[..n].to_vec(),
            hv_reference: self.search.hv_reference[..n].to_vec(),
            pool_morphs: self.search.pool_morphs,
            pool_random: self.search.pool_random,
            gp_restarts: self.search.gp_restarts,
            seed: self.seed,
            workers: self.workers,
            eval: EvalSettings {
                method: t.method,
                epoch_scale: t.epoch_scale,
                train: TrainHyperparams {
                    epochs: t.epochs,
                    batch_size: t.batch_size,
                    learning_rate: t.learning_rate,
                    optimizer: Optimizer::Adam,
                    seed: 0,
                },
                fine_tune_fraction: t.fine_tune_fraction,
                wm_model: self.wm()?,
                bits: 8,
            },
        };
        s.validate()?;
        Ok(s)
    }

    /// Every problem found, for one diagnostic message.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut errs = Vec::new();
        match &self.dataset.source {
            DataSource::Idx { path } | DataSource::Csv { path } => {
                if !path.exists() {
                    errs.push(format!("dataset path {} does not exist", path.display()));
                }
            }
            DataSource::SyntheticTexture { samples, side } => {
                if *samples == 0 || *side < 4 {
                    errs.push("synthetic textures need samples > 0 and side >= 4".into());
                }
            }
        }
        if self.dataset.resize == Some(0) {
            errs.push("resize side must be positive".into());
        }
        if let Some(s) = &self.stages {
            if s.total() != self.budget {
                errs.push(format!(
                    "stage budgets sum to {} but budget is {}",
                    s.total(),
                    self.budget
                ));
            }
        }
        if self.budget == 0 {
            errs.push("budget must be positive".into());
        }
        if let Err(e) = self.wm() {
            errs.push(e);
        }
        if let Err(e) = self.space() {
            errs.push(e);
        }
        if let Err(e) = self.settings() {
            if !errs.contains(&e) && self.budget > 0 {
                errs.push(e);
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    pub fn load_raw(&self) -> Result<RawData, DataError> {
        let raw = match &self.dataset.source {
            DataSource::Idx { path } => load_idx_dir(path)?,
            DataSource::Csv { path } => load_csv(path)?,
            DataSource::SyntheticTexture { samples, side } => {
                synthetic_textures(*samples, *side, self.seed)
            }
        };
        Ok(match self.dataset.resize {
            Some(side) => resize(&raw, side),
            None => raw,
        })
    }

    /// Splits are drawn from the master seed.
    pub fn load_dataset(&self) -> Result<DatasetBundle, DataError> {
        let raw = self.load_raw()?;
        let b = split_dataset(&raw, self.dataset.splits, self.dataset.normalize, self.seed)?;
        match &self.dataset.binarize {
            Some(p) => b.binarize(&p.first, &p.second),
            None => Ok(b),
        }
    }
}
