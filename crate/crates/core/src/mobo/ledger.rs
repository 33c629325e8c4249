//! Append-only evaluation ledger, persisted as newline-delimited JSON.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::objectives::ObjectiveVector;
use super::pareto::{hypervolume, pareto_front};
use super::thompson::Selection;
use crate::morph::MorphRecord;
use crate::searchspace::Configuration;

pub const LEDGER_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("ledger line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("ledger record {id}: {msg}")]
    Invariant { id: usize, msg: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Origin {
    /// Uniform draw from the search space.
    Random,
    Morph {
        reference: usize,
        morphs: Vec<MorphRecord>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Metrics {
    pub objectives: ObjectiveVector,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    /// Weight entries of the unpruned graph.
    pub edges: usize,
    /// Nonzero weight entries after pruning.
    pub nonzero_weights: usize,
    pub epochs: usize,
    /// Fraction of the posterior inherited from the reference.
    pub inherited: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "status")]
pub enum Outcome {
    Ok(Metrics),
    /// Worst case on every objective; excluded from fitting and fronts.
    Failed {
        error: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Seeds {
    pub proposal: u64,
    pub training: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Record {
    pub schema: u32,
    pub id: usize,
    pub stage: u8,
    pub origin: Origin,
    /// Number of earlier records the proposal was made from.
    pub basis: usize,
    /// Set when the candidate came out of a Thompson-sampled pool.
    pub selection: Option<Selection>,
    pub lambda: Option<Vec<f64>>,
    pub config: Configuration,
    pub outcome: Outcome,
    pub seeds: Seeds,
}

impl Record {
    pub fn metrics(&self) -> Option<&Metrics> {
        match &self.outcome {
            Outcome::Ok(m) => Some(m),
            Outcome::Failed { .. } => None,
        }
    }

    pub fn reference(&self) -> Option<usize> {
        match &self.origin {
            Origin::Morph { reference, .. } => Some(*reference),
            Origin::Random => None,
        }
    }
}

/// Ids of the Pareto-optimal successful records among `records`, in the
/// first `n_objectives` objectives.
pub fn front_ids(records: &[Record], n_objectives: usize) -> Vec<usize> {
    let ok: Vec<(usize, Vec<f64>)> = records
        .iter()
        .filter_map(|r| r.metrics().map(|m| (r.id, m.objectives.head(n_objectives))))
        .collect();
    let pts: Vec<Vec<f64>> = ok.iter().map(|p| p.1.clone()).collect();
    pareto_front(&pts).into_iter().map(|i| ok[i].0).collect()
}

/// Hypervolume of the successful records' objectives, each divided by
/// `norm`, against `reference`.
pub fn ledger_hypervolume(records: &[Record], norm: &[f64], reference: &[f64]) -> f64 {
    let pts: Vec<Vec<f64>> = records
        .iter()
        .filter_map(Record::metrics)
        .map(|m| {
            norm.iter()
                .enumerate()
                .map(|(k, n)| m.objectives.get(k) / n)
                .collect()
        })
        .collect();
    hypervolume(&pts, reference)
}

#[derive(Debug, Default)]
pub struct Ledger {
    records: Vec<Record>,
    file: Option<(PathBuf, File)>,
}

impl Ledger {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (creating if needed) a ledger file. A final line cut short by
    /// an interruption is dropped and truncated away.
    pub fn open(path: &Path) -> Result<Self, LedgerError> {
        let mut records = Vec::new();
        let mut valid_len = 0u64;
        if path.exists() {
            let mut reader = BufReader::new(File::open(path)?);
            let mut line = String::new();
            let mut n = 0;
            loop {
                line.clear();
                let read = reader.read_line(&mut line)?;
                if read == 0 {
                    break;
                }
                n += 1;
                if !line.ends_with('\n') {
                    break;
                }
                let rec: Record =
                    serde_json::from_str(line.trim_end()).map_err(|e| LedgerError::Parse {
                        line: n,
                        msg: e.to_string(),
                    })?;
                Self::check(&records, &rec)?;
                records.push(rec);
                valid_len += read as u64;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        if file.metadata()?.len() != valid_len {
            file.set_len(valid_len)?;
        }
        Ok(Self {
            records,
            file: Some((path.to_path_buf(), file)),
        })
    }

    pub fn load(path: &Path) -> Result<Vec<Record>, LedgerError> {
        let text = std::fs::read_to_string(path)?;
        let mut records = Vec::new();
        for (i, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let rec: Record = serde_json::from_str(line).map_err(|e| LedgerError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            Self::check(&records, &rec)?;
            records.push(rec);
        }
        Ok(records)
    }

    fn check(prior: &[Record], rec: &Record) -> Result<(), LedgerError> {
        let fail = |msg: String| Err(LedgerError::Invariant { id: rec.id, msg });
        if rec.schema != LEDGER_SCHEMA {
            return fail(format!("schema {} (expected {LEDGER_SCHEMA})", rec.schema));
        }
        if rec.id != prior.len() {
            return fail(format!("expected id {}", prior.len()));
        }
        if rec.basis > rec.id {
            return fail("proposal basis lies in the future".into());
        }
        if let Some(r) = rec.reference() {
            if r >= rec.basis || prior[r].metrics().is_none() {
                return fail(format!("reference {r} is not an earlier successful record"));
            }
        }
        Ok(())
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|f| f.0.as_path())
    }

    /// Appends and, for file-backed ledgers, writes and syncs one line.
    pub fn append(&mut self, rec: Record) -> Result<(), LedgerError> {
        Self::check(&self.records, &rec)?;
        if let Some((_, f)) = &mut self.file {
            let mut line = serde_json::to_string(&rec).expect("record serializes");
            line.push('\n');
            f.write_all(line.as_bytes())?;
            f.sync_data()?;
        }
        self.records.push(rec);
        Ok(())
    }
}
