use rand::Rng;
use serde::{Deserialize, Serialize};

/// Error, model size and working memory of one evaluated configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ObjectiveVector {
    /// `1 - validation accuracy`.
    pub error: f64,
    pub model_size_bits: f64,
    pub working_memory_bits: f64,
}

impl ObjectiveVector {
    pub fn get(&self, k: usize) -> f64 {
        [self.error, self.model_size_bits, self.working_memory_bits][k]
    }

    /// The first `n` objectives.
    pub fn head(&self, n: usize) -> Vec<f64> {
        (0..n).map(|k| self.get(k)).collect()
    }
}

/// Which objectives the search minimizes: error and model size, or all three.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum ObjectiveSet {
    Two,
    Three,
}

impl ObjectiveSet {
    pub fn len(self) -> usize {
        match self {
            ObjectiveSet::Two => 2,
            ObjectiveSet::Three => 3,
        }
    }

    pub fn is_empty(self) -> bool {
        false
    }
}

impl TryFrom<u8> for ObjectiveSet {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            2 => Ok(ObjectiveSet::Two),
            3 => Ok(ObjectiveSet::Three),
            _ => Err(format!("objective count must be 2 or 3, got {v}")),
        }
    }
}

impl From<ObjectiveSet> for u8 {
    fn from(s: ObjectiveSet) -> u8 {
        s.len() as u8
    }
}

/// `max_k lambda_k f_k`.
pub fn scalarize(f: &[f64], lambda: &[f64]) -> f64 {
    assert_eq!(
        f.len(),
        lambda.len(),
        "objective and weight dimensions differ"
    );
    f.iter()
        .zip(lambda)
        .map(|(f, l)| f * l)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Index of the first minimizer of the scalarization over `candidates`.
pub fn scalarized_argmin(candidates: &[Vec<f64>], lambda: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let g = scalarize(c, lambda);
        if best.is_none_or(|(_, b)| g < b) {
            best = Some((i, g));
        }
    }
    best.map(|b| b.0)
}

/// Per-objective box `[lo, hi]` the scalarization weights are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LambdaPrior {
    pub bounds: Vec<(f64, f64)>,
}

impl LambdaPrior {
    pub fn unit(n: usize) -> Self {
        Self {
            bounds: vec![(0.0, 1.0); n],
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for &(lo, hi) in &self.bounds {
            if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
                return Err(format!("invalid weight box [{lo}, {hi}]"));
            }
        }
        if self.bounds.iter().all(|b| b.1 == 0.0) {
            return Err("weight boxes are all zero".into());
        }
        Ok(())
    }

    /// Uniform draw from the box, redrawn while every weight is zero.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        loop {
            let l: Vec<f64> = self
                .bounds
                .iter()
                .map(|&(lo, hi)| {
                    if hi > lo {
                        rng.random_range(lo..hi)
                    } else {
                        lo
                    }
                })
                .collect();
            if l.iter().any(|&v| v > 0.0) {
                return l;
            }
        }
    }
}

/// Error is clamped away from 0 and 1 before the logit.
pub const ERROR_CLAMP: f64 = 1e-3;

/// Surrogate-space transform: clamped logit for the error, `log1p` for sizes.
pub fn transform(k: usize, v: f64) -> f64 {
    if k == 0 {
        let p = v.clamp(ERROR_CLAMP, 1.0 - ERROR_CLAMP);
        (p / (1.0 - p)).ln()
    } else {
        v.max(0.0).ln_1p()
    }
}

pub fn untransform(k: usize, t: f64) -> f64 {
    if k == 0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        t.exp_m1().max(0.0)
    }
}
