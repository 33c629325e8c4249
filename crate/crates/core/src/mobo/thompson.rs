use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gp::Gp;
use super::kernel::{Embedding, KernelHyper};
use super::objectives::{scalarize, transform, untransform};

/// GP over one objective in its transformed, standardized space.
#[derive(Clone, Debug)]
pub struct Surrogate {
    pub objective: usize,
    pub gp: Gp,
    pub shift: f64,
    pub scale: f64,
}

impl Surrogate {
    /// `values` are raw objective values of successful evaluations.
    pub fn fit(
        objective: usize,
        xs: Vec<Embedding>,
        values: &[f64],
        start: KernelHyper,
        restarts: usize,
        rng: &mut impl Rng,
    ) -> Option<Self> {
        let t: Vec<f64> = values.iter().map(|&v| transform(objective, v)).collect();
        if t.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let shift = t.iter().sum::<f64>() / t.len() as f64;
        let var = t.iter().map(|v| (v - shift).powi(2)).sum::<f64>() / t.len() as f64;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        let z: Vec<f64> = t.iter().map(|v| (v - shift) / scale).collect();
        let gp = Gp::fit(xs, &z, start, restarts, rng)?;
        Some(Self {
            objective,
            gp,
            shift,
            scale,
        })
    }

    /// Joint draw over `pts`, mapped back to the raw objective scale.
    pub fn sample(&self, pts: &[Embedding], rng: &mut impl Rng) -> Vec<f64> {
        self.gp
            .sample(pts, rng)
            .into_iter()
            .map(|z| untransform(self.objective, z * self.scale + self.shift))
            .collect()
    }

    /// Posterior means on the raw scale.
    pub fn mean(&self, pts: &[Embedding]) -> Vec<f64> {
        let p = self.gp.posterior(pts);
        p.mean
            .iter()
            .map(|z| untransform(self.objective, z * self.scale + self.shift))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Selection {
    pub index: usize,
    /// No usable posterior draw; the index was drawn uniformly.
    pub random_fallback: bool,
}

/// One posterior draw per objective over the pool, each divided by
/// `norm[k]` and scalarized with `lambda`; returns the first minimizer.
pub fn thompson_select(
    surrogates: &[Surrogate],
    pool: &[Embedding],
    lambda: &[f64],
    norm: &[f64],
    rng: &mut impl Rng,
) -> Selection {
    assert!(!pool.is_empty(), "empty candidate pool");
    if surrogates.is_empty() {
        return Selection {
            index: rng.random_range(0..pool.len()),
            random_fallback: true,
        };
    }
    let draws: Vec<Vec<f64>> = surrogates.iter().map(|s| s.sample(pool, rng)).collect();
    let mut best: Option<(usize, f64)> = None;
    for i in 0..pool.len() {
        let f: Vec<f64> = draws.iter().zip(norm).map(|(d, n)| d[i] / n).collect();
        let g = scalarize(&f, lambda);
        if g.is_finite() && best.is_none_or(|(_, b)| g < b) {
            best = Some((i, g));
        }
    }
    match best {
        Some((index, _)) => Selection {
            index,
            random_fallback: false,
        },
        None => Selection {
            index: rng.random_range(0..pool.len()),
            random_fallback: true,
        },
    }
}
