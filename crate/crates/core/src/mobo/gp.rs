use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::kernel::{Embedding, KernelHyper};

/// Diagonal jitter ladder tried when a covariance is not numerically PD.
const JITTER: [f64; 6] = [0.0, 1e-12, 1e-10, 1e-8, 1e-6, 1e-4];
/// Log-hyperparameter box searched by [`Gp::fit`].
pub const HYPER_BOUNDS: [(f64, f64); 4] = [(-4.6, 4.6), (-3.0, 3.0), (-3.0, 3.0), (-13.8, 0.0)];
const FIT_STEPS: usize = 150;
const FIT_LR: f64 = 0.05;

pub fn gram(xs: &[Embedding], ys: &[Embedding], h: &KernelHyper) -> DMatrix<f64> {
    DMatrix::from_fn(xs.len(), ys.len(), |i, j| {
        let (dn, dc) = xs[i].distances(&ys[j]);
        h.covariance(dn, dc)
    })
}

/// Cholesky of `m + jitter I` with the smallest working jitter.
pub fn robust_cholesky(m: &DMatrix<f64>) -> Option<(Cholesky<f64, Dyn>, f64)> {
    JITTER.iter().find_map(|&j| {
        let mut a = m.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += j;
        }
        Cholesky::new(a).map(|c| (c, j))
    })
}

/// Zero-mean GP on targets centered by their mean, with Gaussian noise.
/// Targets that are all equal give a constant model with zero variance.
#[derive(Clone, Debug)]
pub struct Gp {
    pub hyper: KernelHyper,
    pub mean: f64,
    xs: Vec<Embedding>,
    state: Option<(Cholesky<f64, Dyn>, DVector<f64>)>,
    jitter: f64,
    lml: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Gp {
    pub fn new(xs: Vec<Embedding>, ys: &[f64], hyper: KernelHyper) -> Option<Self> {
        assert_eq!(xs.len(), ys.len());
        assert!(!ys.is_empty(), "no training targets");
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let spread = ys.iter().map(|y| (y - mean).abs()).fold(0.0, f64::max);
        if spread <= 1e-12 * mean.abs().max(1.0) {
            return Some(Self {
                hyper,
                mean: ys[0],
                xs,
                state: None,
                jitter: 0.0,
                lml: 0.0,
            });
        }
        let mut k = gram(&xs, &xs, &hyper);
        let noise = hyper.log_noise_var.exp();
        for i in 0..k.nrows() {
            k[(i, i)] += noise;
        }
        let (chol, jitter) = robust_cholesky(&k)?;
        let y = DVector::from_iterator(ys.len(), ys.iter().map(|v| v - mean));
        let alpha = chol.solve(&y);
        let n = ys.len() as f64;
        let log_det: f64 = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();
        let lml =
            -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
        Some(Self {
            hyper,
            mean,
            xs,
            state: Some((chol, alpha)),
            jitter,
            lml,
        })
    }

    pub fn is_constant(&self) -> bool {
        self.state.is_none()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.lml
    }

    /// Gradient of the log marginal likelihood in the log hyperparameters:
    /// `0.5 tr((alpha alpha^T - K^-1) dK)`.
    fn lml_grad(&self) -> [f64; 4] {
        let Some((chol, alpha)) = &self.state else {
            return [0.0; 4];
        };
        let n = self.xs.len();
        let kinv = chol.inverse();
        let w = alpha * alpha.transpose() - kinv;
        let h = &self.hyper;
        let ln = (2.0 * h.log_len_numeric).exp();
        let lc = (2.0 * h.log_len_categorical).exp();
        let mut g = [0.0; 4];
        for i in 0..n {
            for j in 0..n {
                let (dn, dc) = self.xs[i].distances(&self.xs[j]);
                let k = h.covariance(dn, dc);
                let wij = w[(i, j)];
                g[0] += wij * k;
                g[1] += wij * k * 2.0 * dn / ln;
                g[2] += wij * k * 2.0 * dc / lc;
            }
            g[3] += w[(i, i)] * h.log_noise_var.exp();
        }
        g.map(|v| 0.5 * v)
    }

    /// Marginal-likelihood ascent from `start` and `restarts` random points
    /// of [`HYPER_BOUNDS`]; keeps the best.
    pub fn fit(
        xs: Vec<Embedding>,
        ys: &[f64],
        start: KernelHyper,
        restarts: usize,
        rng: &mut impl Rng,
    ) -> Option<Self> {
        let mut best = Gp::new(xs.clone(), ys, start)?;
        if best.is_constant() {
            return Some(best);
        }
        for r in 0..=restarts {
            let init = if r == 0 {
                start.to_vec()
            } else {
                HYPER_BOUNDS.map(|(lo, hi)| rng.random_range(lo..hi))
            };
            let Some(model) = Self::ascend(&xs, ys, init) else {
                continue;
            };
            if model.lml > best.lml {
                best = model;
            }
        }
        Some(best)
    }

    fn ascend(xs: &[Embedding], ys: &[f64], init: [f64; 4]) -> Option<Self> {
        let clamp = |v: [f64; 4]| {
            let mut o = v;
            for (x, (lo, hi)) in o.iter_mut().zip(HYPER_BOUNDS) {
                *x = x.clamp(lo, hi);
            }
            o
        };
        let mut theta = clamp(init);
        let mut cur = Gp::new(xs.to_vec(), ys, KernelHyper::from_vec(theta))?;
        let mut best = cur.clone();
        let (mut m, mut v) = ([0.0; 4], [0.0; 4]);
        let (b1, b2) = (0.9f64, 0.999f64);
        for t in 1..=FIT_STEPS {
            let g = cur.lml_grad();
            for i in 0..4 {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powi(t as i32));
                let vh = v[i] / (1.0 - b2.powi(t as i32));
                theta[i] += FIT_LR * mh / (vh.sqrt() + 1e-8);
            }
            theta = clamp(theta);
            match Gp::new(xs.to_vec(), ys, KernelHyper::from_vec(theta)) {
                Some(next) if next.lml.is_finite() => cur = next,
                _ => break,
            }
            if cur.lml > best.lml {
                best = cur.clone();
            }
        }
        Some(best)
    }

    /// Joint posterior of the latent function at `pts`.
    pub fn posterior(&self, pts: &[Embedding]) -> Posterior {
        let m = pts.len();
        let Some((chol, alpha)) = &self.state else {
            return Posterior {
                mean: DVector::from_element(m, self.mean),
                cov: DMatrix::zeros(m, m),
            };
        };
        let ks = gram(&self.xs, pts, &self.hyper);
        let mean = ks.transpose() * alpha;
        let v = chol
            .l()
            .solve_lower_triangular(&ks)
            .expect("triangular factor is invertible");
        let mut cov = gram(pts, pts, &self.hyper) - v.transpose() * v;
        cov = (&cov + cov.transpose()) * 0.5;
        Posterior {
            mean: mean.add_scalar(self.mean),
            cov,
        }
    }

    /// One joint draw of the latent function at `pts`.
    pub fn sample(&self, pts: &[Embedding], rng: &mut impl Rng) -> Vec<f64> {
        let p = self.posterior(pts);
        p.sample(rng)
    }
}

impl Posterior {
    pub fn variance(&self) -> Vec<f64> {
        self.cov.diagonal().iter().map(|v| v.max(0.0)).collect()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let m = self.mean.len();
        let z = DVector::from_iterator(m, (0..m).map(|_| StandardNormal.sample(rng)));
        if self.cov.iter().all(|&c| c.abs() < 1e-300) {
            return self.mean.iter().copied().collect();
        }
        let draw = match robust_cholesky(&self.cov) {
            Some((c, _)) => &self.mean + c.l() * z,
            // Fall back to independent marginals.
            None => DVector::from_iterator(
                m,
                (0..m).map(|i| self.mean[i] + self.cov[(i, i)].max(0.0).sqrt() * z[i]),
            ),
        };
        draw.iter().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pts(xs: &[f64]) -> Vec<Embedding> {
        xs.iter()
            .map(|&x| Embedding {
                numeric: vec![x],
                categorical: vec![],
            })
            .collect()
    }

    #[test]
    fn constant_targets_give_constant_model() {
        let gp = Gp::new(
            pts(&[0.0, 1.0, 2.0]),
            &[4.0, 4.0, 4.0],
            KernelHyper::default(),
        )
        .unwrap();
        assert!(gp.is_constant());
        let p = gp.posterior(&pts(&[0.5, 9.0]));
        assert_eq!(p.mean.as_slice(), &[4.0, 4.0]);
        assert_eq!(p.variance(), vec![0.0, 0.0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let xs = pts(&[0.0, 0.3, 0.7, 1.1, 1.6, 2.0]);
        let ys = [0.1, 0.5, -0.2, 0.8, 0.3, -0.6];
        let h = KernelHyper {
            log_signal_var: 0.2,
            log_len_numeric: -0.4,
            log_len_categorical: 0.0,
            log_noise_var: -3.0,
        };
        let g = Gp::new(xs.clone(), &ys, h).unwrap().lml_grad();
        for (i, gi) in g.iter().enumerate() {
            let eps = 1e-5;
            let mut a = h.to_vec();
            let mut b = h.to_vec();
            a[i] += eps;
            b[i] -= eps;
            let fa = Gp::new(xs.clone(), &ys, KernelHyper::from_vec(a))
                .unwrap()
                .log_marginal_likelihood();
            let fb = Gp::new(xs.clone(), &ys, KernelHyper::from_vec(b))
                .unwrap()
                .log_marginal_likelihood();
            let fd = (fa - fb) / (2.0 * eps);
            assert!(
                (fd - gi).abs() < 1e-6 * fd.abs().max(1.0),
                "{i}: {fd} vs {gi}"
            );
        }
    }

    #[test]
    fn fitting_improves_likelihood() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 * 0.15).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (2.0 * x).sin()).collect();
        let start = KernelHyper {
            log_len_numeric: 2.5,
            ..Default::default()
        };
        let base = Gp::new(pts(&xs), &ys, start)
            .unwrap()
            .log_marginal_likelihood();
        let fit = Gp::fit(pts(&xs), &ys, start, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(fit.log_marginal_likelihood() > base + 1.0);
    }
}
