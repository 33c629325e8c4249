//! Covariance over mixed, conditionally active parameters.
//!
//! Numeric values (normalized to [0, 1]) contribute the squared chord
//! distance of an arc embedding, `4 sin^2(pi/4 * |u - v|)`; categorical
//! values contribute 1 on mismatch. A parameter inactive in both
//! configurations contributes 0, and one active in exactly one contributes a
//! fixed penalty (1 numeric, 1/2 categorical). Both distances are squared
//! Euclidean distances of an embedding (active numeric value to a point on
//! a unit arc, categorical value to a scaled one-hot vector, inactive to the
//! origin), so the squared-exponential kernel below is positive definite.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_4};

use serde::{Deserialize, Serialize};

use crate::searchspace::{Condition, Configuration, ParamKind, SearchSpaceDescriptor, Value};

#[derive(Clone, Debug, PartialEq)]
enum Dim {
    Numeric { name: String, lo: f64, hi: f64 },
    Categorical { name: String, choices: Vec<Value> },
}

/// Values of parameters whose activation condition fails are ignored.
#[derive(Clone, Debug, PartialEq)]
struct Slot {
    dim: Dim,
    active_if: Condition,
}

/// Log-scale kernel hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct KernelHyper {
    pub log_signal_var: f64,
    pub log_len_numeric: f64,
    pub log_len_categorical: f64,
    pub log_noise_var: f64,
}

impl Default for KernelHyper {
    fn default() -> Self {
        Self {
            log_signal_var: 0.0,
            log_len_numeric: 0.0,
            log_len_categorical: 0.0,
            log_noise_var: (1e-4f64).ln(),
        }
    }
}

impl KernelHyper {
    pub fn to_vec(self) -> [f64; 4] {
        [
            self.log_signal_var,
            self.log_len_numeric,
            self.log_len_categorical,
            self.log_noise_var,
        ]
    }

    pub fn from_vec(v: [f64; 4]) -> Self {
        Self {
            log_signal_var: v[0],
            log_len_numeric: v[1],
            log_len_categorical: v[2],
            log_noise_var: v[3],
        }
    }

    /// Covariance from the two summed squared distances.
    pub fn covariance(&self, d_num: f64, d_cat: f64) -> f64 {
        let ln = (2.0 * self.log_len_numeric).exp();
        let lc = (2.0 * self.log_len_categorical).exp();
        self.log_signal_var.exp() * (-d_num / ln - d_cat / lc).exp()
    }
}

/// A configuration embedded for the kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub numeric: Vec<f64>,
    pub categorical: Vec<f64>,
}

impl Embedding {
    /// Squared distances `(numeric, categorical)`.
    pub fn distances(&self, other: &Embedding) -> (f64, f64) {
        let sq =
            |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        (
            sq(&self.numeric, &other.numeric),
            sq(&self.categorical, &other.categorical),
        )
    }
}

const UNIT_ARC: f64 = 0.5;

/// Maps configurations of one search space to kernel dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    dims: Vec<Slot>,
}

impl Encoder {
    pub fn new(space: &SearchSpaceDescriptor) -> Self {
        let dims = space
            .parameters
            .iter()
            .map(|p| {
                let dim = match &p.kind {
                    ParamKind::Bool => Dim::Categorical {
                        name: p.name.clone(),
                        choices: vec![Value::Bool(false), Value::Bool(true)],
                    },
                    ParamKind::Categorical { choices } => Dim::Categorical {
                        name: p.name.clone(),
                        choices: choices.iter().map(|c| Value::Cat(c.clone())).collect(),
                    },
                    kind => {
                        let (lo, hi) = kind.numeric_bounds().unwrap_or((0.0, 1.0));
                        Dim::Numeric {
                            name: p.name.clone(),
                            lo,
                            hi,
                        }
                    }
                };
                Slot {
                    dim,
                    active_if: p.active_if.clone(),
                }
            })
            .collect();
        Self { dims }
    }

    fn unit(v: &Value, lo: f64, hi: f64) -> Option<f64> {
        let x = match v {
            Value::Int(i) => *i as f64,
            Value::Real(r) => *r,
            _ => return None,
        };
        Some(if hi > lo {
            ((x - lo) / (hi - lo)).clamp(0.0, 1.0)
        } else {
            0.0
        })
    }

    fn value<'a>(slot: &Slot, c: &'a Configuration, name: &str) -> Option<&'a Value> {
        c.get(name).filter(|_| slot.active_if.holds(&c.values))
    }

    pub fn embed(&self, c: &Configuration) -> Embedding {
        let mut e = Embedding {
            numeric: Vec::new(),
            categorical: Vec::new(),
        };
        for slot in &self.dims {
            match &slot.dim {
                Dim::Numeric { name, lo, hi } => {
                    match Self::value(slot, c, name).and_then(|v| Self::unit(v, *lo, *hi)) {
                        Some(u) => {
                            let a = UNIT_ARC * std::f64::consts::PI * u;
                            e.numeric.extend([a.sin(), a.cos()]);
                        }
                        None => e.numeric.extend([0.0, 0.0]),
                    }
                }
                Dim::Categorical { name, choices } => {
                    let v = Self::value(slot, c, name);
                    e.categorical.extend(choices.iter().map(|ch| {
                        if Some(ch) == v {
                            FRAC_1_SQRT_2
                        } else {
                            0.0
                        }
                    }));
                }
            }
        }
        e
    }

    /// Direct evaluation from parameter values.
    pub fn kernel_eval(&self, a: &Configuration, b: &Configuration, h: &KernelHyper) -> f64 {
        let (mut d_num, mut d_cat) = (0.0, 0.0);
        for slot in &self.dims {
            match &slot.dim {
                Dim::Numeric { name, lo, hi } => {
                    let ua = Self::value(slot, a, name).and_then(|v| Self::unit(v, *lo, *hi));
                    let ub = Self::value(slot, b, name).and_then(|v| Self::unit(v, *lo, *hi));
                    d_num += match (ua, ub) {
                        (Some(x), Some(y)) => 4.0 * (FRAC_PI_4 * (x - y).abs()).sin().powi(2),
                        (None, None) => 0.0,
                        _ => 1.0,
                    };
                }
                Dim::Categorical { name, .. } => {
                    d_cat += match (Self::value(slot, a, name), Self::value(slot, b, name)) {
                        (Some(x), Some(y)) => f64::from(u8::from(x != y)),
                        (None, None) => 0.0,
                        _ => 0.5,
                    };
                }
            }
        }
        h.covariance(d_num, d_cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn embedding_distances_match_direct_kernel() {
        let space = SearchSpaceDescriptor::standard();
        let enc = Encoder::new(&space);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = KernelHyper {
            log_signal_var: 0.3,
            log_len_numeric: 0.7,
            log_len_categorical: -0.2,
            log_noise_var: 0.0,
        };
        for _ in 0..200 {
            let (a, b) = (space.sample_random(&mut rng), space.sample_random(&mut rng));
            let (dn, dc) = enc.embed(&a).distances(&enc.embed(&b));
            let direct = enc.kernel_eval(&a, &b, &h);
            assert!((h.covariance(dn, dc) - direct).abs() <= 1e-12 * direct.max(1e-300));
            assert_eq!(direct, enc.kernel_eval(&b, &a, &h));
            assert!(enc.kernel_eval(&a, &a, &h) >= direct);
        }
    }

    #[test]
    fn inactive_values_are_neutral() {
        let space = SearchSpaceDescriptor::standard();
        let enc = Encoder::new(&space);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a = space.sample_random(&mut rng);
        a.set("pretraining", Value::Bool(true));
        a.repair(&space, &mut rng);
        let mut b = a.clone();
        b.set("annealing-epochs", Value::Int(20));
        let h = KernelHyper::default();
        assert_eq!(enc.kernel_eval(&a, &b, &h), enc.kernel_eval(&a, &a, &h));
        assert_eq!(enc.embed(&a), enc.embed(&b));
    }

    #[test]
    fn self_covariance_is_signal_variance() {
        let space = SearchSpaceDescriptor::standard();
        let enc = Encoder::new(&space);
        let a = space.sample_random(&mut ChaCha8Rng::seed_from_u64(1));
        let h = KernelHyper {
            log_signal_var: 1.5,
            ..Default::default()
        };
        assert_eq!(enc.kernel_eval(&a, &a, &h), 1.5f64.exp());
    }
}
