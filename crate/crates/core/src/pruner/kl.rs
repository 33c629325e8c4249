use crate::microgradnet::{
    key, ArchGraph, Grads, ParamRole, Scalar, Tensor, WeightStore, GROUP_LOG_SIGMA2, GROUP_MU,
    LOG_SIGMA2_SUFFIX,
};

use super::Method;

pub const K1: f64 = 0.63576;
pub const K2: f64 = 1.87320;
pub const K3: f64 = 1.48695;

/// Keeps `log(mu^2)` finite for weights at exactly zero.
pub const MU_SQ_FLOOR: f64 = 1e-16;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `log alpha = log sigma^2 - log mu^2`; under the posterior
/// `N(mu, alpha mu^2)` this is `log beta`.
pub fn log_alpha(mu: f64, log_sigma2: f64) -> f64 {
    log_sigma2 - (mu * mu + MU_SQ_FLOOR).ln()
}

/// Polynomial-sigmoid approximation of `KL(N(mu, alpha mu^2) || log-uniform)`
/// as a function of `log alpha`; tends to 0 as alpha grows.
pub fn kl_log_uniform(log_alpha: f64) -> f64 {
    K1 - K1 * sigmoid(K2 + K3 * log_alpha) + 0.5 * (-log_alpha).exp().ln_1p()
}

pub fn kl_log_uniform_grad(log_alpha: f64) -> f64 {
    let s = sigmoid(K2 + K3 * log_alpha);
    -K1 * K3 * s * (1.0 - s) - 0.5 * sigmoid(-log_alpha)
}

/// `KL(N(mu, sigma^2) || N(0, 1))`, the per-weight term under group scales.
fn kl_std_normal(mu: f64, log_sigma2: f64) -> f64 {
    0.5 * (log_sigma2.exp() + mu * mu - 1.0 - log_sigma2)
}

fn weight_keys(graph: &ArchGraph) -> Vec<String> {
    let mut out = Vec::new();
    for (id, node) in graph.nodes().iter().enumerate() {
        for p in graph.param_specs(id) {
            if p.role == ParamRole::Weight {
                out.push(key(&node.name, p.name));
            }
        }
    }
    out
}

fn f<T: Scalar>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Prior term of the variational objective over every variational tensor
/// present in `ws`.
pub fn kl_divergence<T: Scalar>(graph: &ArchGraph, ws: &WeightStore<T>, method: Method) -> f64 {
    let mut total = 0.0;
    for wk in weight_keys(graph) {
        let (Some(mu), Some(ls)) = (ws.get(&wk), ws.get(&format!("{wk}{LOG_SIGMA2_SUFFIX}")))
        else {
            continue;
        };
        for (&m, &s) in mu.data().iter().zip(ls.data()) {
            total += match method {
                Method::Spvd => kl_log_uniform(log_alpha(f(m), f(s))),
                Method::Bc => kl_std_normal(f(m), f(s)),
            };
        }
    }
    if method == Method::Bc {
        for node in graph.nodes() {
            let (Some(mu), Some(ls)) = (
                ws.get(&key(&node.name, GROUP_MU)),
                ws.get(&key(&node.name, GROUP_LOG_SIGMA2)),
            ) else {
                continue;
            };
            for (&m, &s) in mu.data().iter().zip(ls.data()) {
                total += kl_log_uniform(log_alpha(f(m), f(s)));
            }
        }
    }
    total
}

fn add_into<T: Scalar>(grads: &mut Grads<T>, k: &str, shape: &[usize], g: Vec<f64>) {
    let g: Vec<T> = g.into_iter().map(T::lit).collect();
    match grads.get_mut(k) {
        Some(t) => t
            .data_mut()
            .iter_mut()
            .zip(g)
            .for_each(|(a, b)| *a = *a + b),
        None => {
            grads.insert(
                k.to_string(),
                Tensor::new(shape.to_vec(), g).expect("gradient matches parameter"),
            );
        }
    }
}

/// Adds `scale * d KL` to `grads` for every variational tensor; returns
/// `scale * KL`.
pub fn add_kl_grad<T: Scalar>(
    graph: &ArchGraph,
    ws: &WeightStore<T>,
    method: Method,
    scale: f64,
    grads: &mut Grads<T>,
) -> f64 {
    let mut total = 0.0;
    let mut pair = |mkey: &str, skey: &str, prior: Method, grads: &mut Grads<T>| {
        let (Some(mu), Some(ls)) = (ws.get(mkey), ws.get(skey)) else {
            return;
        };
        let n = mu.len();
        let (mut gm, mut gs) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for (&m, &s) in mu.data().iter().zip(ls.data()) {
            let (m, s) = (f(m), f(s));
            match prior {
                Method::Spvd => {
                    let a = log_alpha(m, s);
                    let d = kl_log_uniform_grad(a);
                    total += kl_log_uniform(a);
                    gs.push(scale * d);
                    gm.push(scale * d * (-2.0 * m / (m * m + MU_SQ_FLOOR)));
                }
                Method::Bc => {
                    total += kl_std_normal(m, s);
                    gs.push(scale * 0.5 * (s.exp() - 1.0));
                    gm.push(scale * m);
                }
            }
        }
        add_into(grads, mkey, mu.shape(), gm);
        add_into(grads, skey, ls.shape(), gs);
    };
    for wk in weight_keys(graph) {
        pair(&wk, &format!("{wk}{LOG_SIGMA2_SUFFIX}"), method, grads);
    }
    if method == Method::Bc {
        for node in graph.nodes() {
            pair(
                &key(&node.name, GROUP_MU),
                &key(&node.name, GROUP_LOG_SIGMA2),
                Method::Spvd,
                grads,
            );
        }
    }
    scale * total
}
