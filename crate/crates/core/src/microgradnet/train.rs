//! Minibatch training with Adam and softmax cross-entropy.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::exec::{backward, forward, softmax_cross_entropy, Grads, RunOptions};
use super::graph::ArchGraph;
use super::store::{key, WeightStore};
use super::tensor::Tensor;
use super::NnError;

/// Images `[N, C, H, W]` with integer labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self, NnError> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(NnError::InvalidShape(format!(
                "images {:?} do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(NnError::InvalidShape(format!(
                "label {bad} outside {classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Gathers the listed examples into a batch tensor.
    pub fn batch(&self, idx: &[usize]) -> Tensor<f32> {
        let row = self.images.row_len();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * row..(i + 1) * row]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        Tensor::new(shape, data).expect("non-empty batch")
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.batch(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Fraction of examples carrying the most common label.
    pub fn majority_rate(&self) -> f64 {
        let mut counts = vec![0usize; self.classes];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        counts.into_iter().max().unwrap_or(0) as f64 / self.len().max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainHyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainHyperparams {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 3e-3,
            optimizer: Optimizer::Adam,
            seed: 0,
        }
    }
}

impl TrainHyperparams {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::Hyperparams(format!(
                "batch size {} and learning rate {} must be positive",
                self.batch_size, self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient. Entries whose
    /// `frozen` mask bit is `false` are held at exactly zero.
    pub fn step(
        &mut self,
        ws: &mut WeightStore<f32>,
        grads: &Grads<f32>,
        frozen: Option<&BTreeMap<String, Vec<bool>>>,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let step = (self.lr * bc2.sqrt() / bc1) as f32;
        let (b1, b2, eps) = (
            self.beta1 as f32,
            self.beta2 as f32,
            (self.eps * bc2.sqrt()) as f32,
        );
        for (k, g) in grads {
            let Some(p) = ws.get_mut(k) else { continue };
            let m = self
                .m
                .entry(k.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(k.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let keep = frozen.and_then(|f| f.get(k));
            for (i, ((w, &gi), (mi, vi))) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
                .enumerate()
            {
                if keep.is_some_and(|mask| !mask[i]) {
                    *w = 0.0;
                    continue;
                }
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= step * *mi / (vi.sqrt() + eps);
            }
        }
    }
}

/// Per-epoch options for [`run_epoch`].
pub struct EpochOptions<'a> {
    /// Sample posterior noise for variational parameters.
    pub sample: bool,
    /// Adds a penalty to the loss; returns its value after adding its
    /// gradient into `grads`. Called once per minibatch.
    pub regularizer: Option<&'a dyn Fn(&WeightStore<f32>, &mut Grads<f32>) -> f64>,
    pub frozen: Option<&'a BTreeMap<String, Vec<bool>>>,
}

const BN_MOMENTUM: f32 = 0.1;

/// One pass over `data` in a shuffled order drawn from `rng`. Returns the
/// mean minibatch loss.
#[allow(clippy::too_many_arguments)]
pub fn run_epoch(
    graph: &ArchGraph,
    ws: &mut WeightStore<f32>,
    adam: &mut Adam,
    data: &Dataset,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    opts: &EpochOptions<'_>,
    epoch: usize,
) -> Result<f64, NnError> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0usize;
    for idx in order.chunks(batch_size.max(1)) {
        let x = data.batch(idx);
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let run = RunOptions {
            train: true,
            sample: if opts.sample { Some(&mut *rng) } else { None },
            instrument: false,
        };
        let fwd = forward(graph, ws, &x, run)?;
        let (mut loss, dlogits) = softmax_cross_entropy(&fwd.logits, &labels);
        let mut grads = backward(graph, ws, &fwd, &dlogits)?;
        if let Some(reg) = opts.regularizer {
            loss += reg(ws, &mut grads);
        }
        if !loss.is_finite() || grads.values().any(|g| !g.all_finite()) {
            return Err(NnError::Diverged { epoch });
        }
        adam.step(ws, &grads, opts.frozen);
        for (name, (mean, var)) in &fwd.batch_stats {
            for (stat, batch) in [("running_mean", mean), ("running_var", var)] {
                if let Some(t) = ws.get_mut(&key(name, stat)) {
                    for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                    }
                }
            }
        }
        total += loss;
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

const EVAL_CHUNK: usize = 256;

/// Arg-max class per example, evaluated deterministically in chunks.
pub fn predict(
    graph: &ArchGraph,
    ws: &WeightStore<f32>,
    data: &Dataset,
) -> Result<Vec<usize>, NnError> {
    let mut out = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(EVAL_CHUNK) {
        let fwd = forward(graph, ws, &data.batch(idx), RunOptions::eval())?;
        let k = fwd.logits.shape()[1];
        for row in fwd.logits.data().chunks(k) {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            out.push(best);
        }
    }
    Ok(out)
}

pub fn accuracy(graph: &ArchGraph, ws: &WeightStore<f32>, data: &Dataset) -> Result<f64, NnError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let pred = predict(graph, ws, data)?;
    let hits = pred
        .iter()
        .zip(&data.labels)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: WeightStore<f32>,
    pub val_accuracy: f64,
    pub final_loss: f64,
}

/// Plain (non-variational) training for `hp.epochs` epochs; deterministic in
/// `hp.seed`.
pub fn train(
    graph: &ArchGraph,
    init: &WeightStore<f32>,
    train_set: &Dataset,
    val_set: &Dataset,
    hp: &TrainHyperparams,
) -> Result<TrainOutcome, NnError> {
    hp.validate()?;
    init.check_against(graph)?;
    let mut ws = init.clone();
    let mut adam = Adam::new(hp.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let opts = EpochOptions {
        sample: false,
        regularizer: None,
        frozen: None,
    };
    let mut final_loss = f64::NAN;
    for epoch in 0..hp.epochs {
        final_loss = run_epoch(
            graph,
            &mut ws,
            &mut adam,
            train_set,
            hp.batch_size,
            &mut rng,
            &opts,
            epoch,
        )?;
    }
    let val_accuracy = accuracy(graph, &ws, val_set)?;
    Ok(TrainOutcome {
        weights: ws,
        val_accuracy,
        final_loss,
    })
}
