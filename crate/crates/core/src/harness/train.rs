use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{maybe_update_centroids, CentroidUpdate, UpdateSchedule};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, grad_norm, AdamState};

use super::config::TrainRun;
use super::data::Example;
use super::model::{derive_seed, LossStats, Model, Routing};

/// Optimiser and sampling state that persists across steps and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub adam: AdamState,
    /// Source of per-step dropout seeds.
    pub rng: ChaCha8Rng,
    /// Completed iterations.
    pub iteration: usize,
}

impl TrainState {
    pub fn new(run: &TrainRun) -> Self {
        Self { adam: AdamState::new(run.lr), rng: ChaCha8Rng::seed_from_u64(run.seed), iteration: 0 }
    }
}

/// One logged point, averaged over the steps since the previous one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Highest centroid epoch over cluster-former layers.
    pub centroid_epoch: u64,
    /// Centroid refreshes that were due but kept the previous centroids.
    pub retained_updates: usize,
}

/// Example indices of step `step` (1-based): batches walk a per-epoch shuffle.
fn batch_indices(run: &TrainRun, n: usize, step: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(run.batch_size);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for j in 0..run.batch_size {
        let flat = (step - 1) * run.batch_size + j;
        let (epoch, at) = (flat / n, flat % n);
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(run.seed, epoch as u64)));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("filled above").1[at]);
    }
    out
}

/// Trains until `run.max_steps`, resuming from `state.iteration`.
///
/// Each iteration: forward and backward over a batch (cluster-former inputs are
/// pushed to that layer's memory bank), clip, Adam step, then a scheduled
/// centroid refresh. Every `log_every` steps a record is passed to `sink`.
pub fn train(
    model: &mut Model,
    data: &[Example],
    run: &TrainRun,
    state: &mut TrainState,
    sink: &mut dyn FnMut(&MetricRecord) -> Result<()>,
) -> Result<Vec<MetricRecord>> {
    run.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let steps_per_epoch = data.len().div_ceil(run.batch_size);
    let frequency = run.centroid_frequency.resolve(steps_per_epoch);
    let mut history = Vec::new();
    let mut acc = (LossStats::default(), 0.0, 0usize, 0usize);
    for step in state.iteration + 1..=run.max_steps {
        let dropout_seed = (model.config().dropout > 0.0).then(|| state.rng.random::<u64>());
        let scale = 1.0 / run.batch_size as f64;
        let mut stats = LossStats::default();
        for (b, idx) in batch_indices(run, data.len(), step).into_iter().enumerate() {
            let seed = dropout_seed.map(|s| derive_seed(s, b as u64));
            let (s, trace) = model.accumulate_gradients(&data[idx], scale, seed, None)?;
            if !s.nll_sum.is_finite() {
                return Err(Error::Diverged { step, loss: s.nll_sum });
            }
            stats.merge(s);
            for (layer, lt) in model.layers.iter_mut().zip(&trace.layers) {
                if let (Routing::Cluster { bank, .. }, Some(rows)) = (&mut layer.routing, &lt.bank_rows) {
                    bank.push(rows)?;
                }
            }
        }
        let lr = run.lr_at(step);
        let norm = {
            let mut params = model.params_mut();
            let norm = match run.clip {
                Some(c) => clip_grad_norm(&mut params, c),
                None => grad_norm(&params),
            };
            state.adam.lr = lr;
            state.adam.step(&mut params)?;
            norm
        };
        model.zero_grad();
        state.iteration = step;

        for (i, layer) in model.layers.iter_mut().enumerate() {
            if let Routing::Cluster { centroids, bank } = &mut layer.routing {
                let schedule = UpdateSchedule {
                    frequency,
                    kmeans_iters: run.kmeans_iters,
                    restarts: run.kmeans_restarts,
                    seed: derive_seed(run.seed, 1000 + i as u64),
                };
                match maybe_update_centroids(bank, &schedule, step, centroids) {
                    CentroidUpdate::Updated(c) => *centroids = c,
                    CentroidUpdate::Retained { .. } => acc.3 += 1,
                    CentroidUpdate::NotDue => {}
                }
            }
        }

        acc.0.merge(stats);
        acc.1 += norm;
        acc.2 += 1;
        if step % run.log_every == 0 || step == run.max_steps {
            let rec = MetricRecord {
                step,
                loss: acc.0.mean_nll(),
                accuracy: acc.0.correct as f64 / acc.0.count.max(1) as f64,
                lr,
                grad_norm: acc.1 / acc.2 as f64,
                centroid_epoch: model.centroids().iter().map(|(_, c)| c.epoch()).max().unwrap_or(0),
                retained_updates: acc.3,
            };
            if !rec.loss.is_finite() {
                return Err(Error::Diverged { step, loss: rec.loss });
            }
            sink(&rec)?;
            history.push(rec);
            acc = (LossStats::default(), 0.0, 0, 0);
        }
    }
    Ok(history)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Accuracy,
    Perplexity,
    BitsPerChar,
}

impl Metric {
    pub fn from_stats(self, s: &LossStats) -> f64 {
        match self {
            Metric::Accuracy => s.correct as f64 / s.count as f64,
            Metric::Perplexity => s.mean_nll().exp(),
            Metric::BitsPerChar => s.mean_nll() / std::f64::consts::LN_2,
        }
    }
}

/// Loss statistics summed over `data`; examples are scored in parallel and
/// reduced in dataset order.
pub fn evaluate_stats(model: &Model, data: &[Example]) -> Result<LossStats> {
    if data.is_empty() {
        return Err(Error::Invalid("empty evaluation set".into()));
    }
    let per: Vec<LossStats> = data.par_iter().map(|ex| model.score_example(ex)).collect::<Result<_>>()?;
    let mut total = LossStats::default();
    per.into_iter().for_each(|s| total.merge(s));
    Ok(total)
}

pub fn evaluate(model: &Model, data: &[Example], metric: Metric) -> Result<f64> {
    Ok(metric.from_stats(&evaluate_stats(model, data)?))
}
