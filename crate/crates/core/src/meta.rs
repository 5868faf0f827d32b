//! First-order meta-learning (Reptile, FOMAML) across environment tasks and
//! online adaptation from a buffer of recent experience.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costnet::{self, ModelParams, TrainBatch};
use crate::error::{Error, Result};
use crate::seeds;

/// One environment's learning problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub env_id: String,
    pub support: Vec<TrainBatch>,
    pub query: Vec<TrainBatch>,
}

impl Task {
    pub fn validate(&self) -> Result<()> {
        if self.support.is_empty() || self.query.is_empty() {
            return Err(Error::validation(
                "task",
                format!("{}: support and query must be nonempty", self.env_id),
            ));
        }
        if let Some(b) = self
            .query
            .iter()
            .find(|q| self.support.iter().any(|s| s.episode == q.episode))
        {
            return Err(Error::validation(
                "task",
                format!("{}: episode {} in both support and query", self.env_id, b.episode),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    Reptile,
    Fomaml,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub meta_lr: f64,
    pub meta_iters: usize,
    pub tasks_per_batch: usize,
    pub algorithm: Algorithm,
    pub seed: u64,
    /// Support batches drawn per task and meta-iteration (all when unset).
    pub support_batches: Option<usize>,
    /// Query batches drawn per task and meta-iteration (all when unset).
    pub query_batches: Option<usize>,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_lr: 1e-2,
            inner_steps: 5,
            meta_lr: 1e-1,
            meta_iters: 300,
            tasks_per_batch: 4,
            algorithm: Algorithm::Reptile,
            seed: 0,
            support_batches: Some(5),
            query_batches: Some(8),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0) {
            return Err(Error::validation("inner_lr", "must be positive"));
        }
        if !(self.meta_lr > 0.0) {
            return Err(Error::validation("meta_lr", "must be positive"));
        }
        if self.meta_iters == 0 {
            return Err(Error::validation("meta_iters", "must be positive"));
        }
        if self.tasks_per_batch == 0 {
            return Err(Error::validation("tasks_per_batch", "must be positive"));
        }
        if self.support_batches == Some(0) || self.query_batches == Some(0) {
            return Err(Error::validation("support_batches", "subsample sizes must be positive"));
        }
        Ok(())
    }
}

/// `k` plain SGD steps, cycling through `support` in order.
pub fn inner_adapt(
    theta: &ModelParams,
    support: &[TrainBatch],
    k: usize,
    alpha: f64,
) -> Result<ModelParams> {
    if k > 0 && support.is_empty() {
        return Err(Error::validation("support", "adaptation needs at least one batch"));
    }
    let mut p = theta.clone();
    for step in 0..k {
        let g = costnet::grad(&p, &support[step % support.len()])?;
        p = costnet::sgd_step(&p, &g, alpha)?;
    }
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub meta_iter: usize,
    pub mean_query_nll: f64,
    pub mean_query_mae: f64,
}

/// Renders a training curve as CSV.
pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("meta_iter,mean_query_nll,mean_query_mae\n");
    for p in curve {
        let _ = writeln!(out, "{},{},{}", p.meta_iter, p.mean_query_nll, p.mean_query_mae);
    }
    out
}

fn subsample(batches: &[TrainBatch], n: Option<usize>, rng: &mut impl rand::Rng) -> Vec<TrainBatch> {
    match n {
        Some(n) if n < batches.len() => index::sample(rng, batches.len(), n)
            .into_iter()
            .map(|i| batches[i].clone())
            .collect(),
        _ => batches.to_vec(),
    }
}

struct TaskOutcome {
    adapted: ModelParams,
    query_grad: Option<Vec<f64>>,
    nll: f64,
    mae: f64,
}

/// Meta-trains the global initialization. Returns the final parameters and
/// the per-iteration post-adaptation query metrics.
pub fn meta_train(
    theta0: &ModelParams,
    tasks: &[Task],
    cfg: &MetaConfig,
) -> Result<(ModelParams, Vec<CurvePoint>)> {
    cfg.validate()?;
    if tasks.len() < 2 {
        return Err(Error::validation("tasks", format!("{} task(s), need at least 2", tasks.len())));
    }
    for t in tasks {
        t.validate()?;
    }
    let per_batch = cfg.tasks_per_batch.min(tasks.len());
    let mut theta = theta0.clone();
    let mut curve = Vec::with_capacity(cfg.meta_iters);
    for iter in 0..cfg.meta_iters {
        let mut rng = seeds::rng(seeds::derive(cfg.seed, seeds::stream::META, iter as u64));
        let mut chosen: Vec<usize> = index::sample(&mut rng, tasks.len(), per_batch).into_vec();
        chosen.sort_unstable();
        let draws: Vec<(usize, Vec<TrainBatch>, Vec<TrainBatch>)> = chosen
            .iter()
            .map(|&t| {
                let s = subsample(&tasks[t].support, cfg.support_batches, &mut rng);
                let q = subsample(&tasks[t].query, cfg.query_batches, &mut rng);
                (t, s, q)
            })
            .collect();
        let outcomes = draws
            .par_iter()
            .map(|(_, support, query)| -> Result<TaskOutcome> {
                let adapted = inner_adapt(&theta, support, cfg.inner_steps, cfg.inner_lr)?;
                let m = costnet::metrics(&adapted, query)?;
                let query_grad = match cfg.algorithm {
                    Algorithm::Fomaml => Some(costnet::mean_grad(&adapted, query)?),
                    Algorithm::Reptile => None,
                };
                Ok(TaskOutcome {
                    adapted,
                    query_grad,
                    nll: m.nll,
                    mae: m.mae,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        // Reduce in ascending task order for bitwise determinism.
        let n = outcomes.len() as f64;
        let mut dir = vec![0.0; theta.len()];
        for o in &outcomes {
            match cfg.algorithm {
                Algorithm::Reptile => {
                    for ((d, a), t) in dir.iter_mut().zip(&o.adapted.theta).zip(&theta.theta) {
                        *d += a - t;
                    }
                }
                Algorithm::Fomaml => {
                    for (d, g) in dir.iter_mut().zip(o.query_grad.as_ref().unwrap()) {
                        *d += g;
                    }
                }
            }
        }
        let sign = match cfg.algorithm {
            Algorithm::Reptile => 1.0,
            Algorithm::Fomaml => -1.0,
        };
        for (t, d) in theta.theta.iter_mut().zip(&dir) {
            *t += sign * cfg.meta_lr * (d / n);
        }
        curve.push(CurvePoint {
            meta_iter: iter,
            mean_query_nll: outcomes.iter().map(|o| o.nll).sum::<f64>() / n,
            mean_query_mae: outcomes.iter().map(|o| o.mae).sum::<f64>() / n,
        });
    }
    Ok((theta, curve))
}

/// Fixed-capacity window of the most recent batches, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptBuffer {
    capacity: usize,
    items: VecDeque<TrainBatch>,
}

impl AdaptBuffer {
    pub const DEFAULT_CAPACITY: usize = 8;

    pub fn new(capacity: usize) -> Self {
        AdaptBuffer {
            capacity: capacity.max(1),
            items: VecDeque::with_capacity(capacity.max(1)),
        }
    }

    pub fn push(&mut self, batch: TrainBatch) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(batch);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &TrainBatch> {
        self.items.iter()
    }

    pub fn to_vec(&self) -> Vec<TrainBatch> {
        self.items.iter().cloned().collect()
    }
}

impl Default for AdaptBuffer {
    fn default() -> Self {
        AdaptBuffer::new(Self::DEFAULT_CAPACITY)
    }
}

/// Adapts from the global parameters on the buffer contents. Never
/// compounds: every call starts again from `theta_global`.
pub fn online_adapt(
    theta_global: &ModelParams,
    buffer: &AdaptBuffer,
    steps: usize,
    alpha: f64,
) -> Result<ModelParams> {
    if steps > 0 && buffer.is_empty() {
        return Err(Error::validation("buffer", "online adaptation needs experience"));
    }
    let (front, back) = buffer.items.as_slices();
    if back.is_empty() {
        inner_adapt(theta_global, front, steps, alpha)
    } else {
        inner_adapt(theta_global, &buffer.to_vec(), steps, alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costnet::{init_params, ArchDescriptor};
    use crate::sensor::FeatureGrid;
    use crate::vehicle::InteractionSample;

    fn arch() -> ArchDescriptor {
        ArchDescriptor {
            patch: 3,
            channels_in: 4,
            hidden: vec![8],
        }
    }

    fn batch(label: f64, episode: u64) -> TrainBatch {
        let mut g = FeatureGrid::empty(6);
        g.set_cell(2, 2, 0.1 * episode as f64, 0.2, 3);
        g.set_cell(3, 2, -0.2, 0.1, 5);
        TrainBatch {
            grid: g,
            samples: vec![InteractionSample::new(2, 2, label), InteractionSample::new(3, 3, label)],
            episode,
        }
    }

    fn task(label: f64, id: &str) -> Task {
        Task {
            env_id: id.into(),
            support: vec![batch(label, 0), batch(label, 1)],
            query: vec![batch(label, 2)],
        }
    }

    #[test]
    fn zero_steps_or_rate_is_identity() {
        let p = init_params(&arch(), 1).unwrap();
        let s = vec![batch(0.3, 0)];
        assert_eq!(inner_adapt(&p, &s, 0, 0.1).unwrap(), p);
        assert_eq!(inner_adapt(&p, &[], 0, 0.1).unwrap(), p);
        assert_eq!(inner_adapt(&p, &s, 4, 0.0).unwrap(), p);
        assert!(inner_adapt(&p, &[], 1, 0.1).is_err());
    }

    #[test]
    fn one_step_matches_direct_sgd() {
        let p = init_params(&arch(), 2).unwrap();
        let s = vec![batch(0.7, 0), batch(0.1, 1)];
        let g = costnet::grad(&p, &s[0]).unwrap();
        let a = inner_adapt(&p, &s, 1, 0.05).unwrap();
        for i in 0..p.len() {
            assert_eq!(a.theta[i], p.theta[i] - 0.05 * g[i]);
        }
    }

    #[test]
    fn buffer_evicts_oldest() {
        let mut b = AdaptBuffer::new(2);
        b.push(batch(0.1, 1));
        b.push(batch(0.2, 2));
        b.push(batch(0.3, 3));
        assert_eq!(b.len(), 2);
        let eps: Vec<u64> = b.iter().map(|x| x.episode).collect();
        assert_eq!(eps, vec![2, 3]);
    }

    #[test]
    fn online_adapt_equals_inner_adapt_and_restarts() {
        let p = init_params(&arch(), 3).unwrap();
        let mut buf = AdaptBuffer::new(3);
        assert_eq!(online_adapt(&p, &buf, 0, 0.1).unwrap(), p);
        assert!(online_adapt(&p, &buf, 1, 0.1).is_err());
        for e in 0..5 {
            buf.push(batch(0.1 * e as f64, e));
        }
        let a = online_adapt(&p, &buf, 4, 0.05).unwrap();
        assert_eq!(a, inner_adapt(&p, &buf.to_vec(), 4, 0.05).unwrap());
        assert_eq!(online_adapt(&p, &buf, 4, 0.05).unwrap(), a);
    }

    #[test]
    fn needs_two_tasks_and_disjoint_splits() {
        let p = init_params(&arch(), 4).unwrap();
        let cfg = MetaConfig { meta_iters: 1, ..Default::default() };
        assert!(meta_train(&p, &[task(0.2, "a")], &cfg).is_err());
        let mut bad = task(0.2, "b");
        bad.query[0].episode = 1;
        assert!(meta_train(&p, &[task(0.2, "a"), bad], &cfg).is_err());
    }

    #[test]
    fn reptile_with_zero_inner_steps_is_fixed_point() {
        let p = init_params(&arch(), 5).unwrap();
        let cfg = MetaConfig {
            inner_steps: 0,
            meta_iters: 5,
            meta_lr: 0.7,
            ..Default::default()
        };
        let (q, curve) = meta_train(&p, &[task(0.2, "a"), task(0.8, "b")], &cfg).unwrap();
        assert_eq!(q, p);
        assert_eq!(curve.len(), 5);
    }

    #[test]
    fn reptile_unit_rate_single_task_takes_adapted_params() {
        let p = init_params(&arch(), 6).unwrap();
        let tasks = [task(0.2, "a"), task(0.8, "b")];
        let cfg = MetaConfig {
            tasks_per_batch: 1,
            meta_iters: 1,
            meta_lr: 1.0,
            inner_steps: 3,
            support_batches: None,
            query_batches: None,
            ..Default::default()
        };
        let (q, _) = meta_train(&p, &tasks, &cfg).unwrap();
        let candidates: Vec<ModelParams> = tasks
            .iter()
            .map(|t| inner_adapt(&p, &t.support, 3, cfg.inner_lr).unwrap())
            .collect();
        assert!(candidates.iter().any(|c| c
            .theta
            .iter()
            .zip(&q.theta)
            .all(|(a, b)| (a - b).abs() <= 1e-15 * a.abs().max(1.0))));
    }

    #[test]
    fn meta_train_is_deterministic() {
        let p = init_params(&arch(), 7).unwrap();
        let tasks = [task(0.2, "a"), task(0.8, "b"), task(0.5, "c")];
        let cfg = MetaConfig {
            meta_iters: 10,
            tasks_per_batch: 2,
            support_batches: Some(1),
            query_batches: Some(1),
            ..Default::default()
        };
        let a = meta_train(&p, &tasks, &cfg).unwrap();
        let b = meta_train(&p, &tasks, &cfg).unwrap();
        assert_eq!(a, b);
        let csv = curve_csv(&a.1);
        assert!(csv.starts_with("meta_iter,mean_query_nll,mean_query_mae\n0,"));
        assert_eq!(csv.lines().count(), 11);
    }
}
