mod common;

use common::*;
use rand::Rng;
use terrameta::costnet::{self, ArchDescriptor, TrainBatch};
use terrameta::sensor::FeatureGrid;
use terrameta::meta::{self, AdaptBuffer, Algorithm, MetaConfig, Task};
use terrameta::vehicle::InteractionSample;

fn constant_batches(r: &mut impl Rng, label: f64, episode0: u64, n: usize) -> Vec<TrainBatch> {
    (0..n)
        .map(|i| {
            let grid = FeatureGrid::empty(12);
            let samples = (0..6)
                .map(|_| InteractionSample::new(r.random_range(0..12), r.random_range(0..12), label))
                .collect();
            TrainBatch {
                episode: episode0 + i as u64,
                ..TrainBatch::new(grid, samples)
            }
        })
        .collect()
}

fn constant_task(r: &mut impl Rng, name: &str, label: f64) -> Task {
    Task {
        env_id: name.into(),
        support: constant_batches(r, label, 0, 6),
        query: constant_batches(r, label, 100, 4),
    }
}

fn mixed_tasks(r: &mut impl Rng, n: usize) -> Vec<Task> {
    (0..n)
        .map(|i| Task {
            env_id: format!("t{i}"),
            support: (0..3).map(|e| TrainBatch { episode: e, ..random_batch(r, 8, 5) }).collect(),
            query: (0..3).map(|e| TrainBatch { episode: 10 + e, ..random_batch(r, 8, 5) }).collect(),
        })
        .collect()
}

#[test]
fn fomaml_without_inner_steps_is_plain_sgd_on_queries() {
    let mut r = rng(5);
    let tasks = mixed_tasks(&mut r, 3);
    let arch = small_arch();
    let theta0 = costnet::init_params(&arch, 9).unwrap();
    let cfg = MetaConfig {
        algorithm: Algorithm::Fomaml,
        inner_steps: 0,
        meta_lr: 0.05,
        meta_iters: 12,
        tasks_per_batch: 3,
        query_batches: None,
        seed: 4,
        ..MetaConfig::default()
    };
    let (got, _) = meta::meta_train(&theta0, &tasks, &cfg).unwrap();
    let mut p = theta0.clone();
    for _ in 0..cfg.meta_iters {
        let mut g = vec![0.0; p.len()];
        for t in &tasks {
            for (acc, x) in g.iter_mut().zip(costnet::mean_grad(&p, &t.query).unwrap()) {
                *acc += x / tasks.len() as f64;
            }
        }
        p = costnet::sgd_step(&p, &g, cfg.meta_lr).unwrap();
    }
    for (a, b) in got.theta.iter().zip(&p.theta) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn inner_adapt_single_step_matches_direct_update() {
    let mut r = rng(6);
    let t = &mixed_tasks(&mut r, 1)[0];
    let p = random_params(&ArchDescriptor::default(), &mut r, 0.2);
    let alpha = 0.03;
    let got = meta::inner_adapt(&p, &t.support, 1, alpha).unwrap();
    let g = costnet::grad(&p, &t.support[0]).unwrap();
    for i in 0..p.len() {
        assert_eq!(got.theta[i], p.theta[i] - alpha * g[i]);
    }
}

#[test]
fn online_adapt_equals_inner_adapt_over_buffer() {
    let mut r = rng(8);
    let batches: Vec<TrainBatch> = (0..11).map(|_| random_batch(&mut r, 8, 4)).collect();
    let mut buf = AdaptBuffer::new(4);
    for b in &batches {
        buf.push(b.clone());
    }
    let p = costnet::init_params(&small_arch(), 1).unwrap();
    let a = meta::online_adapt(&p, &buf, 6, 0.02).unwrap();
    let b = meta::inner_adapt(&p, &batches[7..], 6, 0.02).unwrap();
    assert_eq!(a, b);
    // restarting from the global parameters, never compounding
    assert_eq!(meta::online_adapt(&p, &buf, 6, 0.02).unwrap(), a);
}

#[test]
fn meta_train_is_deterministic() {
    let mut r = rng(12);
    let tasks = mixed_tasks(&mut r, 4);
    let theta0 = costnet::init_params(&small_arch(), 2).unwrap();
    let cfg = MetaConfig {
        meta_iters: 15,
        tasks_per_batch: 2,
        support_batches: Some(2),
        query_batches: Some(2),
        ..MetaConfig::default()
    };
    assert_eq!(
        meta::meta_train(&theta0, &tasks, &cfg).unwrap(),
        meta::meta_train(&theta0, &tasks, &cfg).unwrap()
    );
}

/// Two training tasks with constant labels 0.2 and 0.8; a held-out task with
/// labels 0.8. Grids are unobserved so only the label level carries
/// information. Adapting the meta-trained init must beat adapting the init it
/// started from, seed for seed.
#[test]
fn reptile_init_adapts_faster_on_constant_label_tasks() {
    let mut wins = 0;
    for seed in 0..10 {
        let mut r = rng(1000 + seed);
        let tasks = vec![constant_task(&mut r, "low", 0.2), constant_task(&mut r, "high", 0.8)];
        let held = constant_task(&mut r, "held", 0.8);
        let init = costnet::init_params(&ArchDescriptor::default(), seed).unwrap();
        let cfg = MetaConfig {
            meta_iters: 200,
            tasks_per_batch: 2,
            seed,
            ..MetaConfig::default()
        };
        let (theta, _) = meta::meta_train(&init, &tasks, &cfg).unwrap();
        let adapted = |p| {
            let q = meta::inner_adapt(p, &held.support, cfg.inner_steps, cfg.inner_lr).unwrap();
            costnet::mean_loss(&q, &held.query).unwrap()
        };
        if adapted(&theta) < adapted(&init) {
            wins += 1;
        }
    }
    assert!(wins >= 9, "meta init better on {wins}/10 seeds");
}
