//! Shared fixtures and brute-force reference implementations.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use terrameta::costnet::{ArchDescriptor, ModelParams, TrainBatch, LOG_VAR_MAX, LOG_VAR_MIN};
use terrameta::sensor::FeatureGrid;
use terrameta::vehicle::InteractionSample;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_grid(rng: &mut impl Rng, h: usize, fill: f64) -> FeatureGrid {
    let mut g = FeatureGrid::empty(h);
    for r in 0..h {
        for c in 0..h {
            if rng.random::<f64>() < fill {
                let count = rng.random_range(1..=300u16).min(255);
                g.set_cell(r, c, rng.random_range(-1.0..1.0), rng.random_range(0.0..0.5), count);
            }
        }
    }
    g
}

pub fn random_params(arch: &ArchDescriptor, rng: &mut impl Rng, scale: f64) -> ModelParams {
    let theta = (0..arch.param_count()).map(|_| rng.random_range(-scale..scale)).collect();
    ModelParams::new(arch.clone(), theta).unwrap()
}

pub fn random_batch(rng: &mut impl Rng, h: usize, n: usize) -> TrainBatch {
    let grid = random_grid(rng, h, 0.6);
    let samples = (0..n)
        .map(|_| InteractionSample {
            row: rng.random_range(0..h),
            col: rng.random_range(0..h),
            label: rng.random_range(0.0..=1.0),
            weight: rng.random_range(0.5..2.0),
        })
        .collect();
    TrainBatch::new(grid, samples)
}

pub fn small_arch() -> ArchDescriptor {
    ArchDescriptor {
        patch: 3,
        channels_in: 4,
        hidden: vec![6, 5],
    }
}

fn feature(grid: &FeatureGrid, r: i64, c: i64, ch: usize) -> f64 {
    let h = grid.size() as i64;
    if r < 0 || c < 0 || r >= h || c >= h {
        return 0.0;
    }
    let (r, c) = (r as usize, c as usize);
    if !grid.mask(r, c) {
        return 0.0;
    }
    match ch {
        0 => 1.0,
        1 => grid.mean_height(r, c),
        2 => grid.height_range(r, c),
        _ => (1.0 + f64::from(grid.point_count(r, c))).ln(),
    }
}

/// Straight-loop evaluation of one cell: (mu, log_var).
pub fn brute_cell(params: &ModelParams, grid: &FeatureGrid, row: usize, col: usize) -> (f64, f64) {
    let arch = &params.arch;
    let half = (arch.patch / 2) as i64;
    let mut x = Vec::new();
    for dr in -half..=half {
        for dc in -half..=half {
            for ch in 0..4 {
                x.push(feature(grid, row as i64 + dr, col as i64 + dc, ch));
            }
        }
    }
    let mut widths = vec![x.len()];
    widths.extend(&arch.hidden);
    widths.push(2);
    let mut off = 0;
    for l in 0..widths.len() - 1 {
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        let mut y = vec![0.0; n_out];
        for o in 0..n_out {
            let mut z = 0.0;
            for i in 0..n_in {
                z += params.theta[off + o * n_in + i] * x[i];
            }
            z += params.theta[off + n_in * n_out + o];
            y[o] = if l + 2 == widths.len() { z } else { z.tanh() };
        }
        off += n_in * n_out + n_out;
        x = y;
    }
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    (sig(x[0]), LOG_VAR_MIN + (LOG_VAR_MAX - LOG_VAR_MIN) * sig(x[1]))
}

pub fn brute_nll(params: &ModelParams, batch: &TrainBatch) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for s in &batch.samples {
        let (mu, lv) = brute_cell(params, &batch.grid, s.row, s.col);
        let var = lv.exp();
        num += s.weight * (0.5 * (s.label - mu).powi(2) / var + 0.5 * lv);
        den += s.weight;
    }
    num / den
}

/// Average ranks (ties share the mean rank).
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = 0.5 * (i + j) as f64 + 1.0;
        for k in i..=j {
            out[idx[k]] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
