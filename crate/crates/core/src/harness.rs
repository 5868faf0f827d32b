//! Experiment orchestration: data collection, pooled baseline training,
//! evaluation, navigation sweeps, persistence and run manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::{self, EpisodeReport, NavConfig};
use crate::costnet::{self, ArchDescriptor, Metrics, ModelParams, TrainBatch};
use crate::error::{Error, Result};
use crate::meta::{self, CurvePoint, MetaConfig, Task};
use crate::seeds::{self, stream};
use crate::sensor::{self, FeatureGrid, GridSpec, LidarSpec};
use crate::terrain::{self, Family, TerrainField, TerrainSpec};
use crate::vehicle::{self, Control, InteractionSample, Trajectory, VehicleState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvEntry {
    pub name: String,
    #[serde(default)]
    pub heldout: bool,
    pub spec: TerrainSpec,
}

/// Bounded-curvature random walk used for data collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub speed_min: f64,
    pub speed_max: f64,
    /// Per-step std of the steering random walk (rad).
    pub steer_walk_std: f64,
    pub steer_limit: f64,
    /// Start poses are drawn within this distance of the terrain center.
    pub start_radius_m: f64,
    /// Below this clearance the walk is biased back toward the center.
    pub homing_clearance_m: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            speed_min: 1.5,
            speed_max: 3.0,
            steer_walk_std: 0.04,
            steer_limit: 0.3,
            start_radius_m: 6.0,
            homing_clearance_m: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub iters: usize,
    pub lr: f64,
    pub batches_per_step: usize,
    /// Pooled-loss evaluation period of the training curve.
    pub eval_every: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            // 25k steps x 4 batches: the same number of batch gradients as
            // 5000 meta-iterations x 4 tasks x 5 inner steps
            iters: 25_000,
            lr: 1e-2,
            batches_per_step: 4,
            eval_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub seeds: Vec<u64>,
    pub route_length_m: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seeds: (0..10).collect(),
            route_length_m: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub environments: Vec<EnvEntry>,
    pub episodes_per_env: usize,
    pub steps_per_episode: usize,
    pub sim_dt: f64,
    pub scan_every: usize,
    pub split_fraction: f64,
    pub master_seed: u64,
    pub policy: PolicyConfig,
    pub grid: GridSpec,
    pub lidar: LidarSpec,
    pub arch: ArchDescriptor,
    pub meta: MetaConfig,
    pub baseline: BaselineConfig,
    pub nav: NavConfig,
    pub bench: BenchConfig,
}

fn env(name: &str, heldout: bool, spec: TerrainSpec) -> EnvEntry {
    EnvEntry {
        name: name.into(),
        heldout,
        spec,
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let boulders = |amp, gap, density, seed| TerrainSpec {
            obstacle_density: density,
            ..TerrainSpec::new(Family::Boulders, amp, gap, seed)
        };
        ExperimentConfig {
            environments: vec![
                env("rolling_a", false, TerrainSpec::new(Family::Rolling, 0.5, 8.0, 1)),
                env("rolling_b", false, TerrainSpec::new(Family::Rolling, 0.6, 6.0, 2)),
                env("rough_a", false, TerrainSpec::new(Family::Rough, 0.1, 1.5, 3)),
                env("rough_b", false, TerrainSpec::new(Family::Rough, 0.15, 2.0, 4)),
                env("boulders_a", false, boulders(0.6, 2.0, 0.06, 5)),
                env("slope_a", false, TerrainSpec::new(Family::Slope, 2.0, 10.0, 6)),
                env("rough_heldout", true, TerrainSpec::new(Family::Rough, 0.12, 1.75, 7)),
                env("boulders_heldout", true, boulders(0.7, 2.5, 0.06, 8)),
            ],
            episodes_per_env: 20,
            steps_per_episode: 200,
            sim_dt: 0.05,
            scan_every: 10,
            split_fraction: 0.7,
            master_seed: 0,
            policy: PolicyConfig::default(),
            grid: GridSpec::default(),
            lidar: LidarSpec::default(),
            arch: ArchDescriptor::default(),
            meta: MetaConfig {
                inner_lr: 0.02,
                meta_lr: 1.0,
                meta_iters: 5000,
                ..MetaConfig::default()
            },
            baseline: BaselineConfig::default(),
            nav: NavConfig {
                adapt_lr: 0.02,
                ..NavConfig::default()
            },
            bench: BenchConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.master_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let train = self.environments.iter().filter(|e| !e.heldout).count();
        let held = self.environments.len() - train;
        if train < 3 {
            return Err(Error::validation("environments", "need at least 3 training environments"));
        }
        if held < 1 {
            return Err(Error::validation("environments", "need at least 1 held-out environment"));
        }
        let mut names: Vec<&str> = self.environments.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::validation("environments", "duplicate environment name"));
        }
        for e in &self.environments {
            e.spec
                .validate()
                .map_err(|err| err.context(format!("environment {}", e.name)))?;
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::validation("split_fraction", "must lie in (0, 1)"));
        }
        if self.episodes_per_env < 2 {
            return Err(Error::validation("episodes_per_env", "need at least 2 for a split"));
        }
        if self.scan_every == 0 || self.steps_per_episode < 3 {
            return Err(Error::validation("scan_every", "episodes too short to label"));
        }
        if !(self.sim_dt > 0.0 && self.sim_dt <= vehicle::MAX_DT) {
            return Err(Error::validation("sim_dt", "must lie in (0, 0.2]"));
        }
        self.grid.validate()?;
        self.lidar.validate()?;
        self.arch.validate()?;
        self.meta.validate()?;
        self.nav.mppi.validate()?;
        Ok(())
    }

    /// Environment spec with its seed derived from the master seed.
    pub fn effective_spec(&self, index: usize) -> TerrainSpec {
        let e = &self.environments[index];
        TerrainSpec {
            seed: seeds::derive(self.master_seed, stream::TERRAIN, seeds::mix(&[index as u64, e.spec.seed])),
            ..e.spec.clone()
        }
    }

    pub fn init_seed(&self) -> u64 {
        seeds::derive(self.master_seed, stream::INIT, 0)
    }

    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig {
            seed: seeds::derive(self.master_seed, stream::META, self.meta.seed),
            ..self.meta.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub step: usize,
    pub pose: VehicleState,
    pub grid: FeatureGrid,
    pub samples: Vec<InteractionSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub env: String,
    pub episode: u64,
    pub states: usize,
    pub scans: Vec<ScanRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvData {
    pub name: String,
    pub heldout: bool,
    pub spec: TerrainSpec,
    pub episodes: Vec<EpisodeRecord>,
}

impl EnvData {
    pub fn sample_count(&self) -> usize {
        self.episodes
            .iter()
            .flat_map(|e| &e.scans)
            .map(|s| s.samples.len())
            .sum()
    }

    /// Split into (support, query) episode lists by episode order.
    pub fn split(&self, fraction: f64) -> (&[EpisodeRecord], &[EpisodeRecord]) {
        let n = self.episodes.len();
        let k = ((fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
        self.episodes.split_at(k)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.episodes {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub envs: Vec<EnvData>,
}

#[derive(Serialize, Deserialize)]
struct DatasetIndex {
    environments: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    heldout: bool,
    spec: TerrainSpec,
    file: String,
}

impl Dataset {
    pub fn training(&self) -> impl Iterator<Item = &EnvData> {
        self.envs.iter().filter(|e| !e.heldout)
    }

    pub fn heldout(&self) -> impl Iterator<Item = &EnvData> {
        self.envs.iter().filter(|e| e.heldout)
    }

    pub fn sample_count(&self) -> usize {
        self.envs.iter().map(EnvData::sample_count).sum()
    }

    /// Writes `index.json` plus one JSON-lines file per environment.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = DatasetIndex { environments: Vec::new() };
        for env in &self.envs {
            let file = format!("{}.jsonl", env.name);
            let path = dir.join(&file);
            std::fs::write(&path, env.to_jsonl()?).map_err(|e| Error::io(&path, e))?;
            index.environments.push(IndexEntry {
                name: env.name.clone(),
                heldout: env.heldout,
                spec: env.spec.clone(),
                file,
            });
        }
        let path = dir.join("index.json");
        std::fs::write(&path, serde_json::to_string_pretty(&index)? + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: DatasetIndex = serde_json::from_str(&text)?;
        let mut envs = Vec::new();
        for entry in index.environments {
            let path = dir.join(&entry.file);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let episodes = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<std::result::Result<Vec<EpisodeRecord>, _>>()?;
            envs.push(EnvData {
                name: entry.name,
                heldout: entry.heldout,
                spec: entry.spec,
                episodes,
            });
        }
        let ds = Dataset { envs };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for env in &self.envs {
            for ep in &env.episodes {
                for scan in &ep.scans {
                    let h = scan.grid.size();
                    if scan.samples.iter().any(|s| s.row >= h || s.col >= h) {
                        return Err(Error::validation(
                            "dataset",
                            format!("{} episode {}: sample outside grid", env.name, ep.episode),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Simulates one random-walk episode; stops early at the terrain edge.
pub fn drive_random_walk(
    field: &TerrainField,
    policy: &PolicyConfig,
    steps: usize,
    dt: f64,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = seeds::rng(seed);
    let (lo, hi) = field.bounds();
    let center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
    let r = policy.start_radius_m;
    let x = center[0] + rng.random_range(-r..=r);
    let y = center[1] + rng.random_range(-r..=r);
    let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let speed = rng.random_range(policy.speed_min..=policy.speed_max);
    let mut state = VehicleState::on_terrain(x, y, yaw, speed, field)?;
    let mut steer: f64 = 0.0;
    let mut states = vec![state];
    for _ in 1..steps {
        let walk: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * policy.steer_walk_std;
        steer += walk;
        if field.clearance(state.x, state.y) < policy.homing_clearance_m {
            let home = (center[1] - state.y).atan2(center[0] - state.x);
            steer += 0.1 * vehicle::wrap_angle(home - state.yaw);
        }
        steer = steer.clamp(-policy.steer_limit, policy.steer_limit);
        match vehicle::step(&state, &Control::new(speed, steer), field, dt) {
            Ok(s) => state = s,
            Err(Error::Boundary { .. }) => break,
            Err(e) => return Err(e),
        }
        states.push(state);
    }
    Ok(Trajectory { dt, states })
}

/// Scan indices and the state window labeled for each scan. The window for
/// scan `s` runs from the state before `s` to state `s + every`, so its
/// interior is states `s .. s + every`.
pub fn scan_windows(len: usize, every: usize) -> Vec<(usize, std::ops::Range<usize>)> {
    (0..len.saturating_sub(1))
        .step_by(every)
        .map(|s| (s, s.saturating_sub(1)..(s + every + 1).min(len)))
        .filter(|(_, w)| w.len() >= 3)
        .collect()
}

fn collect_episode(
    cfg: &ExperimentConfig,
    env_index: usize,
    field: &TerrainField,
    episode: u64,
) -> Result<EpisodeRecord> {
    let name = &cfg.environments[env_index].name;
    let key = seeds::mix(&[env_index as u64, episode]);
    let traj = drive_random_walk(
        field,
        &cfg.policy,
        cfg.steps_per_episode,
        cfg.sim_dt,
        seeds::derive(cfg.master_seed, stream::POLICY, key),
    )?;
    let lidar_base = seeds::derive(cfg.master_seed, stream::LIDAR, key);
    let mut scans = Vec::new();
    for (s, window) in scan_windows(traj.states.len(), cfg.scan_every) {
        let pose = traj.states[s];
        let lidar = LidarSpec {
            seed_stream: seeds::derive(lidar_base, stream::LIDAR, s as u64),
            ..cfg.lidar.clone()
        };
        let grid = sensor::rasterize(&sensor::scan(field, &pose, &lidar)?, &pose, &cfg.grid);
        let seg = Trajectory {
            dt: traj.dt,
            states: traj.states[window].to_vec(),
        };
        let samples = vehicle::interaction_feedback(&seg, field, &cfg.grid, &pose)?;
        scans.push(ScanRecord {
            step: s,
            pose,
            grid,
            samples,
        });
    }
    Ok(EpisodeRecord {
        env: name.clone(),
        episode,
        states: traj.states.len(),
        scans,
    })
}

/// Generates every environment of the roster.
pub fn build_worlds(cfg: &ExperimentConfig) -> Result<Vec<TerrainField>> {
    (0..cfg.environments.len())
        .into_par_iter()
        .map(|i| {
            terrain::generate_terrain(&cfg.effective_spec(i))
                .map_err(|e| e.context(format!("environment {}", cfg.environments[i].name)))
        })
        .collect()
}

/// Drives every environment/episode and records scans with their labels.
pub fn collect(cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.validate()?;
    let worlds = build_worlds(cfg)?;
    let jobs: Vec<(usize, u64)> = (0..cfg.environments.len())
        .flat_map(|e| (0..cfg.episodes_per_env as u64).map(move |k| (e, k)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(e, k)| {
            collect_episode(cfg, e, &worlds[e], k).map_err(|err| {
                err.context(format!("environment {} episode {k}", cfg.environments[e].name))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut envs: Vec<EnvData> = cfg
        .environments
        .iter()
        .enumerate()
        .map(|(i, e)| EnvData {
            name: e.name.clone(),
            heldout: e.heldout,
            spec: cfg.effective_spec(i),
            episodes: Vec::new(),
        })
        .collect();
    for (rec, &(e, _)) in records.into_iter().zip(&jobs) {
        envs[e].episodes.push(rec);
    }
    Ok(Dataset { envs })
}

/// Labeled scans of the given episodes, interleaved round-robin across
/// episodes so that any prefix of the list spans as many episodes as
/// possible (adaptation cycles through support batches in order).
fn episode_batches(episodes: &[EpisodeRecord]) -> Vec<TrainBatch> {
    let labeled: Vec<Vec<TrainBatch>> = episodes
        .iter()
        .map(|ep| {
            ep.scans
                .iter()
                .filter(|s| !s.samples.is_empty())
                .map(|s| TrainBatch {
                    grid: s.grid.clone(),
                    samples: s.samples.clone(),
                    episode: ep.episode,
                })
                .collect()
        })
        .collect();
    let longest = labeled.iter().map(Vec::len).max().unwrap_or(0);
    (0..longest)
        .flat_map(|i| labeled.iter().filter_map(move |b| b.get(i).cloned()))
        .collect()
}

/// Support/query task of one environment.
pub fn env_task(env: &EnvData, split_fraction: f64) -> Task {
    let (support, query) = env.split(split_fraction);
    Task {
        env_id: env.name.clone(),
        support: episode_batches(support),
        query: episode_batches(query),
    }
}

/// (training tasks, held-out tasks).
pub fn tasks(dataset: &Dataset, split_fraction: f64) -> (Vec<Task>, Vec<Task>) {
    let train = dataset.training().map(|e| env_task(e, split_fraction)).collect();
    let held = dataset.heldout().map(|e| env_task(e, split_fraction)).collect();
    (train, held)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iter: usize,
    pub pooled_nll: f64,
}

/// Plain minibatch SGD on every batch of the training environments pooled
/// together, seeded shuffling, reshuffled each epoch.
pub fn train_baseline(
    dataset: &Dataset,
    arch: &ArchDescriptor,
    cfg: &BaselineConfig,
    seed: u64,
) -> Result<(ModelParams, Vec<LossPoint>)> {
    let pool: Vec<TrainBatch> = dataset
        .training()
        .flat_map(|e| episode_batches(&e.episodes))
        .collect();
    if pool.is_empty() {
        return Err(Error::validation("dataset", "no labeled training batches"));
    }
    let mut params = costnet::init_params(arch, seed)?;
    let mut curve = Vec::new();
    if cfg.iters == 0 {
        return Ok((params, curve));
    }
    let per_step = cfg.batches_per_step.max(1).min(pool.len());
    let mut rng = seeds::rng(seeds::derive(seed, stream::BASELINE, 0));
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut cursor = order.len();
    let eval_every = cfg.eval_every.max(1);
    for iter in 0..cfg.iters {
        if iter % eval_every == 0 {
            curve.push(LossPoint {
                iter,
                pooled_nll: costnet::mean_loss(&params, &pool)?,
            });
        }
        let mut mb = Vec::with_capacity(per_step);
        while mb.len() < per_step {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            mb.push(pool[order[cursor]].clone());
            cursor += 1;
        }
        let g = costnet::mean_grad(&params, &mb)?;
        params = costnet::sgd_step(&params, &g, cfg.lr)?;
    }
    curve.push(LossPoint {
        iter: cfg.iters,
        pooled_nll: costnet::mean_loss(&params, &pool)?,
    });
    Ok((params, curve))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvEval {
    pub env: String,
    pub zero_shot: Metrics,
    pub adapted: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub envs: Vec<EnvEval>,
    /// Unweighted mean over environments.
    pub zero_shot: Metrics,
    pub adapted: Metrics,
}

fn mean_metrics(items: impl Iterator<Item = Metrics> + Clone) -> Metrics {
    let n = items.clone().count() as f64;
    Metrics {
        nll: items.clone().map(|m| m.nll).sum::<f64>() / n,
        mae: items.clone().map(|m| m.mae).sum::<f64>() / n,
        calibration: items.clone().map(|m| m.calibration).sum::<f64>() / n,
        samples: items.map(|m| m.samples).sum(),
    }
}

/// Zero-shot and k-step adapted query metrics on every held-out task.
pub fn evaluate(model: &ModelParams, heldout: &[Task], meta_cfg: &MetaConfig) -> Result<EvalReport> {
    if heldout.is_empty() {
        return Err(Error::validation("heldout", "no held-out environments"));
    }
    let envs = heldout
        .par_iter()
        .map(|task| -> Result<EnvEval> {
            task.validate()?;
            let zero_shot = costnet::metrics(model, &task.query)?;
            let adapted = if meta_cfg.inner_steps == 0 {
                zero_shot
            } else {
                let theta = meta::inner_adapt(model, &task.support, meta_cfg.inner_steps, meta_cfg.inner_lr)?;
                costnet::metrics(&theta, &task.query)?
            };
            Ok(EnvEval {
                env: task.env_id.clone(),
                zero_shot,
                adapted,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        zero_shot: mean_metrics(envs.iter().map(|e| e.zero_shot)),
        adapted: mean_metrics(envs.iter().map(|e| e.adapted)),
        envs,
    })
}

pub fn eval_csv(reports: &[(String, EvalReport)]) -> String {
    let mut out = String::from(
        "model,env,zero_shot_nll,zero_shot_mae,zero_shot_calibration,adapted_nll,adapted_mae,adapted_calibration,samples\n",
    );
    for (model, r) in reports {
        let rows = r
            .envs
            .iter()
            .map(|e| (e.env.as_str(), e.zero_shot, e.adapted))
            .chain(std::iter::once(("all", r.zero_shot, r.adapted)));
        for (env, z, a) in rows {
            let _ = writeln!(
                out,
                "{model},{env},{},{},{},{},{},{},{}",
                z.nll, z.mae, z.calibration, a.nll, a.mae, a.calibration, z.samples
            );
        }
    }
    out
}

/// Start (x, y, yaw) and goal of a straight route through the terrain
/// center in a seeded direction.
pub fn route(field: &TerrainField, length_m: f64, seed: u64) -> ([f64; 3], [f64; 2]) {
    let mut rng = seeds::rng(seeds::derive(seed, stream::NAV, 0));
    let dir: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let (lo, hi) = field.bounds();
    let c = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
    let h = 0.5 * length_m;
    let (s, co) = dir.sin_cos();
    ([c[0] - h * co, c[1] - h * s, dir], [c[0] + h * co, c[1] + h * s])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    pub world: String,
    pub seed: u64,
    /// None for the straight-line reference controller.
    pub adapt: Option<bool>,
    pub report: Option<EpisodeReport>,
    pub error: Option<String>,
}

pub const STRAIGHT_LINE: &str = "straight_line";

/// Every model x world x seed x adapt combination plus the straight-line
/// reference per world x seed. Failed runs are recorded, not propagated.
pub fn bench_navigation(
    nav: &NavConfig,
    route_length_m: f64,
    models: &[(String, ModelParams)],
    worlds: &[(String, TerrainField)],
    run_seeds: &[u64],
) -> Vec<BenchRow> {
    let mut jobs: Vec<(Option<usize>, usize, u64, Option<bool>)> = Vec::new();
    for m in 0..models.len() {
        for w in 0..worlds.len() {
            for &s in run_seeds {
                for adapt in [true, false] {
                    jobs.push((Some(m), w, s, Some(adapt)));
                }
            }
        }
    }
    for w in 0..worlds.len() {
        for &s in run_seeds {
            jobs.push((None, w, s, None));
        }
    }
    jobs.par_iter()
        .map(|&(m, w, s, adapt)| {
            let (wname, field) = &worlds[w];
            let (start, goal) = route(field, route_length_m, s);
            let result = match (m, adapt) {
                (Some(m), Some(adapt)) => control::navigate(field, &models[m].1, nav, start, goal, adapt, s),
                _ => control::navigate_straight(field, nav, start, goal),
            };
            let (report, error) = match result {
                Ok(ep) => (Some(ep.report), None),
                Err(e) => (None, Some(e.to_string())),
            };
            BenchRow {
                model: m.map_or_else(|| STRAIGHT_LINE.to_string(), |m| models[m].0.clone()),
                world: wname.clone(),
                seed: s,
                adapt,
                report,
                error,
            }
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(
        "model,world,seed,adapt,success,termination,steps,path_length_m,mean_hazard,max_hazard,mean_scan_mae,final_distance_m,error\n",
    );
    for r in rows {
        let adapt = r.adapt.map(|a| if a { "on" } else { "off" }).unwrap_or("none");
        match &r.report {
            Some(p) => {
                let term = serde_json::to_value(p.termination).unwrap();
                let _ = writeln!(
                    out,
                    "{},{},{},{adapt},{},{},{},{},{},{},{},{},",
                    r.model,
                    r.world,
                    r.seed,
                    p.success,
                    term.as_str().unwrap_or_default(),
                    p.steps,
                    p.path_length_m,
                    p.mean_hazard,
                    p.max_hazard,
                    fmt_opt(p.mean_scan_mae),
                    p.final_distance_m
                );
            }
            None => {
                let msg = r.error.as_deref().unwrap_or_default().replace([',', '\n'], ";");
                let _ = writeln!(out, "{},{},{},{adapt},,,,,,,,,{msg}", r.model, r.world, r.seed);
            }
        }
    }
    out
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Aggregate means and sample standard deviations per (model, world, adapt).
pub fn bench_summary_csv(rows: &[BenchRow]) -> String {
    let mut groups: BTreeMap<(String, String, String), Vec<&EpisodeReport>> = BTreeMap::new();
    for r in rows {
        let adapt = r.adapt.map(|a| if a { "on" } else { "off" }).unwrap_or("none").to_string();
        let entry = groups.entry((r.model.clone(), r.world.clone(), adapt)).or_default();
        if let Some(p) = &r.report {
            entry.push(p);
        }
    }
    let mut out = String::from(
        "model,world,adapt,runs,success_rate,mean_hazard_mean,mean_hazard_std,max_hazard_mean,max_hazard_std,scan_mae_mean,scan_mae_std,steps_mean,steps_std\n",
    );
    for ((model, world, adapt), reps) in groups {
        let col = |f: &dyn Fn(&EpisodeReport) -> Option<f64>| -> (f64, f64) {
            mean_std(&reps.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
        };
        let success = reps.iter().filter(|r| r.success).count() as f64 / reps.len().max(1) as f64;
        let (hm, hs) = col(&|r| Some(r.mean_hazard));
        let (xm, xs) = col(&|r| Some(r.max_hazard));
        let (am, as_) = col(&|r| r.mean_scan_mae);
        let (sm, ss) = col(&|r| Some(r.steps as f64));
        let _ = writeln!(
            out,
            "{model},{world},{adapt},{},{success},{hm},{hs},{xm},{xs},{am},{as_},{sm},{ss}",
            reps.len()
        );
    }
    out
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// Reproduction record written next to every CLI output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub master_seed: u64,
    pub config_sha256: String,
    /// Input path -> content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output file -> content hash.
    pub outputs: BTreeMap<String, String>,
    pub versions: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("terrameta".into(), env!("CARGO_PKG_VERSION").into());
        versions.insert("checkpoint_format".into(), costnet::CHECKPOINT_VERSION.to_string());
        Manifest {
            command: command.into(),
            master_seed: cfg.master_seed,
            config_sha256: sha256_hex(cfg.to_toml().as_bytes()),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            versions,
        }
    }

    /// Hashes a file or every file below a directory, in path order.
    pub fn hash_path(path: &Path) -> Result<String> {
        if path.is_dir() {
            let mut entries: Vec<_> = std::fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            entries.sort();
            let mut joined = String::new();
            for p in entries {
                let name = p.file_name().unwrap_or_default().to_string_lossy().to_string();
                let _ = writeln!(joined, "{name} {}", Self::hash_path(&p)?);
            }
            Ok(sha256_hex(joined.as_bytes()))
        } else {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            Ok(sha256_hex(&bytes))
        }
    }

    pub fn add_input(&mut self, label: &str, path: &Path) -> Result<()> {
        self.inputs.insert(label.into(), Self::hash_path(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, label: &str, path: &Path) -> Result<()> {
        self.outputs.insert(label.into(), Self::hash_path(path)?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Everything produced by one collect / train / evaluate pass.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub dataset: Dataset,
    pub meta_model: ModelParams,
    pub meta_curve: Vec<CurvePoint>,
    pub baseline_model: ModelParams,
    pub baseline_curve: Vec<LossPoint>,
    pub meta_eval: EvalReport,
    pub baseline_eval: EvalReport,
}

/// Meta-trains from the shared initialization.
pub fn meta_train_dataset(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<(ModelParams, Vec<CurvePoint>)> {
    let (train, _) = tasks(dataset, cfg.split_fraction);
    let init = costnet::init_params(&cfg.arch, cfg.init_seed())?;
    meta::meta_train(&init, &train, &cfg.meta_config())
}

pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutput> {
    let dataset = collect(cfg)?;
    let (meta_model, meta_curve) = meta_train_dataset(cfg, &dataset)?;
    let (baseline_model, baseline_curve) = train_baseline(&dataset, &cfg.arch, &cfg.baseline, cfg.init_seed())?;
    let (_, held) = tasks(&dataset, cfg.split_fraction);
    let meta_eval = evaluate(&meta_model, &held, &cfg.meta)?;
    let baseline_eval = evaluate(&baseline_model, &held, &cfg.meta)?;
    Ok(PipelineOutput {
        dataset,
        meta_model,
        meta_curve,
        baseline_model,
        baseline_curve,
        meta_eval,
        baseline_eval,
    })
}
