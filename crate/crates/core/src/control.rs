//! MPPI planning over the predicted cost map and the closed navigation loop.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costnet::{self, CostMap, ModelParams, TrainBatch};
use crate::error::{Error, Result};
use crate::meta::{self, AdaptBuffer};
use crate::seeds;
use crate::sensor::{self, FeatureGrid, GridFrame, GridSpec, LidarSpec};
use crate::terrain::{oracle_label, TerrainField};
use crate::vehicle::{self, wrap_angle, Control, Trajectory, VehicleState, STEER_MAX};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MppiConfig {
    pub horizon: usize,
    pub dt: f64,
    pub samples: usize,
    pub temperature: f64,
    /// Perturbation std for (speed command, steering).
    pub noise_std: [f64; 2],
    pub goal_weight: f64,
    pub effort_weight: f64,
    pub uncertainty_weight: f64,
    pub unknown_cell_cost: f64,
    /// Added once per planned pose that lies off the terrain.
    pub boundary_penalty: f64,
    /// Planner speed limit; keeps the horizon inside the grid window.
    pub v_cap: f64,
    pub seed_stream: u64,
}

impl Default for MppiConfig {
    fn default() -> Self {
        MppiConfig {
            horizon: 30,
            dt: 0.1,
            samples: 256,
            temperature: 1.0,
            noise_std: [0.5, 0.15],
            goal_weight: 3.0,
            effort_weight: 0.001,
            uncertainty_weight: 0.5,
            unknown_cell_cost: 0.7,
            boundary_penalty: 50.0,
            v_cap: 2.5,
            seed_stream: 0,
        }
    }
}

impl MppiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::validation("horizon", "must be positive"));
        }
        if !(self.dt > 0.0 && self.dt <= vehicle::MAX_DT) {
            return Err(Error::validation("dt", "must lie in (0, 0.2]"));
        }
        if self.samples == 0 {
            return Err(Error::validation("samples", "must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::validation("temperature", "must be positive"));
        }
        if !(self.noise_std[0] > 0.0 && self.noise_std[1] > 0.0) {
            return Err(Error::validation("noise_std", "must be positive"));
        }
        for (name, v) in [
            ("goal_weight", self.goal_weight),
            ("effort_weight", self.effort_weight),
            ("uncertainty_weight", self.uncertainty_weight),
            ("unknown_cell_cost", self.unknown_cell_cost),
            ("boundary_penalty", self.boundary_penalty),
        ] {
            if !(v >= 0.0) {
                return Err(Error::validation(name, "must be nonnegative"));
            }
        }
        if !(self.v_cap > 0.0 && self.v_cap <= vehicle::V_MAX) {
            return Err(Error::validation("v_cap", "must lie in (0, v_max]"));
        }
        Ok(())
    }

    /// Whether a full-speed horizon stays inside a grid's half extent.
    pub fn fits_grid(&self, grid: &GridSpec) -> bool {
        self.horizon as f64 * self.dt * self.v_cap <= 0.5 * grid.side_m() + 1e-9
    }

    fn clamp(&self, u: Control) -> Control {
        Control {
            v_cmd: u.v_cmd.clamp(0.0, self.v_cap),
            steer: u.steer.clamp(-STEER_MAX, STEER_MAX),
        }
    }
}

/// Applies the planning model (kinematic bicycle on a flat plane) to every
/// control. Returns N + 1 states, the start included.
pub fn rollout(state: &VehicleState, controls: &[Control], dt: f64) -> Vec<VehicleState> {
    let mut s = VehicleState::planar(state.x, state.y, state.yaw, state.v);
    let mut out = Vec::with_capacity(controls.len() + 1);
    out.push(s);
    for u in controls {
        s = vehicle::kinematic_step(&s, u, dt);
        out.push(s);
    }
    out
}

/// What the planner knows about the world at one replanning cycle.
#[derive(Debug, Clone, Copy)]
pub struct CostContext<'a> {
    pub costmap: &'a CostMap,
    pub grid: &'a FeatureGrid,
    pub frame: GridFrame,
    pub goal: [f64; 2],
    /// Terrain (min corner, max corner); poses outside are penalized.
    pub bounds: Option<([f64; 2], [f64; 2])>,
}

/// Separately accumulated cost terms of one trajectory.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CostTerms {
    /// Sum of predicted mu over observed cells.
    pub traversability: f64,
    /// Sum of predicted sigma over observed cells.
    pub uncertainty: f64,
    /// Poses over unobserved or out-of-window cells.
    pub unknown: usize,
    pub goal_distance: f64,
    pub effort: f64,
    pub off_terrain: usize,
}

impl CostTerms {
    pub fn total(&self, cfg: &MppiConfig) -> f64 {
        self.traversability
            + cfg.uncertainty_weight * self.uncertainty
            + cfg.unknown_cell_cost * self.unknown as f64
            + cfg.goal_weight * self.goal_distance
            + cfg.effort_weight * self.effort
            + cfg.boundary_penalty * self.off_terrain as f64
    }
}

/// Cost terms of `traj` (start state first, as returned by [`rollout`]).
pub fn trajectory_cost_terms(
    traj: &[VehicleState],
    controls: &[Control],
    ctx: &CostContext<'_>,
) -> CostTerms {
    let mut terms = CostTerms::default();
    for s in traj.iter().skip(1) {
        match ctx.frame.cell_of(s.x, s.y) {
            Some((row, col)) if ctx.grid.mask(row, col) => {
                terms.traversability += ctx.costmap.mu_at(row, col);
                terms.uncertainty += (0.5 * ctx.costmap.log_var_at(row, col)).exp();
            }
            _ => terms.unknown += 1,
        }
        if let Some((lo, hi)) = ctx.bounds {
            if s.x < lo[0] || s.x > hi[0] || s.y < lo[1] || s.y > hi[1] {
                terms.off_terrain += 1;
            }
        }
    }
    if let Some(last) = traj.last() {
        terms.goal_distance = last.distance_to(ctx.goal);
    }
    terms.effort = controls
        .iter()
        .map(|u| u.v_cmd * u.v_cmd + u.steer * u.steer)
        .sum();
    terms
}

pub fn trajectory_cost(
    traj: &[VehicleState],
    controls: &[Control],
    ctx: &CostContext<'_>,
    cfg: &MppiConfig,
) -> f64 {
    trajectory_cost_terms(traj, controls, ctx).total(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    /// Updated nominal sequence (length N).
    pub nominal: Vec<Control>,
    /// Clamped perturbed sequences, one per sample.
    pub sequences: Vec<Vec<Control>>,
    pub costs: Vec<f64>,
    pub weights: Vec<f64>,
    /// First control of the updated nominal; the one to apply.
    pub control: Control,
}

impl Plan {
    /// Nominal shifted by one step (last control repeated), for the next call.
    pub fn warm_start(&self) -> Vec<Control> {
        let mut next: Vec<Control> = self.nominal.iter().skip(1).copied().collect();
        if let Some(&last) = self.nominal.last() {
            next.push(last);
        }
        next
    }
}

/// Normalized path-integral weights with the minimum cost subtracted.
pub fn softmax_weights(costs: &[f64], temperature: f64) -> Vec<f64> {
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = costs.iter().map(|c| (-(c - min) / temperature).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Draws `cfg.samples` clamped perturbations of `nominal`.
pub fn sample_sequences(nominal: &[Control], cfg: &MppiConfig, seed: u64) -> Vec<Vec<Control>> {
    let mut rng = seeds::rng(seed);
    (0..cfg.samples)
        .map(|_| {
            nominal
                .iter()
                .map(|u| {
                    let dv: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.noise_std[0];
                    let ds: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.noise_std[1];
                    cfg.clamp(Control {
                        v_cmd: u.v_cmd + dv,
                        steer: u.steer + ds,
                    })
                })
                .collect()
        })
        .collect()
}

/// One MPPI update with an arbitrary sequence cost.
pub fn mppi_update<F>(nominal: &[Control], cfg: &MppiConfig, seed: u64, cost: F) -> Plan
where
    F: Fn(&[Control]) -> f64 + Sync,
{
    let sequences = sample_sequences(nominal, cfg, seed);
    let costs: Vec<f64> = sequences.par_iter().map(|u| cost(u)).collect();
    let weights = softmax_weights(&costs, cfg.temperature);
    let mut new_nominal = vec![Control::zero(); nominal.len()];
    for (w, seq) in weights.iter().zip(&sequences) {
        for (acc, u) in new_nominal.iter_mut().zip(seq) {
            acc.v_cmd += w * u.v_cmd;
            acc.steer += w * u.steer;
        }
    }
    let new_nominal: Vec<Control> = new_nominal.into_iter().map(|u| cfg.clamp(u)).collect();
    let control = new_nominal.first().copied().unwrap_or_else(Control::zero);
    Plan {
        nominal: new_nominal,
        sequences,
        costs,
        weights,
        control,
    }
}

/// MPPI over the predicted cost map.
pub fn mppi_step(
    state: &VehicleState,
    ctx: &CostContext<'_>,
    nominal: &[Control],
    cfg: &MppiConfig,
    seed: u64,
) -> Plan {
    mppi_update(nominal, cfg, seed, |u| {
        let traj = rollout(state, u, cfg.dt);
        trajectory_cost(&traj, u, ctx, cfg)
    })
}

/// Closed-loop settings shared by every navigation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NavConfig {
    pub lidar: LidarSpec,
    pub grid: GridSpec,
    pub mppi: MppiConfig,
    pub adapt_steps: usize,
    pub adapt_lr: f64,
    pub buffer_capacity: usize,
    pub max_steps: usize,
    pub goal_radius_m: f64,
    /// Simulation substeps per control period.
    pub substeps: usize,
    pub hazard_footprint_m: f64,
    /// Required distance from start and goal to the terrain edge.
    pub min_clearance_m: f64,
}

impl Default for NavConfig {
    fn default() -> Self {
        NavConfig {
            lidar: LidarSpec::default(),
            grid: GridSpec::default(),
            mppi: MppiConfig::default(),
            adapt_steps: 5,
            adapt_lr: 1e-2,
            buffer_capacity: AdaptBuffer::DEFAULT_CAPACITY,
            max_steps: 300,
            goal_radius_m: 1.0,
            substeps: 2,
            hazard_footprint_m: 1.0,
            min_clearance_m: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Goal,
    Budget,
    Boundary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub success: bool,
    pub termination: Termination,
    pub steps: usize,
    pub path_length_m: f64,
    pub mean_hazard: f64,
    pub max_hazard: f64,
    /// Mean per-scan MAE of predicted mu against the oracle on observed
    /// cells; absent for controllers without a model.
    pub mean_scan_mae: Option<f64>,
    pub final_distance_m: f64,
}

impl EpisodeReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub report: EpisodeReport,
    /// Simulated states at substep resolution.
    pub path: Trajectory,
}

fn check_endpoints(env: &TerrainField, cfg: &NavConfig, start: [f64; 3], goal: [f64; 2]) -> Result<()> {
    if env.clearance(start[0], start[1]) < cfg.min_clearance_m {
        return Err(Error::validation("start", "too close to (or outside) the terrain edge"));
    }
    if env.clearance(goal[0], goal[1]) < cfg.min_clearance_m {
        return Err(Error::validation("goal", "too close to (or outside) the terrain edge"));
    }
    if !(cfg.substeps > 0 && cfg.mppi.dt / cfg.substeps as f64 <= vehicle::MAX_DT) {
        return Err(Error::validation("substeps", "must be positive"));
    }
    cfg.mppi.validate()
}

/// Mean |mu - oracle| over observed cells whose footprint lies on the terrain.
fn scan_mae(env: &TerrainField, grid: &FeatureGrid, frame: &GridFrame, cm: &CostMap, footprint: f64) -> Option<f64> {
    let h = grid.size();
    let (mut sum, mut n) = (0.0, 0usize);
    for row in 0..h {
        for col in 0..h {
            if !grid.mask(row, col) {
                continue;
            }
            if let Ok(y) = oracle_label(env, frame.cell_center(row, col), footprint) {
                sum += (cm.mu_at(row, col) - y).abs();
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

struct Tracker {
    states: Vec<VehicleState>,
    hazard_sum: f64,
    hazard_max: f64,
    hazard_n: usize,
    length: f64,
}

impl Tracker {
    fn new(start: VehicleState) -> Self {
        Tracker {
            states: vec![start],
            hazard_sum: 0.0,
            hazard_max: 0.0,
            hazard_n: 0,
            length: 0.0,
        }
    }

    fn push(&mut self, env: &TerrainField, s: VehicleState, footprint: f64) -> Result<()> {
        let prev = *self.states.last().unwrap();
        self.length += prev.distance_to([s.x, s.y]);
        let h = oracle_label(env, [s.x, s.y], footprint).map_err(|_| Error::Boundary { x: s.x, y: s.y })?;
        self.hazard_sum += h;
        self.hazard_max = self.hazard_max.max(h);
        self.hazard_n += 1;
        self.states.push(s);
        Ok(())
    }

    fn finish(self, termination: Termination, steps: usize, goal: [f64; 2], mae: Option<f64>, dt: f64) -> Episode {
        let last = *self.states.last().unwrap();
        Episode {
            report: EpisodeReport {
                success: termination == Termination::Goal,
                termination,
                steps,
                path_length_m: self.length,
                mean_hazard: if self.hazard_n > 0 { self.hazard_sum / self.hazard_n as f64 } else { 0.0 },
                max_hazard: self.hazard_max,
                mean_scan_mae: mae,
                final_distance_m: last.distance_to(goal),
            },
            path: Trajectory { dt, states: self.states },
        }
    }
}

/// Drives from `start` (x, y, yaw) to `goal` with the learned cost map:
/// scan, rasterize, optionally adapt, predict, plan, act, then record the
/// new interaction labels for the adaptation buffer.
pub fn navigate(
    env: &TerrainField,
    model: &ModelParams,
    cfg: &NavConfig,
    start: [f64; 3],
    goal: [f64; 2],
    adapt: bool,
    seed: u64,
) -> Result<Episode> {
    check_endpoints(env, cfg, start, goal)?;
    let sim_dt = cfg.mppi.dt / cfg.substeps as f64;
    let mut state = VehicleState::on_terrain(start[0], start[1], start[2], 0.0, env)?;
    let mut tracker = Tracker::new(state);
    let mut buffer = AdaptBuffer::new(cfg.buffer_capacity);
    let mut nominal = vec![Control::zero(); cfg.mppi.horizon];
    let mut mae_sum = 0.0;
    let mut mae_n = 0usize;
    let bounds = Some(env.bounds());
    let mppi_seed = seeds::mix(&[seed, cfg.mppi.seed_stream]);
    let lidar_seed = seeds::mix(&[seed, cfg.lidar.seed_stream]);

    let mut termination = Termination::Budget;
    let mut steps = 0;
    'outer: for t in 0..cfg.max_steps {
        let scan_pose = state;
        let lidar = LidarSpec {
            seed_stream: seeds::derive(lidar_seed, seeds::stream::LIDAR, t as u64),
            ..cfg.lidar.clone()
        };
        let cloud = sensor::scan(env, &state, &lidar)?;
        let grid = sensor::rasterize(&cloud, &state, &cfg.grid);
        let frame = cfg.grid.frame_at(&state);
        let local = if adapt && !buffer.is_empty() {
            meta::online_adapt(model, &buffer, cfg.adapt_steps, cfg.adapt_lr)?
        } else {
            model.clone()
        };
        let costmap = costnet::forward(&local, &grid)?;
        if let Some(m) = scan_mae(env, &grid, &frame, &costmap, cfg.hazard_footprint_m) {
            mae_sum += m;
            mae_n += 1;
        }
        let ctx = CostContext {
            costmap: &costmap,
            grid: &grid,
            frame,
            goal,
            bounds,
        };
        let plan = mppi_step(
            &state,
            &ctx,
            &nominal,
            &cfg.mppi,
            seeds::derive(mppi_seed, seeds::stream::MPPI, t as u64),
        );
        nominal = plan.warm_start();
        steps = t + 1;
        let seg_start = tracker.states.len() - 1;
        for _ in 0..cfg.substeps {
            let next = match vehicle::step(&state, &plan.control, env, sim_dt) {
                Ok(s) => s,
                Err(Error::Boundary { .. }) => {
                    termination = Termination::Boundary;
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            if tracker.push(env, next, cfg.hazard_footprint_m).is_err() {
                termination = Termination::Boundary;
                break 'outer;
            }
            state = next;
            if state.distance_to(goal) <= cfg.goal_radius_m {
                termination = Termination::Goal;
                break 'outer;
            }
        }
        let window = Trajectory {
            dt: sim_dt,
            states: tracker.states[seg_start.saturating_sub(1)..].to_vec(),
        };
        if window.states.len() >= 3 {
            let samples = vehicle::interaction_feedback(&window, env, &cfg.grid, &scan_pose)?;
            if !samples.is_empty() {
                buffer.push(TrainBatch {
                    grid,
                    samples,
                    episode: t as u64,
                });
            }
        }
    }
    let mae = (mae_n > 0).then(|| mae_sum / mae_n as f64);
    Ok(tracker.finish(termination, steps, goal, mae, sim_dt))
}

/// Pure-pursuit straight-line tracker at the planner speed cap, blind to
/// terrain. The reference controller for navigation benchmarks.
pub fn navigate_straight(
    env: &TerrainField,
    cfg: &NavConfig,
    start: [f64; 3],
    goal: [f64; 2],
) -> Result<Episode> {
    check_endpoints(env, cfg, start, goal)?;
    let sim_dt = cfg.mppi.dt / cfg.substeps as f64;
    let mut state = VehicleState::on_terrain(start[0], start[1], start[2], 0.0, env)?;
    let mut tracker = Tracker::new(state);
    let mut termination = Termination::Budget;
    let mut steps = 0;
    'outer: for t in 0..cfg.max_steps {
        let heading = (goal[1] - state.y).atan2(goal[0] - state.x);
        let u = Control::new(cfg.mppi.v_cap, 2.0 * wrap_angle(heading - state.yaw));
        steps = t + 1;
        for _ in 0..cfg.substeps {
            state = match vehicle::step(&state, &u, env, sim_dt) {
                Ok(s) => s,
                Err(Error::Boundary { .. }) => {
                    termination = Termination::Boundary;
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            if tracker.push(env, state, cfg.hazard_footprint_m).is_err() {
                termination = Termination::Boundary;
                break 'outer;
            }
            if state.distance_to(goal) <= cfg.goal_radius_m {
                termination = Termination::Goal;
                break 'outer;
            }
        }
    }
    Ok(tracker.finish(termination, steps, goal, None, sim_dt))
}
