//! Kinematic bicycle on the heightmap and self-supervised interaction labels.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sensor::GridSpec;
use crate::terrain::TerrainField;

pub const WHEELBASE_M: f64 = 1.0;
/// Lateral spread of the attitude-fit footprint.
pub const TRACK_M: f64 = 0.8;
pub const V_MAX: f64 = 5.0;
pub const STEER_MAX: f64 = 0.5;
pub const ACCEL_MAX: f64 = 3.0;
pub const MAX_DT: f64 = 0.2;

/// Label weight on |vertical acceleration|, s^2/m.
pub const LABEL_ACCEL_WEIGHT: f64 = 0.25;
/// Label weight on |roll rate| + |pitch rate|, s/rad.
pub const LABEL_RATE_WEIGHT: f64 = 0.5;

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub v: f64,
    pub z: f64,
    pub roll: f64,
    pub pitch: f64,
}

impl VehicleState {
    /// State on a flat virtual plane (z, roll, pitch all zero).
    pub fn planar(x: f64, y: f64, yaw: f64, v: f64) -> Self {
        VehicleState {
            x,
            y,
            yaw: wrap_angle(yaw),
            v,
            z: 0.0,
            roll: 0.0,
            pitch: 0.0,
        }
    }

    /// State resting on the terrain, attitude from the footprint plane fit.
    pub fn on_terrain(x: f64, y: f64, yaw: f64, v: f64, field: &TerrainField) -> Result<Self> {
        let yaw = wrap_angle(yaw);
        let (z, roll, pitch) = attitude(field, x, y, yaw)?;
        Ok(VehicleState {
            x,
            y,
            yaw,
            v,
            z,
            roll,
            pitch,
        })
    }

    pub fn distance_to(&self, p: [f64; 2]) -> f64 {
        (self.x - p[0]).hypot(self.y - p[1])
    }

    /// One episode-log record: `t x y yaw v z roll pitch`.
    pub fn log_line(&self, t: f64) -> String {
        format!(
            "{t} {} {} {} {} {} {} {}",
            self.x, self.y, self.yaw, self.v, self.z, self.roll, self.pitch
        )
    }
}

/// Renders an episode log, one line per state.
pub fn episode_log(states: &[VehicleState], dt: f64) -> String {
    let mut out = String::new();
    for (i, s) in states.iter().enumerate() {
        let _ = writeln!(out, "{}", s.log_line(i as f64 * dt));
    }
    out
}

/// Least-squares plane over a 3x3 footprint around (x, y) aligned with `yaw`.
/// Returns (z, roll, pitch).
pub fn attitude(field: &TerrainField, x: f64, y: f64, yaw: f64) -> Result<(f64, f64, f64)> {
    const LON: [f64; 3] = [-0.5 * WHEELBASE_M, 0.0, 0.5 * WHEELBASE_M];
    const LAT: [f64; 3] = [-0.5 * TRACK_M, 0.0, 0.5 * TRACK_M];
    let (s, c) = yaw.sin_cos();
    let (mut sum, mut su, mut sw) = (0.0, 0.0, 0.0);
    for u in LON {
        for w in LAT {
            let px = x + u * c - w * s;
            let py = y + u * s + w * c;
            if !field.contains(px, py) {
                return Err(Error::Boundary { x, y });
            }
            let h = field.height_unchecked(px, py);
            sum += h;
            su += u * h;
            sw += w * h;
        }
    }
    // The sample offsets are symmetric, so the normal equations decouple.
    let su2: f64 = 3.0 * LON.iter().map(|u| u * u).sum::<f64>();
    let sw2: f64 = 3.0 * LAT.iter().map(|w| w * w).sum::<f64>();
    let z = sum / 9.0;
    let pitch = (su / su2).atan();
    let roll = (sw / sw2).atan();
    Ok((z, roll, pitch))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Control {
    pub v_cmd: f64,
    pub steer: f64,
}

impl Control {
    /// Clamps into the actuator limits.
    pub fn new(v_cmd: f64, steer: f64) -> Self {
        Control {
            v_cmd: v_cmd.clamp(0.0, V_MAX),
            steer: steer.clamp(-STEER_MAX, STEER_MAX),
        }
    }

    pub fn zero() -> Self {
        Control {
            v_cmd: 0.0,
            steer: 0.0,
        }
    }
}

/// Planar kinematic bicycle update. Attitude fields are copied unchanged.
pub fn kinematic_step(state: &VehicleState, u: &Control, dt: f64) -> VehicleState {
    let u = Control::new(u.v_cmd, u.steer);
    let v = state.v;
    let (s, c) = state.yaw.sin_cos();
    let dv = (u.v_cmd - v).clamp(-ACCEL_MAX * dt, ACCEL_MAX * dt);
    VehicleState {
        x: state.x + v * c * dt,
        y: state.y + v * s * dt,
        yaw: wrap_angle(state.yaw + v / WHEELBASE_M * u.steer.tan() * dt),
        v: v + dv,
        ..*state
    }
}

/// Advances the vehicle on the terrain. Leaving the terrain yields
/// [`Error::Boundary`].
pub fn step(
    state: &VehicleState,
    u: &Control,
    field: &TerrainField,
    dt: f64,
) -> Result<VehicleState> {
    if !(dt > 0.0 && dt <= MAX_DT) {
        return Err(Error::validation("dt", format!("{dt} not in (0, {MAX_DT}]")));
    }
    let next = kinematic_step(state, u, dt);
    VehicleState::on_terrain(next.x, next.y, next.yaw, next.v, field)
}

/// Uniformly sampled pose sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<VehicleState>,
}

/// Self-supervised label at one traversed grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionSample {
    pub row: usize,
    pub col: usize,
    pub label: f64,
    pub weight: f64,
}

impl InteractionSample {
    pub fn new(row: usize, col: usize, label: f64) -> Self {
        InteractionSample {
            row,
            col,
            label,
            weight: 1.0,
        }
    }
}

/// Roughness proxy label of every interior state of `traj`, with the state
/// position. Heights and attitude are re-derived from `field`.
pub fn state_labels(traj: &Trajectory, field: &TerrainField) -> Result<Vec<([f64; 2], f64)>> {
    let n = traj.states.len();
    if n < 3 {
        return Err(Error::validation("trajectory", format!("{n} states, need at least 3")));
    }
    if !(traj.dt > 0.0) {
        return Err(Error::validation("dt", "must be positive"));
    }
    let att = traj
        .states
        .iter()
        .map(|s| attitude(field, s.x, s.y, s.yaw))
        .collect::<Result<Vec<_>>>()?;
    let dt = traj.dt;
    Ok((1..n - 1)
        .map(|i| {
            let zdd = (att[i + 1].0 - 2.0 * att[i].0 + att[i - 1].0) / (dt * dt);
            let roll_rate = (att[i].1 - att[i - 1].1) / dt;
            let pitch_rate = (att[i].2 - att[i - 1].2) / dt;
            let z = LABEL_ACCEL_WEIGHT * zdd.abs()
                + LABEL_RATE_WEIGHT * (roll_rate.abs() + pitch_rate.abs());
            let s = &traj.states[i];
            ([s.x, s.y], -(-z).exp_m1())
        })
        .collect())
}

/// Per-cell labels for the grid anchored at `scan_pose`, max-aggregated over
/// the interior states of `traj` that fall inside each cell. Cells appear in
/// first-visit order; states outside the grid are dropped.
pub fn interaction_feedback(
    traj: &Trajectory,
    field: &TerrainField,
    gspec: &GridSpec,
    scan_pose: &VehicleState,
) -> Result<Vec<InteractionSample>> {
    let frame = gspec.frame_at(scan_pose);
    let mut out: Vec<InteractionSample> = Vec::new();
    for (p, label) in state_labels(traj, field)? {
        let Some((row, col)) = frame.cell_of(p[0], p[1]) else {
            continue;
        };
        match out.iter_mut().find(|s| s.row == row && s.col == col) {
            Some(s) => s.label = s.label.max(label),
            None => out.push(InteractionSample::new(row, col, label)),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terrain::{generate_terrain, Family, TerrainSpec};

    fn flat() -> TerrainField {
        generate_terrain(&TerrainSpec::new(Family::Flat, 0.0, 1.0, 0)).unwrap()
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert_eq!(wrap_angle(0.25), 0.25);
    }

    #[test]
    fn control_clamps() {
        let u = Control::new(9.0, -2.0);
        assert_eq!(u, Control { v_cmd: V_MAX, steer: -STEER_MAX });
        assert_eq!(Control::new(-1.0, 0.1).v_cmd, 0.0);
    }

    #[test]
    fn stationary_stays_put() {
        let f = flat();
        let s = VehicleState::on_terrain(10.0, 12.0, 0.4, 0.0, &f).unwrap();
        let n = step(&s, &Control::zero(), &f, 0.1).unwrap();
        assert_eq!((n.x, n.y, n.yaw), (s.x, s.y, s.yaw));
    }

    #[test]
    fn straight_on_flat() {
        let f = flat();
        let yaw = 0.3;
        let s = VehicleState::on_terrain(10.0, 10.0, yaw, 2.0, &f).unwrap();
        let n = step(&s, &Control::new(2.0, 0.0), &f, 0.1).unwrap();
        assert!((n.x - (10.0 + 0.2 * yaw.cos())).abs() < 1e-14);
        assert_eq!((n.z, n.roll, n.pitch), (0.0, 0.0, 0.0));
        assert_eq!(n.v, 2.0);
    }

    #[test]
    fn bad_dt_and_boundary() {
        let f = flat();
        let s = VehicleState::on_terrain(10.0, 10.0, 0.0, 2.0, &f).unwrap();
        assert!(matches!(step(&s, &Control::zero(), &f, 0.0), Err(Error::Validation { .. })));
        assert!(step(&s, &Control::zero(), &f, 0.25).is_err());
        let edge = VehicleState::on_terrain(47.3, 10.0, 0.0, 5.0, &f).unwrap();
        assert!(matches!(
            step(&edge, &Control::new(5.0, 0.0), &f, 0.2),
            Err(Error::Boundary { .. })
        ));
    }

    #[test]
    fn circle_radius() {
        let f = flat();
        let delta: f64 = 0.3;
        let v = 2.0;
        let dt = 0.01;
        let radius = WHEELBASE_M / delta.tan();
        let period = TAU * radius / v;
        let mut s = VehicleState::on_terrain(24.0, 20.0, 0.0, v, &f).unwrap();
        let mut pts = vec![(s.x, s.y)];
        for _ in 0..(period / dt).round() as usize {
            s = step(&s, &Control::new(v, delta), &f, dt).unwrap();
            pts.push((s.x, s.y));
        }
        // analytic center is at distance R to the left of the start heading
        let (cx, cy) = (24.0, 20.0 + radius);
        let mean_r = pts.iter().map(|(x, y)| (x - cx).hypot(y - cy)).sum::<f64>() / pts.len() as f64;
        assert!((mean_r - radius).abs() / radius < 0.01, "{mean_r} vs {radius}");
        let closure = (pts[0].0 - s.x).hypot(pts[0].1 - s.y);
        assert!(closure / radius < 0.05);
    }

    #[test]
    fn attitude_on_tilted_plane() {
        let n = 64;
        let g = 0.2;
        let mut h = Vec::new();
        for row in 0..=n {
            for col in 0..=n {
                h.push(g * col as f64 * 0.25 + 0.0 * row as f64);
            }
        }
        let f = TerrainField::from_heights(n, 0.25, [0.0, 0.0], h).unwrap();
        let (z, roll, pitch) = attitude(&f, 8.0, 8.0, 0.0).unwrap();
        assert!((z - 1.6).abs() < 1e-12);
        assert!((pitch - g.atan()).abs() < 1e-12);
        assert!(roll.abs() < 1e-12);
        let (_, roll, pitch) = attitude(&f, 8.0, 8.0, PI / 2.0).unwrap();
        assert!(pitch.abs() < 1e-12);
        assert!((roll + g.atan()).abs() < 1e-12);
    }

    #[test]
    fn flat_labels_are_zero() {
        let f = flat();
        let mut s = VehicleState::on_terrain(20.0, 20.0, 0.2, 2.0, &f).unwrap();
        let mut states = vec![s];
        for _ in 0..40 {
            s = step(&s, &Control::new(2.0, 0.1), &f, 0.05).unwrap();
            states.push(s);
        }
        let traj = Trajectory { dt: 0.05, states };
        let labels = interaction_feedback(&traj, &f, &GridSpec::default(), &traj.states[0]).unwrap();
        assert!(!labels.is_empty());
        assert!(labels.iter().all(|l| l.label == 0.0));
    }

    #[test]
    fn short_trajectory_rejected() {
        let f = flat();
        let s = VehicleState::on_terrain(20.0, 20.0, 0.0, 1.0, &f).unwrap();
        let traj = Trajectory { dt: 0.05, states: vec![s, s] };
        assert!(matches!(
            interaction_feedback(&traj, &f, &GridSpec::default(), &s),
            Err(Error::Validation { field: "trajectory", .. })
        ));
    }

    #[test]
    fn cells_outside_grid_dropped_and_max_aggregated() {
        let spec = TerrainSpec::new(Family::Rough, 0.4, 1.0, 8);
        let f = generate_terrain(&spec).unwrap();
        let mut s = VehicleState::on_terrain(10.0, 20.0, 0.0, 3.0, &f).unwrap();
        let scan_pose = s;
        let mut states = vec![s];
        for _ in 0..120 {
            s = step(&s, &Control::new(3.0, 0.0), &f, 0.05).unwrap();
            states.push(s);
        }
        let traj = Trajectory { dt: 0.05, states };
        let gs = GridSpec::default();
        let samples = interaction_feedback(&traj, &f, &gs, &scan_pose).unwrap();
        let frame = gs.frame_at(&scan_pose);
        let per_state = state_labels(&traj, &f).unwrap();
        // 18 m of travel, but the grid only reaches 8 m ahead
        assert_eq!(samples.len(), 16);
        for smp in &samples {
            let expect = per_state
                .iter()
                .filter(|(p, _)| frame.cell_of(p[0], p[1]) == Some((smp.row, smp.col)))
                .map(|(_, l)| *l)
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(smp.label, expect);
            assert!((0.0..=1.0).contains(&smp.label));
        }
    }
}
