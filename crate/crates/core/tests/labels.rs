mod common;

use common::*;
use terrameta::harness::{self, PolicyConfig};
use terrameta::sensor::GridSpec;
use terrameta::terrain::{self, Family, TerrainField, TerrainSpec};
use terrameta::vehicle::{self, Control, Trajectory, VehicleState};

fn world(family: Family, amp: f64, corr: f64, seed: u64) -> TerrainField {
    terrain::generate_terrain(&TerrainSpec {
        extent_m: 32.0,
        ..TerrainSpec::new(family, amp, corr, seed)
    })
    .unwrap()
}

fn walk(field: &TerrainField, seed: u64) -> Trajectory {
    let policy = PolicyConfig {
        start_radius_m: 4.0,
        ..PolicyConfig::default()
    };
    harness::drive_random_walk(field, &policy, 200, 0.05, seed).unwrap()
}

/// Labels of every scan window along a trajectory, with the oracle at each
/// labeled cell center.
fn labeled_cells(field: &TerrainField, traj: &Trajectory) -> Vec<(f64, f64)> {
    let gs = GridSpec::default();
    let mut out = Vec::new();
    for (s, w) in harness::scan_windows(traj.states.len(), 10) {
        let pose = traj.states[s];
        let seg = Trajectory {
            dt: traj.dt,
            states: traj.states[w].to_vec(),
        };
        let frame = gs.frame_at(&pose);
        for smp in vehicle::interaction_feedback(&seg, field, &gs, &pose).unwrap() {
            let c = frame.cell_center(smp.row, smp.col);
            if let Ok(o) = terrain::oracle_label(field, c, 1.0) {
                out.push((smp.label, o));
            }
        }
    }
    out
}

#[test]
fn labels_track_terrain_oracle_on_rough_worlds() {
    let mut pairs = Vec::new();
    for (i, amp) in [0.05, 0.1, 0.15, 0.2].into_iter().enumerate() {
        let field = world(Family::Rough, amp, 1.75, 40 + i as u64);
        for ep in 0..3 {
            pairs.extend(labeled_cells(&field, &walk(&field, 100 * i as u64 + ep)));
        }
    }
    assert!(pairs.len() >= 500, "only {} cells", pairs.len());
    let (y, o): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let rho = spearman(&y, &o);
    eprintln!("spearman {rho} over {} cells", y.len());
    assert!(rho >= 0.6, "spearman {rho} over {} cells", y.len());
}

#[test]
fn labels_stay_in_unit_interval() {
    let worlds = [
        world(Family::Rolling, 1.5, 4.0, 1),
        world(Family::Rough, 0.5, 1.0, 2),
        world(Family::Boulders, 1.0, 1.5, 3),
        world(Family::Slope, 4.0, 8.0, 4),
    ];
    for (i, f) in worlds.iter().enumerate() {
        for ep in 0..5 {
            let traj = walk(f, 10 * i as u64 + ep);
            for (_, y) in vehicle::state_labels(&traj, f).unwrap() {
                assert!((0.0..=1.0).contains(&y));
            }
        }
    }
}

#[test]
fn flat_world_labels_are_zero() {
    let f = world(Family::Flat, 0.0, 1.0, 0);
    for ep in 0..5 {
        let traj = walk(&f, ep);
        assert!(vehicle::state_labels(&traj, &f).unwrap().iter().all(|(_, y)| *y == 0.0));
    }
}

/// Same planar path re-evaluated on a terrain with doubled heights. Roll and
/// pitch rates of a plane fit are not exactly homogeneous (atan), so this is
/// an empirical check over many episodes.
#[test]
fn doubling_amplitude_does_not_lower_cell_labels() {
    let gs = GridSpec::default();
    let mut checked = 0;
    for ep in 0..100u64 {
        let f = world(Family::Rough, 0.1, 1.5, 500 + ep % 10);
        let f2 = f.scaled(2.0);
        let traj = walk(&f, ep);
        for (s, w) in harness::scan_windows(traj.states.len(), 10) {
            let seg = Trajectory {
                dt: traj.dt,
                states: traj.states[w].to_vec(),
            };
            let a = vehicle::interaction_feedback(&seg, &f, &gs, &traj.states[s]).unwrap();
            let b = vehicle::interaction_feedback(&seg, &f2, &gs, &traj.states[s]).unwrap();
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                assert_eq!((x.row, x.col), (y.row, y.col));
                assert!(y.label >= x.label, "episode {ep}: {} -> {}", x.label, y.label);
                checked += 1;
            }
        }
    }
    assert!(checked > 1000);
}

#[test]
fn circle_radius_matches_bicycle_geometry() {
    let f = world(Family::Flat, 0.0, 1.0, 0);
    let delta: f64 = 0.3;
    let expect = vehicle::WHEELBASE_M / delta.tan();
    let mut s = VehicleState::on_terrain(16.0, 12.0, 0.0, 1.0, &f).unwrap();
    let period = std::f64::consts::TAU * expect / 1.0;
    let steps = (period / 0.01).round() as usize;
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    let mut pts = Vec::new();
    for _ in 0..steps {
        s = vehicle::step(&s, &Control::new(1.0, delta), &f, 0.01).unwrap();
        sx += s.x;
        sy += s.y;
        n += 1.0;
        pts.push((s.x, s.y));
    }
    let (cx, cy) = (sx / n, sy / n);
    for (x, y) in pts {
        let r = (x - cx).hypot(y - cy);
        assert!((r - expect).abs() < 0.01 * expect, "radius {r} vs {expect}");
    }
}

#[test]
fn step_converges_in_dt() {
    let f = world(Family::Rolling, 0.5, 6.0, 3);
    let end = |dt: f64| {
        let mut s = VehicleState::on_terrain(8.0, 8.0, 0.6, 0.0, &f).unwrap();
        let steps = (10.0 / dt).round() as usize;
        for i in 0..steps {
            let t = i as f64 * dt;
            s = vehicle::step(&s, &Control::new(1.5, 0.2 * (0.5 * t).sin()), &f, dt).unwrap();
        }
        s
    };
    let (a, b, c) = (end(0.04), end(0.02), end(0.01));
    let d1 = (a.x - b.x).hypot(a.y - b.y);
    let d2 = (b.x - c.x).hypot(b.y - c.y);
    assert!(d1 < 0.2 && d2 < 0.6 * d1, "endpoint differences {d1} {d2}");
}
