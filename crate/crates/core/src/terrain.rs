//! Procedural 2.5D terrain worlds and the ground-truth traversability oracle.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

/// Oracle gain per unit of mean slope.
pub const ORACLE_SLOPE_GAIN: f64 = 2.0;
/// Oracle gain per meter of height standard deviation.
pub const ORACLE_STD_GAIN: f64 = 4.0;

const OCTAVES: usize = 4;
const PERSISTENCE: f64 = 0.5;
const LACUNARITY: f64 = 2.0;
/// Standard deviation of the unnormalized 4-octave value-noise sum, measured
/// by Monte-Carlo over 40 seeds of 256x256 samples at 8 samples per lattice
/// period. Dividing by it gives unit-variance noise.
const FBM_STD: f64 = 0.524;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    Flat,
    Rolling,
    Rough,
    Boulders,
    Slope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerrainSpec {
    pub family: Family,
    pub extent_m: f64,
    pub base_resolution_m: f64,
    pub amplitude_m: f64,
    pub correlation_length_m: f64,
    pub obstacle_density: f64,
    pub seed: u64,
}

impl TerrainSpec {
    pub fn new(family: Family, amplitude_m: f64, correlation_length_m: f64, seed: u64) -> Self {
        TerrainSpec {
            family,
            extent_m: 48.0,
            base_resolution_m: 0.25,
            amplitude_m,
            correlation_length_m,
            obstacle_density: if family == Family::Boulders { 0.08 } else { 0.0 },
            seed,
        }
    }

    /// Number of cells per side (the grid has one more node per side).
    pub fn cells_per_side(&self) -> Result<usize> {
        let ratio = self.extent_m / self.base_resolution_m;
        let n = ratio.round();
        if !ratio.is_finite() || (ratio - n).abs() > 1e-9 * ratio.abs().max(1.0) {
            return Err(Error::validation(
                "extent_m",
                format!("extent/resolution = {ratio} is not an integer"),
            ));
        }
        if n < 16.0 {
            return Err(Error::validation(
                "extent_m",
                format!("extent/resolution = {n} must be at least 16"),
            ));
        }
        Ok(n as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.extent_m.is_finite() && self.extent_m > 0.0) {
            return Err(Error::validation("extent_m", "must be positive"));
        }
        if !(self.base_resolution_m.is_finite() && self.base_resolution_m > 0.0) {
            return Err(Error::validation("base_resolution_m", "must be positive"));
        }
        self.cells_per_side()?;
        if !(self.amplitude_m.is_finite() && self.amplitude_m >= 0.0) {
            return Err(Error::validation("amplitude_m", "must be nonnegative"));
        }
        if self.amplitude_m == 0.0 && !matches!(self.family, Family::Flat | Family::Rolling) {
            return Err(Error::validation(
                "amplitude_m",
                format!("zero amplitude not allowed for {:?}", self.family),
            ));
        }
        if !(self.correlation_length_m.is_finite() && self.correlation_length_m > 0.0) {
            return Err(Error::validation("correlation_length_m", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.obstacle_density) {
            return Err(Error::validation("obstacle_density", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Heightmap on a regular (N+1)x(N+1) node lattice. Node (row, col) sits at
/// `origin + (col, row) * resolution`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerrainField {
    n: usize,
    resolution_m: f64,
    origin: [f64; 2],
    heights: Vec<f64>,
}

impl TerrainField {
    pub fn from_heights(
        n: usize,
        resolution_m: f64,
        origin: [f64; 2],
        heights: Vec<f64>,
    ) -> Result<Self> {
        if n < 16 {
            return Err(Error::validation("n", format!("{n} < 16")));
        }
        if !(resolution_m.is_finite() && resolution_m > 0.0) {
            return Err(Error::validation("resolution_m", "must be positive"));
        }
        if heights.len() != (n + 1) * (n + 1) {
            return Err(Error::validation(
                "heights",
                format!("expected {} values, got {}", (n + 1) * (n + 1), heights.len()),
            ));
        }
        if let Some(i) = heights.iter().position(|h| !h.is_finite()) {
            return Err(Error::validation("heights", format!("node {i} is not finite")));
        }
        Ok(TerrainField {
            n,
            resolution_m,
            origin,
            heights,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn resolution_m(&self) -> f64 {
        self.resolution_m
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub fn extent_m(&self) -> f64 {
        self.n as f64 * self.resolution_m
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    pub fn node(&self, row: usize, col: usize) -> f64 {
        self.heights[row * (self.n + 1) + col]
    }

    /// Returns (min corner, max corner).
    pub fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        let e = self.extent_m();
        (self.origin, [self.origin[0] + e, self.origin[1] + e])
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (lo, hi) = self.bounds();
        x >= lo[0] && x <= hi[0] && y >= lo[1] && y <= hi[1]
    }

    /// Distance from (x, y) to the nearest edge; negative outside.
    pub fn clearance(&self, x: f64, y: f64) -> f64 {
        let (lo, hi) = self.bounds();
        (x - lo[0]).min(hi[0] - x).min(y - lo[1]).min(hi[1] - y)
    }

    /// Bilinear height at (x, y).
    pub fn height_at(&self, x: f64, y: f64) -> Result<f64> {
        if !self.contains(x, y) {
            return Err(Error::Range(format!("height query ({x}, {y}) outside terrain")));
        }
        Ok(self.height_unchecked(x, y))
    }

    /// Bilinear height for a point already known to be inside.
    pub(crate) fn height_unchecked(&self, x: f64, y: f64) -> f64 {
        let u = (x - self.origin[0]) / self.resolution_m;
        let v = (y - self.origin[1]) / self.resolution_m;
        let col = (u.floor() as usize).min(self.n - 1);
        let row = (v.floor() as usize).min(self.n - 1);
        let tx = u - col as f64;
        let ty = v - row as f64;
        let h00 = self.node(row, col);
        let h01 = self.node(row, col + 1);
        let h10 = self.node(row + 1, col);
        let h11 = self.node(row + 1, col + 1);
        let bottom = h00 + (h01 - h00) * tx;
        let top = h10 + (h11 - h10) * tx;
        bottom + (top - bottom) * ty
    }

    /// Returns a copy with every height multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> TerrainField {
        TerrainField {
            heights: self.heights.iter().map(|h| h * factor).collect(),
            ..self.clone()
        }
    }

    /// Returns a copy moved by a planar offset.
    pub fn translated(&self, dx: f64, dy: f64) -> TerrainField {
        TerrainField {
            origin: [self.origin[0] + dx, self.origin[1] + dy],
            ..self.clone()
        }
    }

    /// Plain-text dump: `TERRAIN v1 N resolution origin_x origin_y` followed
    /// by N+1 rows of N+1 heights.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.heights.len() * 12);
        let _ = writeln!(
            out,
            "TERRAIN v1 {} {} {} {}",
            self.n, self.resolution_m, self.origin[0], self.origin[1]
        );
        for row in self.heights.chunks(self.n + 1) {
            let line: Vec<String> = row.iter().map(|h| h.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty terrain dump".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 6 || fields[0] != "TERRAIN" || fields[1] != "v1" {
            return Err(Error::Parse(format!("bad terrain header {header:?}")));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Parse(format!("terrain header value {s:?}: {e}")))
        };
        let n: usize = fields[2]
            .parse()
            .map_err(|e| Error::Parse(format!("terrain size: {e}")))?;
        let resolution = num(fields[3])?;
        let origin = [num(fields[4])?, num(fields[5])?];
        let mut heights = Vec::with_capacity((n + 1) * (n + 1));
        for line in lines.filter(|l| !l.trim().is_empty()) {
            for tok in line.split_whitespace() {
                heights.push(num(tok)?);
            }
        }
        TerrainField::from_heights(n, resolution, origin, heights)
    }
}

fn lattice_value(seed: u64, octave: usize, ix: i64, iy: i64) -> f64 {
    let h = seeds::mix(&[seed, octave as u64, ix as u64, iy as u64]);
    // 53 random bits mapped to [-1, 1)
    (h >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

fn quintic(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn value_noise(seed: u64, octave: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let (ix, iy) = (x0 as i64, y0 as i64);
    let tx = quintic(x - x0);
    let ty = quintic(y - y0);
    let a = lattice_value(seed, octave, ix, iy);
    let b = lattice_value(seed, octave, ix + 1, iy);
    let c = lattice_value(seed, octave, ix, iy + 1);
    let d = lattice_value(seed, octave, ix + 1, iy + 1);
    let bottom = a + (b - a) * tx;
    let top = c + (d - c) * tx;
    bottom + (top - bottom) * ty
}

/// Unit-variance fractal value noise; `x`, `y` in lattice periods.
pub(crate) fn fbm(seed: u64, x: f64, y: f64) -> f64 {
    let mut sum = 0.0;
    let mut amp = 1.0;
    let mut freq = 1.0;
    for octave in 0..OCTAVES {
        sum += amp * value_noise(seed, octave, x * freq, y * freq);
        amp *= PERSISTENCE;
        freq *= LACUNARITY;
    }
    sum / FBM_STD
}

/// Unnormalized octave sum, exposed for calibrating [`FBM_STD`].
#[doc(hidden)]
pub fn raw_fbm(seed: u64, x: f64, y: f64) -> f64 {
    fbm(seed, x, y) * FBM_STD
}

#[derive(Debug, Clone, Copy)]
struct Boulder {
    x: f64,
    y: f64,
    r: f64,
}

fn place_boulders(spec: &TerrainSpec) -> Vec<Boulder> {
    let mut rng = seeds::rng(seeds::derive(spec.seed, "boulders", 0));
    let extent = spec.extent_m;
    let mean_r = 0.8 * spec.amplitude_m;
    let area = extent * extent;
    let target = (spec.obstacle_density * area / (std::f64::consts::PI * mean_r * mean_r)).round()
        as usize;
    let gap = spec.correlation_length_m;
    let mut placed: Vec<Boulder> = Vec::with_capacity(target);
    let mut attempts = 0;
    while placed.len() < target && attempts < 50 * target.max(1) {
        attempts += 1;
        let r = spec.amplitude_m * rng.random_range(0.6..1.0);
        let x = rng.random_range(r..extent - r);
        let y = rng.random_range(r..extent - r);
        let ok = placed.iter().all(|b| {
            let d = ((b.x - x).powi(2) + (b.y - y).powi(2)).sqrt();
            d >= b.r + r + gap
        });
        if ok {
            placed.push(Boulder { x, y, r });
        }
    }
    placed
}

/// Builds the terrain world described by `spec`.
pub fn generate_terrain(spec: &TerrainSpec) -> Result<TerrainField> {
    spec.validate()?;
    let n = spec.cells_per_side()?;
    let res = spec.base_resolution_m;
    let stride = n + 1;
    let mut heights = vec![0.0; stride * stride];
    let noise_seed = seeds::derive(spec.seed, "noise", 0);
    let node_xy = |idx: usize| ((idx % stride) as f64 * res, (idx / stride) as f64 * res);

    let add_noise = |heights: &mut [f64], amplitude: f64| {
        let inv = 1.0 / spec.correlation_length_m;
        for (idx, h) in heights.iter_mut().enumerate() {
            let (x, y) = node_xy(idx);
            *h += amplitude * fbm(noise_seed, x * inv, y * inv);
        }
    };

    match spec.family {
        Family::Flat => {}
        Family::Rolling | Family::Rough => add_noise(&mut heights, spec.amplitude_m),
        Family::Boulders => {
            for b in place_boulders(spec) {
                let lo_c = ((b.x - b.r) / res).floor().max(0.0) as usize;
                let hi_c = (((b.x + b.r) / res).ceil() as usize).min(n);
                let lo_r = ((b.y - b.r) / res).floor().max(0.0) as usize;
                let hi_r = (((b.y + b.r) / res).ceil() as usize).min(n);
                for row in lo_r..=hi_r {
                    for col in lo_c..=hi_c {
                        let dx = col as f64 * res - b.x;
                        let dy = row as f64 * res - b.y;
                        let q = b.r * b.r - dx * dx - dy * dy;
                        if q > 0.0 {
                            let h = &mut heights[row * stride + col];
                            *h = h.max(q.sqrt());
                        }
                    }
                }
            }
        }
        Family::Slope => {
            let mut rng = seeds::rng(seeds::derive(spec.seed, "slope", 0));
            let dir: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let grad = spec.amplitude_m / spec.correlation_length_m;
            let (gx, gy) = (grad * dir.cos(), grad * dir.sin());
            let c = 0.5 * spec.extent_m;
            for (idx, h) in heights.iter_mut().enumerate() {
                let (x, y) = node_xy(idx);
                *h = gx * (x - c) + gy * (y - c);
            }
            add_noise(&mut heights, 0.1 * spec.amplitude_m);
        }
    }
    TerrainField::from_heights(n, res, [0.0, 0.0], heights)
}

/// Ground-truth traversability cost in [0, 1) of a square window centered at
/// `center`: `1 - exp(-(k1 * mean_slope + k2 * height_std))`, sampled at the
/// field resolution.
pub fn oracle_label(field: &TerrainField, center: [f64; 2], footprint_m: f64) -> Result<f64> {
    let res = field.resolution_m();
    let m = ((footprint_m / res).round() as usize).max(1) + 1;
    let half = 0.5 * (m - 1) as f64 * res;
    let (lo, hi) = field.bounds();
    if center[0] - half < lo[0]
        || center[0] + half > hi[0]
        || center[1] - half < lo[1]
        || center[1] + half > hi[1]
    {
        return Err(Error::Range(format!(
            "oracle footprint at ({}, {}) leaves the terrain",
            center[0], center[1]
        )));
    }
    let mut h = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            let x = center[0] - half + j as f64 * res;
            let y = center[1] - half + i as f64 * res;
            h[i * m + j] = field.height_unchecked(x.clamp(lo[0], hi[0]), y.clamp(lo[1], hi[1]));
        }
    }
    let mut slope_sum = 0.0;
    for i in 0..m - 1 {
        for j in 0..m - 1 {
            let (h00, h01) = (h[i * m + j], h[i * m + j + 1]);
            let (h10, h11) = (h[(i + 1) * m + j], h[(i + 1) * m + j + 1]);
            let gx = ((h01 - h00) + (h11 - h10)) / (2.0 * res);
            let gy = ((h10 - h00) + (h11 - h01)) / (2.0 * res);
            slope_sum += gx.hypot(gy);
        }
    }
    let slope = slope_sum / ((m - 1) * (m - 1)) as f64;
    let mean = h.iter().sum::<f64>() / h.len() as f64;
    let var = h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / h.len() as f64;
    let z = ORACLE_SLOPE_GAIN * slope + ORACLE_STD_GAIN * var.sqrt();
    Ok(-(-z).exp_m1())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(n: usize, res: f64, f: impl Fn(f64, f64) -> f64) -> TerrainField {
        let mut h = Vec::new();
        for row in 0..=n {
            for col in 0..=n {
                h.push(f(col as f64 * res, row as f64 * res));
            }
        }
        TerrainField::from_heights(n, res, [0.0, 0.0], h).unwrap()
    }

    #[test]
    fn flat_is_zero() {
        let spec = TerrainSpec::new(Family::Flat, 0.0, 4.0, 1);
        let f = generate_terrain(&spec).unwrap();
        assert!(f.heights().iter().all(|&h| h == 0.0));
    }

    #[test]
    fn generation_is_deterministic() {
        for fam in [Family::Rolling, Family::Rough, Family::Boulders, Family::Slope] {
            let spec = TerrainSpec::new(fam, 1.0, 3.0, 42);
            assert_eq!(generate_terrain(&spec).unwrap(), generate_terrain(&spec).unwrap());
        }
    }

    #[test]
    fn rolling_std_near_amplitude() {
        let spec = TerrainSpec {
            extent_m: 32.0,
            ..TerrainSpec::new(Family::Rolling, 1.0, 2.0, 9)
        };
        let f = generate_terrain(&spec).unwrap();
        let n = 128;
        let vals: Vec<f64> = (0..n).flat_map(|r| (0..n).map(move |c| (r, c))).map(|(r, c)| f.node(r, c)).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt();
        assert!((0.5..=1.5).contains(&std), "std = {std}");
    }

    #[test]
    fn validation_names_field() {
        let mut spec = TerrainSpec::new(Family::Rough, 0.0, 2.0, 1);
        match spec.validate() {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "amplitude_m"),
            other => panic!("{other:?}"),
        }
        spec.amplitude_m = 1.0;
        spec.extent_m = 3.0;
        assert!(matches!(spec.validate(), Err(Error::Validation { field: "extent_m", .. })));
        spec.extent_m = 10.1;
        assert!(matches!(spec.validate(), Err(Error::Validation { field: "extent_m", .. })));
        spec.extent_m = 16.0;
        spec.obstacle_density = 1.5;
        assert!(matches!(spec.validate(), Err(Error::Validation { field: "obstacle_density", .. })));
        let rolling = TerrainSpec::new(Family::Rolling, 0.0, 2.0, 1);
        assert!(rolling.validate().is_ok());
    }

    #[test]
    fn height_at_nodes_and_midpoints() {
        let f = plane(16, 0.5, |x, _| if x >= 1.0 { 1.0 } else { 0.0 });
        assert_eq!(f.height_at(1.0, 2.0).unwrap(), 1.0);
        assert_eq!(f.height_at(0.75, 2.0).unwrap(), 0.5);
        assert_eq!(f.height_at(8.0, 8.0).unwrap(), f.node(16, 16));
        assert!(matches!(f.height_at(-0.01, 1.0), Err(Error::Range(_))));
        assert!(matches!(f.height_at(1.0, 8.01), Err(Error::Range(_))));
    }

    #[test]
    fn height_continuous_across_edges() {
        let spec = TerrainSpec::new(Family::Rough, 1.0, 1.0, 3);
        let f = generate_terrain(&spec).unwrap();
        let res = f.resolution_m();
        let lip = 4.0 * f.heights().iter().fold(0.0f64, |m, h| m.max(h.abs())) / res;
        let eps = 1e-9;
        for k in 1..40 {
            let edge = k as f64 * res;
            let y = 0.37 * k as f64;
            let a = f.height_at(edge - eps, y).unwrap();
            let b = f.height_at(edge + eps, y).unwrap();
            assert!((a - b).abs() <= lip * 2.0 * eps, "{a} {b}");
        }
    }

    #[test]
    fn oracle_flat_is_zero_and_slope_positive() {
        let flat = plane(32, 0.25, |_, _| 0.0);
        assert_eq!(oracle_label(&flat, [4.0, 4.0], 1.0).unwrap(), 0.0);
        let raised = plane(32, 0.25, |_, _| 3.0);
        assert_eq!(oracle_label(&raised, [4.0, 4.0], 1.0).unwrap(), 0.0);
        let tilted = plane(32, 0.25, |x, _| 0.577_350_269 * x);
        let y = oracle_label(&tilted, [4.0, 4.0], 1.0).unwrap();
        assert!(y > 0.68 && y < 1.0, "{y}");
        assert!(oracle_label(&flat, [0.2, 4.0], 1.0).is_err());
    }

    #[test]
    fn oracle_monotone_under_scaling() {
        let spec = TerrainSpec::new(Family::Rough, 0.5, 2.0, 11);
        let f = generate_terrain(&spec).unwrap();
        let g = f.scaled(2.0);
        for i in 0..50 {
            let c = [2.0 + 0.83 * i as f64, 3.0 + 0.71 * i as f64];
            let a = oracle_label(&f, c, 1.0).unwrap();
            let b = oracle_label(&g, c, 1.0).unwrap();
            assert!(b >= a && b < 1.0 && a >= 0.0);
        }
    }

    #[test]
    fn text_round_trip() {
        let spec = TerrainSpec {
            extent_m: 8.0,
            ..TerrainSpec::new(Family::Rough, 0.7, 1.5, 5)
        };
        let f = generate_terrain(&spec).unwrap();
        let text = f.to_text();
        assert!(text.starts_with("TERRAIN v1 32 0.25 0 0\n"));
        let g = TerrainField::from_text(&text).unwrap();
        assert_eq!(f, g);
        assert_eq!(g.to_text(), text);
    }
}
