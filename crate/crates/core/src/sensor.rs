//! Simulated sparse LiDAR and the rasterized feature grid fed to the network.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;
use crate::terrain::TerrainField;
use crate::vehicle::VehicleState;

/// Bisection stops once the bracketing interval is this short (meters).
pub const BISECTION_TOL_M: f64 = 1e-4;
pub const COUNT_CAP: u16 = 255;
/// Network input channels: mask, mean height, height range, log1p(count).
pub const CHANNELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarSpec {
    pub azimuth_count: usize,
    pub elevation_angles_deg: Vec<f64>,
    pub max_range_m: f64,
    pub range_noise_std_m: f64,
    pub dropout_prob: f64,
    pub mount_height_m: f64,
    pub seed_stream: u64,
}

impl Default for LidarSpec {
    fn default() -> Self {
        LidarSpec {
            azimuth_count: 180,
            elevation_angles_deg: vec![
                -50.0, -40.0, -32.0, -25.0, -19.0, -14.0, -10.0, -7.0, -4.5, -2.5, -1.0, 1.0,
            ],
            max_range_m: 12.0,
            range_noise_std_m: 0.02,
            dropout_prob: 0.1,
            mount_height_m: 1.5,
            seed_stream: 0,
        }
    }
}

impl LidarSpec {
    pub fn validate(&self) -> Result<()> {
        if self.azimuth_count < 8 {
            return Err(Error::validation("azimuth_count", "must be at least 8"));
        }
        if self.elevation_angles_deg.is_empty() {
            return Err(Error::validation("elevation_angles_deg", "empty"));
        }
        if self
            .elevation_angles_deg
            .windows(2)
            .any(|w| !(w[0] < w[1]))
        {
            return Err(Error::validation(
                "elevation_angles_deg",
                "must be strictly increasing",
            ));
        }
        if !(self.max_range_m > 0.0) {
            return Err(Error::validation("max_range_m", "must be positive"));
        }
        if !(self.range_noise_std_m >= 0.0) {
            return Err(Error::validation("range_noise_std_m", "must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::validation("dropout_prob", "must lie in [0, 1)"));
        }
        if !(self.mount_height_m > 0.0) {
            return Err(Error::validation("mount_height_m", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

/// Square, vehicle-centered, world-axis-aligned raster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub size_cells: usize,
    pub cell_m: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            size_cells: 32,
            cell_m: 0.5,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size_cells == 0 {
            return Err(Error::validation("size_cells", "must be positive"));
        }
        if !(self.cell_m > 0.0) {
            return Err(Error::validation("cell_m", "must be positive"));
        }
        Ok(())
    }

    pub fn side_m(&self) -> f64 {
        self.size_cells as f64 * self.cell_m
    }

    pub fn frame_at(&self, pose: &VehicleState) -> GridFrame {
        let half = 0.5 * self.side_m();
        GridFrame {
            spec: *self,
            origin: [pose.x - half, pose.y - half],
        }
    }
}

/// A [`GridSpec`] placed in the world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridFrame {
    pub spec: GridSpec,
    /// World position of the corner of cell (0, 0).
    pub origin: [f64; 2],
}

impl GridFrame {
    /// Cell containing (x, y). Cells are half-open, so a point on an edge
    /// belongs to the cell with the larger index.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let u = ((x - self.origin[0]) / self.spec.cell_m).floor();
        let v = ((y - self.origin[1]) / self.spec.cell_m).floor();
        let h = self.spec.size_cells as f64;
        if u >= 0.0 && u < h && v >= 0.0 && v < h {
            Some((v as usize, u as usize))
        } else {
            None
        }
    }

    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.origin[0] + (col as f64 + 0.5) * self.spec.cell_m,
            self.origin[1] + (row as f64 + 0.5) * self.spec.cell_m,
        ]
    }
}

/// Per-cell point statistics, heights relative to the vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SparseGrid", into = "SparseGrid")]
pub struct FeatureGrid {
    size: usize,
    mask: Vec<bool>,
    mean_height: Vec<f64>,
    height_range: Vec<f64>,
    point_count: Vec<u16>,
}

impl FeatureGrid {
    pub fn empty(size: usize) -> Self {
        let n = size * size;
        FeatureGrid {
            size,
            mask: vec![false; n],
            mean_height: vec![0.0; n],
            height_range: vec![0.0; n],
            point_count: vec![0; n],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn mask(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.size + col]
    }

    pub fn mean_height(&self, row: usize, col: usize) -> f64 {
        self.mean_height[row * self.size + col]
    }

    pub fn height_range(&self, row: usize, col: usize) -> f64 {
        self.height_range[row * self.size + col]
    }

    pub fn point_count(&self, row: usize, col: usize) -> u16 {
        self.point_count[row * self.size + col]
    }

    pub fn observed_cells(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Overwrites one cell. A zero count clears the cell.
    pub fn set_cell(&mut self, row: usize, col: usize, mean: f64, range: f64, count: u16) {
        let i = row * self.size + col;
        if count == 0 {
            self.mask[i] = false;
            self.mean_height[i] = 0.0;
            self.height_range[i] = 0.0;
            self.point_count[i] = 0;
        } else {
            self.mask[i] = true;
            self.mean_height[i] = mean;
            self.height_range[i] = range;
            self.point_count[i] = count.min(COUNT_CAP);
        }
    }

    /// Network input value of channel `ch` at flat cell index `idx`.
    #[inline]
    pub fn input(&self, idx: usize, ch: usize) -> f64 {
        match ch {
            0 => f64::from(u8::from(self.mask[idx])),
            1 => self.mean_height[idx],
            2 => self.height_range[idx],
            3 => f64::from(self.point_count[idx]).ln_1p(),
            _ => 0.0,
        }
    }

    /// Raw (unscaled) channel value: mask, mean height, range, count.
    fn raw(&self, idx: usize, ch: usize) -> f64 {
        match ch {
            3 => f64::from(self.point_count[idx]),
            _ => self.input(idx, ch),
        }
    }

    /// `FGRID v1 H C`, then C channel blocks of H rows with H values each.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "FGRID v1 {} {}", self.size, CHANNELS);
        for ch in 0..CHANNELS {
            for row in 0..self.size {
                let line: Vec<String> = (0..self.size)
                    .map(|col| self.raw(row * self.size + col, ch).to_string())
                    .collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let f: Vec<&str> = header.split_whitespace().collect();
        if f.len() != 4 || f[0] != "FGRID" || f[1] != "v1" || f[3] != CHANNELS.to_string() {
            return Err(Error::Parse(format!("bad feature grid header {header:?}")));
        }
        let size: usize = f[2]
            .parse()
            .map_err(|e| Error::Parse(format!("grid size: {e}")))?;
        let vals = lines
            .flat_map(str::split_whitespace)
            .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("{t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let n = size * size;
        if vals.len() != CHANNELS * n {
            return Err(Error::Parse(format!(
                "expected {} values, found {}",
                CHANNELS * n,
                vals.len()
            )));
        }
        let mut grid = FeatureGrid::empty(size);
        for i in 0..n {
            let count = vals[3 * n + i];
            if vals[i] != 0.0 && count >= 1.0 {
                grid.set_cell(i / size, i % size, vals[n + i], vals[2 * n + i], count as u16);
            }
        }
        Ok(grid)
    }
}

/// Serialized form: only observed cells are listed.
#[derive(Serialize, Deserialize)]
struct SparseGrid {
    size: usize,
    /// (flat index, mean height, height range, count)
    cells: Vec<(usize, f64, f64, u16)>,
}

impl From<FeatureGrid> for SparseGrid {
    fn from(g: FeatureGrid) -> Self {
        let cells = (0..g.size * g.size)
            .filter(|&i| g.mask[i])
            .map(|i| (i, g.mean_height[i], g.height_range[i], g.point_count[i]))
            .collect();
        SparseGrid {
            size: g.size,
            cells,
        }
    }
}

impl TryFrom<SparseGrid> for FeatureGrid {
    type Error = String;

    fn try_from(s: SparseGrid) -> std::result::Result<Self, String> {
        let mut g = FeatureGrid::empty(s.size);
        for (i, mean, range, count) in s.cells {
            if i >= s.size * s.size || count == 0 {
                return Err(format!("invalid sparse cell {i} (count {count})"));
            }
            g.set_cell(i / s.size, i % s.size, mean, range, count);
        }
        Ok(g)
    }
}

/// First terrain intersection along `origin + t * dir`, `t` in [0, max_range].
///
/// Walks the heightmap cells crossed by the ray. Inside one cell the
/// bilinear surface makes the ray clearance a quadratic in `t`, so a crossing
/// is detected exactly (grazing hits included) and then refined by bisection
/// to [`BISECTION_TOL_M`].
pub fn cast_ray(field: &TerrainField, origin: [f64; 3], dir: [f64; 3], max_range: f64) -> Option<f64> {
    let (lo, hi) = field.bounds();
    if !field.contains(origin[0], origin[1]) {
        return None;
    }
    if origin[2] - field.height_unchecked(origin[0], origin[1]) <= 0.0 {
        return None;
    }
    let res = field.resolution_m();
    let n = field.n();
    let exit = |o: f64, d: f64, lo: f64, hi: f64| {
        if d > 0.0 {
            (hi - o) / d
        } else if d < 0.0 {
            (lo - o) / d
        } else {
            f64::INFINITY
        }
    };
    let t_end = max_range
        .min(exit(origin[0], dir[0], lo[0], hi[0]))
        .min(exit(origin[1], dir[1], lo[1], hi[1]));
    let cell = |v: f64| (v.floor().max(0.0) as usize).min(n - 1);
    let mut col = cell((origin[0] - lo[0]) / res);
    let mut row = cell((origin[1] - lo[1]) / res);
    let next = |idx: usize, o: f64, d: f64, base: f64| {
        if d > 0.0 {
            (base + (idx + 1) as f64 * res - o) / d
        } else if d < 0.0 {
            (base + idx as f64 * res - o) / d
        } else {
            f64::INFINITY
        }
    };
    let mut t_next_x = next(col, origin[0], dir[0], lo[0]);
    let mut t_next_y = next(row, origin[1], dir[1], lo[1]);
    let dt_x = if dir[0] != 0.0 { res / dir[0].abs() } else { f64::INFINITY };
    let dt_y = if dir[1] != 0.0 { res / dir[1].abs() } else { f64::INFINITY };
    let mut t_in = 0.0;
    loop {
        let t_out = t_next_x.min(t_next_y).min(t_end);
        if let Some(t) = cell_crossing(field, row, col, origin, dir, t_in, t_out) {
            return Some(t);
        }
        if t_out >= t_end {
            return None;
        }
        t_in = t_out;
        if t_next_x <= t_next_y {
            if dir[0] > 0.0 && col + 1 < n {
                col += 1;
            } else if dir[0] < 0.0 && col > 0 {
                col -= 1;
            } else {
                return None;
            }
            t_next_x += dt_x;
        } else {
            if dir[1] > 0.0 && row + 1 < n {
                row += 1;
            } else if dir[1] < 0.0 && row > 0 {
                row -= 1;
            } else {
                return None;
            }
            t_next_y += dt_y;
        }
    }
}

/// First `t` in [t_in, t_out] where the ray is at or below the bilinear patch
/// of cell (row, col).
fn cell_crossing(
    field: &TerrainField,
    row: usize,
    col: usize,
    origin: [f64; 3],
    dir: [f64; 3],
    t_in: f64,
    t_out: f64,
) -> Option<f64> {
    let res = field.resolution_m();
    let [x0, y0] = field.origin();
    let (x0, y0) = (x0 + col as f64 * res, y0 + row as f64 * res);
    let h00 = field.node(row, col);
    let p = field.node(row, col + 1) - h00;
    let q = field.node(row + 1, col) - h00;
    let e = field.node(row + 1, col + 1) - h00 - p - q;
    let (u0, v0) = ((origin[0] - x0) / res, (origin[1] - y0) / res);
    let (a, b) = (dir[0] / res, dir[1] / res);
    // clearance(t) = c0 + c1 t + c2 t^2
    let c0 = origin[2] - (h00 + p * u0 + q * v0 + e * u0 * v0);
    let c1 = dir[2] - (p * a + q * b + e * (u0 * b + v0 * a));
    let c2 = -e * a * b;
    let f = |t: f64| c0 + t * (c1 + t * c2);
    if f(t_in) <= 0.0 {
        return Some(t_in);
    }
    // Right end of a bracket on which f decreases from positive to <= 0.
    let vertex = if c2 > 0.0 { -c1 / (2.0 * c2) } else { f64::NAN };
    let end = if vertex > t_in && vertex < t_out && f(vertex) <= 0.0 {
        vertex
    } else if f(t_out) <= 0.0 {
        t_out
    } else {
        return None;
    };
    let (mut lo, mut hi) = (t_in, end);
    while hi - lo > BISECTION_TOL_M {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Simulated scan from `pose`. Deterministic in (seed stream, pose, field).
pub fn scan(field: &TerrainField, pose: &VehicleState, spec: &LidarSpec) -> Result<PointCloud> {
    spec.validate()?;
    if !field.contains(pose.x, pose.y) {
        return Err(Error::Range(format!(
            "scan pose ({}, {}) outside terrain",
            pose.x, pose.y
        )));
    }
    let origin = [pose.x, pose.y, pose.z + spec.mount_height_m];
    let mut rng = seeds::rng(seeds::mix(&[
        spec.seed_stream,
        pose.x.to_bits(),
        pose.y.to_bits(),
        pose.yaw.to_bits(),
    ]));
    let mut points = Vec::new();
    let elevations: Vec<(f64, f64)> = spec
        .elevation_angles_deg
        .iter()
        .map(|e| e.to_radians().sin_cos())
        .collect();
    for k in 0..spec.azimuth_count {
        let az = pose.yaw + std::f64::consts::TAU * k as f64 / spec.azimuth_count as f64;
        let (sa, ca) = az.sin_cos();
        for &(se, ce) in &elevations {
            // Draw both variates for every ray so realizations do not depend on geometry.
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * spec.range_noise_std_m;
            let keep = rng.random::<f64>() >= spec.dropout_prob;
            let dir = [ce * ca, ce * sa, se];
            if let Some(t) = cast_ray(field, origin, dir, spec.max_range_m) {
                if keep {
                    let r = t + noise;
                    points.push([
                        origin[0] + r * dir[0],
                        origin[1] + r * dir[1],
                        origin[2] + r * dir[2],
                    ]);
                }
            }
        }
    }
    Ok(PointCloud { points })
}

/// Bins a cloud into the vehicle-centered grid.
pub fn rasterize(cloud: &PointCloud, pose: &VehicleState, gspec: &GridSpec) -> FeatureGrid {
    let frame = gspec.frame_at(pose);
    let h = gspec.size_cells;
    let mut sum = vec![0.0; h * h];
    let mut lo = vec![f64::INFINITY; h * h];
    let mut hi = vec![f64::NEG_INFINITY; h * h];
    let mut count = vec![0u32; h * h];
    for p in &cloud.points {
        if let Some((row, col)) = frame.cell_of(p[0], p[1]) {
            let i = row * h + col;
            let z = p[2] - pose.z;
            sum[i] += z;
            lo[i] = lo[i].min(z);
            hi[i] = hi[i].max(z);
            count[i] += 1;
        }
    }
    let mut grid = FeatureGrid::empty(h);
    for i in 0..h * h {
        if count[i] > 0 {
            let c = count[i].min(u32::from(COUNT_CAP)) as u16;
            grid.set_cell(i / h, i % h, sum[i] / f64::from(count[i]), hi[i] - lo[i], c);
        }
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose(x: f64, y: f64) -> VehicleState {
        VehicleState::planar(x, y, 0.0, 0.0)
    }

    #[test]
    fn empty_cloud() {
        let g = rasterize(&PointCloud::default(), &pose(0.0, 0.0), &GridSpec::default());
        assert_eq!(g, FeatureGrid::empty(32));
        assert_eq!(g.observed_cells(), 0);
    }

    #[test]
    fn single_point_statistics() {
        let p = pose(10.0, 10.0);
        let gs = GridSpec::default();
        let c = gs.frame_at(&p).cell_center(5, 7);
        let g = rasterize(&PointCloud { points: vec![[c[0], c[1], 0.3]] }, &p, &gs);
        assert!(g.mask(5, 7));
        assert_eq!(g.mean_height(5, 7), 0.3);
        assert_eq!(g.height_range(5, 7), 0.0);
        assert_eq!(g.point_count(5, 7), 1);
        assert_eq!(g.observed_cells(), 1);
    }

    #[test]
    fn two_point_statistics() {
        let p = pose(0.0, 0.0);
        let gs = GridSpec::default();
        let c = gs.frame_at(&p).cell_center(3, 3);
        let cloud = PointCloud {
            points: vec![[c[0] - 0.1, c[1], 0.1], [c[0] + 0.1, c[1] + 0.2, 0.5]],
        };
        let g = rasterize(&cloud, &p, &gs);
        assert_eq!(g.mean_height(3, 3), 0.3);
        assert!((g.height_range(3, 3) - 0.4).abs() < 1e-15);
        assert_eq!(g.point_count(3, 3), 2);
    }

    #[test]
    fn edge_points_go_to_larger_index_and_outside_points_drop() {
        let p = pose(0.0, 0.0);
        let gs = GridSpec::default();
        let f = gs.frame_at(&p);
        // x = -8 + 2 * 0.5 is exactly the edge between columns 1 and 2
        assert_eq!(f.cell_of(-7.0, -7.75), Some((0, 2)));
        assert_eq!(f.cell_of(8.0, 0.0), None);
        assert_eq!(f.cell_of(-8.0, -8.0), Some((0, 0)));
        let cloud = PointCloud {
            points: vec![[8.0, 0.0, 1.0], [-9.0, 0.0, 1.0], [-7.0, -7.75, 1.0]],
        };
        let g = rasterize(&cloud, &p, &gs);
        assert_eq!(g.observed_cells(), 1);
        assert!(g.mask(0, 2));
    }

    #[test]
    fn count_saturates() {
        let p = pose(0.0, 0.0);
        let gs = GridSpec::default();
        let cloud = PointCloud {
            points: (0..300).map(|i| [0.1, 0.1, i as f64 * 1e-3]).collect(),
        };
        let g = rasterize(&cloud, &p, &gs);
        assert_eq!(g.point_count(16, 16), COUNT_CAP);
        assert!((g.mean_height(16, 16) - 0.1495).abs() < 1e-12);
    }

    #[test]
    fn lidar_spec_validation() {
        let mut s = LidarSpec::default();
        assert!(s.validate().is_ok());
        s.azimuth_count = 4;
        assert!(matches!(s.validate(), Err(Error::Validation { field: "azimuth_count", .. })));
        s.azimuth_count = 16;
        s.elevation_angles_deg = vec![-5.0, -5.0];
        assert!(s.validate().is_err());
        s.elevation_angles_deg = vec![-5.0];
        s.dropout_prob = 1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn fgrid_text_round_trip() {
        let p = pose(0.0, 0.0);
        let gs = GridSpec { size_cells: 4, cell_m: 1.0 };
        let cloud = PointCloud {
            points: vec![[0.5, 0.5, 0.25], [0.6, 0.5, -0.5], [-1.5, 1.2, 2.0]],
        };
        let g = rasterize(&cloud, &p, &gs);
        let text = g.to_text();
        assert!(text.starts_with("FGRID v1 4 4\n"));
        assert_eq!(text.lines().count(), 1 + 16);
        assert_eq!(FeatureGrid::from_text(&text).unwrap(), g);
    }

    #[test]
    fn sparse_json_round_trip() {
        let mut g = FeatureGrid::empty(5);
        g.set_cell(1, 2, -0.25, 0.5, 7);
        g.set_cell(4, 4, 1.0 / 3.0, 0.0, 1);
        let s = serde_json::to_string(&g).unwrap();
        let back: FeatureGrid = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
        assert_eq!(serde_json::to_string(&back).unwrap(), s);
    }
}
