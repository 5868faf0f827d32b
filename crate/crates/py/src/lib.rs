use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use terrameta::control::{self, NavConfig};
use terrameta::costnet::{self, ArchDescriptor, ModelParams, TrainBatch};
use terrameta::harness::ExperimentConfig;
use terrameta::meta;
use terrameta::sensor::{self, FeatureGrid, GridSpec, LidarSpec};
use terrameta::terrain::{self, Family, TerrainField, TerrainSpec};
use terrameta::vehicle::{InteractionSample, VehicleState};

fn err(e: terrameta::Error) -> PyErr {
    match e.root() {
        terrameta::Error::Validation { .. } | terrameta::Error::Range(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn family(name: &str) -> PyResult<Family> {
    Ok(match name.to_ascii_lowercase().as_str() {
        "flat" => Family::Flat,
        "rolling" => Family::Rolling,
        "rough" => Family::Rough,
        "boulders" => Family::Boulders,
        "slope" => Family::Slope,
        other => return Err(PyValueError::new_err(format!("unknown terrain family {other:?}"))),
    })
}

#[pyclass(name = "Terrain", frozen)]
struct PyTerrain {
    inner: TerrainField,
}

#[pymethods]
impl PyTerrain {
    #[new]
    #[pyo3(signature = (family_name, amplitude_m, correlation_length_m, seed, extent_m = 48.0))]
    fn new(family_name: &str, amplitude_m: f64, correlation_length_m: f64, seed: u64, extent_m: f64) -> PyResult<Self> {
        let spec = TerrainSpec {
            extent_m,
            ..TerrainSpec::new(family(family_name)?, amplitude_m, correlation_length_m, seed)
        };
        Ok(PyTerrain {
            inner: terrain::generate_terrain(&spec).map_err(err)?,
        })
    }

    #[getter]
    fn extent_m(&self) -> f64 {
        self.inner.extent_m()
    }

    #[getter]
    fn resolution_m(&self) -> f64 {
        self.inner.resolution_m()
    }

    fn height_at(&self, x: f64, y: f64) -> PyResult<f64> {
        self.inner.height_at(x, y).map_err(err)
    }

    #[pyo3(signature = (x, y, footprint_m = 1.0))]
    fn oracle_label(&self, x: f64, y: f64, footprint_m: f64) -> PyResult<f64> {
        terrain::oracle_label(&self.inner, [x, y], footprint_m).map_err(err)
    }

    /// Node heights, row-major.
    fn heights(&self) -> Vec<f64> {
        self.inner.heights().to_vec()
    }

    /// Lidar scan from (x, y, yaw) rasterized into the default grid.
    /// `noise=False` disables range noise and dropout.
    #[pyo3(signature = (x, y, yaw, seed = 0, noise = true))]
    fn scan(&self, x: f64, y: f64, yaw: f64, seed: u64, noise: bool) -> PyResult<PyGrid> {
        let pose = VehicleState::on_terrain(x, y, yaw, 0.0, &self.inner).map_err(err)?;
        let mut spec = LidarSpec {
            seed_stream: seed,
            ..LidarSpec::default()
        };
        if !noise {
            spec.range_noise_std_m = 0.0;
            spec.dropout_prob = 0.0;
        }
        let cloud = sensor::scan(&self.inner, &pose, &spec).map_err(err)?;
        Ok(PyGrid {
            inner: sensor::rasterize(&cloud, &pose, &GridSpec::default()),
        })
    }

    fn __repr__(&self) -> String {
        format!("Terrain(extent_m={}, resolution_m={})", self.inner.extent_m(), self.inner.resolution_m())
    }
}

#[pyclass(name = "FeatureGrid", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyGrid {
    inner: FeatureGrid,
}

#[pymethods]
impl PyGrid {
    #[staticmethod]
    fn empty(size: usize) -> Self {
        PyGrid {
            inner: FeatureGrid::empty(size),
        }
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(PyGrid {
            inner: FeatureGrid::from_text(text).map_err(err)?,
        })
    }

    #[getter]
    fn size(&self) -> usize {
        self.inner.size()
    }

    fn observed_cells(&self) -> usize {
        self.inner.observed_cells()
    }

    /// (mask, mean_height, height_range, point_count) of one cell.
    fn cell(&self, row: usize, col: usize) -> PyResult<(bool, f64, f64, u16)> {
        if row >= self.inner.size() || col >= self.inner.size() {
            return Err(PyValueError::new_err("cell index outside the grid"));
        }
        let g = &self.inner;
        Ok((g.mask(row, col), g.mean_height(row, col), g.height_range(row, col), g.point_count(row, col)))
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }
}

#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (seed, hidden = None, patch = 5))]
    fn new(seed: u64, hidden: Option<Vec<usize>>, patch: usize) -> PyResult<Self> {
        let mut arch = ArchDescriptor {
            patch,
            ..Default::default()
        };
        if let Some(h) = hidden {
            arch.hidden = h;
        }
        Ok(PyModel {
            inner: costnet::init_params(&arch, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: costnet::load_checkpoint(std::path::Path::new(path)).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        costnet::save_checkpoint(&self.inner, std::path::Path::new(path)).map_err(err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.len()
    }

    /// Dense prediction: (mu, log_var), each row-major of length H*H.
    fn predict(&self, grid: &PyGrid) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let map = costnet::forward(&self.inner, &grid.inner).map_err(err)?;
        let h = grid.inner.size();
        let mut mu = Vec::with_capacity(h * h);
        let mut lv = Vec::with_capacity(h * h);
        for r in 0..h {
            for c in 0..h {
                mu.push(map.mu_at(r, c));
                lv.push(map.log_var_at(r, c));
            }
        }
        Ok((mu, lv))
    }

    /// Heteroscedastic NLL of (row, col, label) samples on `grid`.
    fn nll(&self, grid: &PyGrid, samples: Vec<(usize, usize, f64)>) -> PyResult<f64> {
        costnet::nll_loss(&self.inner, &batch(grid, samples)).map_err(err)
    }

    /// `steps` SGD steps over the given batches in order; returns a new model.
    fn adapt(&self, batches: Vec<(PyRef<'_, PyGrid>, Vec<(usize, usize, f64)>)>, steps: usize, lr: f64) -> PyResult<PyModel> {
        let support: Vec<TrainBatch> = batches.into_iter().map(|(g, s)| batch(&g, s)).collect();
        Ok(PyModel {
            inner: meta::inner_adapt(&self.inner, &support, steps, lr).map_err(err)?,
        })
    }
}

fn batch(grid: &PyGrid, samples: Vec<(usize, usize, f64)>) -> TrainBatch {
    let samples = samples.into_iter().map(|(r, c, y)| InteractionSample::new(r, c, y)).collect();
    TrainBatch::new(grid.inner.clone(), samples)
}

/// Closed-loop navigation; returns the episode report as a dict.
#[pyfunction]
#[pyo3(signature = (terrain, model, start, goal, adapt = true, seed = 0, max_steps = None))]
fn navigate<'py>(
    py: Python<'py>,
    terrain: &PyTerrain,
    model: &PyModel,
    start: (f64, f64, f64),
    goal: (f64, f64),
    adapt: bool,
    seed: u64,
    max_steps: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut nav = NavConfig::default();
    if let Some(m) = max_steps {
        nav.max_steps = m;
    }
    let ep = control::navigate(
        &terrain.inner,
        &model.inner,
        &nav,
        [start.0, start.1, start.2],
        [goal.0, goal.1],
        adapt,
        seed,
    )
    .map_err(err)?;
    let r = ep.report;
    let d = PyDict::new(py);
    d.set_item("success", r.success)?;
    d.set_item("steps", r.steps)?;
    d.set_item("path_length_m", r.path_length_m)?;
    d.set_item("mean_hazard", r.mean_hazard)?;
    d.set_item("max_hazard", r.max_hazard)?;
    d.set_item("mean_scan_mae", r.mean_scan_mae)?;
    d.set_item("final_distance_m", r.final_distance_m)?;
    Ok(d)
}

/// The default experiment configuration as TOML.
#[pyfunction]
fn default_config() -> String {
    ExperimentConfig::default().to_toml()
}

#[pymodule]
fn terrameta_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTerrain>()?;
    m.add_class::<PyGrid>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(navigate, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
