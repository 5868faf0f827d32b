//! Patch-MLP traversability network with a heteroscedastic output head,
//! its masked Gaussian NLL, hand-written reverse-mode gradients and the
//! binary checkpoint format.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::seeds;
use crate::sensor::{FeatureGrid, CHANNELS};
use crate::vehicle::InteractionSample;

pub const LOG_VAR_MIN: f64 = -6.0;
pub const LOG_VAR_MAX: f64 = 2.0;
const LOG_VAR_SPAN: f64 = LOG_VAR_MAX - LOG_VAR_MIN;
const OUTPUTS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    /// Odd receptive-field side length.
    pub patch: usize,
    pub channels_in: usize,
    pub hidden: Vec<usize>,
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        ArchDescriptor {
            patch: 5,
            channels_in: CHANNELS,
            hidden: vec![32, 32],
        }
    }
}

impl ArchDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.patch % 2 == 0 {
            return Err(Error::validation("patch", format!("{} is not odd", self.patch)));
        }
        if self.channels_in != CHANNELS {
            return Err(Error::validation(
                "channels_in",
                format!("{} (feature grids carry {CHANNELS} channels)", self.channels_in),
            ));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::validation("hidden", "widths must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.patch * self.patch * self.channels_in
    }

    /// (fan_in, fan_out) of every dense layer, output layer last.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim();
        for &w in self.hidden.iter().chain(std::iter::once(&OUTPUTS)) {
            dims.push((prev, w));
            prev = w;
        }
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Flat parameter vector. Each layer stores its weight matrix row-major
/// (`out x in`) followed by its bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: ArchDescriptor,
    pub theta: Vec<f64>,
}

impl ModelParams {
    pub fn new(arch: ArchDescriptor, theta: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if theta.len() != arch.param_count() {
            return Err(Error::validation(
                "theta",
                format!("length {} != {}", theta.len(), arch.param_count()),
            ));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::validation("theta", "non-finite entry"));
        }
        Ok(ModelParams { arch, theta })
    }

    pub fn zeros(arch: ArchDescriptor) -> Self {
        let n = arch.param_count();
        ModelParams {
            arch,
            theta: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }
}

/// Glorot-uniform weights and zero biases.
pub fn init_params(arch: &ArchDescriptor, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = seeds::rng(seed);
    let mut theta = Vec::with_capacity(arch.param_count());
    for (fan_in, fan_out) in arch.layers() {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        theta.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)));
        theta.extend(std::iter::repeat_n(0.0, fan_out));
    }
    Ok(ModelParams {
        arch: arch.clone(),
        theta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostMap {
    pub size: usize,
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl CostMap {
    pub fn mu_at(&self, row: usize, col: usize) -> f64 {
        self.mu[row * self.size + col]
    }

    pub fn log_var_at(&self, row: usize, col: usize) -> f64 {
        self.log_var[row * self.size + col]
    }
}

/// One scan's feature grid with the labels gathered on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainBatch {
    pub grid: FeatureGrid,
    pub samples: Vec<InteractionSample>,
    /// Source episode, used to keep support and query splits disjoint.
    #[serde(default)]
    pub episode: u64,
}

impl TrainBatch {
    pub fn new(grid: FeatureGrid, samples: Vec<InteractionSample>) -> Self {
        TrainBatch {
            grid,
            samples,
            episode: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::validation("samples", "batch has no samples"));
        }
        let h = self.grid.size();
        for s in &self.samples {
            if s.row >= h || s.col >= h {
                return Err(Error::validation(
                    "samples",
                    format!("cell ({}, {}) outside {h}x{h} grid", s.row, s.col),
                ));
            }
            if !(s.weight > 0.0 && s.weight.is_finite()) {
                return Err(Error::validation("samples", "weights must be positive"));
            }
            if !(0.0..=1.0).contains(&s.label) {
                return Err(Error::validation("samples", format!("label {} not in [0, 1]", s.label)));
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Zero-padded k x k x C neighborhood of a cell, channel-fastest.
fn gather_patch(grid: &FeatureGrid, patch: usize, row: usize, col: usize, out: &mut [f64]) {
    let h = grid.size() as isize;
    let half = (patch / 2) as isize;
    let mut i = 0;
    for dr in -half..=half {
        for dc in -half..=half {
            let (r, c) = (row as isize + dr, col as isize + dc);
            let inside = r >= 0 && r < h && c >= 0 && c < h;
            let idx = (r * h + c) as usize;
            for ch in 0..CHANNELS {
                out[i] = if inside { grid.input(idx, ch) } else { 0.0 };
                i += 1;
            }
        }
    }
}

/// Scratch space holding per-layer activations of one cell.
struct Workspace {
    input: Vec<f64>,
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(arch: &ArchDescriptor) -> Self {
        let layers = arch.layers();
        Workspace {
            input: vec![0.0; arch.input_dim()],
            acts: layers.iter().map(|&(_, o)| vec![0.0; o]).collect(),
            deltas: layers.iter().map(|&(_, o)| vec![0.0; o]).collect(),
        }
    }
}

/// Runs the MLP on `ws.input`; returns the raw output pair.
fn mlp_forward(params: &ModelParams, layers: &[(usize, usize)], ws: &mut Workspace) -> [f64; 2] {
    let theta = &params.theta;
    let mut offset = 0;
    let last = layers.len() - 1;
    for (l, &(fan_in, fan_out)) in layers.iter().enumerate() {
        let (before, rest) = ws.acts.split_at_mut(l);
        let x: &[f64] = if l == 0 { &ws.input } else { &before[l - 1] };
        let out = &mut rest[0];
        let w = &theta[offset..offset + fan_in * fan_out];
        let b = &theta[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        for o in 0..fan_out {
            let row = &w[o * fan_in..(o + 1) * fan_in];
            let z = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[o];
            out[o] = if l == last { z } else { z.tanh() };
        }
        offset += fan_in * fan_out + fan_out;
    }
    let y = &ws.acts[last];
    [y[0], y[1]]
}

/// Backpropagates d(loss)/d(raw outputs) into `grad`.
fn mlp_backward(
    params: &ModelParams,
    layers: &[(usize, usize)],
    ws: &mut Workspace,
    d_out: [f64; 2],
    grad: &mut [f64],
) {
    let theta = &params.theta;
    let last = layers.len() - 1;
    let mut offsets = Vec::with_capacity(layers.len());
    let mut off = 0;
    for &(i, o) in layers {
        offsets.push(off);
        off += i * o + o;
    }
    ws.deltas[last][0] = d_out[0];
    ws.deltas[last][1] = d_out[1];
    for l in (0..layers.len()).rev() {
        let (fan_in, fan_out) = layers[l];
        let w_off = offsets[l];
        let b_off = w_off + fan_in * fan_out;
        {
            let x: &[f64] = if l == 0 { &ws.input } else { &ws.acts[l - 1] };
            let delta = &ws.deltas[l];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let g = &mut grad[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                for (gi, xi) in g.iter_mut().zip(x) {
                    *gi += d * xi;
                }
                grad[b_off + o] += d;
            }
        }
        if l > 0 {
            let (lower, upper) = ws.deltas.split_at_mut(l);
            let delta = &upper[0];
            let prev = &mut lower[l - 1];
            let a = &ws.acts[l - 1];
            let w = &theta[w_off..b_off];
            for (i, p) in prev.iter_mut().enumerate() {
                let mut s = 0.0;
                for o in 0..fan_out {
                    s += w[o * fan_in + i] * delta[o];
                }
                *p = s * (1.0 - a[i] * a[i]);
            }
        }
    }
}

fn check_grid(params: &ModelParams, grid: &FeatureGrid) -> Result<()> {
    params.arch.validate()?;
    if params.theta.len() != params.arch.param_count() {
        return Err(Error::validation("theta", "length does not match architecture"));
    }
    if grid.size() == 0 {
        return Err(Error::validation("grid", "empty grid"));
    }
    Ok(())
}

fn heads(raw: [f64; 2]) -> (f64, f64) {
    (sigmoid(raw[0]), LOG_VAR_MIN + LOG_VAR_SPAN * sigmoid(raw[1]))
}

/// Dense prediction: every cell, observed or not.
pub fn forward(params: &ModelParams, grid: &FeatureGrid) -> Result<CostMap> {
    check_grid(params, grid)?;
    let layers = params.arch.layers();
    let mut ws = Workspace::new(&params.arch);
    let h = grid.size();
    let mut mu = Vec::with_capacity(h * h);
    let mut log_var = Vec::with_capacity(h * h);
    for row in 0..h {
        for col in 0..h {
            gather_patch(grid, params.arch.patch, row, col, &mut ws.input);
            let (m, lv) = heads(mlp_forward(params, &layers, &mut ws));
            mu.push(m);
            log_var.push(lv);
        }
    }
    Ok(CostMap { size: h, mu, log_var })
}

/// (mu, log_var) at selected cells only.
pub fn predict_cells(
    params: &ModelParams,
    grid: &FeatureGrid,
    cells: impl IntoIterator<Item = (usize, usize)>,
) -> Result<Vec<(f64, f64)>> {
    check_grid(params, grid)?;
    let layers = params.arch.layers();
    let mut ws = Workspace::new(&params.arch);
    cells
        .into_iter()
        .map(|(row, col)| {
            if row >= grid.size() || col >= grid.size() {
                return Err(Error::validation("cell", format!("({row}, {col}) outside grid")));
            }
            gather_patch(grid, params.arch.patch, row, col, &mut ws.input);
            Ok(heads(mlp_forward(params, &layers, &mut ws)))
        })
        .collect()
}

/// Per-sample Gaussian NLL and its derivatives w.r.t. the raw outputs.
fn sample_nll(raw: [f64; 2], y: f64) -> (f64, [f64; 2]) {
    let mu = sigmoid(raw[0]);
    let s = sigmoid(raw[1]);
    let lv = LOG_VAR_MIN + LOG_VAR_SPAN * s;
    let inv_var = (-lv).exp();
    let r = y - mu;
    let loss = 0.5 * r * r * inv_var + 0.5 * lv;
    let d_mu = -r * inv_var;
    let d_lv = 0.5 - 0.5 * r * r * inv_var;
    (loss, [d_mu * mu * (1.0 - mu), d_lv * LOG_VAR_SPAN * s * (1.0 - s)])
}

fn loss_impl(params: &ModelParams, batch: &TrainBatch, grad: Option<&mut [f64]>) -> Result<f64> {
    check_grid(params, &batch.grid)?;
    batch.validate()?;
    let layers = params.arch.layers();
    let mut ws = Workspace::new(&params.arch);
    let total_w: f64 = batch.samples.iter().map(|s| s.weight).sum();
    let mut loss = 0.0;
    let mut grad = grad;
    for s in &batch.samples {
        gather_patch(&batch.grid, params.arch.patch, s.row, s.col, &mut ws.input);
        let raw = mlp_forward(params, &layers, &mut ws);
        let (l, d) = sample_nll(raw, s.label);
        let scale = s.weight / total_w;
        loss += scale * l;
        if let Some(g) = grad.as_deref_mut() {
            mlp_backward(params, &layers, &mut ws, [scale * d[0], scale * d[1]], g);
        }
    }
    Ok(loss)
}

/// Weighted heteroscedastic Gaussian NLL over the batch's labeled cells.
pub fn nll_loss(params: &ModelParams, batch: &TrainBatch) -> Result<f64> {
    loss_impl(params, batch, None)
}

/// Exact gradient of [`nll_loss`] with respect to `theta`.
pub fn grad(params: &ModelParams, batch: &TrainBatch) -> Result<Vec<f64>> {
    loss_and_grad(params, batch).map(|(_, g)| g)
}

pub fn loss_and_grad(params: &ModelParams, batch: &TrainBatch) -> Result<(f64, Vec<f64>)> {
    let mut g = vec![0.0; params.theta.len()];
    let l = loss_impl(params, batch, Some(&mut g))?;
    Ok((l, g))
}

/// Mean of the per-batch losses.
pub fn mean_loss(params: &ModelParams, batches: &[TrainBatch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::validation("batches", "empty batch list"));
    }
    let mut total = 0.0;
    for b in batches {
        total += nll_loss(params, b)?;
    }
    Ok(total / batches.len() as f64)
}

/// Mean of the per-batch gradients, reduced in list order.
pub fn mean_grad(params: &ModelParams, batches: &[TrainBatch]) -> Result<Vec<f64>> {
    if batches.is_empty() {
        return Err(Error::validation("batches", "empty batch list"));
    }
    let mut acc = vec![0.0; params.theta.len()];
    for b in batches {
        loss_impl(params, b, Some(&mut acc))?;
    }
    let inv = 1.0 / batches.len() as f64;
    acc.iter_mut().for_each(|g| *g *= inv);
    Ok(acc)
}

pub fn sgd_step(params: &ModelParams, g: &[f64], lr: f64) -> Result<ModelParams> {
    if g.len() != params.theta.len() {
        return Err(Error::validation(
            "gradient",
            format!("length {} != {}", g.len(), params.theta.len()),
        ));
    }
    let theta = params.theta.iter().zip(g).map(|(t, d)| t - lr * d).collect();
    Ok(ModelParams {
        arch: params.arch.clone(),
        theta,
    })
}

/// Label-space metrics over every (cell, label) pair of the batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub nll: f64,
    pub mae: f64,
    /// Fraction of samples with |y - mu| <= sigma.
    pub calibration: f64,
    pub samples: usize,
}

/// Pooled, weight-averaged metrics.
pub fn metrics(params: &ModelParams, batches: &[TrainBatch]) -> Result<Metrics> {
    let (mut nll, mut mae, mut cal, mut wsum) = (0.0, 0.0, 0.0, 0.0);
    let mut n = 0;
    for b in batches {
        b.validate()?;
        let preds = predict_cells(params, &b.grid, b.samples.iter().map(|s| (s.row, s.col)))?;
        for (s, (mu, lv)) in b.samples.iter().zip(preds) {
            let r = s.label - mu;
            nll += s.weight * (0.5 * r * r * (-lv).exp() + 0.5 * lv);
            mae += s.weight * r.abs();
            if r.abs() <= (0.5 * lv).exp() {
                cal += s.weight;
            }
            wsum += s.weight;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::validation("batches", "no samples to evaluate"));
    }
    Ok(Metrics {
        nll: nll / wsum,
        mae: mae / wsum,
        calibration: cal / wsum,
        samples: n,
    })
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MVCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Serializes to the little-endian checkpoint layout, CRC32 trailer included.
pub fn checkpoint_bytes(params: &ModelParams) -> Vec<u8> {
    let arch = &params.arch;
    let mut out = Vec::with_capacity(32 + 8 * params.theta.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(arch.patch as u32).to_le_bytes());
    out.extend_from_slice(&(arch.channels_in as u32).to_le_bytes());
    out.extend_from_slice(&(arch.hidden.len() as u32).to_le_bytes());
    for &w in &arch.hidden {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.extend_from_slice(&(params.theta.len() as u64).to_le_bytes());
    for t in &params.theta {
        out.extend_from_slice(&t.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated {
                needed: self.pos + n,
                have: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint. Checks magic, then version, then CRC, then the
/// architecture/count consistency.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelParams, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated { needed: 4, have: bytes.len() });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::BadCrc { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 6 };
    let patch = r.u32()? as usize;
    let channels_in = r.u32()? as usize;
    let depth = r.u32()? as usize;
    if depth > 1024 {
        return Err(CheckpointError::ArchMismatch(format!("{depth} hidden layers")));
    }
    let hidden = (0..depth)
        .map(|_| r.u32().map(|w| w as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let arch = ArchDescriptor {
        patch,
        channels_in,
        hidden,
    };
    arch.validate()
        .map_err(|e| CheckpointError::ArchMismatch(e.to_string()))?;
    let count = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let expected = arch.param_count() as u64;
    if count != expected {
        return Err(CheckpointError::CountMismatch { stored: count, expected });
    }
    let data = r.take(8 * count as usize)?;
    if r.pos != body.len() {
        return Err(CheckpointError::CountMismatch {
            stored: count,
            expected: ((body.len() - (r.pos - data.len())) / 8) as u64,
        });
    }
    let theta = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ModelParams { arch, theta })
}

pub fn save_checkpoint(params: &ModelParams, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(checkpoint_from_bytes(&bytes)?)
}
