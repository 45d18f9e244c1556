//! Projection-to-scalar regressor and the end-to-end training loop.
//!
//! ```text
//! projection ─▶ regress ─▶ scores ─▶ soft_rank ─▶ ranks ─▶ threshold_topk ─▶ mask ─▶ BCE
//! ```
//!
//! The threshold is bypassed in the backward pass (see [`ThresholdGradient`]),
//! the soft-rank Jacobian is applied exactly, and the dense network is
//! differentiated by hand. Parameters are optimized with Adam, one scan per
//! step.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::phantom::ProjectionImage;
use crate::softrank::{soft_rank, RegularizationStrength, ScoreVector, SoftRank};
use crate::ste::{ste_vjp, threshold_topk, SelectionMask};

/// Side of the square, block-averaged network input.
pub const INPUT_SIDE: usize = 32;
const INPUT: usize = INPUT_SIDE * INPUT_SIDE;
const H1: usize = 64;
const H2: usize = 16;

/// `(name, rows, cols)` of each parameter tensor, in storage order.
/// Biases have `cols = 1`.
pub const LAYOUT: [(&str, usize, usize); 6] = [
    ("dense1.weight", H1, INPUT),
    ("dense1.bias", H1, 1),
    ("dense2.weight", H2, H1),
    ("dense2.bias", H2, 1),
    ("dense3.weight", 1, H2),
    ("dense3.bias", 1, 1),
];

const W1: usize = 0;
const B1: usize = W1 + H1 * INPUT;
const W2: usize = B1 + H1;
const B2: usize = W2 + H2 * H1;
const W3: usize = B2 + H2;
const B3: usize = W3 + H2;
/// Total number of scalar parameters.
pub const PARAM_COUNT: usize = B3 + 1;

/// Dense 1024 → 64 → 16 → 1 network with ReLU between layers, behind a
/// fixed per-pixel affine input map `x ↦ (x - shift)·scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    params: Vec<f64>,
    shift: Vec<f64>,
    scale: Vec<f64>,
}

/// Per-input activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

impl Regressor {
    /// Uniform(±1/√fan_in) initialization for weights and biases.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(PARAM_COUNT);
        for &(name, rows, cols) in &LAYOUT {
            let fan_in = if name.ends_with("bias") {
                // bias of layer with weight fan_in
                match name {
                    "dense1.bias" => INPUT,
                    "dense2.bias" => H1,
                    _ => H2,
                }
            } else {
                cols
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..rows * cols {
                params.push(rng.random_range(-bound..bound));
            }
        }
        Regressor {
            params,
            shift: vec![0.0; INPUT],
            scale: vec![1.0; INPUT],
        }
    }

    /// Identity input map.
    pub fn from_params(params: Vec<f64>) -> Result<Self> {
        check_len(PARAM_COUNT, params.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("regressor parameters must be finite"));
        }
        Ok(Regressor {
            params,
            shift: vec![0.0; INPUT],
            scale: vec![1.0; INPUT],
        })
    }

    pub fn set_input_map(&mut self, shift: Vec<f64>, scale: Vec<f64>) -> Result<()> {
        check_len(INPUT, shift.len())?;
        check_len(INPUT, scale.len())?;
        if shift.iter().chain(&scale).any(|v| !v.is_finite()) {
            return Err(Error::invalid("input map must be finite"));
        }
        self.shift = shift;
        self.scale = scale;
        Ok(())
    }

    /// Per-pixel standardization over `inputs`; pixels that never vary keep
    /// unit scale.
    pub fn fit_input_map<'a>(&mut self, inputs: impl IntoIterator<Item = &'a Vec<f64>>) -> Result<()> {
        let mut count = 0usize;
        let mut sum = vec![0.0; INPUT];
        let mut sq = vec![0.0; INPUT];
        for x in inputs {
            check_len(INPUT, x.len())?;
            count += 1;
            for i in 0..INPUT {
                sum[i] += x[i];
                sq[i] += x[i] * x[i];
            }
        }
        if count == 0 {
            return Err(Error::invalid("no inputs to fit the input map"));
        }
        let n = count as f64;
        let shift: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let scale = sq
            .iter()
            .zip(&shift)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var > 1e-24 {
                    1.0 / var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        self.set_input_map(shift, scale)
    }

    pub fn input_map(&self) -> (&[f64], &[f64]) {
        (&self.shift, &self.scale)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Sets every bias to zero.
    pub fn zero_biases(&mut self) {
        for range in [B1..W2, B2..W3, B3..PARAM_COUNT] {
            self.params[range].iter_mut().for_each(|p| *p = 0.0);
        }
    }

    pub fn forward(&self, input: &[f64]) -> (f64, ForwardCache) {
        let p = &self.params;
        let x: Vec<f64> = input
            .iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) * s)
            .collect();
        let input = &x[..];
        let h1: Vec<f64> = (0..H1)
            .map(|o| {
                let row = &p[W1 + o * INPUT..W1 + (o + 1) * INPUT];
                (p[B1 + o] + dot(row, input)).max(0.0)
            })
            .collect();
        let h2: Vec<f64> = (0..H2)
            .map(|o| {
                let row = &p[W2 + o * H1..W2 + (o + 1) * H1];
                (p[B2 + o] + dot(row, &h1)).max(0.0)
            })
            .collect();
        let out = p[B3] + dot(&p[W3..W3 + H2], &h2);
        (out, ForwardCache { x, h1, h2 })
    }

    /// Accumulates `d_out · ∂out/∂params` into `grad`.
    pub fn backward(&self, cache: &ForwardCache, d_out: f64, grad: &mut [f64]) {
        let input = &cache.x;
        let p = &self.params;
        grad[B3] += d_out;
        let mut d_h2 = [0.0; H2];
        for o in 0..H2 {
            grad[W3 + o] += d_out * cache.h2[o];
            d_h2[o] = if cache.h2[o] > 0.0 { d_out * p[W3 + o] } else { 0.0 };
        }
        let mut d_h1 = [0.0; H1];
        for o in 0..H2 {
            if d_h2[o] == 0.0 {
                continue;
            }
            grad[B2 + o] += d_h2[o];
            let base = W2 + o * H1;
            for i in 0..H1 {
                grad[base + i] += d_h2[o] * cache.h1[i];
                d_h1[i] += d_h2[o] * p[base + i];
            }
        }
        for o in 0..H1 {
            let d = if cache.h1[o] > 0.0 { d_h1[o] } else { 0.0 };
            if d == 0.0 {
                continue;
            }
            grad[B1 + o] += d;
            let row = &mut grad[W1 + o * INPUT..W1 + (o + 1) * INPUT];
            row.iter_mut().zip(input).for_each(|(g, x)| *g += d * x);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Area-averages a projection down to `INPUT_SIDE × INPUT_SIDE`: detector
/// pixel `(r, c)` falls into bin `(r·32/rows, c·32/cols)`. Exact 2 × 2 blocks
/// for a 64 × 64 detector.
pub fn downsample(projection: &ProjectionImage) -> Result<Vec<f64>> {
    let (rows, cols) = (projection.rows, projection.cols);
    if rows < INPUT_SIDE || cols < INPUT_SIDE {
        return Err(Error::invalid(format!(
            "projection {rows}×{cols} is smaller than {INPUT_SIDE}×{INPUT_SIDE}"
        )));
    }
    check_len(rows * cols, projection.data.len())?;
    let mut out = vec![0.0; INPUT];
    let mut count = vec![0u32; INPUT];
    for r in 0..rows {
        let br = r * INPUT_SIDE / rows;
        for c in 0..cols {
            let b = br * INPUT_SIDE + c * INPUT_SIDE / cols;
            out[b] += projection.data[r * cols + c];
            count[b] += 1;
        }
    }
    out.iter_mut().zip(&count).for_each(|(v, &n)| *v /= n as f64);
    Ok(out)
}

pub fn regress(r: &Regressor, projection: &ProjectionImage) -> Result<f64> {
    Ok(r.forward(&downsample(projection)?).0)
}

/// How the BCE gradient on the mask is carried back onto the ranks.
///
/// The threshold `rank ≤ k` is decreasing in the rank, so the literal
/// identity surrogate pushes selected projections away from selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdGradient {
    /// `∂mask/∂rank := I`.
    Identity,
    /// `∂mask/∂rank := -I`, the sign of the threshold's slope.
    #[default]
    Negated,
}

impl ThresholdGradient {
    pub fn sign(self) -> f64 {
        match self {
            ThresholdGradient::Identity => 1.0,
            ThresholdGradient::Negated => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Soft-rank regularization strength.
    pub eps: f64,
    pub k: usize,
    pub bce_clamp: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    #[serde(default)]
    pub threshold_gradient: ThresholdGradient,
    /// Fit the regressor's input map to the training projections.
    #[serde(default = "yes")]
    pub standardize_inputs: bool,
    /// Standardize each scan's scores to zero mean and unit variance
    /// before ranking.
    #[serde(default)]
    pub standardize_scores: bool,
    /// When set, eps decays geometrically to this value over the epochs.
    #[serde(default)]
    pub eps_final: Option<f64>,
    /// Decay the learning rate linearly towards zero over the epochs.
    #[serde(default)]
    pub lr_decay: bool,
}

fn yes() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-5,
            epochs: 600,
            eps: 1.0,
            k: 100,
            bce_clamp: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            threshold_gradient: ThresholdGradient::default(),
            standardize_inputs: true,
            standardize_scores: false,
            eps_final: None,
            lr_decay: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        RegularizationStrength::new(self.eps)?;
        if let Some(e) = self.eps_final {
            RegularizationStrength::new(e)?;
        }
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if !(self.bce_clamp > 0.0 && self.bce_clamp < 0.5) {
            return Err(Error::invalid("bce clamp must lie in (0, 0.5)"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::invalid("invalid Adam hyper-parameters"));
        }
        Ok(())
    }

    /// The configuration in effect during `epoch` (0-based): eps and the
    /// learning rate after their schedules.
    pub fn at_epoch(&self, epoch: usize) -> TrainConfig {
        let mut c = self.clone();
        if let Some(end) = self.eps_final {
            let frac = epoch as f64 / (self.epochs.max(2) - 1) as f64;
            c.eps = self.eps * (end / self.eps).powf(frac);
        }
        if self.lr_decay {
            c.learning_rate = self.learning_rate * (1.0 - epoch as f64 / self.epochs as f64);
        }
        c
    }
}

const SCORE_VAR_FLOOR: f64 = 1e-12;

/// Per-scan score standardization and its VJP.
#[derive(Debug, Clone)]
pub struct ScoreStandardizer {
    normalized: Vec<f64>,
    std: f64,
}

impl ScoreStandardizer {
    pub fn new(scores: &[f64]) -> Self {
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        let std = (var + SCORE_VAR_FLOOR).sqrt();
        ScoreStandardizer {
            normalized: scores.iter().map(|s| (s - mean) / std).collect(),
            std,
        }
    }

    pub fn output(&self) -> &[f64] {
        &self.normalized
    }

    pub fn vjp(&self, g: &[f64]) -> Vec<f64> {
        let n = g.len() as f64;
        let mean_g = g.iter().sum::<f64>() / n;
        let mean_gs = dot(g, &self.normalized) / n;
        g.iter()
            .zip(&self.normalized)
            .map(|(gi, si)| (gi - mean_g - si * mean_gs) / self.std)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub scores: ScoreVector,
    pub soft: SoftRank,
    pub mask: SelectionMask,
    /// Present when the scores were standardized before ranking.
    pub standardizer: Option<ScoreStandardizer>,
}

fn scores_for(r: &Regressor, inputs: &[Vec<f64>]) -> (Vec<f64>, Vec<ForwardCache>) {
    inputs.par_iter().map(|x| r.forward(x)).unzip()
}

fn pipeline_from_scores(scores: Vec<f64>, cfg: &TrainConfig) -> Result<PipelineOutput> {
    let scores = ScoreVector::new(scores)?;
    let standardizer = cfg.standardize_scores.then(|| ScoreStandardizer::new(scores.as_slice()));
    let soft = match &standardizer {
        Some(st) => soft_rank(&ScoreVector::new(st.output().to_vec())?, RegularizationStrength::new(cfg.eps)?),
        None => soft_rank(&scores, RegularizationStrength::new(cfg.eps)?),
    };
    let mask = threshold_topk(&soft.ranks, cfg.k)?;
    Ok(PipelineOutput {
        scores,
        soft,
        mask,
        standardizer,
    })
}

/// Scores, soft ranks and the thresholded mask for one scan.
pub fn forward_pipeline(
    r: &Regressor,
    scan: &[ProjectionImage],
    cfg: &TrainConfig,
) -> Result<PipelineOutput> {
    if scan.is_empty() {
        return Err(Error::invalid("scan has no projections"));
    }
    let inputs = scan.iter().map(downsample).collect::<Result<Vec<_>>>()?;
    pipeline_from_scores(scores_for(r, &inputs).0, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BceLoss {
    pub value: f64,
    /// `∂loss/∂mask`, evaluated at the clamped predictions.
    pub grad: Vec<f64>,
}

pub fn bce_loss(mask: &SelectionMask, label: &SelectionMask, clamp: f64) -> Result<BceLoss> {
    check_len(label.len(), mask.len())?;
    if !(clamp > 0.0 && clamp < 0.5) {
        return Err(Error::invalid("bce clamp must lie in (0, 0.5)"));
    }
    let n = mask.len() as f64;
    let mut value = 0.0;
    let grad = mask
        .values()
        .iter()
        .zip(label.values())
        .map(|(&m, &y)| {
            let p = (m as f64).clamp(clamp, 1.0 - clamp);
            let y = y as f64;
            value -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            -(y / p - (1.0 - y) / (1.0 - p)) / n
        })
        .collect();
    Ok(BceLoss {
        value: value / n,
        grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update; `t` counts from 1.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    t: u64,
    cfg: &TrainConfig,
) -> Result<()> {
    check_len(params.len(), grads.len())?;
    check_len(params.len(), state.m.len())?;
    check_len(params.len(), state.v.len())?;
    if t == 0 {
        return Err(Error::invalid("Adam step index starts at 1"));
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

/// Loss and parameter gradient for one scan of pre-downsampled inputs.
#[derive(Debug, Clone)]
pub struct ScanGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Gradient of the loss surrogate w.r.t. the ranks.
    pub rank_grad: Vec<f64>,
    pub output: PipelineOutput,
}

pub fn scan_gradient(
    r: &Regressor,
    inputs: &[Vec<f64>],
    label: &SelectionMask,
    cfg: &TrainConfig,
) -> Result<ScanGradient> {
    check_len(inputs.len(), label.len())?;
    let (scores, caches) = scores_for(r, inputs);
    let output = pipeline_from_scores(scores, cfg)?;
    let loss = bce_loss(&output.mask, label, cfg.bce_clamp)?;

    let sign = cfg.threshold_gradient.sign();
    let rank_grad: Vec<f64> = ste_vjp(&loss.grad, inputs.len())?
        .into_iter()
        .map(|g| sign * g)
        .collect();
    let mut score_grad = output.soft.vjp(&rank_grad)?;
    if let Some(st) = &output.standardizer {
        score_grad = st.vjp(&score_grad);
    }

    let partials: Vec<Vec<f64>> = caches
        .par_iter()
        .zip(&score_grad)
        .map(|(cache, &d)| {
            let mut g = vec![0.0; PARAM_COUNT];
            if d != 0.0 {
                r.backward(cache, d, &mut g);
            }
            g
        })
        .collect();
    let mut grad = vec![0.0; PARAM_COUNT];
    for g in &partials {
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    Ok(ScanGradient {
        loss: loss.value,
        grad,
        rank_grad,
        output,
    })
}

/// `Σ_i c_i · ranks_i(scores(params))` for fixed coefficients `c`: the
/// objective whose gradient [`scan_gradient`] returns when `c` is its
/// `rank_grad`.
pub fn rank_surrogate(r: &Regressor, inputs: &[Vec<f64>], coeffs: &[f64], cfg: &TrainConfig) -> Result<f64> {
    check_len(inputs.len(), coeffs.len())?;
    let out = pipeline_from_scores(scores_for(r, inputs).0, cfg)?;
    Ok(dot(out.soft.ranks.as_slice(), coeffs))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub regressor: Regressor,
    /// `history[epoch][scan]`: loss before that scan's update.
    pub history: Vec<Vec<f64>>,
    /// Number of selected entries of each pipeline mask, same shape.
    pub selected: Vec<Vec<usize>>,
}

pub fn train(dataset: &[(Vec<ProjectionImage>, SelectionMask)], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let n = dataset[0].0.len();
    let mut prepared = Vec::with_capacity(dataset.len());
    for (scan, label) in dataset {
        if scan.len() != n || label.len() != n {
            return Err(Error::invalid(format!(
                "all scans must have {n} projections and labels"
            )));
        }
        let inputs = scan.iter().map(downsample).collect::<Result<Vec<_>>>()?;
        prepared.push((inputs, label.clone()));
    }
    train_prepared(&prepared, cfg)
}

/// [`train`] on inputs already passed through [`downsample`].
pub fn train_prepared(dataset: &[(Vec<Vec<f64>>, SelectionMask)], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let n = dataset[0].0.len();
    if n == 0 {
        return Err(Error::invalid("scan has no projections"));
    }
    if dataset.iter().any(|(x, y)| x.len() != n || y.len() != n) {
        return Err(Error::invalid(format!(
            "all scans must have {n} projections and labels"
        )));
    }
    if cfg.k > n {
        return Err(Error::invalid(format!("k = {} exceeds scan size {n}", cfg.k)));
    }

    let mut regressor = Regressor::new(cfg.seed);
    if cfg.standardize_inputs {
        regressor.fit_input_map(dataset.iter().flat_map(|(x, _)| x))?;
    }
    let mut state = AdamState::new(PARAM_COUNT);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut selected = Vec::with_capacity(cfg.epochs);
    let mut t = 0u64;
    for epoch in 0..cfg.epochs {
        let ecfg = cfg.at_epoch(epoch);
        let mut losses = Vec::with_capacity(dataset.len());
        let mut counts = Vec::with_capacity(dataset.len());
        for (inputs, label) in dataset {
            let step = scan_gradient(&regressor, inputs, label, &ecfg)?;
            losses.push(step.loss);
            counts.push(step.output.mask.count());
            t += 1;
            adam_step(regressor.params_mut(), &step.grad, &mut state, t, &ecfg)?;
        }
        if regressor.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("training diverged: non-finite parameters"));
        }
        history.push(losses);
        selected.push(counts);
    }
    Ok(TrainOutcome {
        regressor,
        history,
        selected,
    })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"PSCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: String,
    pub seed: u64,
    pub config: TrainConfig,
}

pub fn architecture_name() -> String {
    format!("dense-{INPUT}-{H1}-{H2}-1-relu")
}

/// `input.shift` and `input.scale` followed by [`LAYOUT`].
fn tensor_table() -> Vec<(&'static str, usize, usize)> {
    let mut t = vec![("input.shift", INPUT, 1), ("input.scale", INPUT, 1)];
    t.extend_from_slice(&LAYOUT);
    t
}

/// Checkpoint layout, all integers little-endian `u32`:
///
/// ```text
/// "PSCK" version header_len header_json
/// tensor_count { name_len name ndim dims… }*
/// f32 data of every tensor in table order
/// ```
pub fn write_checkpoint(r: &Regressor, header: &CheckpointHeader, mut out: impl Write) -> std::io::Result<()> {
    let header_json = serde_json::to_vec(header).map_err(std::io::Error::other)?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(header_json.len() as u32).to_le_bytes())?;
    out.write_all(&header_json)?;
    let table = tensor_table();
    out.write_all(&(table.len() as u32).to_le_bytes())?;
    for &(name, rows, cols) in &table {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        let dims: &[usize] = if cols == 1 { &[rows] } else { &[rows, cols] };
        out.write_all(&(dims.len() as u32).to_le_bytes())?;
        for &d in dims {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
    }
    for p in r.shift.iter().chain(&r.scale).chain(&r.params) {
        out.write_all(&(*p as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(input: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint(mut input: impl Read) -> std::result::Result<(Regressor, CheckpointHeader), String> {
    let io = |e: std::io::Error| e.to_string();
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = read_u32(&mut input).map_err(io)?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let hlen = read_u32(&mut input).map_err(io)? as usize;
    let mut hbuf = vec![0u8; hlen];
    input.read_exact(&mut hbuf).map_err(io)?;
    let header: CheckpointHeader = serde_json::from_slice(&hbuf).map_err(|e| e.to_string())?;
    if header.architecture != architecture_name() {
        return Err(format!("unknown architecture {}", header.architecture));
    }
    let count = read_u32(&mut input).map_err(io)? as usize;
    let table = tensor_table();
    if count != table.len() {
        return Err(format!("expected {} tensors, found {count}", table.len()));
    }
    for &(name, rows, cols) in &table {
        let nlen = read_u32(&mut input).map_err(io)? as usize;
        let mut nbuf = vec![0u8; nlen];
        input.read_exact(&mut nbuf).map_err(io)?;
        if nbuf != name.as_bytes() {
            return Err(format!("unexpected tensor {}", String::from_utf8_lossy(&nbuf)));
        }
        let ndim = read_u32(&mut input).map_err(io)? as usize;
        let mut numel = 1usize;
        for _ in 0..ndim {
            numel *= read_u32(&mut input).map_err(io)? as usize;
        }
        if numel != rows * cols {
            return Err(format!("tensor {name} has {numel} elements, expected {}", rows * cols));
        }
    }
    let mut values = Vec::with_capacity(2 * INPUT + PARAM_COUNT);
    let mut b = [0u8; 4];
    for _ in 0..2 * INPUT + PARAM_COUNT {
        input.read_exact(&mut b).map_err(io)?;
        values.push(f32::from_le_bytes(b) as f64);
    }
    let params = values.split_off(2 * INPUT);
    let scale = values.split_off(INPUT);
    let mut r = Regressor::from_params(params).map_err(|e| e.to_string())?;
    r.set_input_map(values, scale).map_err(|e| e.to_string())?;
    Ok((r, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pose_from_position, ScanPosition, SystemGeometry};

    fn image(value: f64) -> ProjectionImage {
        let pose = pose_from_position(&ScanPosition { azimuth: 0.0, elevation: 0.0 }, &SystemGeometry::default());
        ProjectionImage {
            rows: 64,
            cols: 64,
            data: vec![value; 64 * 64],
            pose,
        }
    }

    fn mask(v: &[u8], k: usize) -> SelectionMask {
        SelectionMask::new(v.to_vec(), k).unwrap()
    }

    #[test]
    fn parameter_count() {
        assert_eq!(PARAM_COUNT, 1024 * 64 + 64 + 64 * 16 + 16 + 16 + 1);
    }

    #[test]
    fn zero_input_propagates_biases_only() {
        let mut r = Regressor::new(3);
        r.zero_biases();
        assert_eq!(regress(&r, &image(0.0)).unwrap(), 0.0);

        let r = Regressor::new(5);
        let p = r.params();
        let h1: Vec<f64> = (0..H1).map(|o| p[B1 + o].max(0.0)).collect();
        let h2: Vec<f64> = (0..H2)
            .map(|o| (p[B2 + o] + (0..H1).map(|i| p[W2 + o * H1 + i] * h1[i]).sum::<f64>()).max(0.0))
            .collect();
        let expect = p[B3] + (0..H2).map(|i| p[W3 + i] * h2[i]).sum::<f64>();
        assert!((regress(&r, &image(0.0)).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn identical_projections_identical_scores() {
        let r = Regressor::new(1);
        assert_eq!(regress(&r, &image(0.7)).unwrap(), regress(&r, &image(0.7)).unwrap());
    }

    #[test]
    fn wrong_input_size_rejected() {
        let mut img = image(1.0);
        img.rows = 16;
        img.data.truncate(16 * 64);
        assert!(regress(&Regressor::new(0), &img).is_err());
    }

    #[test]
    fn downsample_block_average() {
        let mut img = image(0.0);
        img.data[0] = 4.0;
        let x = downsample(&img).unwrap();
        assert_eq!(x[0], 1.0);
        assert!(x[1..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bce_closed_forms() {
        let label = mask(&[1, 0, 1, 0], 2);
        let same = bce_loss(&label, &label, 0.01).unwrap().value;
        assert!((same - -(0.99f64).ln()).abs() < 1e-15);
        assert!((same - 0.01005).abs() < 1e-5);
        let flipped = bce_loss(&mask(&[0, 1, 0, 1], 2), &label, 0.01).unwrap().value;
        assert!((flipped - -(0.01f64).ln()).abs() < 1e-12);
        let half = bce_loss(&mask(&[1, 1, 0, 0], 2), &label, 0.01).unwrap().value;
        assert!((half - 0.5 * (same + flipped)).abs() < 1e-12);
    }

    #[test]
    fn bce_errors() {
        let label = mask(&[1, 0], 1);
        assert!(bce_loss(&mask(&[1, 0, 0], 1), &label, 0.01).is_err());
        assert!(bce_loss(&label, &label, 0.5).is_err());
    }

    #[test]
    fn adam_first_step_is_sign() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut p = vec![1.0, 1.0, 1.0];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[2.0, -0.5, 0.0], &mut s, 1, &cfg).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] - 1.1).abs() < 1e-7);
        assert_eq!(p[2], 1.0);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let cfg = TrainConfig::default();
        let mut p = vec![0.3, -2.0];
        let mut s = AdamState::new(2);
        for t in 1..=10 {
            adam_step(&mut p, &[0.0, 0.0], &mut s, t, &cfg).unwrap();
        }
        assert_eq!(p, vec![0.3, -2.0]);
        assert!(adam_step(&mut p, &[0.0], &mut s, 11, &cfg).is_err());
    }

    #[test]
    fn adam_descends_quadratic() {
        // hand trace of x ← x - 0.1·m̂/√v̂ on f = x², x0 = 1
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut x = vec![1.0];
        let mut s = AdamState::new(1);
        let mut prev = x[0];
        for t in 1..=3 {
            let g = 2.0 * x[0];
            adam_step(&mut x, &[g], &mut s, t, &cfg).unwrap();
            assert!(x[0] < prev);
            prev = x[0];
        }
        assert!((x[0] - 0.7015862729460303).abs() < 1e-12);
    }

    #[test]
    fn pipeline_single_projection() {
        let cfg = TrainConfig { k: 1, ..TrainConfig::default() };
        let out = forward_pipeline(&Regressor::new(0), &[image(1.0)], &cfg).unwrap();
        assert_eq!(out.mask.values(), &[1]);
    }

    #[test]
    fn constant_regressor_ties_all_ranks() {
        let scan: Vec<_> = (0..5).map(|_| image(0.5)).collect();
        for (k, expect) in [(2usize, 0u8), (3, 1)] {
            let cfg = TrainConfig { k, ..TrainConfig::default() };
            let out = forward_pipeline(&Regressor::new(9), &scan, &cfg).unwrap();
            assert!(out.soft.ranks.as_slice().iter().all(|r| (r - 3.0).abs() < 1e-12));
            assert!(out.mask.values().iter().all(|&m| m == expect));
        }
    }

    #[test]
    fn train_rejects_ragged_dataset() {
        let cfg = TrainConfig { k: 1, epochs: 1, ..TrainConfig::default() };
        let a = (vec![image(1.0), image(2.0)], mask(&[1, 0], 1));
        let b = (vec![image(1.0)], mask(&[1], 1));
        assert!(train(&[a, b], &cfg).is_err());
        assert!(train(&[], &cfg).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let cfg = TrainConfig { k: 1, epochs: 4, learning_rate: 0.0, ..TrainConfig::default() };
        let scan = vec![image(1.0), image(2.0), image(3.0)];
        let out = train(&[(scan, mask(&[0, 1, 0], 1))], &cfg).unwrap();
        let first = out.history[0][0];
        assert!(out.history.iter().all(|e| e[0] == first));
    }

    #[test]
    fn checkpoint_roundtrip_is_f32_exact() {
        let mut r = Regressor::new(11);
        let xs: Vec<Vec<f64>> = (0..3).map(|i| (0..INPUT).map(|j| ((i * j) % 7) as f64).collect()).collect();
        r.fit_input_map(&xs).unwrap();
        let header = CheckpointHeader {
            architecture: architecture_name(),
            seed: 11,
            config: TrainConfig::default(),
        };
        let mut buf = Vec::new();
        write_checkpoint(&r, &header, &mut buf).unwrap();
        let (back, h) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(h, header);
        for (a, b) in r.params().iter().zip(back.params()) {
            assert_eq!(*a as f32, *b as f32);
        }
        assert_eq!(back.input_map().0[8], r.input_map().0[8] as f32 as f64);
        let mut again = Vec::new();
        write_checkpoint(&back, &header, &mut again).unwrap();
        assert_eq!(buf, again);
        assert!(read_checkpoint(&b"XXXX"[..]).is_err());
    }
}
