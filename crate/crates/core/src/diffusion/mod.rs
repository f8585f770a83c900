//! Conditional diffusion over level-1 wavelet coefficients of one-hot label
//! volumes, used to inpaint a masked trochlear region.
//!
//! The denoiser predicts the clean coefficients `x̃₀` from the noisy state
//! concatenated with the coefficients of the masked condition. Sampling runs
//! the `x₀`-parameterised posterior from `t = T` down to 1.

mod denoiser;

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use denoiser::{time_embedding, Conv3, Denoiser, DenoiserConfig, Linear};

use crate::inr::ByteReader;
use crate::nn::{Adam, AdamConfig, CosineSchedule};
use crate::volume::{Grid, Label, LabelVolume, VolumeError};
use crate::wavelet::{dwt3, idwt3, MultiVolume, WaveletCoeffs, WaveletError};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid noise schedule: {0}")]
    Schedule(String),
    #[error("diffusion step {t} outside 1..={max}")]
    StepOutOfRange { t: usize, max: usize },
    #[error("no patella voxels; cannot place the inpainting mask")]
    NoPatella,
    #[error("non-finite sampler state at step {step}")]
    NonFinite { step: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Wavelet(#[from] WaveletError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Number of label channels in the one-hot encoding.
pub const LABEL_CHANNELS: usize = Label::COUNT;

/// Step count of the reference schedule whose terminal signal level is
/// preserved when fewer steps are used.
pub const REFERENCE_STEPS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Rescale the betas so `ᾱ_T` equals that of the 1000-step schedule.
    pub preserve_terminal: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            preserve_terminal: true,
        }
    }
}

/// Linear β schedule with all derived tables. Index with 1-based `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    coef_x0: Vec<f64>,
    coef_xt: Vec<f64>,
    posterior_var: Vec<f64>,
}

impl NoiseSchedule {
    /// β linear from `beta_start` (t = 1) to `beta_end` (t = T).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if steps == 0 {
            return Err(DiffusionError::Schedule("need at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
            return Err(DiffusionError::Schedule(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(betas))
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let mut coef_x0 = Vec::with_capacity(betas.len());
        let mut coef_xt = Vec::with_capacity(betas.len());
        let mut posterior_var = Vec::with_capacity(betas.len());
        for (i, &b) in betas.iter().enumerate() {
            let ab = alpha_bars[i];
            let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
            coef_x0.push(prev.sqrt() * b / (1.0 - ab));
            coef_xt.push((1.0 - b).sqrt() * (1.0 - prev) / (1.0 - ab));
            posterior_var.push((1.0 - prev) / (1.0 - ab) * b);
        }
        Self {
            betas,
            alpha_bars,
            coef_x0,
            coef_xt,
            posterior_var,
        }
    }

    /// Builds the configured schedule, rescaling when requested.
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self, DiffusionError> {
        let base = Self::linear(cfg.steps, cfg.beta_start, cfg.beta_end)?;
        if !cfg.preserve_terminal || cfg.steps == REFERENCE_STEPS {
            return Ok(base);
        }
        let target = Self::linear(REFERENCE_STEPS, cfg.beta_start, cfg.beta_end)?.alpha_bar(REFERENCE_STEPS);
        let terminal = |k: f64| {
            let mut acc = 1.0f64;
            for b in &base.betas {
                acc *= 1.0 - k * b;
            }
            acc
        };
        // ᾱ_T(k) decreases monotonically in the scale k.
        let (mut lo, mut hi) = (0.0, (1.0 - 1e-12) / cfg.beta_end);
        if terminal(hi) > target {
            return Err(DiffusionError::Schedule(format!(
                "{} steps cannot reach the reference terminal signal level {target:.3e}",
                cfg.steps
            )));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if terminal(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let k = 0.5 * (lo + hi);
        Ok(Self::from_betas(base.betas.iter().map(|b| b * k).collect()))
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<usize, DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::StepOutOfRange { t, max: self.steps() });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Posterior mean coefficients `(c₀, c_t)` with `μ̃ = c₀·x₀ + c_t·x_t`.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        (self.coef_x0[t - 1], self.coef_xt[t - 1])
    }

    /// `β̃_t`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_var[t - 1]
    }
}

/// `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`, element-wise.
pub fn forward_noise(x0: &[f32], t: usize, eps: &[f32], s: &NoiseSchedule) -> Result<Vec<f32>, DiffusionError> {
    s.check(t)?;
    if x0.len() != eps.len() {
        return Err(DiffusionError::Shape(format!("x0 has {} values, eps {}", x0.len(), eps.len())));
    }
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32)
        .collect())
}

/// One channel per label; +1 on the voxel's label, −1 elsewhere.
pub fn encode_labels(labels: &LabelVolume) -> MultiVolume<f32> {
    let n = labels.labels().len();
    let mut data = vec![-1f32; LABEL_CHANNELS * n];
    for (i, &l) in labels.labels().iter().enumerate() {
        data[l as usize * n + i] = 1.0;
    }
    MultiVolume::new(LABEL_CHANNELS, labels.dims(), data).expect("consistent shape")
}

/// Per-voxel argmax over channels (lowest label wins ties).
pub fn decode_labels(x: &MultiVolume<f32>, grid: Grid) -> Result<LabelVolume, DiffusionError> {
    if x.channels != LABEL_CHANNELS || x.dims != grid.dims() {
        return Err(DiffusionError::Shape(format!(
            "{} channels of {:?} cannot decode onto {:?}",
            x.channels,
            x.dims,
            grid.dims()
        )));
    }
    let n = x.voxels();
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..LABEL_CHANNELS {
                if x.data[c * n + i] > x.data[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Ok(LabelVolume::new(grid, labels)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskShape {
    /// Patella bounding box grown by the offset along each axis.
    Box,
    /// Every voxel within the offset (Euclidean, mm) of a patella voxel.
    Sphere,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub offset_mm: f64,
    pub shape: MaskShape,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            offset_mm: 30.0,
            shape: MaskShape::Box,
        }
    }
}

/// Voxels to be regenerated.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub grid: Grid,
    pub inside: Vec<bool>,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.inside.iter().filter(|&&m| m).count()
    }

    /// Index bounding box `(lo, hi)` inclusive, if non-empty.
    pub fn bounds(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0; 3];
        let mut any = false;
        for (i, _) in self.inside.iter().enumerate().filter(|(_, &m)| m) {
            let idx = self.grid.unravel(i);
            any = true;
            for a in 0..3 {
                lo[a] = lo[a].min(idx[a]);
                hi[a] = hi[a].max(idx[a]);
            }
        }
        any.then_some((lo, hi))
    }
}

/// Builds the inpainting mask around the patella.
pub fn build_mask(labels: &LabelVolume, cfg: &MaskConfig) -> Result<Mask, DiffusionError> {
    if !(cfg.offset_mm >= 0.0 && cfg.offset_mm.is_finite()) {
        return Err(DiffusionError::Config(format!("mask offset must be >= 0, got {}", cfg.offset_mm)));
    }
    let grid = *labels.grid();
    let dims = grid.dims();
    let patella = Label::Patella as u8;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut found = false;
    for (i, &l) in labels.labels().iter().enumerate() {
        if l == patella {
            found = true;
            let idx = grid.unravel(i);
            for a in 0..3 {
                lo[a] = lo[a].min(idx[a]);
                hi[a] = hi[a].max(idx[a]);
            }
        }
    }
    if !found {
        return Err(DiffusionError::NoPatella);
    }
    let inside = match cfg.shape {
        MaskShape::Box => {
            let r = [0, 1, 2].map(|a| (cfg.offset_mm / grid.spacing()[a] + 1e-9).floor() as usize);
            let blo = [0, 1, 2].map(|a| lo[a].saturating_sub(r[a]));
            let bhi = [0, 1, 2].map(|a| (hi[a] + r[a]).min(dims[a] - 1));
            (0..grid.len())
                .map(|i| {
                    let idx = grid.unravel(i);
                    (0..3).all(|a| idx[a] >= blo[a] && idx[a] <= bhi[a])
                })
                .collect()
        }
        MaskShape::Sphere => {
            let d2 = squared_distance_transform(labels.labels(), patella, dims, grid.spacing());
            let r2 = cfg.offset_mm * cfg.offset_mm;
            d2.iter().map(|&d| d <= r2 * (1.0 + 1e-12)).collect()
        }
    };
    Ok(Mask { grid, inside })
}

/// Exact squared Euclidean distance (mm²) to the nearest voxel carrying
/// `label`, by separable lower-envelope passes.
fn squared_distance_transform(labels: &[u8], label: u8, dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut f: Vec<f64> = labels.iter().map(|&l| if l == label { 0.0 } else { f64::INFINITY }).collect();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let n = dims[axis];
        let s = strides[axis];
        let h = spacing[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        for start in 0..f.len() {
            if !(start / s).is_multiple_of(n) {
                continue;
            }
            for i in 0..n {
                line[i] = f[start + i * s];
            }
            envelope_1d(&line, h, &mut out);
            for i in 0..n {
                f[start + i * s] = out[i];
            }
        }
    }
    f
}

/// `out[q] = min_p (h·(q−p))² + f[p]`.
fn envelope_1d(f: &[f64], h: f64, out: &mut [f64]) {
    let n = f.len();
    let finite: Vec<usize> = (0..n).filter(|&p| f[p].is_finite()).collect();
    if finite.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let pos = |p: usize| p as f64 * h;
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    let inter = |p: usize, q: usize| {
        ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)))
    };
    for &q in &finite {
        while let Some(&p) = v.last() {
            if inter(p, q) <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
        } else {
            let p = *v.last().unwrap();
            z.push(inter(p, q));
            v.push(q);
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Labels with the masked voxels cleared to background.
pub fn masked_condition(labels: &LabelVolume, mask: &Mask) -> Result<LabelVolume, DiffusionError> {
    if mask.grid.dims() != labels.dims() {
        return Err(DiffusionError::Shape("mask and labels differ in dims".into()));
    }
    let data = labels
        .labels()
        .iter()
        .zip(&mask.inside)
        .map(|(&l, &m)| if m { Label::Background as u8 } else { l })
        .collect();
    Ok(LabelVolume::new(*labels.grid(), data)?)
}

/// Predicts clean coefficients from the noisy state and the condition,
/// both `planes × voxels` on the half-resolution grid.
pub trait X0Predictor {
    fn predict(&self, xt: ArrayView2<f32>, cond: ArrayView2<f32>, dims: [usize; 3], t: usize) -> Array2<f32>;
}

impl X0Predictor for Denoiser<f32> {
    fn predict(&self, xt: ArrayView2<f32>, cond: ArrayView2<f32>, dims: [usize; 3], t: usize) -> Array2<f32> {
        let x = ndarray::concatenate(ndarray::Axis(0), &[xt, cond]).expect("matching voxel counts");
        self.forward(x.view(), dims, t)
    }
}

/// Returns a fixed set of clean coefficients regardless of input.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub x0: Array2<f32>,
}

impl OracleDenoiser {
    /// Oracle for the given clean label volume.
    pub fn for_labels(labels: &LabelVolume) -> Result<Self, DiffusionError> {
        Ok(Self {
            x0: coeff_matrix(&dwt3(&encode_labels(labels))?),
        })
    }
}

impl X0Predictor for OracleDenoiser {
    fn predict(&self, _: ArrayView2<f32>, _: ArrayView2<f32>, _: [usize; 3], _: usize) -> Array2<f32> {
        self.x0.clone()
    }
}

fn coeff_matrix(c: &WaveletCoeffs<f32>) -> Array2<f32> {
    Array2::from_shape_vec((c.planes(), c.plane_len()), c.data.clone()).unwrap()
}

/// Clean coefficients and condition coefficients of one training volume.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub x0: Array2<f32>,
    pub cond: Array2<f32>,
    pub half_dims: [usize; 3],
}

impl TrainingExample {
    pub fn new(labels: &LabelVolume, mask: &MaskConfig) -> Result<Self, DiffusionError> {
        let m = build_mask(labels, mask)?;
        let cond = masked_condition(labels, &m)?;
        let x0 = dwt3(&encode_labels(labels))?;
        let c = dwt3(&encode_labels(&cond))?;
        Ok(Self {
            half_dims: x0.subband_dims(),
            x0: coeff_matrix(&x0),
            cond: coeff_matrix(&c),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct WdmConfig {
    pub schedule: ScheduleConfig,
    pub width: usize,
    pub time_dim: usize,
    pub iterations: usize,
    pub lr0: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub mask: MaskConfig,
}

impl Default for WdmConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            width: 16,
            time_dim: 32,
            iterations: 2000,
            lr0: 1e-3,
            seed: 0,
            adam: AdamConfig::default(),
            mask: MaskConfig::default(),
        }
    }
}

impl WdmConfig {
    /// Full-size setting: 1000 steps, 50 000 iterations at lr 1e-5.
    pub fn reference() -> Self {
        Self {
            schedule: ScheduleConfig {
                steps: 1000,
                ..Default::default()
            },
            iterations: 50_000,
            lr0: 1e-5,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        NoiseSchedule::from_config(&self.schedule)?;
        self.denoiser_config().validate().map_err(DiffusionError::Config)?;
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(DiffusionError::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        Ok(())
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            time_dim: self.time_dim,
            ..DenoiserConfig::for_labels(LABEL_CHANNELS, self.width)
        }
    }
}

/// Trained denoiser with the schedule and mask settings it was trained for.
#[derive(Debug, Clone, PartialEq)]
pub struct WdmModel {
    pub denoiser: Denoiser<f32>,
    pub config: WdmConfig,
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub t: usize,
    pub loss: f64,
}

/// Stateful trainer; one example per iteration.
pub struct Trainer {
    pub model: WdmModel,
    schedule: NoiseSchedule,
    adam: Adam,
    lr: CosineSchedule,
    rng: ChaCha8Rng,
    iteration: usize,
}

impl Trainer {
    pub fn new(config: WdmConfig) -> Result<Self, DiffusionError> {
        config.validate()?;
        let schedule = NoiseSchedule::from_config(&config.schedule)?;
        let denoiser = Denoiser::init(config.denoiser_config(), config.seed).map_err(DiffusionError::Config)?;
        let shapes: Vec<usize> = denoiser.tensors().iter().map(|t| t.len()).collect();
        Ok(Self {
            adam: Adam::new(config.adam, &shapes),
            lr: CosineSchedule::new(config.lr0, config.iterations as u64),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5744_4d54),
            schedule,
            iteration: 0,
            model: WdmModel { denoiser, config },
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Draws `t`, noises the example, and applies one Adam update on the
    /// MSE between prediction and clean coefficients.
    pub fn train_step(&mut self, ex: &TrainingExample) -> Result<TrainRecord, DiffusionError> {
        let t = self.rng.random_range(1..=self.schedule.steps());
        let eps: Vec<f32> = (0..ex.x0.len()).map(|_| self.rng.sample(StandardNormal)).collect();
        let xt = forward_noise(ex.x0.as_slice().unwrap(), t, &eps, &self.schedule)?;
        let xt = Array2::from_shape_vec(ex.x0.raw_dim(), xt).unwrap();
        let input = ndarray::concatenate(ndarray::Axis(0), &[xt.view(), ex.cond.view()])
            .map_err(|e| DiffusionError::Shape(e.to_string()))?;
        let d = &mut self.model.denoiser;
        let (loss, grad) = d.loss_and_gradient(input.view(), ex.half_dims, t, ex.x0.view());
        let loss = loss as f64;
        if !loss.is_finite() {
            return Err(DiffusionError::NonFinite { step: t });
        }
        let lr = self.lr.lr(self.iteration as u64);
        let grads = grad.tensors();
        self.adam.step(&mut d.tensors_mut(), &grads, lr);
        self.iteration += 1;
        Ok(TrainRecord {
            iteration: self.iteration,
            t,
            loss,
        })
    }
}

/// Trains for `config.iterations`, cycling through a seeded shuffle of the
/// examples, and reports each iteration to `log`.
pub fn train_wdm(
    examples: &[TrainingExample],
    config: WdmConfig,
    mut log: impl FnMut(&TrainRecord),
) -> Result<WdmModel, DiffusionError> {
    if examples.is_empty() {
        return Err(DiffusionError::Config("no training examples".into()));
    }
    let mut trainer = Trainer::new(config)?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(trainer.model.config.seed ^ 0x5348_5546);
    for it in 0..trainer.model.config.iterations {
        if it % examples.len() == 0 {
            use rand::seq::SliceRandom;
            order.shuffle(&mut shuffle_rng);
        }
        let rec = trainer.train_step(&examples[order[it % examples.len()]])?;
        log(&rec);
    }
    Ok(trainer.model)
}

/// Generated labels composited into the source, plus the raw generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Inpainting {
    pub labels: LabelVolume,
    pub raw: LabelVolume,
}

/// Clips coefficients so the represented label-space volume lies in
/// `[−1, 1]`.
fn clip_signal(x: &mut Array2<f32>, source_dims: [usize; 3]) -> Result<(), DiffusionError> {
    let c = WaveletCoeffs::from_parts(LABEL_CHANNELS, source_dims, x.as_slice().unwrap().to_vec())?;
    let mut v = idwt3(&c)?;
    v.data.iter_mut().for_each(|u| *u = u.clamp(-1.0, 1.0));
    let back = dwt3(&v)?;
    x.as_slice_mut().unwrap().copy_from_slice(&back.data);
    Ok(())
}

/// Runs the reverse process on `source` with the masked region cleared and
/// composites the generated labels into the mask.
pub fn inpaint(
    predictor: &impl X0Predictor,
    source: &LabelVolume,
    mask: &Mask,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Inpainting, DiffusionError> {
    let grid = *source.grid();
    let cond_labels = masked_condition(source, mask)?;
    let cond_c = dwt3(&encode_labels(&cond_labels))?;
    let cond = coeff_matrix(&cond_c);
    let half = cond_c.subband_dims();
    let shape = (LABEL_CHANNELS * crate::wavelet::SUBBANDS, cond_c.plane_len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xt = Array2::<f32>::from_shape_simple_fn(shape, || rng.sample(StandardNormal));
    let mut x0 = Array2::<f32>::zeros(shape);
    for t in (1..=schedule.steps()).rev() {
        x0 = predictor.predict(xt.view(), cond.view(), half, t);
        if x0.dim() != shape {
            return Err(DiffusionError::Shape(format!("predictor returned {:?}, expected {shape:?}", x0.dim())));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::NonFinite { step: t });
        }
        clip_signal(&mut x0, grid.dims())?;
        let (c0, ct) = schedule.posterior_coefficients(t);
        let sd = schedule.posterior_variance(t).sqrt();
        let mut next = Array2::<f32>::zeros(shape);
        for ((n, &a), &b) in next.iter_mut().zip(&x0).zip(&xt) {
            let mean = c0 * a as f64 + ct * b as f64;
            *n = if t > 1 {
                (mean + sd * rng.sample::<f64, _>(StandardNormal)) as f32
            } else {
                mean as f32
            };
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::NonFinite { step: t });
        }
        xt = next;
    }
    let c = WaveletCoeffs::from_parts(LABEL_CHANNELS, grid.dims(), x0.into_raw_vec_and_offset().0)?;
    let raw = decode_labels(&idwt3(&c)?, grid)?;
    let labels = LabelVolume::new(
        grid,
        source
            .labels()
            .iter()
            .zip(raw.labels())
            .zip(&mask.inside)
            .map(|((&s, &g), &m)| if m { g } else { s })
            .collect(),
    )?;
    Ok(Inpainting { labels, raw })
}

const GWDM_MAGIC: &[u8; 4] = b"GWDM";
const GWDM_VERSION: u32 = 1;

impl WdmModel {
    pub fn schedule(&self) -> Result<NoiseSchedule, DiffusionError> {
        NoiseSchedule::from_config(&self.config.schedule)
    }

    /// `GWDM` layout: magic, version, JSON config length + bytes, parameter
    /// count, then little-endian f32 parameters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = serde_json::to_vec(&self.config).expect("serialisable config");
        let mut out = Vec::new();
        out.extend_from_slice(GWDM_MAGIC);
        out.extend_from_slice(&GWDM_VERSION.to_le_bytes());
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        let params: Vec<f32> = self.denoiser.tensors().concat();
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for p in params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DiffusionError> {
        let bad = |m: &str| DiffusionError::Checkpoint(m.to_string());
        let mut r = ByteReader { bytes, pos: 0 };
        let magic = r.take(4).map_err(|_| bad("truncated header"))?;
        if magic != GWDM_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32().map_err(|_| bad("truncated header"))?;
        if version != GWDM_VERSION {
            return Err(DiffusionError::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.u32().map_err(|_| bad("truncated header"))? as usize;
        let cfg_bytes = r.take(len).map_err(|_| bad("truncated config"))?;
        let config: WdmConfig =
            serde_json::from_slice(cfg_bytes).map_err(|e| DiffusionError::Checkpoint(format!("config: {e}")))?;
        config.validate()?;
        let n = u64::from_le_bytes(r.take(8).map_err(|_| bad("truncated"))?.try_into().unwrap()) as usize;
        let mut denoiser = Denoiser::<f32>::init(config.denoiser_config(), 0).map_err(DiffusionError::Config)?;
        if n != denoiser.param_count() {
            return Err(DiffusionError::Checkpoint(format!(
                "{n} parameters stored, architecture needs {}",
                denoiser.param_count()
            )));
        }
        for t in denoiser.tensors_mut() {
            for v in t.iter_mut() {
                *v = r.f32().map_err(|_| bad("truncated parameters"))?;
            }
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { denoiser, config })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DiffusionError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DiffusionError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests;
