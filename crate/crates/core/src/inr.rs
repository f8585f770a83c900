//! Implicit neural representation that fuses three orthogonal thick-slice
//! scans into one continuous intensity function.
//!
//! The network is an MLP `ℝ³ → ℝ^K` (one output channel per scan) whose hidden
//! layers use the real Gabor wavelet `cos(ω₀z)·exp(−(s₀z)²)`. Each training pair
//! supervises only the output channel of the scan it came from.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{uniform_vec, Adam, AdamConfig, CosineSchedule, Scalar};
use crate::volume::{Grid, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum InrError {
    #[error("non-finite loss at epoch {epoch}, iteration {iteration}")]
    NonFiniteLoss { epoch: usize, iteration: usize },
    #[error("non-finite network output at epoch {epoch}")]
    NonFiniteOutput { epoch: usize },
    #[error("scan {index} does not share the common world frame (extent {extent:?} vs {reference:?})")]
    FrameMismatch {
        index: usize,
        extent: [[f64; 3]; 2],
        reference: [[f64; 3]; 2],
    },
    #[error("training did not converge: final loss {loss:.3e} above ceiling {ceiling:.3e}")]
    NotConverged { loss: f64, ceiling: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// `cos(ω₀z)·exp(−(s₀z)²)`.
#[inline]
pub fn gabor_activation<T: Scalar>(z: T, omega0: T, s0: T) -> T {
    let sz = s0 * z;
    (omega0 * z).cos() * (-(sz * sz)).exp()
}

#[inline]
fn gabor_grad<T: Scalar>(z: T, omega0: T, s0: T) -> T {
    let env = (-(s0 * s0 * z * z)).exp();
    let wz = omega0 * z;
    env * (-(omega0 * wz.sin()) - T::of(2.0) * s0 * s0 * z * wz.cos())
}

/// Fully connected layer `y = W x + b` with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Dense<T> {
    fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut z = x.dot(&self.weight.t());
        for mut row in z.rows_mut() {
            row.zip_mut_with(&self.bias, |a, &b| *a += b);
        }
        z
    }

    fn cast<U: Scalar>(&self) -> Dense<U> {
        Dense {
            weight: self.weight.mapv(|v| U::of(v.to_f64().unwrap())),
            bias: self.bias.mapv(|v| U::of(v.to_f64().unwrap())),
        }
    }
}

/// Gradients mirroring the layers of an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad<T> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Scalar> MlpGrad<T> {
    pub fn flat(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.flat()
            .into_iter()
            .map(|v| v.abs().to_f64().unwrap())
            .fold(0.0, f64::max)
    }
}

/// Gabor-activated MLP; hidden layers use the wavelet, the head is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
    pub omega0: f64,
    pub s0: f64,
}

/// Architecture of the coordinate network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Number of linear layers (hidden layers + head).
    pub layers: usize,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub omega0: f64,
    pub s0: f64,
}

impl Architecture {
    pub fn validate(&self) -> Result<(), InrError> {
        if self.layers < 2 {
            return Err(InrError::Config("at least 2 layers are required".into()));
        }
        if self.input == 0 || self.hidden == 0 || self.output == 0 {
            return Err(InrError::Config("layer widths must be > 0".into()));
        }
        if !(self.omega0.is_finite() && self.s0.is_finite() && self.s0 >= 0.0) {
            return Err(InrError::Config("activation constants must be finite".into()));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|l| {
                let fan_in = if l == 0 { self.input } else { self.hidden };
                let fan_out = if l + 1 == self.layers {
                    self.output
                } else {
                    self.hidden
                };
                (fan_out, fan_in)
            })
            .collect()
    }
}

struct Tape<T> {
    /// layer inputs (activations of the previous layer)
    inputs: Vec<Array2<T>>,
    /// hidden pre-activations
    pre: Vec<Array2<T>>,
    output: Array2<T>,
}

impl<T: Scalar> Mlp<T> {
    /// Hidden layers draw from `U(±√(6/fan_in)/ω₀)`; the head from `U(±1/√fan_in)`.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self, InrError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = arch.layers;
        let layers = arch
            .widths()
            .into_iter()
            .enumerate()
            .map(|(l, (out, inp))| {
                let bound = if l + 1 == n {
                    1.0 / (inp as f64).sqrt()
                } else {
                    (6.0 / inp as f64).sqrt() / arch.omega0.abs().max(1e-12)
                };
                let weight =
                    Array2::from_shape_vec((out, inp), uniform_vec(&mut rng, out * inp, bound))
                        .unwrap();
                let bias = Array1::from_vec(uniform_vec(&mut rng, out, bound));
                Dense { weight, bias }
            })
            .collect();
        Ok(Self {
            layers,
            omega0: arch.omega0,
            s0: arch.s0,
        })
    }

    pub fn architecture(&self) -> Architecture {
        let first = &self.layers[0];
        let last = self.layers.last().unwrap();
        Architecture {
            layers: self.layers.len(),
            input: first.weight.ncols(),
            hidden: first.weight.nrows(),
            output: last.weight.nrows(),
            omega0: self.omega0,
            s0: self.s0,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            layers: self.layers.iter().map(Dense::cast).collect(),
            omega0: self.omega0,
            s0: self.s0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn tape(&self, x: ArrayView2<T>) -> Tape<T> {
        let (w0, s0) = (T::of(self.omega0), T::of(self.s0));
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(a.view());
            inputs.push(a);
            if l + 1 == self.layers.len() {
                return Tape { inputs, pre, output: z };
            }
            a = z.mapv(|v| gabor_activation(v, w0, s0));
            pre.push(z);
        }
        unreachable!("an Mlp has at least one layer")
    }

    /// Batched forward pass; `x` is `batch × input`.
    pub fn forward_batch(&self, x: ArrayView2<T>) -> Array2<T> {
        let (w0, s0) = (T::of(self.omega0), T::of(self.s0));
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(a.view());
            if l + 1 == self.layers.len() {
                return z;
            }
            a = z.mapv(|v| gabor_activation(v, w0, s0));
        }
        unreachable!("an Mlp has at least one layer")
    }

    /// Single-coordinate forward pass.
    pub fn forward(&self, c: [T; 3]) -> Vec<T> {
        let x = Array2::from_shape_vec((1, 3), c.to_vec()).unwrap();
        self.forward_batch(x.view()).row(0).to_vec()
    }

    /// Mean over the batch of `(f(c)[k] − d)²`, where `k` is each sample's
    /// source scan, and its gradient with respect to every parameter.
    pub fn loss_and_gradient(
        &self,
        x: ArrayView2<T>,
        channel: &[u8],
        target: &[T],
    ) -> (T, MlpGrad<T>) {
        let n = x.nrows();
        assert!(n > 0, "empty batch");
        assert_eq!(channel.len(), n);
        assert_eq!(target.len(), n);
        let tape = self.tape(x);
        let inv_n = T::one() / T::of(n as f64);
        let mut delta = Array2::<T>::zeros(tape.output.raw_dim());
        let mut loss = T::zero();
        for i in 0..n {
            let k = channel[i] as usize;
            let r = tape.output[[i, k]] - target[i];
            loss += r * r;
            delta[[i, k]] = T::of(2.0) * r * inv_n;
        }
        loss = loss * inv_n;

        let (w0, s0) = (T::of(self.omega0), T::of(self.s0));
        let mut grads: Vec<Dense<T>> = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let input = &tape.inputs[l];
            let weight = delta.t().dot(input);
            let bias = delta.sum_axis(Axis(0));
            grads.push(Dense { weight, bias });
            if l == 0 {
                break;
            }
            let mut back = delta.dot(&self.layers[l].weight);
            ndarray::Zip::from(&mut back)
                .and(&tape.pre[l - 1])
                .for_each(|d, &z| *d = *d * gabor_grad(z, w0, s0));
            delta = back;
        }
        grads.reverse();
        (loss, MlpGrad { layers: grads })
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("contiguous"),
                    l.bias.as_slice_mut().expect("contiguous"),
                ]
            })
            .collect()
    }

    fn param_shapes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.len(), l.bias.len()])
            .collect()
    }

    /// Flat parameter vector, layer by layer (weights then biases).
    pub fn flat_params(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, values: &[T]) {
        assert_eq!(values.len(), self.param_count());
        let mut it = values.iter().copied();
        for p in self.params_mut() {
            for v in p.iter_mut() {
                *v = it.next().unwrap();
            }
        }
    }
}

/// How the per-scan output channels become one intensity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "channel")]
pub enum ChannelPolicy {
    Single(usize),
    Mean,
}

impl Default for ChannelPolicy {
    fn default() -> Self {
        ChannelPolicy::Single(0)
    }
}

impl std::str::FromStr for ChannelPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mean" => Ok(ChannelPolicy::Mean),
            "axial" => Ok(ChannelPolicy::Single(0)),
            "sagittal" => Ok(ChannelPolicy::Single(1)),
            "coronal" => Ok(ChannelPolicy::Single(2)),
            other => other
                .strip_prefix("single:")
                .and_then(|k| k.parse().ok())
                .map(ChannelPolicy::Single)
                .ok_or_else(|| format!("unknown channel policy '{other}'")),
        }
    }
}

/// Training hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct InrTrainConfig {
    pub layers: usize,
    pub hidden: usize,
    pub omega0: f64,
    pub s0: f64,
    pub lr0: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Training fails when the final epoch-mean loss exceeds this value.
    pub loss_ceiling: Option<f64>,
    pub adam: AdamConfig,
}

impl Default for InrTrainConfig {
    fn default() -> Self {
        Self {
            layers: 5,
            hidden: 128,
            omega0: 20.0,
            s0: 10.0,
            lr0: 4e-4,
            epochs: 100,
            batch: 4096,
            seed: 0,
            loss_ceiling: Some(0.05),
            adam: AdamConfig::default(),
        }
    }
}

impl InrTrainConfig {
    /// Reference scale: hidden width 1024, otherwise the same optimiser setup.
    pub fn reference() -> Self {
        Self {
            hidden: 1024,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), InrError> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(InrError::Config("epochs and batch must be > 0".into()));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(InrError::Config("lr0 must be > 0".into()));
        }
        Ok(())
    }
}

/// Affine map from the union bounding box of the scans to `[−1, 1]³`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordNorm {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl CoordNorm {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| {
            let span = self.hi[a] - self.lo[a];
            if span > 0.0 {
                (2.0 * (p[a] - self.lo[a]) / span - 1.0).clamp(-1.0, 1.0)
            } else {
                0.0
            }
        })
    }
}

/// Per-channel min/max used to map intensities to `[0, 1]` and back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityNorm {
    pub min: f64,
    pub max: f64,
}

impl IntensityNorm {
    fn span(&self) -> f64 {
        let s = self.max - self.min;
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }
    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.min) / self.span()
    }
    pub fn denormalize(&self, v: f64) -> f64 {
        self.min + v * self.span()
    }
}

/// The set of known (coordinate, scan, intensity) pairs.
#[derive(Debug, Clone)]
pub struct TrainSet {
    /// `n × 3`, normalised to `[−1, 1]`.
    pub coords: Array2<f32>,
    pub channel: Vec<u8>,
    /// Normalised to `[0, 1]`.
    pub target: Vec<f32>,
    pub coord_norm: CoordNorm,
    pub intensity: Vec<IntensityNorm>,
}

impl TrainSet {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    /// Collects every voxel of every scan. The scans must cover the same
    /// world box to within half of their coarsest spacing.
    pub fn from_scans(scans: &[Volume]) -> Result<Self, InrError> {
        if scans.is_empty() || scans.len() > u8::MAX as usize {
            return Err(InrError::Config("need between 1 and 255 scans".into()));
        }
        let extents: Vec<_> = scans.iter().map(|s| s.grid().extent()).collect();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for s in scans {
            let (l, h) = s.grid().bounds();
            for a in 0..3 {
                lo[a] = lo[a].min(l[a]);
                hi[a] = hi[a].max(h[a]);
            }
        }
        let reference = extents[0];
        for (index, (s, e)) in scans.iter().zip(&extents).enumerate() {
            let tol = 0.5 * s.grid().spacing().iter().cloned().fold(0.0, f64::max)
                + 0.5
                    * scans[0]
                        .grid()
                        .spacing()
                        .iter()
                        .cloned()
                        .fold(0.0, f64::max);
            let ok = (0..3).all(|a| {
                (e.0[a] - reference.0[a]).abs() <= tol && (e.1[a] - reference.1[a]).abs() <= tol
            });
            if !ok {
                return Err(InrError::FrameMismatch {
                    index,
                    extent: [e.0, e.1],
                    reference: [reference.0, reference.1],
                });
            }
        }
        let coord_norm = CoordNorm { lo, hi };
        let total: usize = scans.iter().map(|s| s.data().len()).sum();
        let mut coords = Vec::with_capacity(total * 3);
        let mut channel = Vec::with_capacity(total);
        let mut target = Vec::with_capacity(total);
        let mut intensity = Vec::with_capacity(scans.len());
        for (k, s) in scans.iter().enumerate() {
            let (mn, mx) = s.min_max();
            let norm = IntensityNorm {
                min: mn as f64,
                max: mx as f64,
            };
            intensity.push(norm);
            let g = s.grid();
            for (idx, &v) in s.data().iter().enumerate() {
                let c = coord_norm.apply(g.index_to_world_unchecked(g.unravel(idx)));
                coords.extend(c.iter().map(|&x| x as f32));
                channel.push(k as u8);
                target.push(norm.normalize(v as f64) as f32);
            }
        }
        Ok(Self {
            coords: Array2::from_shape_vec((total, 3), coords).unwrap(),
            channel,
            target,
            coord_norm,
            intensity,
        })
    }
}

/// Trained representation with the normalisations needed to query it in
/// world coordinates and original intensity units.
#[derive(Debug, Clone, PartialEq)]
pub struct InrModel {
    pub net: Mlp<f32>,
    pub coord_norm: CoordNorm,
    pub intensity: Vec<IntensityNorm>,
}

/// Loss history of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub iterations: u64,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_loss.last().copied().unwrap_or(f64::NAN)
    }
}

/// Fits the representation jointly to all scans.
pub fn train(scans: &[Volume], cfg: &InrTrainConfig) -> Result<(InrModel, TrainReport), InrError> {
    cfg.validate()?;
    let set = TrainSet::from_scans(scans)?;
    train_on(&set, cfg)
}

pub fn train_on(set: &TrainSet, cfg: &InrTrainConfig) -> Result<(InrModel, TrainReport), InrError> {
    cfg.validate()?;
    let arch = Architecture {
        layers: cfg.layers,
        input: 3,
        hidden: cfg.hidden,
        output: set.intensity.len(),
        omega0: cfg.omega0,
        s0: cfg.s0,
    };
    let mut net = Mlp::<f32>::init(&arch, cfg.seed)?;
    let mut adam = Adam::new(cfg.adam, &net.param_shapes());
    let n = set.len();
    let per_epoch = n.div_ceil(cfg.batch);
    let schedule = CosineSchedule::new(cfg.lr0, (per_epoch * cfg.epochs) as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_F1E1D);
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = TrainReport::default();
    let mut xb = Array2::<f32>::zeros((cfg.batch.min(n), 3));
    let mut cb = Vec::with_capacity(cfg.batch);
    let mut tb = Vec::with_capacity(cfg.batch);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0f64;
        for (it, chunk) in order.chunks(cfg.batch).enumerate() {
            if xb.nrows() != chunk.len() {
                xb = Array2::zeros((chunk.len(), 3));
            }
            cb.clear();
            tb.clear();
            for (r, &i) in chunk.iter().enumerate() {
                xb.row_mut(r).assign(&set.coords.row(i));
                cb.push(set.channel[i]);
                tb.push(set.target[i]);
            }
            let (loss, grad) = net.loss_and_gradient(xb.view(), &cb, &tb);
            let loss = loss as f64;
            if !loss.is_finite() {
                return Err(InrError::NonFiniteLoss {
                    epoch,
                    iteration: it,
                });
            }
            sum += loss * chunk.len() as f64;
            let lr = schedule.lr(adam.steps());
            let grads: Vec<&[f32]> = grad
                .layers
                .iter()
                .flat_map(|l| [l.weight.as_slice().unwrap(), l.bias.as_slice().unwrap()])
                .collect();
            adam.step(&mut net.params_mut(), &grads, lr);
        }
        report.epoch_loss.push(sum / n as f64);
        let probe = net.forward_batch(set.coords.slice(s![..n.min(256), ..]));
        if probe.iter().any(|v| !v.is_finite()) {
            return Err(InrError::NonFiniteOutput { epoch });
        }
        log::debug!("inr epoch {epoch}: loss {:.4e}", sum / n as f64);
    }
    report.iterations = adam.steps();
    if let Some(ceiling) = cfg.loss_ceiling {
        let loss = report.final_loss();
        if !(loss <= ceiling) {
            return Err(InrError::NotConverged { loss, ceiling });
        }
    }
    Ok((
        InrModel {
            net,
            coord_norm: set.coord_norm,
            intensity: set.intensity.clone(),
        },
        report,
    ))
}

impl InrModel {
    pub fn channels(&self) -> usize {
        self.intensity.len()
    }

    /// Denormalised per-channel intensities at world points.
    pub fn query(&self, points: &[[f64; 3]]) -> Array2<f64> {
        let mut x = Array2::<f32>::zeros((points.len(), 3));
        for (r, p) in points.iter().enumerate() {
            let c = self.coord_norm.apply(*p);
            for a in 0..3 {
                x[[r, a]] = c[a] as f32;
            }
        }
        let y = self.net.forward_batch(x.view());
        let mut out = Array2::<f64>::zeros(y.raw_dim());
        for ((r, k), v) in y.indexed_iter() {
            out[[r, k]] = self.intensity[k].denormalize(*v as f64);
        }
        out
    }

    /// Evaluates the representation on every voxel centre of `grid`.
    pub fn sample_volume(&self, grid: Grid, policy: ChannelPolicy) -> Result<Volume, InrError> {
        if let ChannelPolicy::Single(k) = policy {
            if k >= self.channels() {
                return Err(InrError::Config(format!(
                    "channel {k} out of range for {} channels",
                    self.channels()
                )));
            }
        }
        const CHUNK: usize = 16384;
        let mut data = Vec::with_capacity(grid.len());
        let mut points = Vec::with_capacity(CHUNK);
        let mut start = 0;
        while start < grid.len() {
            let end = (start + CHUNK).min(grid.len());
            points.clear();
            points.extend((start..end).map(|i| grid.index_to_world_unchecked(grid.unravel(i))));
            let y = self.query(&points);
            for row in y.rows() {
                let v = match policy {
                    ChannelPolicy::Single(k) => row[k],
                    ChannelPolicy::Mean => row.mean().unwrap(),
                };
                data.push(v as f32);
            }
            start = end;
        }
        Ok(Volume::new(grid, data)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let arch = self.net.architecture();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [arch.layers, arch.input, arch.hidden, arch.output] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&arch.omega0.to_le_bytes());
        out.extend_from_slice(&arch.s0.to_le_bytes());
        for v in self.coord_norm.lo.iter().chain(&self.coord_norm.hi) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for n in &self.intensity {
            out.extend_from_slice(&n.min.to_le_bytes());
            out.extend_from_slice(&n.max.to_le_bytes());
        }
        for p in self.net.flat_params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, InrError> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(InrError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(InrError::Checkpoint(format!("unsupported version {version}")));
        }
        let layers = r.u32()? as usize;
        let input = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        let output = r.u32()? as usize;
        let arch = Architecture {
            layers,
            input,
            hidden,
            output,
            omega0: r.f64()?,
            s0: r.f64()?,
        };
        arch.validate()
            .map_err(|e| InrError::Checkpoint(e.to_string()))?;
        if input != 3 || hidden > 1 << 16 || output > 255 || layers > 64 {
            return Err(InrError::Checkpoint(format!("implausible architecture {arch:?}")));
        }
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for v in lo.iter_mut().chain(hi.iter_mut()) {
            *v = r.f64()?;
        }
        let intensity = (0..output)
            .map(|_| {
                Ok(IntensityNorm {
                    min: r.f64()?,
                    max: r.f64()?,
                })
            })
            .collect::<Result<Vec<_>, InrError>>()?;
        let mut net = Mlp::<f32>::init(&arch, 0)?;
        let params = (0..net.param_count())
            .map(|_| r.f32())
            .collect::<Result<Vec<_>, _>>()?;
        if r.pos != bytes.len() {
            return Err(InrError::Checkpoint("trailing bytes".into()));
        }
        net.set_flat_params(&params);
        Ok(Self {
            net,
            coord_norm: CoordNorm { lo, hi },
            intensity,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), InrError> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, InrError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

/// Checkpoint magic; header is followed by an f32 parameter payload.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GINR";
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl ByteReader<'_> {
    pub fn take(&mut self, n: usize) -> Result<&[u8], InrError> {
        if self.pos + n > self.bytes.len() {
            return Err(InrError::Checkpoint("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub fn u32(&mut self) -> Result<u32, InrError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn f32(&mut self) -> Result<f32, InrError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64, InrError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::relative_error;
    use rand::Rng;

    fn arch(hidden: usize, layers: usize) -> Architecture {
        Architecture {
            layers,
            input: 3,
            hidden,
            output: 3,
            omega0: 20.0,
            s0: 10.0,
        }
    }

    #[test]
    fn gabor_values() {
        assert_eq!(gabor_activation(0.0f64, 7.0, 3.0), 1.0);
        assert_eq!(gabor_activation(0.0f64, -2.0, 0.0), 1.0);
        assert!((gabor_activation(1.0f64, std::f64::consts::PI, 0.0) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn gabor_is_bounded_by_its_envelope() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let z: f64 = rng.random_range(-3.0..3.0);
            let (w, s) = (rng.random_range(0.0..40.0), rng.random_range(0.0..20.0));
            assert!(gabor_activation(z, w, s).abs() <= (-(s * z).powi(2)).exp() + 1e-15);
        }
    }

    #[test]
    fn gabor_derivative_matches_finite_difference() {
        for z in [-0.3f64, -0.05, 0.0, 0.02, 0.11, 0.4] {
            let h = 1e-7;
            let fd = (gabor_activation(z + h, 20.0, 10.0) - gabor_activation(z - h, 20.0, 10.0))
                / (2.0 * h);
            assert!((fd - gabor_grad(z, 20.0, 10.0)).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_head_gives_zero_output() {
        let mut m = Mlp::<f64>::init(&arch(16, 5), 3).unwrap();
        let head = m.layers.last_mut().unwrap();
        head.weight.fill(0.0);
        head.bias.fill(0.0);
        for c in [[0.3, -0.2, 0.9], [-1.0, -1.0, -1.0], [0.0; 3]] {
            assert_eq!(m.forward(c), vec![0.0; 3]);
        }
    }

    #[test]
    fn forward_is_deterministic_and_batch_consistent() {
        let m = Mlp::<f32>::init(&arch(32, 5), 8).unwrap();
        let c = [0.25f32, -0.5, 0.125];
        let a = m.forward(c);
        let b = m.forward(c);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<f32> = (0..4096 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Array2::from_shape_vec((4096, 3), pts).unwrap();
        let batch = m.forward_batch(x.view());
        for (r, row) in x.rows().into_iter().enumerate() {
            let single = m.forward([row[0], row[1], row[2]]);
            for k in 0..3 {
                let (p, q) = (batch[[r, k]], single[k]);
                assert!((p - q).abs() <= 1e-5 * (1.0 + q.abs()), "row {r}: {p} vs {q}");
            }
        }
    }

    #[test]
    fn exact_targets_give_zero_loss_and_gradient() {
        let m = Mlp::<f64>::init(&arch(8, 3), 4).unwrap();
        let x = Array2::from_shape_vec((3, 3), vec![0.1, 0.2, 0.3, -0.5, 0.0, 0.7, 0.9, -0.9, 0.1])
            .unwrap();
        let y = m.forward_batch(x.view());
        let channel = [0u8, 2, 1];
        let target: Vec<f64> = (0..3).map(|i| y[[i, channel[i] as usize]]).collect();
        let (loss, grad) = m.loss_and_gradient(x.view(), &channel, &target);
        assert_eq!(loss, 0.0);
        assert_eq!(grad.max_abs(), 0.0);
    }

    #[test]
    fn one_hidden_unit_gradient_matches_hand_derivation() {
        let (w, s) = (3.0f64, 2.0f64);
        let mut m = Mlp::<f64>::init(
            &Architecture {
                layers: 2,
                input: 3,
                hidden: 1,
                output: 1,
                omega0: w,
                s0: s,
            },
            0,
        )
        .unwrap();
        let w1 = [0.2, -0.1, 0.4];
        let b1 = 0.05;
        let (w2, b2) = (1.5, -0.3);
        m.layers[0].weight = Array2::from_shape_vec((1, 3), w1.to_vec()).unwrap();
        m.layers[0].bias = Array1::from_vec(vec![b1]);
        m.layers[1].weight = Array2::from_shape_vec((1, 1), vec![w2]).unwrap();
        m.layers[1].bias = Array1::from_vec(vec![b2]);
        let c = [0.5, 0.25, -0.75];
        let d = 0.8;

        // y = w2·g(z) + b2, z = w1·c + b1, L = (y − d)²
        let z = w1[0] * c[0] + w1[1] * c[1] + w1[2] * c[2] + b1;
        let g = (w * z).cos() * (-(s * s * z * z)).exp();
        let dg = -w * (w * z).sin() * (-(s * s * z * z)).exp()
            + (w * z).cos() * (-2.0 * s * s * z) * (-(s * s * z * z)).exp();
        let r = w2 * g + b2 - d;
        let expected = [
            2.0 * r * w2 * dg * c[0],
            2.0 * r * w2 * dg * c[1],
            2.0 * r * w2 * dg * c[2],
            2.0 * r * w2 * dg,
            2.0 * r * g,
            2.0 * r,
        ];
        let x = Array2::from_shape_vec((1, 3), c.to_vec()).unwrap();
        let (loss, grad) = m.loss_and_gradient(x.view(), &[0], &[d]);
        assert!((loss - r * r).abs() < 1e-15);
        for (a, b) in grad.flat().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    /// Fraction of gradient components within `tol` relative error of
    /// central finite differences.
    pub(crate) fn finite_difference_agreement(seed: u64, hidden: usize, eps: f64, tol: f64) -> f64 {
        let mut m = Mlp::<f64>::init(&arch(hidden, 5), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
        let n = 6;
        let x = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
        let channel: Vec<u8> = (0..n).map(|i| (i % 3) as u8).collect();
        let target: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let (_, grad) = m.loss_and_gradient(x.view(), &channel, &target);
        let analytic = grad.flat();
        let base = m.flat_params();
        let mut ok = 0;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] = base[i] + eps;
            m.set_flat_params(&p);
            let up = m.loss_and_gradient(x.view(), &channel, &target).0;
            p[i] = base[i] - eps;
            m.set_flat_params(&p);
            let down = m.loss_and_gradient(x.view(), &channel, &target).0;
            let fd = (up - down) / (2.0 * eps);
            if relative_error(analytic[i], fd) <= tol {
                ok += 1;
            }
        }
        m.set_flat_params(&base);
        ok as f64 / base.len() as f64
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let frac = finite_difference_agreement(seed, 8, 1e-4, 1e-3);
            assert!(frac >= 0.99, "seed {seed}: {frac}");
        }
    }

    fn constant_scans(value: f32) -> Vec<Volume> {
        let g = Grid::new([16, 16, 16], [0.5; 3], [0.0; 3]).unwrap();
        let gt = Volume::filled(g, value);
        crate::phantom::simulate_anisotropic_scans(
            &gt,
            &[
                crate::phantom::ScanSpec::new(crate::phantom::Plane::Axial, 2.0),
                crate::phantom::ScanSpec::new(crate::phantom::Plane::Sagittal, 2.0),
                crate::phantom::ScanSpec::new(crate::phantom::Plane::Coronal, 2.0),
            ],
        )
        .unwrap()
        .to_vec()
    }

    fn quick_cfg() -> InrTrainConfig {
        InrTrainConfig {
            hidden: 16,
            epochs: 400,
            batch: 64,
            lr0: 2e-3,
            loss_ceiling: Some(1e-4),
            ..Default::default()
        }
    }

    #[test]
    fn constant_scans_are_reproduced() {
        let scans = constant_scans(0.7);
        let (model, report) = train(&scans, &quick_cfg()).unwrap();
        assert!(report.epoch_loss.iter().all(|l| l.is_finite()));
        let grid = Grid::new([15, 15, 15], [0.5; 3], [0.0; 3]).unwrap();
        for policy in [ChannelPolicy::Single(0), ChannelPolicy::Mean] {
            let v = model.sample_volume(grid, policy).unwrap();
            let err = v.data().iter().map(|&x| (x - 0.7).abs()).fold(0.0, f32::max);
            assert!(err < 1e-3, "{policy:?}: {err} loss {}", report.final_loss());
        }
    }

    #[test]
    fn training_is_deterministic() {
        let scans = constant_scans(0.2);
        let cfg = InrTrainConfig {
            epochs: 3,
            loss_ceiling: None,
            ..quick_cfg()
        };
        let (a, ra) = train(&scans, &cfg).unwrap();
        let (b, rb) = train(&scans, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn ceiling_violation_is_reported() {
        let scans = constant_scans(0.2);
        let cfg = InrTrainConfig {
            epochs: 1,
            loss_ceiling: Some(0.0),
            ..quick_cfg()
        };
        assert!(matches!(train(&scans, &cfg), Err(InrError::NotConverged { .. })));
    }

    #[test]
    fn mismatched_frames_are_rejected() {
        let mut scans = constant_scans(0.2);
        let g = scans[1].grid();
        let shifted = Grid::new(g.dims(), g.spacing(), [40.0, 0.0, 0.0]).unwrap();
        scans[1] = Volume::filled(shifted, 0.2);
        assert!(matches!(
            TrainSet::from_scans(&scans),
            Err(InrError::FrameMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn train_set_is_normalised() {
        let (gt, _) = crate::phantom::generate_phantom(
            &crate::phantom::TrochleaPhantomSpec {
                condyle_half_width: 5.0,
                groove_depth: 2.0,
                condyle_height: 6.0,
                bone_extent: [12.0, 8.0, 8.0],
                patella_radius: 2.0,
                patella_gap: 3.0,
                ..Default::default()
            },
            [16, 16, 16],
            [1.0; 3],
        )
        .unwrap();
        let scans = crate::phantom::simulate_anisotropic_scans(
            &gt,
            &[
                crate::phantom::ScanSpec::new(crate::phantom::Plane::Axial, 4.0),
                crate::phantom::ScanSpec::new(crate::phantom::Plane::Sagittal, 4.0)
                    .with_intensity(2.0, 1.0),
                crate::phantom::ScanSpec::new(crate::phantom::Plane::Coronal, 2.0),
            ],
        )
        .unwrap();
        let set = TrainSet::from_scans(&scans).unwrap();
        assert_eq!(set.len(), 2 * 16 * 16 * 4 + 16 * 16 * 8);
        assert!(set.coords.iter().all(|c| (-1.0..=1.0).contains(c)));
        assert!(set.target.iter().all(|t| (0.0..=1.0).contains(t)));
        assert!(set.coords.iter().any(|&c| c == -1.0) && set.coords.iter().any(|&c| c == 1.0));
    }

    #[test]
    fn sample_volume_uses_x_fastest_order() {
        let net = Mlp::<f32>::init(&arch(8, 3), 5).unwrap();
        let model = InrModel {
            net,
            coord_norm: CoordNorm {
                lo: [0.0; 3],
                hi: [1.0; 3],
            },
            intensity: vec![IntensityNorm { min: 0.0, max: 1.0 }; 3],
        };
        let grid = Grid::new([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        let v = model.sample_volume(grid, ChannelPolicy::Single(1)).unwrap();
        assert_eq!(v.data().len(), 8);
        for idx in 0..8 {
            let p = grid.index_to_world_unchecked(grid.unravel(idx));
            let direct = model.net.forward([0, 1, 2].map(|a| (2.0 * p[a] - 1.0) as f32))[1];
            assert!((v.data()[idx] - direct).abs() < 1e-6);
        }
        assert!(model.sample_volume(grid, ChannelPolicy::Single(3)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = Mlp::<f32>::init(&arch(8, 4), 5).unwrap();
        let model = InrModel {
            net,
            coord_norm: CoordNorm {
                lo: [-1.0, 2.0, 3.0],
                hi: [4.0, 5.0, 6.0],
            },
            intensity: vec![
                IntensityNorm { min: 0.0, max: 1.0 },
                IntensityNorm { min: -1.0, max: 2.0 },
                IntensityNorm { min: 0.5, max: 0.75 },
            ],
        };
        let bytes = model.to_bytes();
        assert_eq!(&bytes[..4], b"GINR");
        assert_eq!(InrModel::from_bytes(&bytes).unwrap(), model);
        assert!(InrModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(InrModel::from_bytes(&bad).is_err());
    }

    #[test]
    fn channel_policy_parsing() {
        assert_eq!("mean".parse::<ChannelPolicy>().unwrap(), ChannelPolicy::Mean);
        assert_eq!("axial".parse::<ChannelPolicy>().unwrap(), ChannelPolicy::Single(0));
        assert_eq!("single:2".parse::<ChannelPolicy>().unwrap(), ChannelPolicy::Single(2));
        assert!("median".parse::<ChannelPolicy>().is_err());
    }
}
