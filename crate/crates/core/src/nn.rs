//! Minimal differentiable building blocks shared by the INR and the denoiser:
//! a scalar abstraction (f32 for training, f64 for gradient checks), Adam with
//! bias correction, and a cosine-annealed learning rate.

use std::fmt::Debug;

use ndarray::LinalgScalar;
use std::ops::AddAssign;
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

pub trait Scalar:
    LinalgScalar + Float + FromPrimitive + ToPrimitive + AddAssign + Debug + Send + Sync + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state over a fixed list of parameter tensors (flattened).
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            cfg,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update with learning rate `lr`.
    pub fn step<T: Scalar>(&mut self, params: &mut [&mut [T]], grads: &[&[T]], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter list changed");
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                let gi = g[i].to_f64().unwrap();
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let upd = lr * mhat / (vhat.sqrt() + eps);
                p[i] = p[i] - T::of(upd);
            }
        }
    }
}

/// Cosine annealing from `lr0` down to `lr_min` over `total` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub lr0: f64,
    pub lr_min: f64,
    pub total: u64,
}

impl CosineSchedule {
    pub fn new(lr0: f64, total: u64) -> Self {
        Self {
            lr0,
            lr_min: 0.0,
            total,
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        if self.total == 0 {
            return self.lr0;
        }
        let frac = (step.min(self.total) as f64) / self.total as f64;
        self.lr_min + 0.5 * (self.lr0 - self.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

pub(crate) fn uniform_vec<T: Scalar>(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<T> {
    (0..n)
        .map(|_| {
            if bound > 0.0 {
                T::of(rng.random_range(-bound..bound))
            } else {
                T::zero()
            }
        })
        .collect()
}

/// Sigmoid-weighted linear unit and its derivative.
#[inline]
pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

#[inline]
pub(crate) fn silu_grad<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

/// Relative error used by the finite-difference checks.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
