//! Two-level 3D convolutional encoder-decoder predicting clean wavelet
//! coefficients from noisy ones plus the condition.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{silu, silu_grad, uniform_vec, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    /// Length of the sinusoidal time embedding (even).
    pub time_dim: usize,
}

impl DenoiserConfig {
    /// Noisy coefficients of `labels` channels plus the condition's.
    pub fn for_labels(labels: usize, width: usize) -> Self {
        let planes = labels * crate::wavelet::SUBBANDS;
        Self {
            in_channels: 2 * planes,
            out_channels: planes,
            width,
            time_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.in_channels == 0 || self.out_channels == 0 || self.width == 0 {
            return Err("denoiser channel counts must be positive".into());
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(format!("time_dim must be an even number >= 2, got {}", self.time_dim));
        }
        Ok(())
    }
}

/// 3×3×3 convolution with zero padding, as a GEMM over unfolded patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3<T> {
    /// `out × (in·27)`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

const TAPS: usize = 27;

fn tap_offset(k: usize) -> [isize; 3] {
    [(k % 3) as isize - 1, ((k / 3) % 3) as isize - 1, (k / 9) as isize - 1]
}

/// Contiguous x-runs `(dst_start, src_start, len)` shared by every channel
/// for tap `k`.
fn tap_runs(k: usize, dims: [usize; 3]) -> Vec<(usize, usize, usize)> {
    let [nx, ny, nz] = dims;
    let [dx, dy, dz] = tap_offset(k);
    let x0 = (-dx).max(0) as usize;
    let x1 = (nx as isize - dx.max(0)).max(0) as usize;
    if x1 <= x0 {
        return Vec::new();
    }
    let mut runs = Vec::new();
    for z in 0..nz {
        let sz = z as isize + dz;
        if sz < 0 || sz >= nz as isize {
            continue;
        }
        for y in 0..ny {
            let sy = y as isize + dy;
            if sy < 0 || sy >= ny as isize {
                continue;
            }
            let row = (z * ny + y) * nx;
            let srow = (sz as usize * ny + sy as usize) * nx;
            runs.push((row + x0, (srow as isize + x0 as isize + dx) as usize, x1 - x0));
        }
    }
    runs
}

/// Unfolds `x` (`c × n`) into `(c·27) × n` neighbourhood columns.
fn im2col<T: Scalar>(x: ArrayView2<T>, dims: [usize; 3]) -> Array2<T> {
    let x = x.as_standard_layout();
    let (c, n) = x.dim();
    let mut col = Array2::<T>::zeros((c * TAPS, n));
    let src_all = x.as_slice().unwrap();
    let dst_all = col.as_slice_mut().unwrap();
    for k in 0..TAPS {
        let runs = tap_runs(k, dims);
        for ch in 0..c {
            let src = &src_all[ch * n..(ch + 1) * n];
            let dst = &mut dst_all[(ch * TAPS + k) * n..(ch * TAPS + k + 1) * n];
            for &(d, s, len) in &runs {
                dst[d..d + len].copy_from_slice(&src[s..s + len]);
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
fn col2im<T: Scalar>(col: ArrayView2<T>, channels: usize, dims: [usize; 3]) -> Array2<T> {
    let n = dims[0] * dims[1] * dims[2];
    let col = col.as_standard_layout();
    let src_all = col.as_slice().unwrap();
    let mut x = Array2::<T>::zeros((channels, n));
    let dst_all = x.as_slice_mut().unwrap();
    for k in 0..TAPS {
        let runs = tap_runs(k, dims);
        for ch in 0..channels {
            let src = &src_all[(ch * TAPS + k) * n..(ch * TAPS + k + 1) * n];
            let dst = &mut dst_all[ch * n..(ch + 1) * n];
            for &(d, s, len) in &runs {
                for (o, &v) in dst[s..s + len].iter_mut().zip(&src[d..d + len]) {
                    *o += v;
                }
            }
        }
    }
    x
}

impl<T: Scalar> Conv3<T> {
    fn init(rng: &mut ChaCha8Rng, cin: usize, cout: usize, zero: bool) -> Self {
        let fan_in = cin * TAPS;
        let bound = if zero { 0.0 } else { (6.0 / fan_in as f64).sqrt() };
        Self {
            weight: Array2::from_shape_vec((cout, fan_in), uniform_vec(rng, cout * fan_in, bound)).unwrap(),
            bias: Array1::zeros(cout),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    fn forward(&self, x: ArrayView2<T>, dims: [usize; 3]) -> (Array2<T>, Array2<T>) {
        let col = im2col(x, dims);
        let mut y = self.weight.dot(&col);
        for (mut row, &b) in y.rows_mut().into_iter().zip(&self.bias) {
            row.mapv_inplace(|v| v + b);
        }
        (y, col)
    }

    /// Accumulates parameter gradients into `grad`; returns the input gradient.
    fn backward(&self, dy: ArrayView2<T>, col: &Array2<T>, dims: [usize; 3], grad: &mut Conv3<T>) -> Array2<T> {
        grad.weight += &dy.dot(&col.t());
        grad.bias += &dy.sum_axis(Axis(1));
        let dcol = self.weight.t().dot(&dy);
        col2im(dcol.view(), self.weight.ncols() / TAPS, dims)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    fn init(rng: &mut ChaCha8Rng, nin: usize, nout: usize) -> Self {
        Self::init_scaled(rng, nin, nout, (1.0 / nin as f64).sqrt())
    }

    fn init_scaled(rng: &mut ChaCha8Rng, nin: usize, nout: usize, bound: f64) -> Self {
        Self {
            weight: Array2::from_shape_vec((nout, nin), uniform_vec(rng, nout * nin, bound)).unwrap(),
            bias: Array1::zeros(nout),
        }
    }

    /// Applies the layer to every column (a 1×1×1 convolution).
    fn pointwise(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = self.weight.dot(&x);
        add_channel_bias(&mut y, &self.bias);
        y
    }

    fn pointwise_backward(&self, dy: ArrayView2<T>, x: ArrayView2<T>, grad: &mut Linear<T>, want_dx: bool) -> Option<Array2<T>> {
        grad.weight += &dy.dot(&x.t());
        grad.bias += &dy.sum_axis(Axis(1));
        want_dx.then(|| self.weight.t().dot(&dy))
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }
}

/// Encoder-decoder parameters; the same type holds gradients.
///
/// Full resolution: pointwise stem, one residual 3³ block. Half resolution:
/// 3³ widening conv and a residual 3³ block. The coarse features are
/// projected back to `width`, upsampled, added to the skip, passed through a
/// 3³ conv, and a zero-initialised pointwise head.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser<T> {
    pub config: DenoiserConfig,
    pub time1: Linear<T>,
    pub time2: Linear<T>,
    pub stem: Linear<T>,
    pub enc_res: Conv3<T>,
    pub mid_in: Conv3<T>,
    pub mid_res: Conv3<T>,
    pub up: Linear<T>,
    pub dec: Conv3<T>,
    pub head: Linear<T>,
}

/// Sinusoidal embedding of the diffusion step.
pub fn time_embedding<T: Scalar>(t: usize, dim: usize) -> Array1<T> {
    let half = dim / 2;
    let mut e = Array1::<T>::zeros(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        e[i] = T::of(a.sin());
        e[half + i] = T::of(a.cos());
    }
    e
}

fn add_channel_bias<T: Scalar>(x: &mut Array2<T>, b: &Array1<T>) {
    for (mut row, &v) in x.rows_mut().into_iter().zip(b) {
        row.mapv_inplace(|u| u + v);
    }
}

fn pool2<T: Scalar>(x: &Array2<T>, dims: [usize; 3]) -> Array2<T> {
    let [nx, ny, nz] = dims;
    let h = [nx / 2, ny / 2, nz / 2];
    let mut out = Array2::<T>::zeros((x.nrows(), h[0] * h[1] * h[2]));
    let eighth = T::of(0.125);
    for (src, mut dst) in x.rows().into_iter().zip(out.rows_mut()) {
        for z in 0..nz {
            for y in 0..ny {
                for xx in 0..nx {
                    let d = &mut dst[(z / 2 * h[1] + y / 2) * h[0] + xx / 2];
                    *d += src[(z * ny + y) * nx + xx] * eighth;
                }
            }
        }
    }
    out
}

/// Nearest-neighbour upsampling; its adjoint is `8·pool2`.
fn upsample2<T: Scalar>(x: &Array2<T>, dims: [usize; 3]) -> Array2<T> {
    let [nx, ny, nz] = dims;
    let h = [nx / 2, ny / 2, nz / 2];
    let mut out = Array2::<T>::zeros((x.nrows(), nx * ny * nz));
    for (src, mut dst) in x.rows().into_iter().zip(out.rows_mut()) {
        for z in 0..nz {
            for y in 0..ny {
                for xx in 0..nx {
                    dst[(z * ny + y) * nx + xx] = src[(z / 2 * h[1] + y / 2) * h[0] + xx / 2];
                }
            }
        }
    }
    out
}

struct Cache<T> {
    emb: Array1<T>,
    pre_stem: Array2<T>,
    col_res: Array2<T>,
    pre_res: Array2<T>,
    col_mid: Array2<T>,
    pre_mid: Array2<T>,
    col_mres: Array2<T>,
    pre_mres: Array2<T>,
    h2: Array2<T>,
    col_dec: Array2<T>,
    pre_dec: Array2<T>,
    a3: Array2<T>,
}

impl<T: Scalar> Denoiser<T> {
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self, String> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.width;
        let he = |n: usize| (6.0 / n as f64).sqrt();
        Ok(Self {
            config,
            time1: Linear::init(&mut rng, config.time_dim, w),
            time2: Linear::init(&mut rng, config.time_dim, 2 * w),
            stem: Linear::init_scaled(&mut rng, config.in_channels, w, he(config.in_channels)),
            enc_res: Conv3::init(&mut rng, w, w, false),
            mid_in: Conv3::init(&mut rng, w, 2 * w, false),
            mid_res: Conv3::init(&mut rng, 2 * w, 2 * w, false),
            up: Linear::init_scaled(&mut rng, 2 * w, w, he(2 * w)),
            dec: Conv3::init(&mut rng, w, w, false),
            head: Linear::init_scaled(&mut rng, w, config.out_channels, 0.0),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            time1: self.time1.zeros_like(),
            time2: self.time2.zeros_like(),
            stem: self.stem.zeros_like(),
            enc_res: self.enc_res.zeros_like(),
            mid_in: self.mid_in.zeros_like(),
            mid_res: self.mid_res.zeros_like(),
            up: self.up.zeros_like(),
            dec: self.dec.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    fn layers(&self) -> [(&Array2<T>, &Array1<T>); 9] {
        [
            (&self.time1.weight, &self.time1.bias),
            (&self.time2.weight, &self.time2.bias),
            (&self.stem.weight, &self.stem.bias),
            (&self.enc_res.weight, &self.enc_res.bias),
            (&self.mid_in.weight, &self.mid_in.bias),
            (&self.mid_res.weight, &self.mid_res.bias),
            (&self.up.weight, &self.up.bias),
            (&self.dec.weight, &self.dec.bias),
            (&self.head.weight, &self.head.bias),
        ]
    }

    /// Parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers()
            .into_iter()
            .flat_map(|(w, b)| [w.as_slice().unwrap(), b.as_slice().unwrap()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let layers: [(&mut Array2<T>, &mut Array1<T>); 9] = [
            (&mut self.time1.weight, &mut self.time1.bias),
            (&mut self.time2.weight, &mut self.time2.bias),
            (&mut self.stem.weight, &mut self.stem.bias),
            (&mut self.enc_res.weight, &mut self.enc_res.bias),
            (&mut self.mid_in.weight, &mut self.mid_in.bias),
            (&mut self.mid_res.weight, &mut self.mid_res.bias),
            (&mut self.up.weight, &mut self.up.bias),
            (&mut self.dec.weight, &mut self.dec.bias),
            (&mut self.head.weight, &mut self.head.bias),
        ];
        layers
            .into_iter()
            .flat_map(|(w, b)| [w.as_slice_mut().unwrap(), b.as_slice_mut().unwrap()])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Denoiser<U> {
        let c = |a: &Array2<T>| a.mapv(|v| U::of(v.to_f64().unwrap()));
        let b = |a: &Array1<T>| a.mapv(|v| U::of(v.to_f64().unwrap()));
        let conv = |l: &Conv3<T>| Conv3 {
            weight: c(&l.weight),
            bias: b(&l.bias),
        };
        let lin = |l: &Linear<T>| Linear {
            weight: c(&l.weight),
            bias: b(&l.bias),
        };
        Denoiser {
            config: self.config,
            time1: lin(&self.time1),
            time2: lin(&self.time2),
            stem: lin(&self.stem),
            enc_res: conv(&self.enc_res),
            mid_in: conv(&self.mid_in),
            mid_res: conv(&self.mid_res),
            up: lin(&self.up),
            dec: conv(&self.dec),
            head: lin(&self.head),
        }
    }

    fn run(&self, x: ArrayView2<T>, dims: [usize; 3], t: usize) -> (Array2<T>, Cache<T>) {
        assert_eq!(x.nrows(), self.config.in_channels, "input channel count");
        assert!(dims.iter().all(|d| d % 2 == 0), "denoiser grid must have even dims");
        let half = [dims[0] / 2, dims[1] / 2, dims[2] / 2];
        let emb = time_embedding::<T>(t, self.config.time_dim);
        let e1 = self.time1.weight.dot(&emb) + &self.time1.bias;
        let e2 = self.time2.weight.dot(&emb) + &self.time2.bias;

        let mut pre_stem = self.stem.pointwise(x);
        add_channel_bias(&mut pre_stem, &e1);
        let a0 = pre_stem.mapv(silu);
        let (pre_res, col_res) = self.enc_res.forward(a0.view(), dims);
        let h1 = &a0 + &pre_res.mapv(silu);

        let p = pool2(&h1, dims);
        let (mut pre_mid, col_mid) = self.mid_in.forward(p.view(), half);
        add_channel_bias(&mut pre_mid, &e2);
        let a2 = pre_mid.mapv(silu);
        let (pre_mres, col_mres) = self.mid_res.forward(a2.view(), half);
        let h2 = &a2 + &pre_mres.mapv(silu);

        let merged = upsample2(&self.up.pointwise(h2.view()), dims) + &h1;
        let (pre_dec, col_dec) = self.dec.forward(merged.view(), dims);
        let a3 = pre_dec.mapv(silu);
        let y = self.head.pointwise(a3.view());
        let cache = Cache {
            emb,
            pre_stem,
            col_res,
            pre_res,
            col_mid,
            pre_mid,
            col_mres,
            pre_mres,
            h2,
            col_dec,
            pre_dec,
            a3,
        };
        (y, cache)
    }

    /// Predicted clean coefficients, `out_channels × voxels`.
    pub fn forward(&self, x: ArrayView2<T>, dims: [usize; 3], t: usize) -> Array2<T> {
        self.run(x, dims, t).0
    }

    /// Mean squared error against `target` and its parameter gradient.
    pub fn loss_and_gradient(&self, x: ArrayView2<T>, dims: [usize; 3], t: usize, target: ArrayView2<T>) -> (T, Self) {
        let (y, c) = self.run(x, dims, t);
        let half = [dims[0] / 2, dims[1] / 2, dims[2] / 2];
        let n = T::of(y.len() as f64);
        let diff = &y - &target;
        let loss = diff.iter().fold(T::zero(), |a, &d| a + d * d) / n;
        let dy = diff.mapv(|d| T::of(2.0) * d / n);
        let mut g = self.zeros_like();

        let da3 = self.head.pointwise_backward(dy.view(), c.a3.view(), &mut g.head, true).unwrap();
        let dpre_dec = &da3 * &c.pre_dec.mapv(silu_grad);
        let dmerged = self.dec.backward(dpre_dec.view(), &c.col_dec, dims, &mut g.dec);

        // upsample adjoint: sum over each 2³ block
        let dq = pool2(&dmerged, dims).mapv(|v| v * T::of(8.0));
        let dh2 = self.up.pointwise_backward(dq.view(), c.h2.view(), &mut g.up, true).unwrap();
        let dpre_mres = &dh2 * &c.pre_mres.mapv(silu_grad);
        let mut da2 = self.mid_res.backward(dpre_mres.view(), &c.col_mres, half, &mut g.mid_res);
        da2 += &dh2;
        let dpre_mid = &da2 * &c.pre_mid.mapv(silu_grad);
        let de2 = dpre_mid.sum_axis(Axis(1));
        let dp = self.mid_in.backward(dpre_mid.view(), &c.col_mid, half, &mut g.mid_in);
        // pool adjoint: spread each value over its block, scaled by 1/8
        let dh1 = dmerged + &upsample2(&dp, dims).mapv(|v| v * T::of(0.125));

        let dpre_res = &dh1 * &c.pre_res.mapv(silu_grad);
        let mut da0 = self.enc_res.backward(dpre_res.view(), &c.col_res, dims, &mut g.enc_res);
        da0 += &dh1;
        let dpre_stem = &da0 * &c.pre_stem.mapv(silu_grad);
        let de1 = dpre_stem.sum_axis(Axis(1));
        self.stem.pointwise_backward(dpre_stem.view(), x, &mut g.stem, false);

        let outer = |d: &Array1<T>| Array2::from_shape_fn((d.len(), c.emb.len()), |(i, j)| d[i] * c.emb[j]);
        g.time1.weight = outer(&de1);
        g.time1.bias = de1;
        g.time2.weight = outer(&de2);
        g.time2.bias = de2;
        (loss, g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::relative_error;
    use rand::Rng;

    fn toy() -> (Denoiser<f64>, Array2<f64>, Array2<f64>, [usize; 3]) {
        let cfg = DenoiserConfig {
            in_channels: 3,
            out_channels: 2,
            width: 4,
            time_dim: 4,
        };
        let mut d = Denoiser::<f64>::init(cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // A zero head would leave every other gradient at zero.
        d.head.weight.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        d.head.bias.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        for b in [&mut d.stem.bias, &mut d.enc_res.bias, &mut d.mid_in.bias, &mut d.mid_res.bias, &mut d.up.bias, &mut d.dec.bias] {
            b.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        }
        d.time1.bias.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        d.time2.bias.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        let dims = [4, 2, 4];
        let x = Array2::from_shape_fn((3, 32), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((2, 32), |_| rng.random_range(-1.0..1.0));
        (d, x, y, dims)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (mut d, x, y, dims) = toy();
        let t = 7;
        let (_, g) = d.loss_and_gradient(x.view(), dims, t, y.view());
        let analytic: Vec<f64> = g.tensors().concat();
        let eps = 1e-5;
        let mut ok = 0;
        let total = analytic.len();
        for i in 0..total {
            let mut flat: Vec<f64> = d.tensors().concat();
            let base = flat[i];
            let mut eval = |v: f64, d: &mut Denoiser<f64>| {
                flat[i] = v;
                let mut off = 0;
                for tns in d.tensors_mut() {
                    let n = tns.len();
                    tns.copy_from_slice(&flat[off..off + n]);
                    off += n;
                }
                d.loss_and_gradient(x.view(), dims, t, y.view()).0
            };
            let up = eval(base + eps, &mut d);
            let down = eval(base - eps, &mut d);
            eval(base, &mut d);
            let fd = (up - down) / (2.0 * eps);
            if relative_error(analytic[i], fd) <= 1e-3 {
                ok += 1;
            }
        }
        assert!(ok as f64 >= 0.99 * total as f64, "{ok}/{total}");
    }

    #[test]
    fn zero_head_predicts_zero_and_output_shape() {
        let cfg = DenoiserConfig::for_labels(5, 4);
        let d = Denoiser::<f32>::init(cfg, 0).unwrap();
        let x = Array2::<f32>::ones((80, 64));
        let y = d.forward(x.view(), [4, 4, 4], 3);
        assert_eq!(y.dim(), (40, 64));
        assert!(y.iter().all(|v| *v == 0.0));
        let target = Array2::<f32>::from_elem((40, 64), 0.5);
        let (loss, _) = d.loss_and_gradient(x.view(), [4, 4, 4], 3, target.view());
        assert!((loss - 0.25).abs() < 1e-7);
    }

    #[test]
    fn forward_is_deterministic() {
        let (d, x, _, dims) = toy();
        let a = d.forward(x.view(), dims, 3);
        let b = d.forward(x.view(), dims, 3);
        assert_eq!(a, b);
        assert_ne!(a, d.forward(x.view(), dims, 4));
    }

    #[test]
    fn im2col_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dims = [3, 4, 2];
        let x = Array2::from_shape_fn((2, 24), |_| rng.random_range(-1.0f64..1.0));
        let c = Array2::from_shape_fn((2 * TAPS, 24), |_| rng.random_range(-1.0f64..1.0));
        let lhs = (&im2col(x.view(), dims) * &c).sum();
        let rhs = (&x * &col2im(c.view(), 2, dims)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let conv = Conv3::<f64>::init(&mut rng, 2, 3, false);
        let dims = [3, 3, 2];
        let x = Array2::from_shape_fn((2, 18), |_| rng.random_range(-1.0..1.0));
        let (y, _) = conv.forward(x.view(), dims);
        for o in 0..3 {
            for z in 0..2isize {
                for yy in 0..3isize {
                    for xx in 0..3isize {
                        let mut acc = conv.bias[o];
                        for ci in 0..2 {
                            for k in 0..TAPS {
                                let [dx, dy, dz] = tap_offset(k);
                                let (a, b, c) = (xx + dx, yy + dy, z + dz);
                                if (0..3).contains(&a) && (0..3).contains(&b) && (0..2).contains(&c) {
                                    acc += conv.weight[[o, ci * TAPS + k]] * x[[ci, (c * 9 + b * 3 + a) as usize]];
                                }
                            }
                        }
                        assert!((acc - y[[o, (z * 9 + yy * 3 + xx) as usize]]).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
