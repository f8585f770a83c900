//! Level-1 orthonormal 3D Haar transform.
//!
//! A volume with even dims `(nx, ny, nz)` maps to eight subbands of dims
//! `(nx/2, ny/2, nz/2)`. Subband `b` has filter bits `(b >> 2) & 1` along x,
//! `(b >> 1) & 1` along y and `b & 1` along z (0 = low-pass, 1 = high-pass), so
//! the order is LLL, LLH, LHL, LHH, HLL, HLH, HHL, HHH. Each axis pass scales
//! by `1/√2`, which keeps the transform orthonormal.

use thiserror::Error;

use crate::nn::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum WaveletError {
    #[error("axis {axis} has odd length {len}; the Haar transform needs even dims")]
    OddDimension { axis: usize, len: usize },
    #[error("data length {got} does not match {channels} channel(s) of dims {dims:?}")]
    ShapeMismatch {
        channels: usize,
        dims: [usize; 3],
        got: usize,
    },
}

pub const SUBBANDS: usize = 8;
pub const SUBBAND_NAMES: [&str; SUBBANDS] = ["LLL", "LLH", "LHL", "LHH", "HLL", "HLH", "HHL", "HHH"];

/// Channel-major stack of equally sized volumes (x-fastest within a channel).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiVolume<T> {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Scalar> MultiVolume<T> {
    pub fn new(channels: usize, dims: [usize; 3], data: Vec<T>) -> Result<Self, WaveletError> {
        if data.len() != channels * dims[0] * dims[1] * dims[2] {
            return Err(WaveletError::ShapeMismatch {
                channels,
                dims,
                got: data.len(),
            });
        }
        Ok(Self {
            channels,
            dims,
            data,
        })
    }

    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self {
            channels,
            dims,
            data: vec![T::zero(); channels * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }
}

/// The eight level-1 subbands of every input channel.
///
/// Stored as `channels × 8` planes of the half-resolution grid; plane
/// `c * 8 + b` holds subband `b` of input channel `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletCoeffs<T> {
    pub channels: usize,
    pub source_dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Scalar> WaveletCoeffs<T> {
    pub fn from_parts(
        channels: usize,
        source_dims: [usize; 3],
        data: Vec<T>,
    ) -> Result<Self, WaveletError> {
        check_even(source_dims)?;
        let half = half_dims(source_dims);
        let expected = channels * SUBBANDS * half[0] * half[1] * half[2];
        if data.len() != expected {
            return Err(WaveletError::ShapeMismatch {
                channels: channels * SUBBANDS,
                dims: half,
                got: data.len(),
            });
        }
        Ok(Self {
            channels,
            source_dims,
            data,
        })
    }

    pub fn subband_dims(&self) -> [usize; 3] {
        half_dims(self.source_dims)
    }

    pub fn planes(&self) -> usize {
        self.channels * SUBBANDS
    }

    pub fn plane_len(&self) -> usize {
        let h = self.subband_dims();
        h[0] * h[1] * h[2]
    }

    pub fn subband(&self, channel: usize, band: usize) -> &[T] {
        let n = self.plane_len();
        let p = channel * SUBBANDS + band;
        &self.data[p * n..(p + 1) * n]
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64().unwrap().powi(2)).sum()
    }

    /// Coefficients viewed as a multi-channel volume on the half grid.
    pub fn as_multi(&self) -> MultiVolume<T> {
        MultiVolume {
            channels: self.planes(),
            dims: self.subband_dims(),
            data: self.data.clone(),
        }
    }
}

fn half_dims(d: [usize; 3]) -> [usize; 3] {
    [d[0] / 2, d[1] / 2, d[2] / 2]
}

fn check_even(d: [usize; 3]) -> Result<(), WaveletError> {
    for (axis, &len) in d.iter().enumerate() {
        if len == 0 || len % 2 != 0 {
            return Err(WaveletError::OddDimension { axis, len });
        }
    }
    Ok(())
}

#[inline]
fn sign(band_bit: usize, offset: usize) -> bool {
    band_bit == 1 && offset == 1
}

/// Forward transform of every channel.
pub fn dwt3<T: Scalar>(x: &MultiVolume<T>) -> Result<WaveletCoeffs<T>, WaveletError> {
    check_even(x.dims)?;
    let [nx, ny, _] = x.dims;
    let h = half_dims(x.dims);
    let plane = h[0] * h[1] * h[2];
    let scale = T::of(1.0 / (2.0 * std::f64::consts::SQRT_2));
    let mut out = vec![T::zero(); x.channels * SUBBANDS * plane];
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = &mut out[c * SUBBANDS * plane..(c + 1) * SUBBANDS * plane];
        for k in 0..h[2] {
            for j in 0..h[1] {
                for i in 0..h[0] {
                    let mut a = [T::zero(); 8];
                    for (o, v) in a.iter_mut().enumerate() {
                        let (dx, dy, dz) = (o >> 2 & 1, o >> 1 & 1, o & 1);
                        *v = src[(2 * i + dx) + nx * ((2 * j + dy) + ny * (2 * k + dz))];
                    }
                    let q = i + h[0] * (j + h[1] * k);
                    for b in 0..SUBBANDS {
                        let (bx, by, bz) = (b >> 2 & 1, b >> 1 & 1, b & 1);
                        let mut acc = T::zero();
                        for (o, &v) in a.iter().enumerate() {
                            let (dx, dy, dz) = (o >> 2 & 1, o >> 1 & 1, o & 1);
                            let neg = sign(bx, dx) ^ sign(by, dy) ^ sign(bz, dz);
                            acc = if neg { acc - v } else { acc + v };
                        }
                        dst[b * plane + q] = acc * scale;
                    }
                }
            }
        }
    }
    Ok(WaveletCoeffs {
        channels: x.channels,
        source_dims: x.dims,
        data: out,
    })
}

/// Inverse transform; exact inverse of [`dwt3`].
pub fn idwt3<T: Scalar>(c: &WaveletCoeffs<T>) -> Result<MultiVolume<T>, WaveletError> {
    check_even(c.source_dims)?;
    let h = c.subband_dims();
    let plane = h[0] * h[1] * h[2];
    if c.data.len() != c.channels * SUBBANDS * plane {
        return Err(WaveletError::ShapeMismatch {
            channels: c.channels * SUBBANDS,
            dims: h,
            got: c.data.len(),
        });
    }
    let [nx, ny, nz] = c.source_dims;
    let scale = T::of(1.0 / (2.0 * std::f64::consts::SQRT_2));
    let mut out = vec![T::zero(); c.channels * nx * ny * nz];
    for ch in 0..c.channels {
        let src = &c.data[ch * SUBBANDS * plane..(ch + 1) * SUBBANDS * plane];
        let dst = &mut out[ch * nx * ny * nz..(ch + 1) * nx * ny * nz];
        for k in 0..h[2] {
            for j in 0..h[1] {
                for i in 0..h[0] {
                    let q = i + h[0] * (j + h[1] * k);
                    let mut coef = [T::zero(); 8];
                    for (b, v) in coef.iter_mut().enumerate() {
                        *v = src[b * plane + q];
                    }
                    for o in 0..8 {
                        let (dx, dy, dz) = (o >> 2 & 1, o >> 1 & 1, o & 1);
                        let mut acc = T::zero();
                        for (b, &v) in coef.iter().enumerate() {
                            let (bx, by, bz) = (b >> 2 & 1, b >> 1 & 1, b & 1);
                            let neg = sign(bx, dx) ^ sign(by, dy) ^ sign(bz, dz);
                            acc = if neg { acc - v } else { acc + v };
                        }
                        dst[(2 * i + dx) + nx * ((2 * j + dy) + ny * (2 * k + dz))] = acc * scale;
                    }
                }
            }
        }
    }
    MultiVolume::new(c.channels, c.source_dims, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(channels: usize, dims: [usize; 3], seed: u64) -> MultiVolume<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = channels * dims.iter().product::<usize>();
        MultiVolume::new(channels, dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    /// Separable reference: three explicit 1D Haar passes (x, then y, then z).
    fn reference_dwt(x: &MultiVolume<f64>) -> Vec<f64> {
        let [nx, ny, nz] = x.dims;
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let mut out = Vec::new();
        for c in 0..x.channels {
            let mut v = x.channel(c).to_vec();
            // after each pass the axis is laid out as [low half | high half]
            for axis in 0..3 {
                let mut w = v.clone();
                for k in 0..nz {
                    for j in 0..ny {
                        for i in 0..nx {
                            let ijk = [i, j, k];
                            let n = x.dims[axis];
                            if ijk[axis] >= n / 2 {
                                continue;
                            }
                            let at = |p: usize| {
                                let mut q = ijk;
                                q[axis] = p;
                                q[0] + nx * (q[1] + ny * q[2])
                            };
                            let (a0, a1) = (v[at(2 * ijk[axis])], v[at(2 * ijk[axis] + 1)]);
                            w[at(ijk[axis])] = (a0 + a1) * r;
                            w[at(ijk[axis] + n / 2)] = (a0 - a1) * r;
                        }
                    }
                }
                v = w;
            }
            let h = [nx / 2, ny / 2, nz / 2];
            for b in 0..8 {
                let off = [(b >> 2 & 1) * h[0], (b >> 1 & 1) * h[1], (b & 1) * h[2]];
                for k in 0..h[2] {
                    for j in 0..h[1] {
                        for i in 0..h[0] {
                            out.push(v[(off[0] + i) + nx * ((off[1] + j) + ny * (off[2] + k))]);
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn constant_block_maps_to_lll() {
        let x = MultiVolume::new(1, [2, 2, 2], vec![3.0f64; 8]).unwrap();
        let c = dwt3(&x).unwrap();
        assert!((c.data[0] - 3.0 * 2f64.powf(1.5)).abs() < 1e-12);
        assert!(c.data[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_in_zero_out() {
        let x = MultiVolume::<f32>::zeros(2, [4, 2, 6]);
        let c = dwt3(&x).unwrap();
        assert!(c.data.iter().all(|&v| v == 0.0));
        assert!(idwt3(&c).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_lll_inverts_to_scaling_block() {
        let mut data = vec![0.0f64; 8];
        data[0] = 1.0;
        let c = WaveletCoeffs::from_parts(1, [2, 2, 2], data).unwrap();
        let x = idwt3(&c).unwrap();
        let expected = 1.0 / 2f64.powf(1.5);
        assert!(x.data.iter().all(|v| (v - expected).abs() < 1e-12));
    }

    #[test]
    fn matches_separable_reference() {
        let x = random(2, [4, 6, 8], 9);
        let c = dwt3(&x).unwrap();
        let r = reference_dwt(&x);
        for (a, b) in c.data.iter().zip(&r) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn parseval_and_reconstruction() {
        let x = random(3, [8, 8, 8], 4);
        let c = dwt3(&x).unwrap();
        let ex: f64 = x.data.iter().map(|v| v * v).sum();
        assert!(((c.energy() - ex) / ex).abs() < 1e-12);
        let back = idwt3(&c).unwrap();
        assert!(back.data.iter().zip(&x.data).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn odd_dims_are_rejected() {
        let x = MultiVolume::<f32>::zeros(1, [4, 3, 4]);
        assert_eq!(
            dwt3(&x).unwrap_err(),
            WaveletError::OddDimension { axis: 1, len: 3 }
        );
    }

    #[test]
    fn inconsistent_coefficients_are_rejected() {
        assert!(matches!(
            WaveletCoeffs::from_parts(1, [4, 4, 4], vec![0.0f32; 63]),
            Err(WaveletError::ShapeMismatch { .. })
        ));
        let bad = WaveletCoeffs {
            channels: 1,
            source_dims: [4, 4, 4],
            data: vec![0.0f32; 10],
        };
        assert!(idwt3(&bad).is_err());
    }

    proptest::proptest! {
        #[test]
        fn transform_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let x = random(1, [4, 4, 2], seed);
            let y = random(1, [4, 4, 2], seed + 1);
            let mix = MultiVolume::new(1, x.dims, x.data.iter().zip(&y.data).map(|(p, q)| a * p + b * q).collect()).unwrap();
            let (cx, cy, cm) = (dwt3(&x).unwrap(), dwt3(&y).unwrap(), dwt3(&mix).unwrap());
            for i in 0..cm.data.len() {
                proptest::prop_assert!((cm.data[i] - (a * cx.data[i] + b * cy.data[i])).abs() < 1e-12);
            }
        }
    }
}
