//! Voxel grids shared by every stage of the pipeline.
//!
//! Data are stored x-fastest: the linear index of voxel `(i, j, k)` is
//! `i + nx * (j + ny * k)`. The world frame is axis-aligned with the grid, so
//! a grid is fully described by its dims, per-axis spacing (mm) and the world
//! position of the centre of voxel `(0, 0, 0)`.

mod gvol;
mod label;
mod nifti;

pub use gvol::{
    decode as decode_gvol, encode_labels, encode_volume, read_any, read_labels, read_volume,
    write_labels, write_volume, GvolDtype, GvolPayload,
};
pub use label::{dice_score, Label, LabelVolume};
pub use nifti::read_nifti;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("invalid dims {0:?}: every axis must be > 0")]
    ZeroDim([usize; 3]),
    #[error("invalid spacing {0:?}: every axis must be finite and > 0")]
    BadSpacing([f64; 3]),
    #[error("origin {0:?} is not finite")]
    BadOrigin([f64; 3]),
    #[error("voxel count overflows for dims {0:?}")]
    DimOverflow([usize; 3]),
    #[error("data length {got} does not match dims product {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite value at linear index {0}")]
    NonFinite(usize),
    #[error("index {index:?} out of bounds for dims {dims:?}")]
    OutOfBounds { index: [i64; 3], dims: [usize; 3] },
    #[error("point {0:?} lies outside the volume")]
    PointOutside([f64; 3]),
    #[error("grid mismatch: {0:?} vs {1:?}")]
    GridMismatch([usize; 3], [usize; 3]),
    #[error("invalid label value {value} at linear index {index}")]
    BadLabel { value: i64, index: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, VolumeError>;

/// Geometry of a regular, axis-aligned voxel grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(VolumeError::ZeroDim(dims));
        }
        if dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .is_none()
        {
            return Err(VolumeError::DimOverflow(dims));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(VolumeError::BadSpacing(spacing));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(VolumeError::BadOrigin(origin));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    /// Unit-spaced grid at the world origin.
    pub fn unit(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn linear(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn unravel(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    pub fn contains_index(&self, i: [i64; 3]) -> bool {
        (0..3).all(|a| i[a] >= 0 && (i[a] as usize) < self.dims[a])
    }

    /// `origin + i ⊙ spacing`.
    pub fn index_to_world(&self, i: [usize; 3]) -> Result<[f64; 3]> {
        if (0..3).any(|a| i[a] >= self.dims[a]) {
            return Err(VolumeError::OutOfBounds {
                index: i.map(|v| v as i64),
                dims: self.dims,
            });
        }
        Ok(self.index_to_world_unchecked(i))
    }

    #[inline]
    pub fn index_to_world_unchecked(&self, i: [usize; 3]) -> [f64; 3] {
        [
            self.origin[0] + i[0] as f64 * self.spacing[0],
            self.origin[1] + i[1] as f64 * self.spacing[1],
            self.origin[2] + i[2] as f64 * self.spacing[2],
        ]
    }

    /// Continuous (fractional) index of a world point.
    #[inline]
    pub fn world_to_continuous(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Nearest voxel index of a world point; errors when it falls off the grid.
    pub fn world_to_index(&self, p: [f64; 3]) -> Result<[usize; 3]> {
        let c = self.world_to_continuous(p);
        let r = c.map(|v| v.round() as i64);
        if !self.contains_index(r) {
            return Err(VolumeError::OutOfBounds {
                index: r,
                dims: self.dims,
            });
        }
        Ok(r.map(|v| v as usize))
    }

    /// World-space bounding box of the voxel centres, `(min, max)`.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let max = [0, 1, 2].map(|a| self.origin[a] + (self.dims[a] - 1) as f64 * self.spacing[a]);
        (self.origin, max)
    }

    /// World-space extent covered by the voxels themselves (centres ± half a voxel).
    pub fn extent(&self) -> ([f64; 3], [f64; 3]) {
        let (lo, hi) = self.bounds();
        (
            [0, 1, 2].map(|a| lo[a] - 0.5 * self.spacing[a]),
            [0, 1, 2].map(|a| hi[a] + 0.5 * self.spacing[a]),
        )
    }

    pub fn same_geometry(&self, other: &Grid, tol: f64) -> bool {
        self.dims == other.dims
            && (0..3).all(|a| {
                (self.spacing[a] - other.spacing[a]).abs() <= tol
                    && (self.origin[a] - other.origin[a]).abs() <= tol
            })
    }
}

/// Out-of-bounds policy for interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    #[default]
    Clamp,
    Error,
}

/// Real-valued scalar volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f32>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(VolumeError::LengthMismatch {
                expected: grid.len(),
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Self { grid, data })
    }

    pub fn filled(grid: Grid, value: f32) -> Self {
        Self {
            data: vec![value; grid.len()],
            grid,
        }
    }

    /// Fills the grid by evaluating `f` at every voxel centre (world mm).
    pub fn from_fn(grid: Grid, mut f: impl FnMut([f64; 3]) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(grid.len());
        let [nx, ny, nz] = grid.dims;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(grid.index_to_world_unchecked([i, j, k])));
                }
            }
        }
        Self::new(grid, data)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.grid.linear(i, j, k)]
    }

    pub fn index_to_world(&self, i: [usize; 3]) -> Result<[f64; 3]> {
        self.grid.index_to_world(i)
    }

    pub fn world_to_index(&self, p: [f64; 3]) -> Result<[usize; 3]> {
        self.grid.world_to_index(p)
    }

    /// Trilinear interpolation at a world point.
    ///
    /// Exact at voxel centres. Points beyond the outermost voxel centres are
    /// clamped onto the boundary or rejected, depending on `boundary`.
    pub fn trilinear_sample(&self, p: [f64; 3], boundary: Boundary) -> Result<f64> {
        let c = self.grid.world_to_continuous(p);
        let dims = self.grid.dims;
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let max = (dims[a] - 1) as f64;
            let mut v = c[a];
            if !(v >= -1e-9 && v <= max + 1e-9) {
                match boundary {
                    Boundary::Clamp => {}
                    Boundary::Error => return Err(VolumeError::PointOutside(p)),
                }
            }
            v = v.clamp(0.0, max);
            let f = v.floor();
            let b = (f as usize).min(dims[a].saturating_sub(2));
            base[a] = b;
            frac[a] = if dims[a] == 1 { 0.0 } else { v - b as f64 };
        }
        let step = |a: usize| usize::from(dims[a] > 1);
        let mut acc = 0.0f64;
        for dz in 0..2 {
            let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
            if wz == 0.0 {
                continue;
            }
            for dy in 0..2 {
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                if wy == 0.0 {
                    continue;
                }
                for dx in 0..2 {
                    let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                    if wx == 0.0 {
                        continue;
                    }
                    let idx = self.grid.linear(
                        base[0] + dx * step(0),
                        base[1] + dy * step(1),
                        base[2] + dz * step(2),
                    );
                    acc += wx * wy * wz * self.data[idx] as f64;
                }
            }
        }
        Ok(acc)
    }

    /// Resamples onto `target` by trilinear interpolation with clamping.
    pub fn resample_trilinear(&self, target: Grid) -> Volume {
        let [nx, ny, nz] = target.dims;
        let mut data = Vec::with_capacity(target.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let p = target.index_to_world_unchecked([i, j, k]);
                    let v = self
                        .trilinear_sample(p, Boundary::Clamp)
                        .expect("clamped sampling cannot fail");
                    data.push(v as f32);
                }
            }
        }
        Volume { grid: target, data }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Peak signal-to-noise ratio in dB, using `peak` as the signal range.
pub fn psnr(estimate: &Volume, reference: &Volume, peak: f64) -> Result<f64> {
    if estimate.dims() != reference.dims() {
        return Err(VolumeError::GridMismatch(estimate.dims(), reference.dims()));
    }
    let mse = estimate
        .data
        .iter()
        .zip(&reference.data)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / estimate.data.len() as f64;
    Ok(10.0 * (peak * peak / mse.max(f64::MIN_POSITIVE)).log10())
}

/// Triangle mesh in world millimetres.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Checks that every triangle index refers to an existing vertex.
    pub fn validate(&self) -> bool {
        let n = self.vertices.len() as u32;
        self.triangles.iter().all(|t| t.iter().all(|&i| i < n))
    }

    pub fn triangle(&self, t: usize) -> [[f64; 3]; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    pub fn translated(&self, offset: [f64; 3]) -> Mesh {
        Mesh {
            vertices: self
                .vertices
                .iter()
                .map(|v| [v[0] + offset[0], v[1] + offset[1], v[2] + offset[2]])
                .collect(),
            triangles: self.triangles.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_to_world_identity_and_affine() {
        let g = Grid::new([4, 4, 4], [1.0; 3], [0.0; 3]).unwrap();
        assert_eq!(g.index_to_world([0, 0, 0]).unwrap(), [0.0, 0.0, 0.0]);
        let g = Grid::new([4, 4, 4], [0.5, 0.5, 2.0], [10.0, 0.0, 0.0]).unwrap();
        assert_eq!(g.index_to_world([2, 0, 1]).unwrap(), [11.0, 0.0, 2.0]);
    }

    #[test]
    fn index_out_of_range_is_bounds_error() {
        let g = Grid::unit([4, 4, 4]).unwrap();
        assert!(matches!(
            g.index_to_world([4, 0, 0]),
            Err(VolumeError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn world_index_round_trip_exhaustive() {
        let g = Grid::new([5, 5, 5], [0.7, 1.3, 2.1], [-3.0, 4.5, 0.25]).unwrap();
        for k in 0..5 {
            for j in 0..5 {
                for i in 0..5 {
                    let p = g.index_to_world([i, j, k]).unwrap();
                    assert_eq!(g.world_to_index(p).unwrap(), [i, j, k]);
                }
            }
        }
    }

    #[test]
    fn grid_rejects_bad_geometry() {
        assert!(matches!(
            Grid::new([0, 1, 1], [1.0; 3], [0.0; 3]),
            Err(VolumeError::ZeroDim(_))
        ));
        assert!(matches!(
            Grid::new([1, 1, 1], [1.0, 0.0, 1.0], [0.0; 3]),
            Err(VolumeError::BadSpacing(_))
        ));
        assert!(matches!(
            Grid::new([usize::MAX, 2, 2], [1.0; 3], [0.0; 3]),
            Err(VolumeError::DimOverflow(_))
        ));
    }

    #[test]
    fn volume_rejects_non_finite() {
        let g = Grid::unit([2, 1, 1]).unwrap();
        assert!(matches!(
            Volume::new(g, vec![0.0, f32::NAN]),
            Err(VolumeError::NonFinite(1))
        ));
    }

    #[test]
    fn trilinear_identity_and_midpoint() {
        let g = Grid::new([3, 3, 3], [2.0, 1.0, 0.5], [1.0, 2.0, 3.0]).unwrap();
        let v = Volume::from_fn(g, |p| (p[0] * 7.0 + p[1] * p[2]) as f32).unwrap();
        for idx in 0..g.len() {
            let ijk = g.unravel(idx);
            let p = g.index_to_world(ijk).unwrap();
            assert_eq!(v.trilinear_sample(p, Boundary::Error).unwrap(), v.data()[idx] as f64);
        }
        let g = Grid::unit([2, 1, 1]).unwrap();
        let v = Volume::new(g, vec![0.0, 1.0]).unwrap();
        assert_eq!(v.trilinear_sample([0.5, 0.0, 0.0], Boundary::Error).unwrap(), 0.5);
    }

    #[test]
    fn trilinear_boundary_policy() {
        let g = Grid::unit([2, 2, 2]).unwrap();
        let v = Volume::new(g, (0..8).map(|x| x as f32).collect()).unwrap();
        assert_eq!(v.trilinear_sample([-5.0, 0.0, 0.0], Boundary::Clamp).unwrap(), 0.0);
        assert_eq!(v.trilinear_sample([9.0, 9.0, 9.0], Boundary::Clamp).unwrap(), 7.0);
        assert!(matches!(
            v.trilinear_sample([1.5, 0.0, 0.0], Boundary::Error),
            Err(VolumeError::PointOutside(_))
        ));
    }

    #[test]
    fn trilinear_reproduces_linear_field() {
        use rand::{Rng, SeedableRng};
        // dyadic geometry keeps the stored f32 samples exact
        let g = Grid::new([9, 7, 6], [1.0, 0.5, 2.0], [-2.0, 1.0, 0.0]).unwrap();
        let f = |p: [f64; 3]| 2.0 * p[0] + 3.0 * p[1] + p[2];
        let v = Volume::from_fn(g, |p| f(p) as f32).unwrap();
        let (lo, hi) = g.bounds();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let p = [0, 1, 2].map(|a| rng.random_range(lo[a]..hi[a]));
            let got = v.trilinear_sample(p, Boundary::Error).unwrap();
            assert!((got - f(p)).abs() <= 1e-6, "{got} vs {}", f(p));
        }
    }

    #[test]
    fn single_voxel_axis_is_handled() {
        let g = Grid::unit([3, 1, 1]).unwrap();
        let v = Volume::new(g, vec![0.0, 2.0, 4.0]).unwrap();
        assert_eq!(v.trilinear_sample([1.5, 0.0, 0.0], Boundary::Error).unwrap(), 3.0);
        assert_eq!(v.trilinear_sample([2.0, 0.0, 0.0], Boundary::Error).unwrap(), 4.0);
    }
}
