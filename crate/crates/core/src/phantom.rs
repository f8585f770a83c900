//! Parametric trochlea phantoms with closed-form sulcus angle and groove depth.
//!
//! Axes: x is medial-lateral, y is posterior→anterior, z is the axial
//! (inferior-superior) direction. Every axial slice through the femur shows
//! two condylar plateaus flanking a V-shaped groove; a spherical patella sits
//! anterior to the groove trough.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Grid, Label, LabelVolume, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom parameter: {0}")]
    InvalidSpec(String),
    #[error("phantom geometry exceeds the field of view along axis {axis}: needs [{lo:.2}, {hi:.2}] mm, grid covers [{fov_lo:.2}, {fov_hi:.2}] mm")]
    OutsideFov {
        axis: usize,
        lo: f64,
        hi: f64,
        fov_lo: f64,
        fov_hi: f64,
    },
    #[error("slice thickness {thickness} mm is not an integer multiple of spacing {spacing} mm")]
    NonIntegralThickness { thickness: f64, spacing: f64 },
    #[error("axis length {len} is not divisible by the slab factor {factor}")]
    IndivisibleExtent { len: usize, factor: usize },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Geometry of a trochlea phantom, all lengths in mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrochleaPhantomSpec {
    /// Half-width of the V-groove at plateau level.
    pub condyle_half_width: f64,
    pub groove_depth: f64,
    /// Height of the condylar plateaus above the posterior femur face.
    pub condyle_height: f64,
    /// Medial-lateral width, reserved anterior-posterior space, axial length.
    pub bone_extent: [f64; 3],
    pub patella_radius: f64,
    /// Distance from the groove trough to the patella centre.
    pub patella_gap: f64,
    #[serde(default)]
    pub seed: u64,
    /// Noise standard deviation as a fraction of the intensity range.
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    /// Translation of the anatomy away from the field-of-view centre.
    #[serde(default)]
    pub offset: [f64; 3],
}

fn default_noise() -> f64 {
    0.02
}

impl Default for TrochleaPhantomSpec {
    fn default() -> Self {
        Self {
            condyle_half_width: 10.0,
            groove_depth: 5.0,
            condyle_height: 14.0,
            bone_extent: [36.0, 20.0, 24.0],
            patella_radius: 5.0,
            patella_gap: 8.0,
            seed: 0,
            noise_sigma: default_noise(),
            offset: [0.0; 3],
        }
    }
}

/// Intensity of the femur and patella ramps lies in `[0, INTENSITY_RANGE]`.
pub const INTENSITY_RANGE: f64 = 1.0;

impl TrochleaPhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: &str| Err(PhantomError::InvalidSpec(m.to_string()));
        let finite = [
            self.condyle_half_width,
            self.groove_depth,
            self.condyle_height,
            self.patella_radius,
            self.patella_gap,
            self.noise_sigma,
        ]
        .iter()
        .chain(&self.bone_extent)
        .chain(&self.offset)
        .all(|v| v.is_finite());
        if !finite {
            return bad("all parameters must be finite");
        }
        if self.condyle_half_width <= 0.0 {
            return bad("condyle_half_width must be > 0");
        }
        if self.groove_depth < 0.0 {
            return bad("groove_depth must be >= 0");
        }
        if self.groove_depth >= self.condyle_height {
            return bad("groove_depth must be < condyle_height");
        }
        if self.patella_gap <= 0.0 {
            return bad("patella_gap must be > 0");
        }
        if self.patella_radius <= 0.0 {
            return bad("patella_radius must be > 0");
        }
        if self.noise_sigma < 0.0 {
            return bad("noise_sigma must be >= 0");
        }
        if self.bone_extent.iter().any(|&e| e <= 0.0) {
            return bad("bone_extent must be positive");
        }
        if self.condyle_height > self.bone_extent[1] {
            return bad("condyle_height must fit in bone_extent[1]");
        }
        if 2.0 * self.condyle_half_width > self.bone_extent[0] {
            return bad("groove must fit in bone_extent[0]");
        }
        Ok(())
    }

    /// `2·atan(w/d)` in degrees; `None` for a flat (d = 0) surface.
    pub fn analytic_sulcus_angle(&self) -> Option<f64> {
        (self.groove_depth > 0.0)
            .then(|| 2.0 * (self.condyle_half_width / self.groove_depth).atan().to_degrees())
    }

    /// Perpendicular trough-to-chord distance, which is exactly `d`.
    pub fn analytic_groove_depth(&self) -> f64 {
        self.groove_depth
    }

    /// Same anatomy with a different groove.
    pub fn with_groove(&self, half_width: f64, depth: f64) -> Self {
        Self {
            condyle_half_width: half_width,
            groove_depth: depth,
            ..self.clone()
        }
    }

    /// Geometry scaled by `factor` about the field-of-view centre.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            condyle_half_width: self.condyle_half_width * factor,
            groove_depth: self.groove_depth * factor,
            condyle_height: self.condyle_height * factor,
            bone_extent: self.bone_extent.map(|e| e * factor),
            patella_radius: self.patella_radius * factor,
            patella_gap: self.patella_gap * factor,
            offset: self.offset.map(|o| o * factor),
            ..self.clone()
        }
    }
}

/// Seeded family of noise-free phantoms for a 32³ grid at 1.5 mm, varying
/// groove shape, condyle height, patella size and gap, and placement.
pub fn toy_variants(n: usize, seed: u64) -> Vec<TrochleaPhantomSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| TrochleaPhantomSpec {
            condyle_half_width: rng.random_range(6.0..14.0),
            groove_depth: rng.random_range(1.5..6.0),
            condyle_height: rng.random_range(10.0..14.0),
            bone_extent: [34.0, 18.0, 40.0],
            patella_radius: rng.random_range(3.5..5.5),
            patella_gap: rng.random_range(6.5..9.0),
            seed: seed.wrapping_add(i as u64),
            noise_sigma: 0.0,
            offset: [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0)],
        })
        .collect()
}

/// Grid the toy variants are laid out for.
pub fn toy_grid() -> Grid {
    Grid::new([32; 3], [1.5; 3], [0.0; 3]).expect("valid toy grid")
}

/// Resolved world-space layout of a phantom on a particular grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomLayout {
    /// Groove centre line (x) and axial centre (z); y is unused.
    pub center: [f64; 3],
    pub posterior_y: f64,
    pub plateau_y: f64,
    pub trough_y: f64,
    pub patella_center: [f64; 3],
    pub femur_lo: [f64; 3],
    pub femur_hi: [f64; 3],
}

impl PhantomLayout {
    pub fn new(spec: &TrochleaPhantomSpec, grid: &Grid) -> Self {
        let (lo, hi) = grid.bounds();
        let c = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]) + spec.offset[a]);
        let posterior_y = c[1] - 0.5 * spec.bone_extent[1];
        let plateau_y = posterior_y + spec.condyle_height;
        let trough_y = plateau_y - spec.groove_depth;
        Self {
            center: c,
            posterior_y,
            plateau_y,
            trough_y,
            patella_center: [c[0], trough_y + spec.patella_gap, c[2]],
            femur_lo: [c[0] - 0.5 * spec.bone_extent[0], posterior_y, c[2] - 0.5 * spec.bone_extent[2]],
            femur_hi: [c[0] + 0.5 * spec.bone_extent[0], plateau_y, c[2] + 0.5 * spec.bone_extent[2]],
        }
    }

    /// Anterior femur surface height at medial-lateral position `x`.
    pub fn surface_y(&self, spec: &TrochleaPhantomSpec, x: f64) -> f64 {
        let u = (x - self.center[0]).abs() / spec.condyle_half_width;
        self.plateau_y - spec.groove_depth * (1.0 - u).max(0.0)
    }

    pub fn in_femur(&self, spec: &TrochleaPhantomSpec, p: [f64; 3]) -> bool {
        p[0] >= self.femur_lo[0]
            && p[0] <= self.femur_hi[0]
            && p[2] >= self.femur_lo[2]
            && p[2] <= self.femur_hi[2]
            && p[1] >= self.posterior_y
            && p[1] <= self.surface_y(spec, p[0])
    }

    pub fn in_patella(&self, spec: &TrochleaPhantomSpec, p: [f64; 3]) -> bool {
        dist(p, self.patella_center) <= spec.patella_radius
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// splitmix64 finaliser; used as a counter-based generator keyed by voxel index.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Standard normal draw for voxel `idx`, independent of evaluation order.
pub(crate) fn voxel_normal(seed: u64, idx: u64) -> f64 {
    let a = splitmix64(seed ^ splitmix64(idx.wrapping_mul(2)));
    let b = splitmix64(seed ^ splitmix64(idx.wrapping_mul(2) + 1));
    let u1 = ((a >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
    let u2 = (b >> 11) as f64 / (1u64 << 53) as f64;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn check_fov(grid: &Grid, lo: [f64; 3], hi: [f64; 3]) -> Result<(), PhantomError> {
    let (fov_lo, fov_hi) = grid.extent();
    for a in 0..3 {
        if lo[a] < fov_lo[a] - 1e-9 || hi[a] > fov_hi[a] + 1e-9 {
            return Err(PhantomError::OutsideFov {
                axis: a,
                lo: lo[a],
                hi: hi[a],
                fov_lo: fov_lo[a],
                fov_hi: fov_hi[a],
            });
        }
    }
    Ok(())
}

/// Label volume only (no intensity synthesis).
pub fn phantom_labels(
    spec: &TrochleaPhantomSpec,
    grid: Grid,
) -> Result<LabelVolume, PhantomError> {
    spec.validate()?;
    let layout = PhantomLayout::new(spec, &grid);
    let r = spec.patella_radius;
    let pc = layout.patella_center;
    let lo = [0, 1, 2].map(|a| layout.femur_lo[a].min(pc[a] - r));
    let hi = [0, 1, 2].map(|a| layout.femur_hi[a].max(pc[a] + r));
    check_fov(&grid, lo, hi)?;
    let labels = (0..grid.len())
        .map(|idx| {
            let p = grid.index_to_world_unchecked(grid.unravel(idx));
            if layout.in_femur(spec, p) {
                Label::Femur as u8
            } else if layout.in_patella(spec, p) {
                Label::Patella as u8
            } else {
                Label::Background as u8
            }
        })
        .collect();
    Ok(LabelVolume::new(grid, labels)?)
}

/// Generates the ground-truth intensity volume and its label volume.
///
/// The grid origin is the world origin; the anatomy is centred in the field
/// of view (shifted by `spec.offset`).
pub fn generate_phantom(
    spec: &TrochleaPhantomSpec,
    dims: [usize; 3],
    spacing: [f64; 3],
) -> Result<(Volume, LabelVolume), PhantomError> {
    let grid = Grid::new(dims, spacing, [0.0; 3])?;
    let labels = phantom_labels(spec, grid)?;
    let layout = PhantomLayout::new(spec, &grid);
    let sigma = spec.noise_sigma * INTENSITY_RANGE;
    let data = labels
        .labels()
        .iter()
        .enumerate()
        .map(|(idx, &l)| {
            let p = grid.index_to_world_unchecked(grid.unravel(idx));
            let base = match Label::from_u8(l) {
                Some(Label::Femur) => {
                    let t = ((p[1] - layout.posterior_y) / spec.condyle_height).clamp(0.0, 1.0);
                    0.35 + 0.4 * t
                }
                Some(Label::Patella) => {
                    let t = dist(p, layout.patella_center) / spec.patella_radius;
                    0.95 - 0.15 * t.min(1.0)
                }
                _ => 0.05,
            };
            let noise = if sigma > 0.0 {
                sigma * voxel_normal(spec.seed, idx as u64)
            } else {
                0.0
            };
            (base + noise) as f32
        })
        .collect();
    Ok((Volume::new(grid, data)?, labels))
}

/// Anatomical acquisition plane; each has one thick-slice axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Axial,
    Sagittal,
    Coronal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Sagittal, Plane::Coronal];

    /// Axis along which this plane's slices are thick.
    pub fn through_axis(self) -> usize {
        match self {
            Plane::Axial => 2,
            Plane::Sagittal => 0,
            Plane::Coronal => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Sagittal => "sagittal",
            Plane::Coronal => "coronal",
        }
    }
}

/// One simulated acquisition: plane, slice thickness and intensity transform
/// `gain · v + shift` emulating a different contrast.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanSpec {
    pub plane: Plane,
    pub slice_thickness: f64,
    #[serde(default = "one")]
    pub gain: f64,
    #[serde(default)]
    pub shift: f64,
}

fn one() -> f64 {
    1.0
}

impl ScanSpec {
    pub fn new(plane: Plane, slice_thickness: f64) -> Self {
        Self {
            plane,
            slice_thickness,
            gain: 1.0,
            shift: 0.0,
        }
    }

    pub fn with_intensity(mut self, gain: f64, shift: f64) -> Self {
        self.gain = gain;
        self.shift = shift;
        self
    }
}

/// Thick-slice acquisition: averages `thickness / spacing` consecutive slices
/// along the plane's through axis and applies the scan's intensity transform.
pub fn simulate_scan(gt: &Volume, scan: &ScanSpec) -> Result<Volume, PhantomError> {
    let axis = scan.plane.through_axis();
    let g = gt.grid();
    let spacing = g.spacing()[axis];
    let ratio = scan.slice_thickness / spacing;
    let factor = ratio.round();
    if !(factor >= 1.0) || (ratio - factor).abs() > 1e-6 {
        return Err(PhantomError::NonIntegralThickness {
            thickness: scan.slice_thickness,
            spacing,
        });
    }
    let factor = factor as usize;
    let len = g.dims()[axis];
    if !len.is_multiple_of(factor) {
        return Err(PhantomError::IndivisibleExtent { len, factor });
    }
    let mut dims = g.dims();
    dims[axis] = len / factor;
    let mut sp = g.spacing();
    sp[axis] = spacing * factor as f64;
    let mut origin = g.origin();
    origin[axis] += 0.5 * (factor - 1) as f64 * spacing;
    let out_grid = Grid::new(dims, sp, origin)?;
    let mut acc = vec![0f64; out_grid.len()];
    for (idx, &v) in gt.data().iter().enumerate() {
        let mut ijk = g.unravel(idx);
        ijk[axis] /= factor;
        acc[out_grid.linear(ijk[0], ijk[1], ijk[2])] += v as f64;
    }
    let data = acc
        .into_iter()
        .map(|s| (scan.gain * s / factor as f64 + scan.shift) as f32)
        .collect();
    Ok(Volume::new(out_grid, data)?)
}

/// Simulates the three orthogonal acquisitions of one study.
pub fn simulate_anisotropic_scans(
    gt: &Volume,
    scans: &[ScanSpec; 3],
) -> Result<[Volume; 3], PhantomError> {
    Ok([
        simulate_scan(gt, &scans[0])?,
        simulate_scan(gt, &scans[1])?,
        simulate_scan(gt, &scans[2])?,
    ])
}
