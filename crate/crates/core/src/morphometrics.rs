//! Sulcus angle and trochlear groove depth from femur label volumes, and the
//! Wilcoxon signed-rank test for paired before/after comparisons.
//!
//! Measurements are taken on axial slices (fixed z). Within a slice, x runs
//! medial-lateral and the anterior direction is +y.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Label, LabelVolume};

#[derive(Debug, Error, PartialEq)]
pub enum MorphometryError {
    #[error("no femur voxels in slice {slice}")]
    NoFemur { slice: usize },
    #[error("slice {slice} out of range (volume has {depth} slices)")]
    SliceOutOfRange { slice: usize, depth: usize },
    #[error("paired samples differ in length: {before} vs {after}")]
    LengthMismatch { before: usize, after: usize },
    #[error("all paired differences are zero")]
    AllZero,
    #[error("need at least {min} non-zero differences, got {n}")]
    TooFew { n: usize, min: usize },
    #[error("non-finite sample value")]
    NonFinite,
}

/// Anterior-most femur coordinate per column of one axial slice.
#[derive(Debug, Clone, PartialEq)]
pub struct AnteriorProfile {
    pub slice: usize,
    /// World x of each column centre.
    pub x: Vec<f64>,
    /// Anterior femur boundary (top voxel face) per column; `None` where the
    /// column has no femur.
    pub y: Vec<Option<f64>>,
}

/// Builds the anterior femur profile of axial slice `z`.
pub fn anterior_profile(labels: &LabelVolume, z: usize) -> Result<AnteriorProfile, MorphometryError> {
    let [nx, ny, nz] = labels.dims();
    if z >= nz {
        return Err(MorphometryError::SliceOutOfRange { slice: z, depth: nz });
    }
    let g = labels.grid();
    let (sp, org) = (g.spacing(), g.origin());
    let femur = Label::Femur as u8;
    let data = labels.labels();
    let mut y = vec![None; nx];
    for (i, slot) in y.iter_mut().enumerate() {
        *slot = (0..ny)
            .rev()
            .find(|&j| data[g.linear(i, j, z)] == femur)
            .map(|j| org[1] + (j as f64 + 0.5) * sp[1]);
    }
    if y.iter().all(Option::is_none) {
        return Err(MorphometryError::NoFemur { slice: z });
    }
    let x = (0..nx).map(|i| org[0] + i as f64 * sp[0]).collect();
    Ok(AnteriorProfile { slice: z, x, y })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    NoTrough,
    NoPeaks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SulcusMeasurement {
    pub slice: usize,
    /// Landmarks as (x, y) in mm; the lateral peak is the one at larger x.
    pub lateral_peak: [f64; 2],
    pub medial_peak: [f64; 2],
    pub trough: [f64; 2],
    /// Degrees.
    pub sulcus_angle: f64,
    /// mm.
    pub groove_depth: f64,
    pub valid: bool,
    pub reason: Option<InvalidReason>,
}

impl SulcusMeasurement {
    fn invalid(slice: usize, reason: InvalidReason) -> Self {
        Self {
            slice,
            lateral_peak: [f64::NAN; 2],
            medial_peak: [f64::NAN; 2],
            trough: [f64::NAN; 2],
            sulcus_angle: f64::NAN,
            groove_depth: f64::NAN,
            valid: false,
            reason: Some(reason),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SlicePolicy {
    /// Deepest groove among axial slices within `half_range` mm of the
    /// patella centroid (all femur slices if there is no patella).
    DeepestNearPatella { half_range: f64 },
    Fixed { slice: usize },
}

impl Default for SlicePolicy {
    fn default() -> Self {
        SlicePolicy::DeepestNearPatella { half_range: 15.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct SulcusConfig {
    pub slice_policy: SlicePolicy,
    /// Minimum distance in mm between the two condylar peaks.
    pub min_peak_separation: f64,
    /// Fraction of each wall trimmed at both ends before line fitting.
    pub wall_trim: f64,
}

impl Default for SulcusConfig {
    fn default() -> Self {
        Self {
            slice_policy: SlicePolicy::default(),
            min_peak_separation: 5.0,
            wall_trim: 0.15,
        }
    }
}

/// Measures sulcus angle and groove depth on the slice chosen by the policy.
pub fn measure_sulcus(labels: &LabelVolume, cfg: &SulcusConfig) -> Result<SulcusMeasurement, MorphometryError> {
    let nz = labels.dims()[2];
    let slices: Vec<usize> = match cfg.slice_policy {
        SlicePolicy::Fixed { slice } => vec![slice],
        SlicePolicy::DeepestNearPatella { half_range } => {
            let g = labels.grid();
            let with_femur: Vec<usize> = (0..nz).filter(|&z| slice_has(labels, z, Label::Femur)).collect();
            if with_femur.is_empty() {
                return Err(MorphometryError::NoFemur { slice: nz / 2 });
            }
            match patella_centroid_z(labels) {
                Some(cz) => {
                    let near: Vec<usize> = with_femur
                        .iter()
                        .copied()
                        .filter(|&z| (g.origin()[2] + z as f64 * g.spacing()[2] - cz).abs() <= half_range)
                        .collect();
                    if near.is_empty() {
                        with_femur
                    } else {
                        near
                    }
                }
                None => with_femur,
            }
        }
    };
    let mut best: Option<SulcusMeasurement> = None;
    let mut first_invalid = None;
    for z in slices {
        let profile = anterior_profile(labels, z)?;
        let m = measure_profile(&profile, cfg);
        if m.valid {
            if best.as_ref().is_none_or(|b| m.groove_depth > b.groove_depth) {
                best = Some(m);
            }
        } else if first_invalid.is_none() {
            first_invalid = Some(m);
        }
    }
    Ok(best.or(first_invalid).expect("at least one slice measured"))
}

fn slice_has(labels: &LabelVolume, z: usize, label: Label) -> bool {
    let [nx, ny, _] = labels.dims();
    let start = z * nx * ny;
    labels.labels()[start..start + nx * ny].contains(&(label as u8))
}

fn patella_centroid_z(labels: &LabelVolume) -> Option<f64> {
    let g = labels.grid();
    let (mut sum, mut n) = (0.0, 0usize);
    for (idx, &l) in labels.labels().iter().enumerate() {
        if l == Label::Patella as u8 {
            sum += g.unravel(idx)[2] as f64;
            n += 1;
        }
    }
    (n > 0).then(|| g.origin()[2] + sum / n as f64 * g.spacing()[2])
}

/// A maximal run `[start, end]` of equal smoothed values that is higher
/// than its neighbours.
#[derive(Debug, Clone, Copy)]
struct Maximum {
    start: usize,
    end: usize,
    value: f64,
}

fn local_maxima(p: &[f64]) -> Vec<Maximum> {
    const EQ: f64 = 1e-9;
    let mut out = Vec::new();
    let mut i = 0;
    while i < p.len() {
        let mut j = i;
        while j + 1 < p.len() && (p[j + 1] - p[i]).abs() <= EQ {
            j += 1;
        }
        let left_lower = i == 0 || p[i - 1] < p[i];
        let right_lower = j + 1 == p.len() || p[j + 1] < p[i];
        if left_lower && right_lower && !(i == 0 && j + 1 == p.len()) {
            out.push(Maximum { start: i, end: j, value: p[i] });
        }
        i = j + 1;
    }
    out
}

/// Least-squares line `y = a + b·x`.
fn fit_line(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len();
    if n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(u, v)| (u - mx) * (v - my)).sum();
    let b = sxy / sxx;
    Some((my - b * mx, b))
}

fn trimmed(lo: usize, hi: usize, trim: f64) -> (usize, usize) {
    let n = hi - lo + 1;
    let cut = ((n as f64 * trim).round() as usize).max(1);
    if 2 * cut >= n {
        return (lo, hi);
    }
    (lo + cut, hi - cut)
}

/// SA and TGD from a single anterior profile.
///
/// Extrema are located on a 3-tap mean of the profile; landmarks are then
/// refined on the raw profile by fitting a line to each groove wall. The
/// trough is the intersection of the wall lines and each peak is where its
/// wall reaches the plateau height.
pub fn measure_profile(profile: &AnteriorProfile, cfg: &SulcusConfig) -> SulcusMeasurement {
    let slice = profile.slice;
    // Longest run of columns that contain femur.
    let (mut best, mut cur) = ((0, 0), None::<usize>);
    for i in 0..=profile.y.len() {
        let present = profile.y.get(i).is_some_and(Option::is_some);
        match (present, cur) {
            (true, None) => cur = Some(i),
            (false, Some(s)) => {
                if i - s > best.1 - best.0 {
                    best = (s, i);
                }
                cur = None;
            }
            _ => {}
        }
    }
    let xs = &profile.x[best.0..best.1];
    let raw: Vec<f64> = profile.y[best.0..best.1].iter().map(|v| v.unwrap()).collect();
    let n = raw.len();
    if n < 3 {
        return SulcusMeasurement::invalid(slice, InvalidReason::NoPeaks);
    }
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            raw[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();
    let (mn, mx) = smooth
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if mx - mn <= 1e-9 {
        return SulcusMeasurement::invalid(slice, InvalidReason::NoTrough);
    }

    let mut maxima = local_maxima(&smooth);
    maxima.sort_by(|a, b| b.value.total_cmp(&a.value).then(a.start.cmp(&b.start)));
    let Some(&first) = maxima.first() else {
        return SulcusMeasurement::invalid(slice, InvalidReason::NoPeaks);
    };
    let gap = |a: &Maximum, b: &Maximum| {
        if a.end < b.start {
            xs[b.start] - xs[a.end]
        } else if b.end < a.start {
            xs[a.start] - xs[b.end]
        } else {
            0.0
        }
    };
    let Some(&second) = maxima[1..].iter().find(|m| gap(&first, m) >= cfg.min_peak_separation) else {
        return SulcusMeasurement::invalid(slice, InvalidReason::NoPeaks);
    };
    let (left, right) = if first.start < second.start {
        (first, second)
    } else {
        (second, first)
    };
    if right.start <= left.end + 1 {
        return SulcusMeasurement::invalid(slice, InvalidReason::NoTrough);
    }
    let inner = left.end + 1..right.start;
    let t = inner
        .clone()
        .min_by(|&a, &b| smooth[a].total_cmp(&smooth[b]))
        .unwrap();
    if smooth[t] >= left.value.min(right.value) {
        return SulcusMeasurement::invalid(slice, InvalidReason::NoTrough);
    }

    let plateau = |m: &Maximum| raw[m.start..=m.end].iter().sum::<f64>() / (m.end - m.start + 1) as f64;
    let (hl, hr) = (plateau(&left), plateau(&right));
    // A flat-bottomed trough splits between the walls at both ends.
    let t_end = (t..right.start).take_while(|&i| (smooth[i] - smooth[t]).abs() <= 1e-9).last().unwrap();
    let refined = (|| {
        let (a0, a1) = trimmed(left.end, t, cfg.wall_trim);
        let (b0, b1) = trimmed(t_end, right.start, cfg.wall_trim);
        let (al, bl) = fit_line(&xs[a0..=a1], &raw[a0..=a1])?;
        let (ar, br) = fit_line(&xs[b0..=b1], &raw[b0..=b1])?;
        if bl >= 0.0 || br <= 0.0 {
            return None;
        }
        let tx = (ar - al) / (bl - br);
        let trough = [tx, al + bl * tx];
        let lp = [(hl - al) / bl, hl];
        let rp = [(hr - ar) / br, hr];
        let ok = lp[0] < tx && tx < rp[0] && trough[1] < hl.min(hr) && trough.iter().all(|v| v.is_finite());
        ok.then_some((lp, trough, rp))
    })();
    let (lp, trough, rp) =
        refined.unwrap_or(([xs[left.end], raw[left.end]], [xs[t], raw[t]], [xs[right.start], raw[right.start]]));
    if trough[1] >= lp[1].min(rp[1]) {
        return SulcusMeasurement::invalid(slice, InvalidReason::NoTrough);
    }

    let u = [lp[0] - trough[0], lp[1] - trough[1]];
    let v = [rp[0] - trough[0], rp[1] - trough[1]];
    let cos = (u[0] * v[0] + u[1] * v[1]) / (u[0].hypot(u[1]) * v[0].hypot(v[1]));
    let angle = cos.clamp(-1.0, 1.0).acos().to_degrees();
    let chord = [rp[0] - lp[0], rp[1] - lp[1]];
    let depth = (chord[0] * u[1] - chord[1] * u[0]).abs() / chord[0].hypot(chord[1]);
    SulcusMeasurement {
        slice,
        lateral_peak: rp,
        medial_peak: lp,
        trough,
        sulcus_angle: angle,
        groove_depth: depth,
        valid: true,
        reason: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftDirection {
    /// `after` tends to be larger than `before`.
    Increase,
    Decrease,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W⁺, W⁻)`.
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub p_value: f64,
    pub exact: bool,
    pub direction: ShiftDirection,
}

/// Largest sample size using the exact null distribution.
pub const EXACT_MAX_N: usize = 25;
const MIN_N: usize = 5;

/// Ranks of `|d|` (1-based, ties get the average rank).
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test on `after − before`.
pub fn wilcoxon_signed_rank(before: &[f64], after: &[f64]) -> Result<WilcoxonResult, MorphometryError> {
    if before.len() != after.len() {
        return Err(MorphometryError::LengthMismatch {
            before: before.len(),
            after: after.len(),
        });
    }
    if before.iter().chain(after).any(|v| !v.is_finite()) {
        return Err(MorphometryError::NonFinite);
    }
    let diffs: Vec<f64> = after.iter().zip(before).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(MorphometryError::AllZero);
    }
    let n = diffs.len();
    if n < MIN_N {
        return Err(MorphometryError::TooFew { n, min: MIN_N });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let statistic = w_plus.min(w_minus);
    let (p_value, exact) = if n <= EXACT_MAX_N {
        (exact_p(&ranks, statistic), true)
    } else {
        (normal_p(&abs, n, statistic), false)
    };
    let direction = if w_plus > w_minus {
        ShiftDirection::Increase
    } else if w_plus < w_minus {
        ShiftDirection::Decrease
    } else {
        ShiftDirection::None
    };
    Ok(WilcoxonResult {
        statistic,
        w_plus,
        w_minus,
        n,
        p_value,
        exact,
        direction,
    })
}

/// `2·P(W⁺ ≤ w)` over all `2ⁿ` equally likely sign assignments, counted by
/// dynamic programming over doubled (integer) ranks.
fn exact_p(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0f64; max + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let limit = (2.0 * w).round() as usize;
    let tail: f64 = counts[..=limit.min(max)].iter().sum();
    (2.0 * tail / 2f64.powi(ranks.len() as i32)).min(1.0)
}

fn normal_p(abs: &[f64], n: usize, w: f64) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut sorted = abs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
        let t = j as f64;
        tie += t * t * t - t;
        i += j;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = (w - mean) / var.sqrt();
    libm::erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}
