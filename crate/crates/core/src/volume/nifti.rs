//! Read-only NIfTI-1 single-file (`.nii`) import.
//!
//! Only axis-aligned affines are accepted: the diagonal scaling and the
//! translation are honoured, negative diagonal entries flip the axis, and any
//! rotation or shear is rejected.

use std::path::Path;

use super::{Grid, Result, Volume, VolumeError};

const HEADER_LEN: usize = 348;
const AFFINE_TOL: f64 = 1e-6;

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn raw<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut b: [u8; N] = self.bytes[off..off + N].try_into().unwrap();
        if self.big_endian {
            b.reverse();
        }
        b
    }
    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.raw(off))
    }
    fn i32(&self, off: usize) -> i32 {
        i32::from_le_bytes(self.raw(off))
    }
    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.raw(off))
    }
    fn f64(&self, off: usize) -> f64 {
        f64::from_le_bytes(self.raw(off))
    }
}

/// Reads a `.nii` file into a [`Volume`].
pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let bytes = std::fs::read(path)?;
    decode_nifti(&bytes)
}

pub(crate) fn decode_nifti(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_LEN {
        return Err(VolumeError::MalformedHeader("NIfTI header too short".into()));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let r = match (le, be) {
        (348, _) => Reader { bytes, big_endian: false },
        (_, 348) => Reader { bytes, big_endian: true },
        _ => return Err(VolumeError::MalformedHeader("sizeof_hdr is not 348".into())),
    };
    if &bytes[344..347] != b"n+1" {
        return Err(VolumeError::Unsupported(
            "only single-file NIfTI-1 (magic n+1) is supported".into(),
        ));
    }
    let ndim = r.i16(40);
    let dim: Vec<i16> = (0..8).map(|i| r.i16(40 + 2 * i)).collect();
    let extra_ok = (4..=ndim.clamp(0, 7) as usize).all(|i| dim[i] <= 1);
    if !(3..=7).contains(&ndim) || !extra_ok {
        return Err(VolumeError::Unsupported(format!(
            "only 3D volumes are supported (dim = {dim:?})"
        )));
    }
    if dim[1..4].iter().any(|&d| d <= 0) {
        return Err(VolumeError::MalformedHeader(format!("bad dims {dim:?}")));
    }
    let dims = [dim[1] as usize, dim[2] as usize, dim[3] as usize];
    let datatype = r.i16(70);
    let pixdim: Vec<f64> = (0..8).map(|i| r.f32(76 + 4 * i) as f64).collect();
    let vox_offset = r.f32(108) as usize;
    let slope = r.f32(112) as f64;
    let inter = r.f32(116) as f64;
    let qform_code = r.i16(252);
    let sform_code = r.i16(254);

    // diagonal scale and translation per axis
    let (diag, offset) = if sform_code > 0 {
        let rows: Vec<[f64; 4]> = (0..3)
            .map(|row| [0, 1, 2, 3].map(|c| r.f32(280 + 16 * row + 4 * c) as f64))
            .collect();
        for (row, vals) in rows.iter().enumerate() {
            for (col, v) in vals.iter().take(3).enumerate() {
                if row != col && v.abs() > AFFINE_TOL {
                    return Err(VolumeError::Unsupported(
                        "oblique sform affine is not supported".into(),
                    ));
                }
            }
        }
        (
            [rows[0][0], rows[1][1], rows[2][2]],
            [rows[0][3], rows[1][3], rows[2][3]],
        )
    } else if qform_code > 0 {
        let q = [r.f32(256), r.f32(260), r.f32(264)];
        if q.iter().any(|v| (*v as f64).abs() > AFFINE_TOL) {
            return Err(VolumeError::Unsupported(
                "oblique qform rotation is not supported".into(),
            ));
        }
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        (
            [pixdim[1], pixdim[2], qfac * pixdim[3]],
            [r.f32(268) as f64, r.f32(272) as f64, r.f32(276) as f64],
        )
    } else {
        ([pixdim[1], pixdim[2], pixdim[3]], [0.0; 3])
    };
    if diag.iter().any(|d| !(d.is_finite() && d.abs() > 0.0)) {
        return Err(VolumeError::MalformedHeader(format!(
            "degenerate voxel scaling {diag:?}"
        )));
    }

    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or(VolumeError::DimOverflow(dims))?;
    let width = match datatype {
        2 | 256 => 1,
        4 | 512 => 2,
        8 | 16 | 768 => 4,
        64 => 8,
        other => {
            return Err(VolumeError::Unsupported(format!(
                "NIfTI datatype {other}"
            )))
        }
    };
    let start = vox_offset.max(HEADER_LEN);
    let expected = n * width;
    let found = bytes.len().saturating_sub(start);
    if found < expected {
        return Err(VolumeError::Truncated { expected, found });
    }
    let raw = Reader {
        bytes: &bytes[start..start + expected],
        big_endian: r.big_endian,
    };
    let (slope, inter) = if slope == 0.0 || !slope.is_finite() {
        (1.0, 0.0)
    } else {
        (slope, inter)
    };
    let mut values: Vec<f32> = (0..n)
        .map(|i| {
            let o = i * width;
            let v = match datatype {
                2 => raw.bytes[o] as f64,
                256 => raw.bytes[o] as i8 as f64,
                4 => raw.i16(o) as f64,
                512 => u16::from_le_bytes(raw.raw(o)) as f64,
                8 => raw.i32(o) as f64,
                768 => u32::from_le_bytes(raw.raw(o)) as f64,
                16 => raw.f32(o) as f64,
                _ => raw.f64(o),
            };
            (v * slope + inter) as f32
        })
        .collect();

    let mut spacing = [0.0; 3];
    let mut origin = [0.0; 3];
    let grid0 = Grid::unit(dims)?;
    for a in 0..3 {
        spacing[a] = diag[a].abs();
        if diag[a] > 0.0 {
            origin[a] = offset[a];
        } else {
            // flip so that spacing is positive; voxel 0 becomes the former last voxel
            origin[a] = offset[a] + diag[a] * (dims[a] - 1) as f64;
            let old = values.clone();
            for (idx, v) in values.iter_mut().enumerate() {
                let mut ijk = grid0.unravel(idx);
                ijk[a] = dims[a] - 1 - ijk[a];
                *v = old[grid0.linear(ijk[0], ijk[1], ijk[2])];
            }
        }
    }
    Volume::new(Grid::new(dims, spacing, origin)?, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(dims: [i16; 3], datatype: i16, bitpix: i16) -> Vec<u8> {
        let mut h = vec![0u8; 352];
        h[0..4].copy_from_slice(&348i32.to_le_bytes());
        let dim = [3, dims[0], dims[1], dims[2], 1, 1, 1, 1];
        for (i, d) in dim.iter().enumerate() {
            h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        h[70..72].copy_from_slice(&datatype.to_le_bytes());
        h[72..74].copy_from_slice(&bitpix.to_le_bytes());
        for (i, p) in [1.0f32, 0.5, 0.5, 2.0].iter().enumerate() {
            h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
        }
        h[108..112].copy_from_slice(&352f32.to_le_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        h
    }

    fn set_sform(h: &mut [u8], rows: [[f32; 4]; 3]) {
        h[254..256].copy_from_slice(&1i16.to_le_bytes());
        for (r, row) in rows.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                let o = 280 + 16 * r + 4 * c;
                h[o..o + 4].copy_from_slice(&v.to_le_bytes());
            }
        }
    }

    #[test]
    fn reads_axis_aligned_sform() {
        let mut h = header([2, 2, 1], 16, 32);
        set_sform(
            &mut h,
            [[0.5, 0.0, 0.0, 10.0], [0.0, 0.5, 0.0, -4.0], [0.0, 0.0, 2.0, 1.0]],
        );
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            h.extend_from_slice(&v.to_le_bytes());
        }
        let v = decode_nifti(&h).unwrap();
        assert_eq!(v.dims(), [2, 2, 1]);
        assert_eq!(v.grid().spacing(), [0.5, 0.5, 2.0]);
        assert_eq!(v.grid().origin(), [10.0, -4.0, 1.0]);
        assert_eq!(v.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn negative_diagonal_flips_axis() {
        let mut h = header([2, 1, 1], 4, 16);
        set_sform(
            &mut h,
            [[-1.0, 0.0, 0.0, 5.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
        );
        for v in [7i16, 9] {
            h.extend_from_slice(&v.to_le_bytes());
        }
        let v = decode_nifti(&h).unwrap();
        assert_eq!(v.grid().origin()[0], 4.0);
        assert_eq!(v.data(), &[9.0, 7.0]);
    }

    #[test]
    fn oblique_affine_is_rejected() {
        let mut h = header([1, 1, 1], 16, 32);
        set_sform(
            &mut h,
            [[0.7, 0.7, 0.0, 0.0], [-0.7, 0.7, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
        );
        h.extend_from_slice(&1f32.to_le_bytes());
        assert!(matches!(decode_nifti(&h), Err(VolumeError::Unsupported(_))));
    }

    #[test]
    fn pixdim_fallback_and_truncation() {
        let mut h = header([2, 1, 1], 2, 8);
        h.push(3);
        assert!(matches!(decode_nifti(&h), Err(VolumeError::Truncated { .. })));
        h.push(4);
        let v = decode_nifti(&h).unwrap();
        assert_eq!(v.grid().spacing(), [0.5, 0.5, 2.0]);
        assert_eq!(v.data(), &[3.0, 4.0]);
    }
}
