//! "GVOL v1" native volume format.
//!
//! Little-endian layout: magic `GVOL`, `u32` version (1), `u32` dtype
//! (0 = f32, 1 = i32), `3 × u32` dims, `3 × f64` spacing (mm),
//! `3 × f64` origin (mm), then the raw x-fastest payload.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{Grid, LabelVolume, Result, Volume, VolumeError};

pub const MAGIC: &[u8; 4] = b"GVOL";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 4 + 4 + 12 + 24 + 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GvolDtype {
    F32 = 0,
    I32 = 1,
}

/// Contents of a GVOL file, typed by its dtype tag.
#[derive(Debug, Clone, PartialEq)]
pub enum GvolPayload {
    F32(Volume),
    I32 { grid: Grid, values: Vec<i32> },
}

fn encode_header(grid: &Grid, dtype: GvolDtype) -> Vec<u8> {
    let mut h = Vec::with_capacity(HEADER_LEN);
    h.extend_from_slice(MAGIC);
    h.extend_from_slice(&VERSION.to_le_bytes());
    h.extend_from_slice(&(dtype as u32).to_le_bytes());
    for d in grid.dims() {
        h.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in grid.spacing() {
        h.extend_from_slice(&s.to_le_bytes());
    }
    for o in grid.origin() {
        h.extend_from_slice(&o.to_le_bytes());
    }
    h
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn f64_at(b: &[u8], off: usize) -> f64 {
    f64::from_le_bytes(b[off..off + 8].try_into().unwrap())
}

/// Parses a complete GVOL byte buffer.
pub fn decode(bytes: &[u8]) -> Result<GvolPayload> {
    if bytes.len() < HEADER_LEN {
        return Err(VolumeError::MalformedHeader(format!(
            "header needs {HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(VolumeError::MalformedHeader("bad magic".into()));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(VolumeError::MalformedHeader(format!(
            "unsupported version {version}"
        )));
    }
    let dtype = match u32_at(bytes, 8) {
        0 => GvolDtype::F32,
        1 => GvolDtype::I32,
        other => {
            return Err(VolumeError::MalformedHeader(format!(
                "unknown dtype {other}"
            )))
        }
    };
    let dims = [12, 16, 20].map(|o| u32_at(bytes, o) as usize);
    if dims.contains(&0) {
        return Err(VolumeError::MalformedHeader(format!(
            "zero dimension in {dims:?}"
        )));
    }
    let spacing = [24, 32, 40].map(|o| f64_at(bytes, o));
    let origin = [48, 56, 64].map(|o| f64_at(bytes, o));
    let grid = Grid::new(dims, spacing, origin).map_err(|e| match e {
        VolumeError::DimOverflow(d) => VolumeError::DimOverflow(d),
        other => VolumeError::MalformedHeader(other.to_string()),
    })?;
    let expected = grid
        .len()
        .checked_mul(4)
        .ok_or(VolumeError::DimOverflow(dims))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(VolumeError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let words = payload[..expected].chunks_exact(4);
    Ok(match dtype {
        GvolDtype::F32 => {
            let data = words
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            GvolPayload::F32(Volume::new(grid, data)?)
        }
        GvolDtype::I32 => GvolPayload::I32 {
            grid,
            values: words
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        },
    })
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = encode_header(v.grid(), GvolDtype::F32);
    out.reserve(v.data().len() * 4);
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn encode_labels(v: &LabelVolume) -> Vec<u8> {
    let mut out = encode_header(v.grid(), GvolDtype::I32);
    out.reserve(v.labels().len() * 4);
    for &x in v.labels() {
        out.extend_from_slice(&(x as i32).to_le_bytes());
    }
    out
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_any(path: impl AsRef<Path>) -> Result<GvolPayload> {
    decode(&read_bytes(path.as_ref())?)
}

/// Reads a real volume; integer payloads are widened to f32.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    match read_any(path)? {
        GvolPayload::F32(v) => Ok(v),
        GvolPayload::I32 { grid, values } => {
            Volume::new(grid, values.into_iter().map(|x| x as f32).collect())
        }
    }
}

/// Reads a label volume; the payload must be i32 within the label alphabet.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    match read_any(path)? {
        GvolPayload::F32(_) => Err(VolumeError::MalformedHeader(
            "expected i32 label payload, found f32".into(),
        )),
        GvolPayload::I32 { grid, values } => {
            let mut labels = Vec::with_capacity(values.len());
            for (index, v) in values.into_iter().enumerate() {
                if !(0..super::Label::COUNT as i32).contains(&v) {
                    return Err(VolumeError::BadLabel {
                        value: v as i64,
                        index,
                    });
                }
                labels.push(v as u8);
            }
            LabelVolume::new(grid, labels)
        }
    }
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_volume(v))
}

pub fn write_labels(v: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_labels(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_volume(seed: u64) -> Volume {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = Grid::new([8, 8, 8], [0.5, 1.0, 3.0], [-1.0, 2.0, 7.5]).unwrap();
        let data = (0..g.len()).map(|_| rng.random_range(-1e3f32..1e3)).collect();
        Volume::new(g, data).unwrap()
    }

    #[test]
    fn file_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.gvol");
        let v = random_volume(3);
        write_volume(&v, &p).unwrap();
        let back = read_volume(&p).unwrap();
        assert_eq!(back.grid(), v.grid());
        assert!(back
            .data()
            .iter()
            .zip(v.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn header_layout_is_fixed() {
        let v = random_volume(1);
        let bytes = encode_volume(&v);
        assert_eq!(&bytes[..4], b"GVOL");
        assert_eq!(u32_at(&bytes, 4), 1);
        assert_eq!(u32_at(&bytes, 8), 0);
        assert_eq!(u32_at(&bytes, 12), 8);
        assert_eq!(f64_at(&bytes, 40), 3.0);
        assert_eq!(f64_at(&bytes, 64), 7.5);
        assert_eq!(bytes.len(), HEADER_LEN + 512 * 4);
    }

    #[test]
    fn zero_dim_is_malformed_header() {
        let mut bytes = encode_volume(&random_volume(2));
        bytes[12..16].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(VolumeError::MalformedHeader(_))));
    }

    #[test]
    fn short_payload_is_truncation() {
        let bytes = encode_volume(&random_volume(2));
        let cut = &bytes[..bytes.len() - 4];
        assert!(matches!(
            decode(cut),
            Err(VolumeError::Truncated { expected: 2048, found: 2044 })
        ));
    }

    #[test]
    fn huge_dims_overflow() {
        let mut bytes = encode_volume(&random_volume(2));
        for off in [12, 16, 20] {
            bytes[off..off + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(decode(&bytes), Err(VolumeError::DimOverflow(_))));
    }

    #[test]
    fn bad_magic_and_dtype() {
        let mut bytes = encode_volume(&random_volume(2));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(VolumeError::MalformedHeader(_))));
        let mut bytes = encode_volume(&random_volume(2));
        bytes[8] = 9;
        assert!(matches!(decode(&bytes), Err(VolumeError::MalformedHeader(_))));
    }

    #[test]
    fn labels_round_trip_and_validate() {
        let g = Grid::unit([3, 2, 1]).unwrap();
        let l = LabelVolume::new(g, vec![0, 1, 2, 3, 4, 0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.gvol");
        write_labels(&l, &p).unwrap();
        assert_eq!(read_labels(&p).unwrap(), l);
        let mut bytes = encode_labels(&l);
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&7i32.to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(
            read_labels(&p),
            Err(VolumeError::BadLabel { value: 7, index: 5 })
        ));
    }

    proptest::proptest! {
        #[test]
        fn round_trip_any_finite_payload(bits in proptest::collection::vec(proptest::num::f32::NORMAL | proptest::num::f32::SUBNORMAL | proptest::num::f32::NEGATIVE | proptest::num::f32::ZERO, 24)) {
            let g = Grid::new([2, 3, 4], [0.25, 1.0, 2.0], [1.0, -1.0, 0.0]).unwrap();
            let v = Volume::new(g, bits).unwrap();
            match decode(&encode_volume(&v)).unwrap() {
                GvolPayload::F32(back) => proptest::prop_assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits())),
                _ => proptest::prop_assert!(false),
            }
        }
    }
}
