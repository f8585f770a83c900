use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Mesh, MeshError};

fn normal(t: [[f64; 3]; 3]) -> [f32; 3] {
    let u = [0, 1, 2].map(|a| t[1][a] - t[0][a]);
    let v = [0, 1, 2].map(|a| t[2][a] - t[0][a]);
    let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if len > 0.0 {
        n.map(|c| (c / len) as f32)
    } else {
        [0.0; 3]
    }
}

/// Binary STL.
pub fn write_stl(mesh: &Mesh, out: &mut impl Write) -> Result<(), MeshError> {
    let mut header = [0u8; 80];
    let tag = b"grooveforge binary STL";
    header[..tag.len()].copy_from_slice(tag);
    out.write_all(&header)?;
    out.write_all(&(mesh.triangles.len() as u32).to_le_bytes())?;
    for t in 0..mesh.triangles.len() {
        let tri = mesh.triangle(t);
        for c in normal(tri) {
            out.write_all(&c.to_le_bytes())?;
        }
        for v in tri {
            for c in v {
                out.write_all(&(c as f32).to_le_bytes())?;
            }
        }
        out.write_all(&[0, 0])?;
    }
    Ok(())
}

/// Reads a binary STL, merging vertices with identical coordinates.
pub fn read_stl(input: &mut impl Read) -> Result<Mesh, MeshError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 84 {
        return Err(MeshError::Malformed("STL shorter than its header".into()));
    }
    let n = u32::from_le_bytes(bytes[80..84].try_into().unwrap()) as usize;
    if bytes.len() < 84 + 50 * n {
        return Err(MeshError::Malformed(format!("STL declares {n} triangles but is truncated")));
    }
    let mut mesh = Mesh::default();
    let mut index: HashMap<[u32; 3], u32> = HashMap::new();
    for t in 0..n {
        let rec = &bytes[84 + 50 * t..84 + 50 * (t + 1)];
        let mut ids = [0u32; 3];
        for (v, id) in ids.iter_mut().enumerate() {
            let bits: [u32; 3] = std::array::from_fn(|a| {
                let o = 12 + 12 * v + 4 * a;
                u32::from_le_bytes(rec[o..o + 4].try_into().unwrap())
            });
            *id = *index.entry(bits).or_insert_with(|| {
                mesh.vertices.push(bits.map(|b| f32::from_bits(b) as f64));
                (mesh.vertices.len() - 1) as u32
            });
        }
        mesh.triangles.push(ids);
    }
    Ok(mesh)
}

/// ASCII PLY, optionally with a per-vertex `distance` property.
pub fn write_ply(mesh: &Mesh, distance: Option<&[f64]>, out: &mut impl Write) -> Result<(), MeshError> {
    if let Some(d) = distance {
        if d.len() != mesh.vertices.len() {
            return Err(MeshError::Malformed(format!(
                "{} distances for {} vertices",
                d.len(),
                mesh.vertices.len()
            )));
        }
    }
    writeln!(out, "ply\nformat ascii 1.0\ncomment grooveforge")?;
    writeln!(out, "element vertex {}", mesh.vertices.len())?;
    writeln!(out, "property double x\nproperty double y\nproperty double z")?;
    if distance.is_some() {
        writeln!(out, "property double distance")?;
    }
    writeln!(out, "element face {}", mesh.triangles.len())?;
    writeln!(out, "property list uchar int vertex_indices\nend_header")?;
    for (i, v) in mesh.vertices.iter().enumerate() {
        match distance {
            Some(d) => writeln!(out, "{} {} {} {}", v[0], v[1], v[2], d[i])?,
            None => writeln!(out, "{} {} {}", v[0], v[1], v[2])?,
        }
    }
    for t in &mesh.triangles {
        writeln!(out, "3 {} {} {}", t[0], t[1], t[2])?;
    }
    Ok(())
}

/// Reads an ASCII PLY with triangular (or fan-split polygonal) faces.
/// Returns the `distance` vertex property when present.
pub fn read_ply(input: &mut impl Read) -> Result<(Mesh, Option<Vec<f64>>), MeshError> {
    let bad = |m: String| MeshError::Malformed(m);
    let mut lines = BufReader::new(input).lines();
    let mut next = || -> Result<String, MeshError> {
        lines
            .next()
            .ok_or_else(|| MeshError::Malformed("unexpected end of PLY".into()))?
            .map_err(MeshError::from)
    };
    if next()?.trim() != "ply" {
        return Err(bad("missing ply magic".into()));
    }
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    loop {
        let line = next()?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => return Err(MeshError::Unsupported(format!("PLY format {fmt}"))),
            ["element", name, count] => {
                let count = count.parse().map_err(|_| bad(format!("bad element count {count}")))?;
                elements.push((name.to_string(), count, Vec::new()));
            }
            ["property", "list", .., name] | ["property", _, name] => {
                let el = elements.last_mut().ok_or_else(|| bad("property before element".into()))?;
                el.2.push(name.to_string());
            }
            ["end_header"] => break,
            _ => {}
        }
    }
    let mut mesh = Mesh::default();
    let mut distance = None;
    for (name, count, props) in &elements {
        match name.as_str() {
            "vertex" => {
                let col = |p: &str| props.iter().position(|q| q == p);
                let (x, y, z) = (
                    col("x").ok_or_else(|| bad("vertex without x".into()))?,
                    col("y").ok_or_else(|| bad("vertex without y".into()))?,
                    col("z").ok_or_else(|| bad("vertex without z".into()))?,
                );
                let dcol = col("distance");
                let mut dist = Vec::new();
                for _ in 0..*count {
                    let line = next()?;
                    let vals: Vec<f64> = line
                        .split_whitespace()
                        .map(|w| w.parse::<f64>().map_err(|_| bad(format!("bad number {w}"))))
                        .collect::<Result<_, _>>()?;
                    if vals.len() < props.len() {
                        return Err(bad(format!("vertex line has {} values", vals.len())));
                    }
                    mesh.vertices.push([vals[x], vals[y], vals[z]]);
                    if let Some(d) = dcol {
                        dist.push(vals[d]);
                    }
                }
                if dcol.is_some() {
                    distance = Some(dist);
                }
            }
            "face" => {
                for _ in 0..*count {
                    let line = next()?;
                    let vals: Vec<u32> = line
                        .split_whitespace()
                        .map(|w| w.parse::<u32>().map_err(|_| bad(format!("bad index {w}"))))
                        .collect::<Result<_, _>>()?;
                    let k = *vals.first().ok_or_else(|| bad("empty face line".into()))? as usize;
                    if k < 3 || vals.len() < k + 1 {
                        return Err(bad(format!("face with {k} vertices")));
                    }
                    for i in 1..k - 1 {
                        mesh.triangles.push([vals[1], vals[1 + i], vals[2 + i]]);
                    }
                }
            }
            _ => {
                for _ in 0..*count {
                    next()?;
                }
            }
        }
    }
    if !mesh.validate() {
        return Err(bad("face index out of range".into()));
    }
    Ok((mesh, distance))
}

/// Reads `.ply` or `.stl` by extension.
pub fn read_mesh(path: impl AsRef<Path>) -> Result<Mesh, MeshError> {
    let path = path.as_ref();
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let mut f = std::fs::File::open(path)?;
    match ext.as_str() {
        "ply" => Ok(read_ply(&mut f)?.0),
        "stl" => read_stl(&mut f),
        other => Err(MeshError::Unsupported(format!("extension '{other}'"))),
    }
}

/// Writes `.ply` (with optional distances) or `.stl` by extension.
pub fn write_mesh(path: impl AsRef<Path>, mesh: &Mesh, distance: Option<&[f64]>) -> Result<(), MeshError> {
    let path = path.as_ref();
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let mut buf = Vec::new();
    match ext.as_str() {
        "ply" => write_ply(mesh, distance, &mut buf)?,
        "stl" => write_stl(mesh, &mut buf)?,
        other => return Err(MeshError::Unsupported(format!("extension '{other}'"))),
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}
