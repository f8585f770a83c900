//! Isosurface extraction and surface-to-surface distance maps.

mod distance;
mod io;

use std::collections::HashMap;
use std::sync::OnceLock;

use rayon::prelude::*;
use thiserror::Error;

pub use crate::volume::Mesh;
use crate::volume::{Label, LabelVolume, Volume};

pub use distance::{
    hausdorff, point_triangle_distance, signed_surface_distance, surface_distance, DistanceMap, DistanceStats,
};
pub use io::{read_mesh, read_ply, read_stl, write_mesh, write_ply, write_stl};

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("marching cubes needs at least 2 samples per axis, got {0:?}")]
    TooSmall([usize; 3]),
    #[error("input mesh is empty")]
    EmptyMesh,
    #[error("malformed mesh file: {0}")]
    Malformed(String),
    #[error("unsupported mesh format: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Corner `c` of a cell sits at offset `(c & 1, c >> 1 & 1, c >> 2 & 1)`.
const fn corner(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// The twelve cell edges as corner pairs, the lower corner first.
const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

fn edge_between(a: usize, b: usize) -> usize {
    let (lo, hi) = (a.min(b), a.max(b));
    EDGES.iter().position(|&e| e == (lo, hi)).expect("adjacent corners")
}

/// Triangles (as cell-edge triples) for each of the 256 inside/outside
/// corner configurations.
///
/// Built by walking the six faces of the cell: each face contributes
/// segments between its crossing edges, segments chain into closed loops and
/// each loop is fanned into triangles. On a face with diagonally opposite
/// inside corners, every inside corner is cut off separately. The decision
/// only depends on the face, so neighbouring cells always agree and the
/// resulting surface is closed.
fn case_table() -> &'static [Vec<[u8; 3]>; 256] {
    static TABLE: OnceLock<[Vec<[u8; 3]>; 256]> = OnceLock::new();
    TABLE.get_or_init(|| std::array::from_fn(build_case))
}

fn build_case(config: usize) -> Vec<[u8; 3]> {
    let inside = |c: usize| config >> c & 1 == 1;
    let mut links: Vec<Vec<usize>> = vec![Vec::new(); 12];
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2 {
            let ring: [usize; 4] = [(0, 0), (1, 0), (1, 1), (0, 1)].map(|(a, b)| (side << axis) | (a << u) | (b << v));
            let crossing: Vec<usize> = (0..4)
                .filter(|&i| inside(ring[i]) != inside(ring[(i + 1) % 4]))
                .collect();
            let edge = |i: usize| edge_between(ring[i], ring[(i + 1) % 4]);
            let mut connect = |a: usize, b: usize| {
                links[a].push(b);
                links[b].push(a);
            };
            match crossing.len() {
                0 => {}
                2 => connect(edge(crossing[0]), edge(crossing[1])),
                4 => {
                    // Ring edge i joins corners i and i+1; cut off each
                    // inside corner with the two edges touching it.
                    for i in 0..4 {
                        if inside(ring[i]) {
                            connect(edge((i + 3) % 4), edge(i));
                        }
                    }
                }
                _ => unreachable!("a face has an even number of crossings"),
            }
        }
    }
    let mut tris = Vec::new();
    let mut used = [false; 12];
    for start in 0..12 {
        if used[start] || links[start].is_empty() {
            continue;
        }
        let mut ring = vec![start];
        used[start] = true;
        let (mut prev, mut cur) = (start, links[start][0]);
        while cur != start {
            used[cur] = true;
            ring.push(cur);
            let next = if links[cur][0] == prev { links[cur][1] } else { links[cur][0] };
            prev = cur;
            cur = next;
        }
        // Orient the loop so its normal points from inside to outside.
        let mid = |e: usize| {
            let (a, b) = EDGES[e];
            let (pa, pb) = (corner(a), corner(b));
            [0, 1, 2].map(|k| 0.5 * (pa[k] + pb[k]) as f64)
        };
        let pts: Vec<[f64; 3]> = ring.iter().map(|&e| mid(e)).collect();
        let mut normal = [0.0; 3];
        for i in 0..pts.len() {
            let (p, q) = (pts[i], pts[(i + 1) % pts.len()]);
            normal[0] += (p[1] - q[1]) * (p[2] + q[2]);
            normal[1] += (p[2] - q[2]) * (p[0] + q[0]);
            normal[2] += (p[0] - q[0]) * (p[1] + q[1]);
        }
        let mut outward = [0.0; 3];
        for &e in &ring {
            let (a, b) = EDGES[e];
            let (i, o) = if inside(a) { (a, b) } else { (b, a) };
            let (pi, po) = (corner(i), corner(o));
            for k in 0..3 {
                outward[k] += po[k] as f64 - pi[k] as f64;
            }
        }
        if normal.iter().zip(&outward).map(|(a, b)| a * b).sum::<f64>() < 0.0 {
            ring.reverse();
        }
        for i in 1..ring.len() - 1 {
            tris.push([ring[0] as u8, ring[i] as u8, ring[i + 1] as u8]);
        }
    }
    tris
}

/// Extracts the `isolevel` surface of `field`; samples strictly above the
/// level are inside. Triangles wind counter-clockwise seen from outside.
/// A field without crossings yields an empty mesh.
pub fn marching_cubes(field: &Volume, isolevel: f64) -> Result<Mesh, MeshError> {
    let dims = field.dims();
    if dims.iter().any(|&d| d < 2) {
        return Err(MeshError::TooSmall(dims));
    }
    let g = field.grid();
    let [nx, ny, nz] = dims;
    let data = field.data();
    let table = case_table();
    let value = |i: usize, j: usize, k: usize| data[i + nx * (j + ny * k)] as f64;

    // Triangles per z-layer as global edge ids, gathered in parallel and
    // numbered serially so vertex order does not depend on scheduling.
    let layers: Vec<Vec<[(u64, [f64; 3]); 3]>> = (0..nz - 1)
        .into_par_iter()
        .map(|k| {
            let mut out = Vec::new();
            for j in 0..ny - 1 {
                for i in 0..nx - 1 {
                    let mut config = 0usize;
                    let mut vals = [0.0; 8];
                    for (c, v) in vals.iter_mut().enumerate() {
                        let o = corner(c);
                        *v = value(i + o[0], j + o[1], k + o[2]);
                        if *v > isolevel {
                            config |= 1 << c;
                        }
                    }
                    if config == 0 || config == 255 {
                        continue;
                    }
                    let vertex = |e: u8| {
                        let (a, b) = EDGES[e as usize];
                        let (oa, ob) = (corner(a), corner(b));
                        let axis = (0..3).find(|&x| oa[x] != ob[x]).unwrap();
                        let base = [i + oa[0], j + oa[1], k + oa[2]];
                        let id = 3 * g.linear(base[0], base[1], base[2]) as u64 + axis as u64;
                        let t = ((isolevel - vals[a]) / (vals[b] - vals[a])).clamp(0.0, 1.0);
                        let p = g.index_to_world_unchecked(base);
                        let mut q = p;
                        q[axis] += t * g.spacing()[axis];
                        (id, q)
                    };
                    for tri in &table[config] {
                        out.push(tri.map(vertex));
                    }
                }
            }
            out
        })
        .collect();

    let mut index: HashMap<u64, u32> = HashMap::new();
    let mut mesh = Mesh::default();
    for layer in layers {
        for tri in layer {
            let ids = tri.map(|(id, p)| {
                *index.entry(id).or_insert_with(|| {
                    mesh.vertices.push(p);
                    (mesh.vertices.len() - 1) as u32
                })
            });
            if ids[0] != ids[1] && ids[1] != ids[2] && ids[0] != ids[2] {
                mesh.triangles.push(ids);
            }
        }
    }
    Ok(mesh)
}

/// Mean over the 3×3×3 neighbourhood, restricted to in-bounds samples.
pub fn box_filter(field: &Volume) -> Volume {
    let [nx, ny, nz] = field.dims();
    let src = field.data();
    // Separable running means along each axis.
    let mut a = src.to_vec();
    let mut b = vec![0f32; a.len()];
    let strides = [1, nx, nx * ny];
    for axis in 0..3 {
        let n = [nx, ny, nz][axis];
        let s = strides[axis];
        for idx in 0..a.len() {
            let pos = (idx / s) % n;
            let lo = pos.saturating_sub(1);
            let hi = (pos + 1).min(n - 1);
            let mut sum = 0f32;
            for q in lo..=hi {
                sum += a[idx - pos * s + q * s];
            }
            b[idx] = sum / (hi - lo + 1) as f32;
        }
        std::mem::swap(&mut a, &mut b);
    }
    Volume::new(*field.grid(), a).expect("averages of finite values")
}

/// Surface of one label: its indicator, smoothed once, at level 0.5.
pub fn label_mesh(labels: &LabelVolume, label: Label) -> Result<Mesh, MeshError> {
    marching_cubes(&box_filter(&labels.indicator(label)), 0.5)
}

/// Signed enclosed volume (positive for outward-oriented closed meshes).
pub fn signed_volume(mesh: &Mesh) -> f64 {
    (0..mesh.triangles.len())
        .map(|t| {
            let [a, b, c] = mesh.triangle(t);
            a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0]) + a[2] * (b[0] * c[1] - b[1] * c[0])
        })
        .sum::<f64>()
        / 6.0
}

pub fn surface_area(mesh: &Mesh) -> f64 {
    (0..mesh.triangles.len())
        .map(|t| {
            let [a, b, c] = mesh.triangle(t);
            let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
            let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
            0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
        })
        .sum()
}

/// Undirected edges with the number of triangles using each.
pub fn edge_counts(mesh: &Mesh) -> HashMap<(u32, u32), usize> {
    let mut counts = HashMap::new();
    for t in &mesh.triangles {
        for i in 0..3 {
            let (a, b) = (t[i], t[(i + 1) % 3]);
            *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    }
    counts
}

/// Every edge is shared by exactly two triangles.
pub fn is_watertight(mesh: &Mesh) -> bool {
    !mesh.is_empty() && edge_counts(mesh).values().all(|&c| c == 2)
}
