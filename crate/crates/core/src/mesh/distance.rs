use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Mesh, MeshError};

type V3 = [f64; 3];

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn lerp(a: V3, u: V3, s: f64) -> V3 {
    [a[0] + s * u[0], a[1] + s * u[1], a[2] + s * u[2]]
}

/// Closest point of triangle `abc` to `p` (Voronoi-region walk).
fn closest_point(p: V3, a: V3, b: V3, c: V3) -> V3 {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return lerp(a, ab, d1 / (d1 - d3));
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return lerp(a, ac, d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && d4 - d3 >= 0.0 && d5 - d6 >= 0.0 {
        return lerp(b, sub(c, b), (d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = va + vb + vc;
    if denom == 0.0 {
        // Degenerate triangle: nearest of its three edges.
        let segs = [(a, b), (b, c), (a, c)];
        return segs
            .iter()
            .map(|&(s, e)| {
                let d = sub(e, s);
                let len = dot(d, d);
                let t = if len > 0.0 { (dot(sub(p, s), d) / len).clamp(0.0, 1.0) } else { 0.0 };
                lerp(s, d, t)
            })
            .min_by(|x, y| dot(sub(p, *x), sub(p, *x)).total_cmp(&dot(sub(p, *y), sub(p, *y))))
            .unwrap();
    }
    let v = vb / denom;
    let w = vc / denom;
    [
        a[0] + ab[0] * v + ac[0] * w,
        a[1] + ab[1] * v + ac[1] * w,
        a[2] + ab[2] * v + ac[2] * w,
    ]
}

/// Euclidean distance from `p` to the closed triangle `t`.
pub fn point_triangle_distance(p: V3, t: [V3; 3]) -> f64 {
    let q = closest_point(p, t[0], t[1], t[2]);
    dot(sub(p, q), sub(p, q)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub mean: f64,
    pub max: f64,
    /// Nearest-rank 95th percentile.
    pub p95: f64,
}

impl DistanceStats {
    fn of(values: &[f64]) -> Self {
        let mut s: Vec<f64> = values.iter().map(|v| v.abs()).collect();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Self {
            mean: s.iter().sum::<f64>() / n as f64,
            max: s[n - 1],
            p95: s[rank - 1],
        }
    }
}

/// Per-vertex distances (mm) from one mesh to another.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap {
    pub values: Vec<f64>,
    /// Values carry a sign: positive on the side `b`'s normals point to.
    pub signed: bool,
    /// Over absolute values.
    pub stats: DistanceStats,
}

/// Uniform bucket grid over triangle bounding boxes.
struct TriangleGrid<'a> {
    mesh: &'a Mesh,
    lo: V3,
    cell: f64,
    n: [usize; 3],
    buckets: Vec<Vec<u32>>,
}

impl<'a> TriangleGrid<'a> {
    fn new(mesh: &'a Mesh) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &mesh.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        let ext = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let per_axis = (mesh.triangles.len() as f64).cbrt().ceil().clamp(1.0, 128.0);
        let cell = if ext > 0.0 { ext / per_axis } else { 1.0 };
        let n = [0, 1, 2].map(|a| (((hi[a] - lo[a]) / cell).floor() as usize + 1).min(256));
        let mut grid = Self {
            mesh,
            lo,
            cell,
            n,
            buckets: vec![Vec::new(); n[0] * n[1] * n[2]],
        };
        for t in 0..mesh.triangles.len() {
            let tri = mesh.triangle(t);
            let mut blo = [usize::MAX; 3];
            let mut bhi = [0; 3];
            for p in tri {
                let c = grid.cell_of(p);
                for a in 0..3 {
                    blo[a] = blo[a].min(c[a]);
                    bhi[a] = bhi[a].max(c[a]);
                }
            }
            for k in blo[2]..=bhi[2] {
                for j in blo[1]..=bhi[1] {
                    for i in blo[0]..=bhi[0] {
                        let b = grid.bucket(i, j, k);
                        grid.buckets[b].push(t as u32);
                    }
                }
            }
        }
        grid
    }

    fn cell_of(&self, p: V3) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            let f = ((p[a] - self.lo[a]) / self.cell).floor();
            if f <= 0.0 {
                0
            } else {
                (f as usize).min(self.n[a] - 1)
            }
        })
    }

    fn bucket(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.n[0] * (j + self.n[1] * k)
    }

    /// Nearest triangle to `p` and its distance, searching shells of cells
    /// until no unvisited cell can hold anything closer.
    fn nearest(&self, p: V3) -> (usize, f64) {
        let c = self.cell_of(p);
        let mut best = (usize::MAX, f64::INFINITY);
        let rmax = *self.n.iter().max().unwrap();
        for r in 0..=rmax {
            let lo = [0, 1, 2].map(|a| c[a].saturating_sub(r));
            let hi = [0, 1, 2].map(|a| (c[a] + r).min(self.n[a] - 1));
            for k in lo[2]..=hi[2] {
                for j in lo[1]..=hi[1] {
                    for i in lo[0]..=hi[0] {
                        let shell = i.abs_diff(c[0]).max(j.abs_diff(c[1])).max(k.abs_diff(c[2]));
                        if shell != r {
                            continue;
                        }
                        for &t in &self.buckets[self.bucket(i, j, k)] {
                            let d = point_triangle_distance(p, self.mesh.triangle(t as usize));
                            if d < best.1 || (d == best.1 && (t as usize) < best.0) {
                                best = (t as usize, d);
                            }
                        }
                    }
                }
            }
            let mut bound = f64::INFINITY;
            for a in 0..3 {
                if c[a] > r {
                    bound = bound.min(p[a] - (self.lo[a] + lo[a] as f64 * self.cell));
                }
                if c[a] + r + 1 < self.n[a] {
                    bound = bound.min(self.lo[a] + (hi[a] + 1) as f64 * self.cell - p[a]);
                }
            }
            if best.1 < bound {
                break;
            }
        }
        best
    }
}

fn triangle_normal(t: [V3; 3]) -> V3 {
    cross(sub(t[1], t[0]), sub(t[2], t[0]))
}

fn distances(a: &Mesh, b: &Mesh, signed: bool) -> Result<DistanceMap, MeshError> {
    if a.is_empty() || b.is_empty() {
        return Err(MeshError::EmptyMesh);
    }
    let grid = TriangleGrid::new(b);
    let values: Vec<f64> = a
        .vertices
        .par_iter()
        .map(|&p| {
            let (t, d) = grid.nearest(p);
            if !signed || d == 0.0 {
                return d;
            }
            let tri = b.triangle(t);
            let q = closest_point(p, tri[0], tri[1], tri[2]);
            if dot(sub(p, q), triangle_normal(tri)) < 0.0 {
                -d
            } else {
                d
            }
        })
        .collect();
    let stats = DistanceStats::of(&values);
    Ok(DistanceMap { values, signed, stats })
}

/// Unsigned distance from every vertex of `a` to the surface `b`.
pub fn surface_distance(a: &Mesh, b: &Mesh) -> Result<DistanceMap, MeshError> {
    distances(a, b, false)
}

/// As [`surface_distance`], negative where the vertex lies behind the
/// nearest triangle of `b`.
pub fn signed_surface_distance(a: &Mesh, b: &Mesh) -> Result<DistanceMap, MeshError> {
    distances(a, b, true)
}

/// Symmetric vertex-to-surface Hausdorff distance.
pub fn hausdorff(a: &Mesh, b: &Mesh) -> Result<f64, MeshError> {
    Ok(surface_distance(a, b)?.stats.max.max(surface_distance(b, a)?.stats.max))
}
