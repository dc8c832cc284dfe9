use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mesh::MeshScan;
use crate::error::{Error, Result};

const EDGE_ITERATIONS: usize = 60;

/// Zero set of the determinant extracted from a [`MeshScan`].
///
/// Vertices lie on mesh edges with a sign change. `cells` are segments
/// (`d = 2`) or triangles (`d = 3`) indexing `vertices`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalSet {
    pub dim: usize,
    pub vertices: Vec<Vec<f64>>,
    /// Determinant at each vertex after refinement (`None` if the refined
    /// point could not be evaluated and the interpolated point was kept).
    pub vertex_det: Vec<Option<f64>>,
    /// Mesh node pair carrying each vertex.
    pub edges: Vec<(usize, usize)>,
    pub cells: Vec<Vec<usize>>,
    /// Chains of vertices along segments (`d = 2` only).
    pub polylines: Vec<Polyline>,
    /// Mesh cells skipped because a corner failed.
    pub skipped_cells: usize,
    /// Vertices whose refinement stopped above the tolerance.
    pub unrefined: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Polyline {
    pub vertices: Vec<usize>,
    pub closed: bool,
}

impl CriticalSet {
    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }
}

#[inline]
fn positive(x: f64) -> bool {
    // exact zeros count as positive
    x >= 0.0
}

struct Builder {
    keys: HashMap<(usize, usize), usize>,
    edges: Vec<(usize, usize)>,
    cells: Vec<Vec<usize>>,
}

impl Builder {
    fn vertex(&mut self, a: usize, b: usize) -> usize {
        let key = if a < b { (a, b) } else { (b, a) };
        let next = self.edges.len();
        *self.keys.entry(key).or_insert_with(|| {
            self.edges.push(key);
            next
        })
    }
}

/// Marching squares (`d = 2`) or marching tetrahedra on the Kuhn split of
/// each cube (`d = 3`), followed by root refinement along every crossing
/// edge with `refine` (a determinant evaluator) until `|det| <= eps_onset`.
/// Without `refine` vertices are linearly interpolated.
pub fn extract_critical_set<F>(scan: &MeshScan, refine: Option<&F>, eps_onset: f64) -> Result<CriticalSet>
where
    F: Fn(&[f64]) -> Option<f64> + Sync,
{
    let d = scan.dim();
    let mut b = Builder { keys: HashMap::new(), edges: Vec::new(), cells: Vec::new() };
    let skipped = match d {
        2 => march_squares(scan, &mut b),
        3 => march_tetrahedra(scan, &mut b),
        _ => return Err(Error::InvalidDimension { expected: 3, got: d }),
    };
    let refined: Vec<(Vec<f64>, Option<f64>, bool)> = b
        .edges
        .par_iter()
        .map(|&(i, j)| {
            let (xa, xb) = (scan.node(i), scan.node(j));
            let (fa, fb) = (scan.det[i].expect("crossing edges join evaluated nodes"), scan.det[j].expect("evaluated"));
            refine_edge(&xa, &xb, fa, fb, refine, eps_onset)
        })
        .collect();
    let unrefined = refined.iter().filter(|r| !r.2).count();
    let (vertices, vertex_det): (Vec<_>, Vec<_>) = refined.into_iter().map(|(x, f, _)| (x, f)).unzip();
    let polylines = if d == 2 { chain_segments(vertices.len(), &b.cells) } else { Vec::new() };
    Ok(CriticalSet { dim: d, vertices, vertex_det, edges: b.edges, cells: b.cells, polylines, skipped_cells: skipped, unrefined })
}

fn lerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect()
}

/// Illinois false position on the segment `[xa, xb]`.
fn refine_edge<F>(xa: &[f64], xb: &[f64], fa: f64, fb: f64, f: Option<&F>, eps: f64) -> (Vec<f64>, Option<f64>, bool)
where
    F: Fn(&[f64]) -> Option<f64>,
{
    let t_lin = if fa == fb { 0.5 } else { fa / (fa - fb) };
    let Some(f) = f else {
        return (lerp(xa, xb, t_lin), None, false);
    };
    if fa.abs() <= eps {
        return (xa.to_vec(), Some(fa), true);
    }
    if fb.abs() <= eps {
        return (xb.to_vec(), Some(fb), true);
    }
    let (mut t0, mut f0, mut t1, mut f1) = (0.0, fa, 1.0, fb);
    let mut side = 0i8;
    let mut best = (lerp(xa, xb, t_lin), None::<f64>);
    for _ in 0..EDGE_ITERATIONS {
        let t = if f0 == f1 { 0.5 * (t0 + t1) } else { t0 - f0 * (t1 - t0) / (f1 - f0) };
        let t = if t > t0.min(t1) && t < t0.max(t1) { t } else { 0.5 * (t0 + t1) };
        let x = lerp(xa, xb, t);
        let Some(ft) = f(&x).filter(|v| v.is_finite()) else {
            return (best.0, best.1, false);
        };
        if best.1.is_none_or(|b| ft.abs() < b.abs()) {
            best = (x.clone(), Some(ft));
        }
        if ft.abs() <= eps {
            return (x, Some(ft), true);
        }
        if positive(ft) == positive(f1) {
            t1 = t;
            f1 = ft;
            if side == 1 {
                f0 *= 0.5;
            }
            side = 1;
        } else {
            t0 = t;
            f0 = ft;
            if side == -1 {
                f1 *= 0.5;
            }
            side = -1;
        }
        if (t1 - t0).abs() < 1e-15 {
            break;
        }
    }
    (best.0, best.1, false)
}

fn march_squares(scan: &MeshScan, b: &mut Builder) -> usize {
    let (nx, ny) = (scan.res[0], scan.res[1]);
    let mut skipped = 0;
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let c = [j * nx + i, j * nx + i + 1, (j + 1) * nx + i + 1, (j + 1) * nx + i];
            let Some(f) = corner_values(scan, &c) else {
                skipped += 1;
                continue;
            };
            let s: Vec<bool> = f.iter().map(|&x| positive(x)).collect();
            let crossing: Vec<usize> = (0..4).filter(|&e| s[e] != s[(e + 1) % 4]).collect();
            let edge = |e: usize| (c[e], c[(e + 1) % 4]);
            match crossing.len() {
                2 => {
                    let (a, bb) = (edge(crossing[0]), edge(crossing[1]));
                    let (va, vb) = (b.vertex(a.0, a.1), b.vertex(bb.0, bb.1));
                    b.cells.push(vec![va, vb]);
                }
                4 => {
                    // saddle: the centre value decides which corners are cut off
                    let centre = positive(0.25 * f.iter().sum::<f64>());
                    let pairs = if centre == s[0] { [(0, 1), (2, 3)] } else { [(3, 0), (1, 2)] };
                    for (ea, eb) in pairs {
                        let (a, bb) = (edge(ea), edge(eb));
                        let (va, vb) = (b.vertex(a.0, a.1), b.vertex(bb.0, bb.1));
                        b.cells.push(vec![va, vb]);
                    }
                }
                _ => {}
            }
        }
    }
    skipped
}

fn corner_values(scan: &MeshScan, nodes: &[usize]) -> Option<Vec<f64>> {
    nodes.iter().map(|&n| scan.det[n]).collect()
}

const KUHN: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

fn march_tetrahedra(scan: &MeshScan, b: &mut Builder) -> usize {
    let (nx, ny, nz) = (scan.res[0], scan.res[1], scan.res[2]);
    let mut skipped = 0;
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let corner = |bits: usize| (i + (bits & 1)) + nx * ((j + ((bits >> 1) & 1)) + ny * (k + ((bits >> 2) & 1)));
                let nodes: Vec<usize> = (0..8).map(corner).collect();
                if nodes.iter().any(|&n| scan.det[n].is_none()) {
                    skipped += 1;
                    continue;
                }
                for perm in KUHN {
                    let b1 = 1 << perm[0];
                    let b2 = b1 | (1 << perm[1]);
                    let tet = [nodes[0], nodes[b1], nodes[b2], nodes[7]];
                    march_tet(scan, b, tet);
                }
            }
        }
    }
    skipped
}

fn march_tet(scan: &MeshScan, b: &mut Builder, tet: [usize; 4]) {
    let s: Vec<bool> = tet.iter().map(|&n| positive(scan.det[n].expect("checked"))).collect();
    let pos: Vec<usize> = (0..4).filter(|&i| s[i]).collect();
    let neg: Vec<usize> = (0..4).filter(|&i| !s[i]).collect();
    match (pos.len(), neg.len()) {
        (1, 3) | (3, 1) => {
            let (lone, rest) = if pos.len() == 1 { (pos[0], neg) } else { (neg[0], pos) };
            let tri: Vec<usize> = rest.iter().map(|&r| b.vertex(tet[lone], tet[r])).collect();
            b.cells.push(tri);
        }
        (2, 2) => {
            let (p, q) = (pos, neg);
            let v = [
                b.vertex(tet[p[0]], tet[q[0]]),
                b.vertex(tet[p[0]], tet[q[1]]),
                b.vertex(tet[p[1]], tet[q[1]]),
                b.vertex(tet[p[1]], tet[q[0]]),
            ];
            b.cells.push(vec![v[0], v[1], v[2]]);
            b.cells.push(vec![v[0], v[2], v[3]]);
        }
        _ => {}
    }
}

/// Joins segments into chains; open chains first (from their lowest
/// endpoint), then cycles (from their lowest vertex).
fn chain_segments(nv: usize, segments: &[Vec<usize>]) -> Vec<Polyline> {
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nv];
    for (si, s) in segments.iter().enumerate() {
        adj[s[0]].push(si);
        adj[s[1]].push(si);
    }
    let mut used = vec![false; segments.len()];
    let mut out = Vec::new();
    let walk = |start: usize, used: &mut Vec<bool>| -> Vec<usize> {
        let mut chain = vec![start];
        let mut cur = start;
        while let Some(&si) = adj[cur].iter().find(|&&si| !used[si]) {
            used[si] = true;
            let s = &segments[si];
            cur = if s[0] == cur { s[1] } else { s[0] };
            chain.push(cur);
        }
        chain
    };
    for v in 0..nv {
        if adj[v].len() == 1 && !used[adj[v][0]] {
            out.push(Polyline { vertices: walk(v, &mut used), closed: false });
        }
    }
    for v in 0..nv {
        if adj[v].iter().any(|&si| !used[si]) {
            let mut chain = walk(v, &mut used);
            let closed = chain.len() > 2 && chain.first() == chain.last();
            if closed {
                chain.pop();
            }
            out.push(Polyline { vertices: chain, closed });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::mesh::{scan_with, MeshBox};
    use super::*;
    use crate::linalg::norm;

    fn circle(v: &[f64]) -> Option<f64> {
        Some(norm(v).powi(2) - 1.0)
    }

    #[test]
    fn unit_circle_from_grid() {
        let bx = MeshBox::cube(2, 1.5).unwrap();
        let scan = scan_with(2, &bx, &[31, 31], circle).unwrap();
        let h = 3.0 / 30.0;
        let lin = extract_critical_set::<fn(&[f64]) -> Option<f64>>(&scan, None, 0.0).unwrap();
        assert_eq!(lin.polylines.len(), 1);
        assert!(lin.polylines[0].closed);
        let refined = extract_critical_set(&scan, Some(&circle), 1e-12).unwrap();
        assert_eq!(refined.unrefined, 0);
        for v in &refined.vertices {
            assert!((norm(v) - 1.0).abs() <= h / 10.0);
        }
        assert_eq!(refined.polylines[0].vertices.len(), refined.vertices.len());
    }

    #[test]
    fn sphere_surface_mesh() {
        let bx = MeshBox::cube(3, 1.5).unwrap();
        let scan = scan_with(3, &bx, &[12, 12, 12], circle).unwrap();
        let cs = extract_critical_set(&scan, Some(&circle), 1e-12).unwrap();
        assert!(!cs.cells.is_empty());
        for v in &cs.vertices {
            assert!((norm(v) - 1.0).abs() < 1e-10);
        }
        // closed surface: every edge of the triangulation is shared by two triangles
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &cs.cells {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        assert!(count.values().all(|&c| c == 2));
    }

    #[test]
    fn no_sign_change_gives_empty_set() {
        let scan = scan_with(2, &MeshBox::cube(2, 1.0).unwrap(), &[8, 8], |_| Some(1.0)).unwrap();
        let cs = extract_critical_set(&scan, Some(&|_: &[f64]| Some(1.0)), 1e-8).unwrap();
        assert!(cs.is_empty() && cs.polylines.is_empty());
    }

    #[test]
    fn failed_corners_skip_cells() {
        let scan = scan_with(2, &MeshBox::cube(2, 1.5).unwrap(), &[16, 16], |v| if v[0] > 1.2 { None } else { circle(v) }).unwrap();
        let cs = extract_critical_set(&scan, Some(&circle), 1e-12).unwrap();
        assert!(cs.skipped_cells > 0);
        assert!(!cs.is_empty());
    }

    #[test]
    fn rejects_one_dimensional_scan() {
        let scan = scan_with(1, &MeshBox::cube(1, 1.0).unwrap(), &[8], |_| Some(1.0)).unwrap();
        assert!(extract_critical_set(&scan, Some(&circle), 1e-8).is_err());
    }
}
