use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::extract::{extract_critical_set, CriticalSet};
use super::mesh::{scan_mesh, MeshBox, MeshScan};
use crate::linalg::norm;
use super::singular::{cusp_lines, detect_umbilics, refine_cusps, CuspLines, CuspPoint, UmbilicCandidate};
use super::{classify_singular_point, det_at, sample, ChartMap, Classification, Singularity, SingularityTolerances};
use crate::error::{Error, Result};

/// Relative tolerances of the locus pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocusConfig {
    /// `eps_onset = onset_rel * max |det|` over the mesh.
    pub onset_rel: f64,
    pub eps_cusp: f64,
    /// `eps_umb = umb_rel * sigma_1` at the chart origin; vertex labels use it.
    pub umb_rel: f64,
    /// Vertices with `sigma_{d-1} <= umb_screen * eps_umb` seed umbilic refinement.
    pub umb_screen: f64,
    /// A refined minimiser is an umbilic when `sigma_{d-1} <= umb_accept_rel * sigma_1`.
    /// Mesh vertices see `sigma_{d-1}` only to mesh accuracy, so the
    /// refined value is held to numerical rank deficiency.
    pub umb_accept_rel: f64,
    /// Largest tolerated fraction of failed mesh nodes.
    pub max_failure_fraction: f64,
}

impl Default for LocusConfig {
    fn default() -> Self {
        Self { onset_rel: 1e-8, eps_cusp: 0.05, umb_rel: 1e-3, umb_screen: 50.0, umb_accept_rel: 1e-8, max_failure_fraction: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UmbilicReport {
    pub candidates: Vec<UmbilicCandidate>,
    /// Smallest `sigma_{d-1}` over critical-set vertices.
    pub min_sigma_vertex: Option<f64>,
    /// Smallest `sigma_{d-1}` after refinement.
    pub min_sigma_refined: Option<f64>,
}

impl UmbilicReport {
    pub fn accepted(&self) -> impl Iterator<Item = &UmbilicCandidate> {
        self.candidates.iter().filter(|c| c.accepted)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocusDiagram {
    pub bounds: MeshBox,
    pub res: Vec<usize>,
    pub failed_nodes: usize,
    pub failure_fraction: f64,
    pub eps_onset: f64,
    pub eps_umb: f64,
    pub eps_umb_accept: f64,
    pub eps_cusp: f64,
    pub critical_set: CriticalSet,
    /// `phi` of each critical-set vertex.
    pub locus: Vec<Vec<f64>>,
    pub labels: Vec<Singularity>,
    pub kernel_cosine: Vec<f64>,
    /// Singular values at each vertex, descending.
    pub sigma: Vec<Vec<f64>>,
    /// Vertices removed because the map or its derivatives failed there.
    pub dropped_vertices: usize,
    pub cusps: Vec<CuspPoint>,
    pub cusp_images: Vec<Vec<f64>>,
    pub degenerate_polylines: usize,
    /// Cusp curves on the critical surface (`d = 3`).
    pub cusp_lines: Option<CuspLines>,
    pub cusp_line_images: Option<Vec<Vec<f64>>>,
    pub umbilics: Option<UmbilicReport>,
    pub umbilic_images: Vec<Vec<f64>>,
}

impl LocusDiagram {
    pub fn cusp_count(&self) -> usize {
        self.cusps.iter().filter(|c| c.label == Singularity::Cusp).count()
    }

    pub fn umbilic_count(&self) -> usize {
        self.umbilics.as_ref().map_or(0, |u| u.accepted().count())
    }

    pub fn min_sigma(&self) -> Option<f64> {
        self.umbilics.as_ref().and_then(|u| match (u.min_sigma_vertex, u.min_sigma_refined) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        })
    }
}

/// Keeps the vertices flagged in `keep` and the cells among them.
fn compact(cs: &mut CriticalSet, keep: &[bool]) -> Vec<usize> {
    let mut map = vec![usize::MAX; keep.len()];
    let mut next = 0;
    for (i, &k) in keep.iter().enumerate() {
        if k {
            map[i] = next;
            next += 1;
        }
    }
    let filt = |v: &mut Vec<Vec<f64>>| {
        let old = std::mem::take(v);
        *v = old.into_iter().zip(keep).filter(|(_, &k)| k).map(|(x, _)| x).collect();
    };
    filt(&mut cs.vertices);
    cs.vertex_det = std::mem::take(&mut cs.vertex_det).into_iter().zip(keep).filter(|(_, &k)| k).map(|(x, _)| x).collect();
    cs.edges = std::mem::take(&mut cs.edges).into_iter().zip(keep).filter(|(_, &k)| k).map(|(x, _)| x).collect();
    cs.cells = std::mem::take(&mut cs.cells)
        .into_iter()
        .filter(|c| c.iter().all(|&i| keep[i]))
        .map(|c| c.into_iter().map(|i| map[i]).collect())
        .collect();
    for pl in &mut cs.polylines {
        pl.vertices = pl.vertices.iter().filter(|&&i| keep[i]).map(|&i| map[i]).collect();
    }
    cs.polylines.retain(|p| !p.vertices.is_empty());
    map
}

/// Scan, extraction, forward mapping and classification.
pub fn compute_locus<M: ChartMap>(map: &M, bounds: &MeshBox, res: &[usize], cfg: &LocusConfig) -> Result<LocusDiagram> {
    let d = map.input_dim();
    if bounds.dim() != d || res.len() != d {
        return Err(Error::InvalidDimension { expected: d, got: res.len() });
    }
    let scan = scan_mesh(map, bounds, res)?;
    locus_from_scan(map, &scan, cfg)
}

/// [`compute_locus`] on an existing scan of `map`.
pub fn locus_from_scan<M: ChartMap>(map: &M, scan: &MeshScan, cfg: &LocusConfig) -> Result<LocusDiagram> {
    let d = map.input_dim();
    if scan.dim() != d {
        return Err(Error::InvalidDimension { expected: d, got: scan.dim() });
    }
    let (bounds, res) = (&scan.bounds, &scan.res[..]);
    let failure_fraction = scan.failure_fraction();
    if failure_fraction > cfg.max_failure_fraction {
        return Err(Error::EvaluationFailed(format!(
            "{} of {} mesh nodes failed",
            scan.failures.len(),
            scan.node_count()
        )));
    }
    let eps_onset = cfg.onset_rel * scan.det_scale();
    let refine = |v: &[f64]| det_at(map, v).ok();
    let mut cs = extract_critical_set(scan, Some(&refine), eps_onset)?;
    let reference = sample(map, &vec![0.0; d]).map(|s| s.sigma[0]).unwrap_or(1.0);
    let reference = if reference > 0.0 { reference } else { 1.0 };
    let eps_umb = cfg.umb_rel * reference;
    let eps_umb_accept = cfg.umb_accept_rel * reference;
    let tol = SingularityTolerances { eps_cusp: cfg.eps_cusp, eps_umb };

    let per_vertex: Vec<Option<(Vec<f64>, Classification)>> = cs
        .vertices
        .par_iter()
        .map(|v| {
            let image = map.eval(v).ok()?;
            let c = classify_singular_point(map, v, &tol).ok()?;
            Some((image, c))
        })
        .collect();
    let keep: Vec<bool> = per_vertex.iter().map(Option::is_some).collect();
    let dropped = keep.iter().filter(|k| !**k).count();
    compact(&mut cs, &keep);
    let (locus, classes): (Vec<Vec<f64>>, Vec<Classification>) = per_vertex.into_iter().flatten().unzip();
    let spacing = scan.spacing().into_iter().fold(f64::INFINITY, f64::min);
    let opt_classes: Vec<Option<Classification>> = classes.iter().cloned().map(Some).collect();

    let image_of = |v: &[f64]| map.eval(v).unwrap_or_default();
    let mut diagram = LocusDiagram {
        bounds: bounds.clone(),
        res: res.to_vec(),
        failed_nodes: scan.failures.len(),
        failure_fraction,
        eps_onset,
        eps_umb,
        eps_umb_accept,
        eps_cusp: cfg.eps_cusp,
        labels: classes.iter().map(|c| c.label).collect(),
        kernel_cosine: classes.iter().map(Classification::kernel_cosine).collect(),
        sigma: classes.iter().map(|c| c.sigma.clone()).collect(),
        critical_set: cs,
        locus,
        dropped_vertices: dropped,
        cusps: Vec::new(),
        cusp_images: Vec::new(),
        degenerate_polylines: 0,
        cusp_lines: None,
        cusp_line_images: None,
        umbilics: None,
        umbilic_images: Vec::new(),
    };
    match d {
        2 => {
            let rep = refine_cusps(map, &diagram.critical_set, &opt_classes, &tol, spacing, eps_onset)?;
            diagram.cusp_images = rep.points.iter().map(|p| image_of(&p.chart)).collect();
            diagram.cusps = rep.points;
            diagram.degenerate_polylines = rep.degenerate_polylines;
        }
        3 => {
            let lines = cusp_lines(&diagram.critical_set, &opt_classes)?;
            diagram.cusp_line_images = Some(lines.points.par_iter().map(|p| image_of(p)).collect());
            diagram.cusp_lines = Some(lines);
            let sig: Vec<Option<Vec<f64>>> = diagram.sigma.iter().cloned().map(Some).collect();
            let candidates =
                detect_umbilics(map, &diagram.critical_set, &sig, bounds, spacing, eps_umb_accept, cfg.umb_screen * eps_umb)?;
            let min_sigma_vertex = diagram.sigma.iter().map(|s| s[d - 2]).min_by(f64::total_cmp);
            let min_sigma_refined = candidates.iter().map(|c| c.sigma_pair.0).min_by(f64::total_cmp);
            diagram.umbilic_images = candidates.iter().map(|c| image_of(&c.chart)).collect();
            diagram.umbilics = Some(UmbilicReport { candidates, min_sigma_vertex, min_sigma_refined });
        }
        _ => {}
    }
    Ok(diagram)
}

/// Chart directions for ray searches: equally spaced angles (`d = 2`) or a
/// Fibonacci sphere (`d = 3`).
fn ray_directions(d: usize, count: usize) -> Result<Vec<Vec<f64>>> {
    use std::f64::consts::PI;
    match d {
        2 => Ok((0..count).map(|i| {
            let t = 2.0 * PI * i as f64 / count as f64;
            vec![t.cos(), t.sin()]
        }).collect()),
        3 => {
            let golden = PI * (3.0 - 5f64.sqrt());
            Ok((0..count)
                .map(|i| {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
                    let r = (1.0 - z * z).sqrt();
                    let t = golden * i as f64;
                    vec![r * t.cos(), r * t.sin(), z]
                })
                .collect())
        }
        _ => Err(Error::InvalidDimension { expected: 3, got: d }),
    }
}

/// First radius in `(0, r_max]` along `u` where the determinant changes
/// sign, located to `1e-3 r_max` by bisection.
pub fn first_conjugate_radius<M: ChartMap>(map: &M, u: &[f64], r_max: f64, samples: usize) -> Option<f64> {
    let at = |r: f64| det_at(map, &u.iter().map(|x| r * x).collect::<Vec<_>>()).ok();
    let d0 = at(0.0)?;
    let mut prev = 0.0;
    for i in 1..=samples {
        let r = r_max * i as f64 / samples as f64;
        let dr = at(r)?;
        if (dr >= 0.0) != (d0 >= 0.0) {
            let (mut a, mut b) = (prev, r);
            while b - a > 1e-3 * r_max {
                let c = 0.5 * (a + b);
                if (at(c)? >= 0.0) == (d0 >= 0.0) {
                    a = c;
                } else {
                    b = c;
                }
            }
            return Some(b);
        }
        prev = r;
    }
    None
}

/// Bounding box of the first conjugate set found by ray searches, enlarged
/// by `margin` (relative). Directions without a sign change up to `r_max`
/// contribute `r_max`.
pub fn conjugate_box<M: ChartMap>(map: &M, r_max: f64, rays: usize, margin: f64) -> Result<MeshBox> {
    let d = map.input_dim();
    let dirs = ray_directions(d, rays)?;
    let radii: Vec<f64> = dirs.par_iter().map(|u| first_conjugate_radius(map, u, r_max, 200).unwrap_or(r_max)).collect();
    let mut lo = vec![0.0f64; d];
    let mut hi = vec![0.0f64; d];
    for (u, r) in dirs.iter().zip(&radii) {
        for k in 0..d {
            lo[k] = lo[k].min(r * u[k]);
            hi[k] = hi[k].max(r * u[k]);
        }
    }
    let scale = norm(&hi).max(norm(&lo));
    MeshBox::new(
        lo.iter().map(|x| x * (1.0 + margin) - 1e-3 * scale).collect(),
        hi.iter().map(|x| x * (1.0 + margin) + 1e-3 * scale).collect(),
    )
}
