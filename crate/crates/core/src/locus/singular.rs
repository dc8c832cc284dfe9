use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::extract::CriticalSet;
use super::mesh::MeshBox;
use super::{classify_singular_point, jacobian_at, ChartMap, Classification, Singularity, SingularityTolerances};
use crate::error::{Error, Result};
use crate::linalg::{dist, dot, norm, svd};

/// A refined (or mesh-accurate) cusp of the critical set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuspPoint {
    pub chart: Vec<f64>,
    pub det: f64,
    pub kernel_cosine: f64,
    pub label: Singularity,
    /// False when Newton failed and the mesh estimate was kept.
    pub refined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuspReport {
    pub points: Vec<CuspPoint>,
    /// Polylines on which the kernel is tangent almost everywhere; cusps
    /// are not isolated there and none are reported.
    pub degenerate_polylines: usize,
}

/// Fraction of cusp-classified vertices above which a polyline is degenerate.
const DEGENERATE_FRACTION: f64 = 0.5;
const CUSP_NEWTON_ITERS: usize = 30;

/// Kernel cosine with the kernel sign aligned to `reference`.
fn aligned_cosine<M: ChartMap>(map: &M, v: &[f64], tol: &SingularityTolerances, reference: &[f64]) -> Result<(f64, f64, Vec<f64>)> {
    let c = classify_singular_point(map, v, tol)?;
    let s = if dot(&c.kernel, reference) < 0.0 { -1.0 } else { 1.0 };
    let k: Vec<f64> = c.kernel.iter().map(|x| s * x).collect();
    Ok((c.det, s * c.kernel_cosine(), k))
}

/// Cusps on a planar critical set.
///
/// Along each polyline the kernel direction is oriented continuously and
/// the sign changes of `k . grad det / |grad det|` are located. From each
/// one, Newton on `(det, k . grad det / |grad det|) = 0` (finite-difference
/// Jacobian) refines the point; on failure the interpolated mesh point is
/// kept and flagged. Points closer than `2 h` are merged.
pub fn refine_cusps<M: ChartMap>(
    map: &M,
    cs: &CriticalSet,
    classes: &[Option<Classification>],
    tol: &SingularityTolerances,
    spacing: f64,
    eps_onset: f64,
) -> Result<CuspReport> {
    if cs.dim != 2 {
        return Err(Error::InvalidDimension { expected: 2, got: cs.dim });
    }
    let mut candidates: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut degenerate = 0;
    for pl in &cs.polylines {
        let idx: Vec<usize> = pl.vertices.iter().copied().filter(|&i| classes[i].as_ref().is_some_and(|c| c.label != Singularity::UmbilicCandidate)).collect();
        if idx.len() < 2 {
            continue;
        }
        let cusp_like = idx.iter().filter(|&&i| classes[i].as_ref().is_some_and(|c| c.label == Singularity::Cusp)).count();
        if cusp_like as f64 > DEGENERATE_FRACTION * idx.len() as f64 {
            degenerate += 1;
            continue;
        }
        let mut ks: Vec<Vec<f64>> = Vec::with_capacity(idx.len());
        let mut fs: Vec<f64> = Vec::with_capacity(idx.len());
        for &i in &idx {
            let c = classes[i].as_ref().expect("filtered");
            let mut k = c.kernel.clone();
            let mut f = c.kernel_cosine();
            if let Some(prev) = ks.last() {
                if dot(prev, &k) < 0.0 {
                    k.iter_mut().for_each(|x| *x = -*x);
                    f = -f;
                }
            }
            ks.push(k);
            fs.push(f);
        }
        let n = idx.len();
        let pairs = if pl.closed { n } else { n - 1 };
        for a in 0..pairs {
            let b = (a + 1) % n;
            let (fa, mut fb) = (fs[a], fs[b]);
            // closing the loop may meet the opposite kernel orientation
            if b == 0 && dot(&ks[a], &ks[b]) < 0.0 {
                fb = -fb;
            }
            if (fa >= 0.0) != (fb >= 0.0) {
                let t = fa / (fa - fb);
                let (va, vb) = (&cs.vertices[idx[a]], &cs.vertices[idx[b]]);
                let v: Vec<f64> = va.iter().zip(vb).map(|(x, y)| x + t * (y - x)).collect();
                candidates.push((v, ks[a].clone()));
            }
        }
    }
    let mut points: Vec<CuspPoint> = Vec::new();
    for (v0, k0) in candidates {
        let refined = cusp_newton(map, &v0, &k0, tol, spacing, eps_onset);
        let (v, ok) = match refined {
            Some(v) => (v, true),
            None => (v0, false),
        };
        let Ok(c) = classify_singular_point(map, &v, tol) else { continue };
        let p = CuspPoint { det: c.det, kernel_cosine: c.kernel_cosine(), label: c.label, chart: v, refined: ok };
        if let Some(q) = points.iter_mut().find(|q| dist(&q.chart, &p.chart) < 2.0 * spacing) {
            if !q.refined && p.refined {
                *q = p;
            }
        } else {
            points.push(p);
        }
    }
    Ok(CuspReport { points, degenerate_polylines: degenerate })
}

fn cusp_newton<M: ChartMap>(map: &M, v0: &[f64], k0: &[f64], tol: &SingularityTolerances, spacing: f64, eps_onset: f64) -> Option<Vec<f64>> {
    let mut v = v0.to_vec();
    let mut kref = k0.to_vec();
    let h = 1e-6 * spacing.max(1e-3);
    for _ in 0..CUSP_NEWTON_ITERS {
        let (d0, f0, k) = aligned_cosine(map, &v, tol, &kref).ok()?;
        kref = k;
        let mut jac = [0.0; 4];
        for j in 0..2 {
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[j] += h;
            vm[j] -= h;
            let (dp, fp, _) = aligned_cosine(map, &vp, tol, &kref).ok()?;
            let (dm, fm, _) = aligned_cosine(map, &vm, tol, &kref).ok()?;
            jac[j] = (dp - dm) / (2.0 * h);
            jac[2 + j] = (fp - fm) / (2.0 * h);
        }
        let det = jac[0] * jac[3] - jac[1] * jac[2];
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let dx = [(jac[3] * d0 - jac[1] * f0) / det, (-jac[2] * d0 + jac[0] * f0) / det];
        v[0] -= dx[0];
        v[1] -= dx[1];
        if dist(&v, v0) > 3.0 * spacing {
            return None;
        }
        if norm(&dx) <= 1e-12 * (1.0 + norm(&v)) {
            let (d1, f1, _) = aligned_cosine(map, &v, tol, &kref).ok()?;
            return (d1.abs() <= eps_onset.max(1e-12) && f1.abs() <= 1e-8).then_some(v);
        }
    }
    None
}

/// Curves on a critical surface where the kernel becomes tangent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CuspLines {
    pub points: Vec<Vec<f64>>,
    pub segments: Vec<[usize; 2]>,
}

/// Marching triangles on the critical surface for the zero set of the
/// kernel cosine. The kernel sign is compared per edge, so an edge crosses
/// when `f_a f_b (k_a . k_b) < 0`.
pub fn cusp_lines(cs: &CriticalSet, classes: &[Option<Classification>]) -> Result<CuspLines> {
    if cs.dim != 3 {
        return Err(Error::InvalidDimension { expected: 3, got: cs.dim });
    }
    let mut out = CuspLines::default();
    let mut keys: HashMap<(usize, usize), usize> = HashMap::new();
    for tri in &cs.cells {
        let Some(cl): Option<Vec<&Classification>> = tri.iter().map(|&i| classes[i].as_ref()).collect() else { continue };
        let mut hits = Vec::new();
        for e in 0..3 {
            let (a, b) = (e, (e + 1) % 3);
            let s = if dot(&cl[a].kernel, &cl[b].kernel) < 0.0 { -1.0 } else { 1.0 };
            let (fa, fb) = (cl[a].kernel_cosine(), s * cl[b].kernel_cosine());
            if (fa >= 0.0) != (fb >= 0.0) {
                let (ia, ib) = (tri[a], tri[b]);
                let key = (ia.min(ib), ia.max(ib));
                let id = *keys.entry(key).or_insert_with(|| {
                    let t = fa / (fa - fb);
                    let (va, vb) = (&cs.vertices[ia], &cs.vertices[ib]);
                    out.points.push(va.iter().zip(vb).map(|(x, y)| x + t * (y - x)).collect());
                    out.points.len() - 1
                });
                hits.push(id);
            }
        }
        if hits.len() == 2 && hits[0] != hits[1] {
            out.segments.push([hits[0], hits[1]]);
        }
    }
    Ok(out)
}

/// Result of minimising `sigma_{d-1}` near one candidate cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UmbilicCandidate {
    pub chart: Vec<f64>,
    /// `(sigma_{d-1}, sigma_d)` at the minimiser.
    pub sigma_pair: (f64, f64),
    pub det: f64,
    /// The minimiser passes the acceptance threshold.
    pub accepted: bool,
    /// Number of screened mesh vertices in the cluster.
    pub cluster_size: usize,
}

fn second_smallest_sigma<M: ChartMap>(map: &M, v: &[f64]) -> Option<(f64, f64, f64)> {
    let (_, jac, det) = jacobian_at(map, v).ok()?;
    let d = map.input_dim();
    let s = svd(&jac, map.output_dim(), d);
    Some((s.sigma[d - 2], s.sigma[d - 1], det))
}

/// Nelder-Mead minimisation of `sigma_{d-1}` inside `bounds`, starting from
/// a simplex of size `step` at `v0`.
pub fn minimize_second_singular_value<M: ChartMap>(map: &M, v0: &[f64], step: f64, bounds: &MeshBox) -> Result<UmbilicCandidate> {
    let d = map.input_dim();
    if d < 2 {
        return Err(Error::InvalidDimension { expected: 2, got: d });
    }
    let inside = |v: &[f64]| v.iter().zip(bounds.lo.iter().zip(&bounds.hi)).all(|(x, (a, b))| x >= a && x <= b);
    let obj = |v: &[f64]| if inside(v) { second_smallest_sigma(map, v).map_or(f64::INFINITY, |s| s.0) } else { f64::INFINITY };
    let x = nelder_mead(obj, v0, step, 400, 1e-14);
    let (s2, s3, det) = second_smallest_sigma(map, &x).ok_or_else(|| Error::EvaluationFailed("umbilic minimiser".into()))?;
    Ok(UmbilicCandidate { chart: x, sigma_pair: (s2, s3), det, accepted: false, cluster_size: 0 })
}

fn nelder_mead(f: impl Fn(&[f64]) -> f64, x0: &[f64], step: f64, max_iter: usize, ftol: f64) -> Vec<f64> {
    let n = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += step;
        let fx = f(&x);
        simplex.push((x, fx));
    }
    let point = |c: &[f64], w: &[f64], t: f64| -> Vec<f64> { c.iter().zip(w).map(|(a, b)| a + t * (b - a)).collect() };
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if (simplex[n].1 - simplex[0].1).abs() <= ftol && simplex[0].1.is_finite() {
            break;
        }
        let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|s| s.0[j]).sum::<f64>() / n as f64).collect();
        let worst = simplex[n].0.clone();
        let xr = point(&centroid, &worst, -1.0);
        let fr = f(&xr);
        if fr < simplex[0].1 {
            let xe = point(&centroid, &worst, -2.0);
            let fe = f(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[n].1 {
                let x = point(&centroid, &worst, -0.5);
                let fx = f(&x);
                (x, fx)
            } else {
                let x = point(&centroid, &worst, 0.5);
                let fx = f(&x);
                (x, fx)
            };
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for s in simplex.iter_mut().skip(1) {
                    s.0 = point(&best, &s.0, 0.5);
                    s.1 = f(&s.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0).0
}

/// Umbilic candidates on a critical surface.
///
/// Vertices with `sigma_{d-1} <= screen` are clustered (single linkage at
/// distance `2 h`); the vertex of globally smallest `sigma_{d-1}` always
/// seeds a cluster. Each cluster is refined by minimising `sigma_{d-1}`
/// and accepted when the minimum is at most `accept`. Candidates are
/// returned sorted by `sigma_{d-1}`.
pub fn detect_umbilics<M: ChartMap>(
    map: &M,
    cs: &CriticalSet,
    sigmas: &[Option<Vec<f64>>],
    bounds: &MeshBox,
    spacing: f64,
    accept: f64,
    screen: f64,
) -> Result<Vec<UmbilicCandidate>> {
    if cs.dim != 3 || map.input_dim() != 3 {
        return Err(Error::InvalidDimension { expected: 3, got: cs.dim });
    }
    let d = cs.dim;
    let s2 = |i: usize| sigmas[i].as_ref().map(|s| s[d - 2]);
    let mut seeds: Vec<usize> = (0..cs.vertices.len()).filter(|&i| s2(i).is_some_and(|x| x <= screen)).collect();
    let global = (0..cs.vertices.len()).filter(|&i| s2(i).is_some()).min_by(|&a, &b| s2(a).unwrap().total_cmp(&s2(b).unwrap()));
    if let Some(g) = global {
        if !seeds.contains(&g) {
            seeds.push(g);
        }
    }
    // single-linkage clusters
    let mut cluster_of: Vec<usize> = (0..seeds.len()).collect();
    fn find(c: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while c[r] != r {
            r = c[r];
        }
        let mut j = i;
        while c[j] != r {
            let next = c[j];
            c[j] = r;
            j = next;
        }
        r
    }
    for a in 0..seeds.len() {
        for b in a + 1..seeds.len() {
            if dist(&cs.vertices[seeds[a]], &cs.vertices[seeds[b]]) <= 2.0 * spacing {
                let (ra, rb) = (find(&mut cluster_of, a), find(&mut cluster_of, b));
                if ra != rb {
                    cluster_of[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut clusters: Vec<(usize, Vec<usize>)> = Vec::new();
    for a in 0..seeds.len() {
        let r = find(&mut cluster_of, a);
        match clusters.iter_mut().find(|c| c.0 == r) {
            Some(c) => c.1.push(seeds[a]),
            None => clusters.push((r, vec![seeds[a]])),
        }
    }
    let mut out: Vec<UmbilicCandidate> = Vec::new();
    for (_, members) in clusters {
        let best = *members.iter().min_by(|&&a, &&b| s2(a).unwrap().total_cmp(&s2(b).unwrap())).expect("nonempty cluster");
        let mut c = minimize_second_singular_value(map, &cs.vertices[best], spacing, bounds)?;
        if c.sigma_pair.0 > s2(best).unwrap() {
            // keep the vertex if the minimiser did worse
            let (a, b, det) = second_smallest_sigma(map, &cs.vertices[best]).expect("vertex evaluated before");
            c = UmbilicCandidate { chart: cs.vertices[best].clone(), sigma_pair: (a, b), det, accepted: false, cluster_size: 0 };
        }
        c.accepted = c.sigma_pair.0 <= accept;
        c.cluster_size = members.len();
        if !out.iter().any(|o| dist(&o.chart, &c.chart) < spacing) {
            out.push(c);
        }
    }
    out.sort_by(|a, b| a.sigma_pair.0.total_cmp(&b.sigma_pair.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Scalar;
    use crate::linalg::det as ldet;
    use crate::locus::{extract_critical_set, scan_mesh, det_at, NormalForm};

    #[test]
    fn nelder_mead_finds_quadratic_minimum() {
        let x = nelder_mead(|v| (v[0] - 1.0).powi(2) + 3.0 * (v[1] + 0.5).powi(2), &[0.0, 0.0], 0.5, 500, 1e-16);
        assert!((x[0] - 1.0).abs() < 1e-6 && (x[1] + 0.5).abs() < 1e-6);
    }

    #[test]
    fn cusp_normal_form_refines_to_origin() {
        let map = NormalForm::Cusp;
        let bx = MeshBox::new(vec![-0.7, -0.6], vec![0.8, 0.9]).unwrap();
        let scan = scan_mesh(&map, &bx, &[41, 41]).unwrap();
        let f = |v: &[f64]| det_at(&map, v).ok();
        let cs = extract_critical_set(&scan, Some(&f), 1e-12).unwrap();
        let tol = SingularityTolerances::default();
        let classes: Vec<_> = cs.vertices.iter().map(|v| classify_singular_point(&map, v, &tol).ok()).collect();
        let rep = refine_cusps(&map, &cs, &classes, &tol, scan.spacing()[0], 1e-12).unwrap();
        assert_eq!(rep.points.len(), 1, "{:?}", rep.points);
        assert!(rep.points[0].refined);
        assert!(norm(&rep.points[0].chart) < 1e-10);
        assert_eq!(rep.points[0].label, Singularity::Cusp);
    }

    #[test]
    fn fold_normal_form_has_no_cusps() {
        let map = NormalForm::Fold;
        let bx = MeshBox::new(vec![-0.7, -0.6], vec![0.8, 0.9]).unwrap();
        let scan = scan_mesh(&map, &bx, &[21, 21]).unwrap();
        let f = |v: &[f64]| det_at(&map, v).ok();
        let cs = extract_critical_set(&scan, Some(&f), 1e-12).unwrap();
        let tol = SingularityTolerances::default();
        let classes: Vec<_> = cs.vertices.iter().map(|v| classify_singular_point(&map, v, &tol).ok()).collect();
        assert!(classes.iter().all(|c| c.as_ref().unwrap().label == Singularity::Fold));
        let rep = refine_cusps(&map, &cs, &classes, &tol, scan.spacing()[0], 1e-12).unwrap();
        assert!(rep.points.is_empty());
    }

    /// `(x, y, z) -> (x^2 + z y, y^2 + z x, z)` has a corank-two point at the
    /// origin (shifted here off the mesh nodes).
    struct Umbilic;
    impl ChartMap for Umbilic {
        fn input_dim(&self) -> usize {
            3
        }
        fn output_dim(&self) -> usize {
            3
        }
        fn eval<S: Scalar>(&self, v: &[S]) -> Result<Vec<S>> {
            let (x, y, z) = (v[0] + 0.05, v[1] - 0.03, v[2] + 0.02);
            Ok(vec![x * x + z * y, y * y + z * x, z])
        }
        fn oriented_det<S: Scalar>(&self, _image: &[S], jac: &[S]) -> Result<S> {
            Ok(ldet(jac.to_vec(), 3))
        }
    }

    #[test]
    fn corank_two_point_is_found() {
        let map = Umbilic;
        let bx = MeshBox::cube(3, 0.5).unwrap();
        let scan = scan_mesh(&map, &bx, &[15, 15, 15]).unwrap();
        let f = |v: &[f64]| det_at(&map, v).ok();
        let cs = extract_critical_set(&scan, Some(&f), 1e-12).unwrap();
        let sig: Vec<Option<Vec<f64>>> = cs.vertices.iter().map(|v| crate::locus::sample(&map, v).ok().map(|s| s.sigma)).collect();
        let h = scan.spacing()[0];
        let found = detect_umbilics(&map, &cs, &sig, &bx, h, 1e-8, 0.05).unwrap();
        assert!(found[0].accepted);
        assert!(dist(&found[0].chart, &[-0.05, 0.03, -0.02]) < 1e-3, "{:?}", found[0]);
    }

    #[test]
    fn umbilics_need_three_dimensions() {
        let map = NormalForm::Cusp;
        let bx = MeshBox::cube(2, 0.5).unwrap();
        let scan = scan_mesh(&map, &bx, &[11, 11]).unwrap();
        let f = |v: &[f64]| det_at(&map, v).ok();
        let cs = extract_critical_set(&scan, Some(&f), 1e-12).unwrap();
        assert!(matches!(detect_umbilics(&map, &cs, &[], &bx, 0.1, 1e-3, 0.05), Err(Error::InvalidDimension { .. })));
    }
}
