//! Conjugate loci of the discrete exponential map.
//!
//! The pipeline: the endpoint map `phi: v -> q_N` (initial momentum `E v` in
//! a tangent frame at `q_0`), a mesh scan of its oriented Jacobian
//! determinant, extraction of the critical set `C_0` with marching
//! squares/tetrahedra, its image `C = phi(C_0)`, and classification of
//! singular points into folds, cusps and umbilic candidates.

mod diagram;
mod extract;
mod mesh;
mod singular;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Dual, DualFn, Scalar};
use crate::error::{Error, Result};
use crate::geometry::{LevelSet, OutputChart, TangentChart, EPS_CHART, TOL_CONSTRAINT};
use crate::integrators::{integrate, Scheme, SolverConfig};
use crate::linalg::{det, svd};

pub use diagram::{
    compute_locus, conjugate_box, first_conjugate_radius, locus_from_scan, LocusConfig, LocusDiagram, UmbilicReport,
};
pub use extract::{extract_critical_set, CriticalSet, Polyline};
pub use mesh::{scan_mesh, scan_with, MeshBox, MeshScan};
pub use singular::{
    cusp_lines, detect_umbilics, minimize_second_singular_value, refine_cusps, CuspLines, CuspPoint, CuspReport, UmbilicCandidate,
};

/// A smooth map from chart coordinates whose Jacobian can be made square.
///
/// Implemented by [`EndpointMap`] and by the synthetic normal forms used in
/// tests. `oriented_det` receives the image point and the `output x input`
/// Jacobian (row-major) in any scalar type, so nested dual numbers yield the
/// gradient of the determinant.
pub trait ChartMap: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval<S: Scalar>(&self, v: &[S]) -> Result<Vec<S>>;
    fn oriented_det<S: Scalar>(&self, image: &[S], jac: &[S]) -> Result<S>;
}

/// Everything needed about one point of the chart domain.
#[derive(Debug, Clone)]
pub struct PointSample {
    pub image: Vec<f64>,
    /// Row-major `output x input`.
    pub jac: Vec<f64>,
    pub det: f64,
    /// Singular values of the Jacobian, descending.
    pub sigma: Vec<f64>,
    /// Right singular vectors matching `sigma`.
    pub right: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Singularity {
    Fold,
    Cusp,
    UmbilicCandidate,
}

/// Classification of a point of `C_0`.
#[derive(Debug, Clone)]
pub struct Classification {
    pub label: Singularity,
    pub det: f64,
    pub grad_det: Vec<f64>,
    /// `grad det . k` for the kernel direction `k`.
    pub kernel_derivative: f64,
    pub kernel: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl Classification {
    /// `grad det . k / |grad det|` (cosine between kernel and the normal of `C_0`).
    pub fn kernel_cosine(&self) -> f64 {
        let g = crate::linalg::norm(&self.grad_det);
        if g == 0.0 {
            0.0
        } else {
            self.kernel_derivative / g
        }
    }
}

/// Thresholds for singularity classification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingularityTolerances {
    /// Cusp if `|D_k det| <= eps_cusp |grad det|`.
    pub eps_cusp: f64,
    /// Absolute threshold on the second smallest singular value.
    pub eps_umb: f64,
}

impl Default for SingularityTolerances {
    fn default() -> Self {
        Self { eps_cusp: 0.05, eps_umb: 1e-3 }
    }
}

macro_rules! dispatch_dim {
    ($d:expr, $f:ident, ($($arg:expr),*)) => {
        match $d {
            1 => $f::<_, 1>($($arg),*),
            2 => $f::<_, 2>($($arg),*),
            3 => $f::<_, 3>($($arg),*),
            4 => $f::<_, 4>($($arg),*),
            d => Err(Error::InvalidDimension { expected: 4, got: d }),
        }
    };
}

fn jacobian_impl<M: ChartMap, const D: usize>(map: &M, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let vs: Vec<Dual<f64, D>> = v.iter().enumerate().map(|(i, &x)| Dual::variable(x, i)).collect();
    let ys = map.eval(&vs)?;
    let image: Vec<f64> = ys.iter().map(|y| y.v).collect();
    let mut jac = Vec::with_capacity(ys.len() * D);
    for y in &ys {
        jac.extend_from_slice(&y.d);
    }
    let det = map.oriented_det(&image, &jac)?;
    Ok((image, jac, det))
}

fn det_gradient_impl<M: ChartMap, const D: usize>(map: &M, v: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> {
    type Inner<const D: usize> = Dual<f64, D>;
    let vs: Vec<Dual<Inner<D>, D>> = v
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let mut d = [Inner::<D>::constant(0.0); D];
            d[i] = Inner::<D>::constant(1.0);
            Dual { v: Inner::<D>::variable(x, i), d }
        })
        .collect();
    let ys = map.eval(&vs)?;
    // image carries first derivatives through the outer seeds
    let image: Vec<Inner<D>> = ys.iter().map(|y| Dual { v: y.v.v, d: std::array::from_fn(|l| y.d[l].v) }).collect();
    let mut jac: Vec<Inner<D>> = Vec::with_capacity(ys.len() * D);
    for y in &ys {
        for j in 0..D {
            jac.push(Dual { v: y.v.d[j], d: std::array::from_fn(|l| y.d[l].d[j]) });
        }
    }
    let det = map.oriented_det(&image, &jac)?;
    let image_re = image.iter().map(|x| x.v).collect();
    let jac_re = jac.iter().map(|x| x.v).collect();
    Ok((det.v, det.d.to_vec(), image_re, jac_re))
}

/// Image, Jacobian (row-major `output x input`) and oriented determinant at `v`.
pub fn jacobian_at<M: ChartMap>(map: &M, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    dispatch_dim!(v.len(), jacobian_impl, (map, v))
}

/// Oriented determinant at `v`.
pub fn det_at<M: ChartMap>(map: &M, v: &[f64]) -> Result<f64> {
    jacobian_at(map, v).map(|(_, _, d)| d)
}

/// Oriented determinant and its gradient by nested forward mode.
pub fn det_and_gradient<M: ChartMap>(map: &M, v: &[f64]) -> Result<(f64, Vec<f64>)> {
    let r: Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> = dispatch_dim!(v.len(), det_gradient_impl, (map, v));
    r.map(|(d, g, _, _)| (d, g))
}

pub fn sample<M: ChartMap>(map: &M, v: &[f64]) -> Result<PointSample> {
    let (image, jac, det) = jacobian_at(map, v)?;
    let s = svd(&jac, map.output_dim(), map.input_dim());
    Ok(PointSample { image, jac, det, sigma: s.sigma, right: s.right })
}

/// Classifies a point of the critical set.
///
/// With `sigma_1 >= .. >= sigma_d` the singular values of the Jacobian and `k`
/// the right singular vector of `sigma_d`: umbilic candidate if
/// `sigma_{d-1} <= eps_umb`, else cusp if `|D_k det| <= eps_cusp |grad det|`,
/// else fold.
pub fn classify_singular_point<M: ChartMap>(map: &M, v: &[f64], tol: &SingularityTolerances) -> Result<Classification> {
    let d = map.input_dim();
    let r: Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> = dispatch_dim!(d, det_gradient_impl, (map, v));
    let (det_v, grad, _, jac) = r?;
    let s = svd(&jac, map.output_dim(), d);
    let kernel = s.right[d - 1].clone();
    let kd = crate::linalg::dot(&grad, &kernel);
    let gnorm = crate::linalg::norm(&grad);
    let label = if d >= 2 && s.sigma[d - 2] <= tol.eps_umb {
        Singularity::UmbilicCandidate
    } else if kd.abs() <= tol.eps_cusp * gnorm {
        Singularity::Cusp
    } else {
        Singularity::Fold
    };
    Ok(Classification { label, det: det_v, grad_det: grad, kernel_derivative: kd, kernel, sigma: s.sigma })
}

/// The discrete exponential map `v -> q_N` of a scheme in a tangent chart.
#[derive(Debug, Clone)]
pub struct EndpointMap<L> {
    pub scheme: Scheme,
    pub spec: L,
    pub chart: TangentChart,
    pub out_chart: OutputChart,
    pub steps: usize,
    pub cfg: SolverConfig,
}

impl<L: LevelSet> EndpointMap<L> {
    /// Endpoint map with the normal output chart, oriented so that the
    /// determinant is positive at `v = 0`.
    pub fn new(scheme: Scheme, spec: L, base: Vec<f64>, steps: usize, cfg: SolverConfig) -> Result<Self> {
        let chart = TangentChart::at(&spec, base)?;
        Self::with_charts(scheme, spec, chart, OutputChart::Normal { orientation_sign: 1.0 }, steps, cfg)
    }

    /// Explicit charts; the orientation sign of `out_chart` is replaced so
    /// that the determinant is positive at `v = 0`.
    pub fn with_charts(
        scheme: Scheme,
        spec: L,
        chart: TangentChart,
        out_chart: OutputChart,
        steps: usize,
        cfg: SolverConfig,
    ) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidInput("endpoint map needs at least two steps".into()));
        }
        if scheme == Scheme::Kkt {
            return Err(Error::InvalidInput("kkt has no initial value endpoint map".into()));
        }
        let mut g = vec![0.0; spec.codim()];
        spec.value(&chart.base, &mut g);
        let gn = crate::linalg::norm(&g);
        if gn > TOL_CONSTRAINT {
            return Err(Error::ConstraintViolated(gn));
        }
        let mut map = Self { scheme, spec, chart, out_chart: out_chart.with_sign(1.0), steps, cfg };
        let d = map.chart.dim();
        let base = map.chart.base.clone();
        let cols: Vec<f64> = (0..map.chart.base.len()).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| map.chart.frame[j][i]).collect();
        let d0 = map.oriented_det(&base, &cols)?;
        if d0 == 0.0 {
            return Err(Error::RankDeficient(0.0));
        }
        map.out_chart = map.out_chart.with_sign(d0.signum());
        Ok(map)
    }

    pub fn endpoint(&self, v: &[f64]) -> Result<Vec<f64>> {
        ChartMap::eval(self, v)
    }
}

impl<L: LevelSet> ChartMap for EndpointMap<L> {
    fn input_dim(&self) -> usize {
        self.chart.dim()
    }
    fn output_dim(&self) -> usize {
        self.spec.ambient_dim()
    }
    fn eval<S: Scalar>(&self, v: &[S]) -> Result<Vec<S>> {
        if v.len() != self.chart.dim() {
            return Err(Error::InvalidDimension { expected: self.chart.dim(), got: v.len() });
        }
        let q0: Vec<S> = self.chart.base.iter().map(|&x| S::constant(x)).collect();
        let p0 = self.chart.tangent(v);
        let traj = integrate(self.scheme, &self.spec, &q0, &p0, self.steps, &self.cfg)
            .map_err(|e| Error::EvaluationFailed(e.to_string()))?;
        Ok(traj.qs.into_iter().last().expect("nonempty trajectory"))
    }
    fn oriented_det<S: Scalar>(&self, image: &[S], jac: &[S]) -> Result<S> {
        let (n, m) = (self.spec.ambient_dim(), self.spec.codim());
        let d = n - m;
        match self.out_chart {
            OutputChart::Deletion { dropped_axis, orientation_sign } => {
                let image_re: Vec<f64> = image.iter().map(Scalar::re).collect();
                self.out_chart.check(&self.spec, &image_re, EPS_CHART)?;
                let rows: Vec<S> = (0..n).filter(|&i| i != dropped_axis).flat_map(|i| jac[i * d..(i + 1) * d].to_vec()).collect();
                Ok(det(rows, d) * orientation_sign)
            }
            OutputChart::Normal { orientation_sign } => {
                let mut g = vec![S::zero(); m * n];
                self.spec.jacobian(image, &mut g);
                let mut a = Vec::with_capacity(n * n);
                for i in 0..n {
                    a.extend_from_slice(&jac[i * d..(i + 1) * d]);
                    for l in 0..m {
                        a.push(g[l * n + i]);
                    }
                }
                // normalise by sqrt(det(G G^T)) so |det| is the volume factor
                let mut ggt = Vec::with_capacity(m * m);
                for a_ in 0..m {
                    for b in 0..m {
                        ggt.push((0..n).fold(S::zero(), |acc, j| acc + g[a_ * n + j] * g[b * n + j]));
                    }
                }
                Ok(det(a, n) / det(ggt, m).sqrt() * orientation_sign)
            }
        }
    }
}

impl<L: LevelSet> DualFn for EndpointMap<L> {
    fn eval<S: Scalar>(&self, x: &[S]) -> Result<Vec<S>> {
        ChartMap::eval(self, x)
    }
}

/// Square maps `R^d -> R^d` given by a closure-free normal form; used for
/// the Whitney fold `(x^2, y)` and cusp `(x^3 - x y, y)` checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormalForm {
    Fold,
    Cusp,
}

impl ChartMap for NormalForm {
    fn input_dim(&self) -> usize {
        2
    }
    fn output_dim(&self) -> usize {
        2
    }
    fn eval<S: Scalar>(&self, v: &[S]) -> Result<Vec<S>> {
        let (x, y) = (v[0], v[1]);
        Ok(match self {
            NormalForm::Fold => vec![x * x, y],
            NormalForm::Cusp => vec![x * x * x - x * y, y],
        })
    }
    fn oriented_det<S: Scalar>(&self, _image: &[S], jac: &[S]) -> Result<S> {
        Ok(det(jac.to_vec(), 2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fd_jacobian;
    use crate::geometry::{Ellipsoid, Hyperplane};
    use crate::linalg::dist;
    use std::f64::consts::PI;

    fn sphere_map(scheme: Scheme, steps: usize) -> EndpointMap<Ellipsoid> {
        EndpointMap::new(scheme, Ellipsoid::unit_sphere(3), vec![1.0, 0.0, 0.0], steps, SolverConfig::default()).unwrap()
    }

    #[test]
    fn zero_momentum_maps_to_base() {
        for scheme in [Scheme::Del, Scheme::SympEuler, Scheme::Rk2] {
            let m = sphere_map(scheme, 20);
            assert!(dist(&m.endpoint(&[0.0, 0.0]).unwrap(), &[1.0, 0.0, 0.0]) < 1e-15);
        }
    }

    #[test]
    fn quarter_great_circle() {
        let m = sphere_map(Scheme::Del, 100);
        // the frame at (1,0,0) is {e2, e3}
        assert!(dist(&m.chart.frame[0], &[0.0, 1.0, 0.0]) < 1e-15);
        let q = m.endpoint(&[PI / 2.0, 0.0]).unwrap();
        assert!(dist(&q, &[0.0, 1.0, 0.0]) < 1e-3);
    }

    #[test]
    fn det_near_origin_is_one() {
        let m = sphere_map(Scheme::Del, 50);
        let d = det_at(&m, &[0.01, -0.02]).unwrap();
        assert!((d - 1.0).abs() < 1e-3);
    }

    #[test]
    fn sphere_det_changes_sign_at_conjugate_radius() {
        let m = sphere_map(Scheme::Del, 50);
        let u = [0.6, 0.8];
        let inside = det_at(&m, &[(PI - 0.1) * u[0], (PI - 0.1) * u[1]]).unwrap();
        let outside = det_at(&m, &[(PI + 0.1) * u[0], (PI + 0.1) * u[1]]).unwrap();
        assert!(inside > 0.0 && outside < 0.0);
    }

    #[test]
    fn ad_jacobian_matches_finite_differences() {
        let m = sphere_map(Scheme::Del, 20);
        let v = [0.5, 0.3];
        let (_, ad, _) = jacobian_at(&m, &v).unwrap();
        let fd = fd_jacobian(&m, &v, 1e-5).unwrap();
        for (a, f) in ad.iter().zip(&fd) {
            assert!((a - f).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn deletion_and_normal_charts_share_zero_sets() {
        let e = Ellipsoid::new(vec![1.0, 0.8, 0.6]).unwrap();
        let base = e.point_from_direction(&[0.3, 0.5, 0.6]);
        let chart = TangentChart::at(&e, base.clone()).unwrap();
        let normal = EndpointMap::new(Scheme::Del, e.clone(), base.clone(), 20, SolverConfig::default()).unwrap();
        let out = OutputChart::deletion_at(&e, &base).unwrap();
        let del = EndpointMap::with_charts(Scheme::Del, e, chart, out, 20, SolverConfig::default()).unwrap();
        for v in [[0.1, 0.2], [-0.3, 0.1], [0.2, -0.4]] {
            let a = det_at(&normal, &v).unwrap();
            let b = det_at(&del, &v).unwrap();
            assert!(a > 0.0 && b > 0.0);
        }
    }

    #[test]
    fn plane_map_is_never_singular() {
        let plane = Hyperplane::coordinate(3, 2);
        let m = EndpointMap::new(Scheme::Del, plane, vec![0.0; 3], 10, SolverConfig::default()).unwrap();
        for v in [[3.0, -2.0], [0.0, 0.0], [-5.0, 5.0]] {
            assert!((det_at(&m, &v).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_of_det_matches_finite_differences() {
        let e = Ellipsoid::new(vec![1.0, 0.8, 0.6]).unwrap();
        let base = e.point_from_direction(&[0.3, 0.5, 0.6]);
        let m = EndpointMap::new(Scheme::Del, e, base, 20, SolverConfig::default()).unwrap();
        let v = [1.2, -0.7];
        let (d, g) = det_and_gradient(&m, &v).unwrap();
        assert!((d - det_at(&m, &v).unwrap()).abs() < 1e-12);
        for j in 0..2 {
            let h = 1e-5;
            let mut vp = v;
            let mut vm = v;
            vp[j] += h;
            vm[j] -= h;
            let fd = (det_at(&m, &vp).unwrap() - det_at(&m, &vm).unwrap()) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-6 * g[j].abs().max(1.0), "{fd} vs {}", g[j]);
        }
    }

    #[test]
    fn whitney_normal_forms_classify() {
        let tol = SingularityTolerances::default();
        let c = classify_singular_point(&NormalForm::Fold, &[0.0, 0.7], &tol).unwrap();
        assert_eq!(c.label, Singularity::Fold);
        assert!((c.kernel_derivative.abs() - 2.0).abs() < 1e-12);
        let c = classify_singular_point(&NormalForm::Cusp, &[0.0, 0.0], &tol).unwrap();
        assert_eq!(c.label, Singularity::Cusp);
    }

    #[test]
    fn kkt_has_no_endpoint_map() {
        let r = EndpointMap::new(Scheme::Kkt, Ellipsoid::unit_sphere(3), vec![1.0, 0.0, 0.0], 10, SolverConfig::default());
        assert!(r.is_err());
    }
}
