//! Level-set submanifolds `M = g^{-1}(0)`, tangent frames and output charts.

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, DualFn, Scalar};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, svd};

/// Default tolerance on `|g(q)|` for a point to count as lying on `M`.
pub const TOL_CONSTRAINT: f64 = 1e-10;
/// Smallest singular value of `g'(q)` accepted as full rank.
pub const EPS_RANK: f64 = 1e-8;
/// Minimum unit-normal component along the dropped axis of a deletion chart.
pub const EPS_CHART: f64 = 0.1;

/// A constraint map `g: R^n -> R^m` together with its Jacobian.
///
/// Both maps are generic over [`Scalar`] so that the integrators can run in
/// dual arithmetic.
pub trait LevelSet: Send + Sync {
    fn ambient_dim(&self) -> usize;
    fn codim(&self) -> usize;
    /// Writes `g(q)` into `out` (length `m`).
    fn value<S: Scalar>(&self, q: &[S], out: &mut [S]);
    /// Writes `g'(q)` row-major into `out` (length `m * n`).
    fn jacobian<S: Scalar>(&self, q: &[S], out: &mut [S]);
    /// Extent of `M` used to scale distance tolerances.
    fn diameter(&self) -> f64;

    fn dim(&self) -> usize {
        self.ambient_dim() - self.codim()
    }
}

/// Ellipsoid `sum_i q_i^2 / a_i^2 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    axes: Vec<f64>,
    inv_sq: Vec<f64>,
}

impl Ellipsoid {
    pub fn new(axes: Vec<f64>) -> Result<Self> {
        if axes.len() < 2 {
            return Err(Error::InvalidInput("an ellipsoid needs at least two semi-axes".into()));
        }
        if axes.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::InvalidInput("semi-axes must be finite and strictly positive".into()));
        }
        let inv_sq = axes.iter().map(|a| 1.0 / (a * a)).collect();
        Ok(Self { axes, inv_sq })
    }

    pub fn unit_sphere(n: usize) -> Self {
        Self::new(vec![1.0; n]).expect("valid axes")
    }

    pub fn axes(&self) -> &[f64] {
        &self.axes
    }

    /// Semi-axes pairwise distinct (needed for generic loci).
    pub fn is_generic(&self) -> bool {
        let a = &self.axes;
        (0..a.len()).all(|i| (i + 1..a.len()).all(|j| (a[i] - a[j]).abs() > 1e-12 * a[i].max(a[j])))
    }

    /// Radial projection of a nonzero point onto the ellipsoid.
    pub fn project_radially(&self, q: &[f64]) -> Result<Vec<f64>> {
        let s: f64 = q.iter().zip(&self.inv_sq).map(|(x, w)| x * x * w).sum();
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidInput("cannot project the origin onto the ellipsoid".into()));
        }
        let r = s.sqrt();
        Ok(q.iter().map(|x| x / r).collect())
    }

    /// Point with ellipsoidal coordinates `q_i = a_i u_i` for a unit vector `u`.
    pub fn point_from_direction(&self, u: &[f64]) -> Vec<f64> {
        let nu = norm(u);
        self.axes.iter().zip(u).map(|(a, x)| a * x / nu).collect()
    }
}

impl LevelSet for Ellipsoid {
    fn ambient_dim(&self) -> usize {
        self.axes.len()
    }
    fn codim(&self) -> usize {
        1
    }
    fn value<S: Scalar>(&self, q: &[S], out: &mut [S]) {
        let mut acc = S::constant(-1.0);
        for (x, w) in q.iter().zip(&self.inv_sq) {
            acc += *x * *x * *w;
        }
        out[0] = acc;
    }
    fn jacobian<S: Scalar>(&self, q: &[S], out: &mut [S]) {
        for ((o, x), w) in out.iter_mut().zip(q).zip(&self.inv_sq) {
            *o = *x * (2.0 * *w);
        }
    }
    fn diameter(&self) -> f64 {
        2.0 * self.axes.iter().fold(0.0f64, |m, a| m.max(*a))
    }
}

/// Affine hyperplane `normal . q = offset` (flat test geometry).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperplane {
    pub normal: Vec<f64>,
    pub offset: f64,
}

impl Hyperplane {
    /// The coordinate plane `q_axis = 0` in `R^n`.
    pub fn coordinate(n: usize, axis: usize) -> Self {
        let mut normal = vec![0.0; n];
        normal[axis] = 1.0;
        Self { normal, offset: 0.0 }
    }
}

impl LevelSet for Hyperplane {
    fn ambient_dim(&self) -> usize {
        self.normal.len()
    }
    fn codim(&self) -> usize {
        1
    }
    fn value<S: Scalar>(&self, q: &[S], out: &mut [S]) {
        let mut acc = S::constant(-self.offset);
        for (x, a) in q.iter().zip(&self.normal) {
            acc += *x * *a;
        }
        out[0] = acc;
    }
    fn jacobian<S: Scalar>(&self, _q: &[S], out: &mut [S]) {
        for (o, a) in out.iter_mut().zip(&self.normal) {
            *o = S::constant(*a);
        }
    }
    fn diameter(&self) -> f64 {
        1.0
    }
}

/// Closed set of supported constraint types, used by the CLI and FFI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Manifold {
    Ellipsoid(Ellipsoid),
    Hyperplane(Hyperplane),
}

impl LevelSet for Manifold {
    fn ambient_dim(&self) -> usize {
        match self {
            Manifold::Ellipsoid(e) => e.ambient_dim(),
            Manifold::Hyperplane(h) => h.ambient_dim(),
        }
    }
    fn codim(&self) -> usize {
        1
    }
    fn value<S: Scalar>(&self, q: &[S], out: &mut [S]) {
        match self {
            Manifold::Ellipsoid(e) => e.value(q, out),
            Manifold::Hyperplane(h) => h.value(q, out),
        }
    }
    fn jacobian<S: Scalar>(&self, q: &[S], out: &mut [S]) {
        match self {
            Manifold::Ellipsoid(e) => e.jacobian(q, out),
            Manifold::Hyperplane(h) => h.jacobian(q, out),
        }
    }
    fn diameter(&self) -> f64 {
        match self {
            Manifold::Ellipsoid(e) => e.diameter(),
            Manifold::Hyperplane(h) => h.diameter(),
        }
    }
}

/// `g(q)` and `g'(q)` (row-major `m x n`).
pub fn eval_constraint<L: LevelSet>(spec: &L, q: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (n, m) = (spec.ambient_dim(), spec.codim());
    let mut value = vec![0.0; m];
    let mut jac = vec![0.0; m * n];
    spec.value(q, &mut value);
    spec.jacobian(q, &mut jac);
    (value, jac)
}

struct JacobianTransposeTimes<'a, L> {
    spec: &'a L,
    lambda: &'a [f64],
}

impl<L: LevelSet> DualFn for JacobianTransposeTimes<'_, L> {
    fn eval<S: Scalar>(&self, q: &[S]) -> Result<Vec<S>> {
        let (n, m) = (self.spec.ambient_dim(), self.spec.codim());
        let mut jac = vec![S::zero(); m * n];
        self.spec.jacobian(q, &mut jac);
        Ok((0..n).map(|j| (0..m).fold(S::zero(), |acc, i| acc + jac[i * n + j] * self.lambda[i])).collect())
    }
}

/// `d/dq (g'(q)^T lambda)`, the multiplier-weighted Hessian of `g` (row-major `n x n`).
pub fn hessian_contract<L: LevelSet>(spec: &L, q: &[f64], lambda: &[f64]) -> Vec<f64> {
    autodiff::jacobian(&JacobianTransposeTimes { spec, lambda }, q).expect("constraint evaluation is total")
}

/// Orthonormal basis of the row space of `g'(q)` followed by its kernel.
fn orthonormal_rows(jac: &[f64], m: usize, n: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..m {
        let mut v = jac[i * n..(i + 1) * n].to_vec();
        orthogonalize(&mut v, &basis);
        let nv = norm(&v);
        basis.push(v.iter().map(|x| x / nv).collect());
    }
    basis
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    // two passes of modified Gram-Schmidt
    for _ in 0..2 {
        for b in basis {
            let c = dot(v, b);
            for (x, y) in v.iter_mut().zip(b) {
                *x -= c * y;
            }
        }
    }
}

/// Orthonormal basis of `ker g'(q)`, returned as `d = n - m` columns.
///
/// Columns are built by greedy Gram-Schmidt over the standard basis (the
/// candidate with the largest residual first, lowest index on ties) and then
/// signed so that the first component of largest magnitude is positive, so
/// the result is a deterministic function of `q`.
pub fn tangent_frame<L: LevelSet>(spec: &L, q: &[f64]) -> Result<Vec<Vec<f64>>> {
    tangent_frame_with(spec, q, TOL_CONSTRAINT, EPS_RANK)
}

pub fn tangent_frame_with<L: LevelSet>(spec: &L, q: &[f64], tol_constraint: f64, eps_rank: f64) -> Result<Vec<Vec<f64>>> {
    let (n, m) = (spec.ambient_dim(), spec.codim());
    if q.len() != n {
        return Err(Error::InvalidDimension { expected: n, got: q.len() });
    }
    let (value, jac) = eval_constraint(spec, q);
    let gnorm = norm(&value);
    if gnorm > tol_constraint {
        return Err(Error::ConstraintViolated(gnorm));
    }
    let s = svd(&jac, m, n);
    let smin = s.sigma[m - 1];
    if smin <= eps_rank {
        return Err(Error::RankDeficient(smin));
    }
    let mut basis = orthonormal_rows(&jac, m, n);
    let mut frame = Vec::with_capacity(n - m);
    for _ in 0..n - m {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for i in 0..n {
            let mut v = vec![0.0; n];
            v[i] = 1.0;
            orthogonalize(&mut v, &basis);
            let nv = norm(&v);
            if best.as_ref().is_none_or(|(b, _)| nv > *b + 1e-12) {
                best = Some((nv, v));
            }
        }
        let (nv, v) = best.expect("n > 0");
        let mut col: Vec<f64> = v.iter().map(|x| x / nv).collect();
        let lead = col.iter().enumerate().fold(0, |bi, (i, x)| if x.abs() > col[bi].abs() + 1e-14 { i } else { bi });
        if col[lead] < 0.0 {
            col.iter_mut().for_each(|x| *x = -*x);
        }
        basis.push(col.clone());
        frame.push(col);
    }
    Ok(frame)
}

/// Base point on `M` and an orthonormal frame of its tangent space; chart
/// coordinates `v` correspond to the tangent vector `E v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentChart {
    pub base: Vec<f64>,
    /// `d` columns of length `n`.
    pub frame: Vec<Vec<f64>>,
}

impl TangentChart {
    pub fn at<L: LevelSet>(spec: &L, base: Vec<f64>) -> Result<Self> {
        let frame = tangent_frame(spec, &base)?;
        Ok(Self { base, frame })
    }

    pub fn dim(&self) -> usize {
        self.frame.len()
    }

    /// `E v` for chart coordinates of any scalar type.
    pub fn tangent<S: Scalar>(&self, v: &[S]) -> Vec<S> {
        let n = self.base.len();
        (0..n).map(|i| self.frame.iter().zip(v).fold(S::zero(), |acc, (col, vj)| acc + *vj * col[i])).collect()
    }

    /// Frame rotated by an orthogonal `d x d` matrix (row-major): `E R`.
    pub fn rotated(&self, r: &[f64]) -> Self {
        let d = self.dim();
        let n = self.base.len();
        let frame = (0..d)
            .map(|j| (0..n).map(|i| (0..d).map(|k| self.frame[k][i] * r[k * d + j]).sum()).collect())
            .collect();
        Self { base: self.base.clone(), frame }
    }
}

/// How an `n x d` Jacobian of a map into `M` is turned into a square one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputChart {
    /// Coordinate deletion: drop `dropped_axis` from the image (codimension one).
    Deletion { dropped_axis: usize, orientation_sign: f64 },
    /// Augment the Jacobian with the unit normal frame at the image point.
    /// Valid everywhere on `M`.
    Normal { orientation_sign: f64 },
}

impl OutputChart {
    /// Deletion chart dropping the axis of largest unit-normal component at `q_ref`.
    pub fn deletion_at<L: LevelSet>(spec: &L, q_ref: &[f64]) -> Result<Self> {
        if spec.codim() != 1 {
            return Err(Error::InvalidDimension { expected: 1, got: spec.codim() });
        }
        let (_, jac) = eval_constraint(spec, q_ref);
        let axis = jac.iter().enumerate().fold(0, |bi, (i, x)| if x.abs() > jac[bi].abs() { i } else { bi });
        Ok(OutputChart::Deletion { dropped_axis: axis, orientation_sign: 1.0 })
    }

    pub fn orientation_sign(&self) -> f64 {
        match *self {
            OutputChart::Deletion { orientation_sign, .. } | OutputChart::Normal { orientation_sign } => orientation_sign,
        }
    }

    pub fn with_sign(self, sign: f64) -> Self {
        match self {
            OutputChart::Deletion { dropped_axis, .. } => OutputChart::Deletion { dropped_axis, orientation_sign: sign },
            OutputChart::Normal { .. } => OutputChart::Normal { orientation_sign: sign },
        }
    }

    /// Checks that deletion is a valid chart at `q`; always valid for the normal chart.
    pub fn check<L: LevelSet>(&self, spec: &L, q: &[f64], eps_chart: f64) -> Result<()> {
        if let OutputChart::Deletion { dropped_axis, .. } = *self {
            let (_, jac) = eval_constraint(spec, q);
            let component = jac[dropped_axis] / norm(&jac);
            if component.abs() < eps_chart {
                return Err(Error::ChartInvalid { axis: dropped_axis, component });
            }
        }
        Ok(())
    }

    /// Remaining coordinates after deletion.
    pub fn project(&self, q: &[f64]) -> Vec<f64> {
        match *self {
            OutputChart::Deletion { dropped_axis, .. } => {
                q.iter().enumerate().filter(|(i, _)| *i != dropped_axis).map(|(_, x)| *x).collect()
            }
            OutputChart::Normal { .. } => q.to_vec(),
        }
    }
}

/// Point on `M` whose non-dropped coordinates equal `y`, found by Newton on
/// the dropped coordinate starting from `seed`.
pub fn chart_lift<L: LevelSet>(spec: &L, chart: &OutputChart, y: &[f64], seed: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let OutputChart::Deletion { dropped_axis, .. } = *chart else {
        return Err(Error::InvalidInput("chart lift needs a coordinate-deletion chart".into()));
    };
    let n = spec.ambient_dim();
    if spec.codim() != 1 {
        return Err(Error::InvalidDimension { expected: 1, got: spec.codim() });
    }
    if y.len() != n - 1 {
        return Err(Error::InvalidDimension { expected: n - 1, got: y.len() });
    }
    let mut q = Vec::with_capacity(n);
    let mut it = y.iter();
    for i in 0..n {
        q.push(if i == dropped_axis { seed[i] } else { *it.next().expect("length checked") });
    }
    let mut value = [0.0];
    let mut jac = vec![0.0; n];
    let mut converged = false;
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        spec.value(&q, &mut value);
        residual = value[0].abs();
        if residual <= tol {
            converged = true;
            break;
        }
        spec.jacobian(&q, &mut jac);
        let slope = jac[dropped_axis];
        if slope.abs() < 1e-300 {
            break;
        }
        q[dropped_axis] -= value[0] / slope;
    }
    if !converged {
        return Err(Error::NewtonDiverged { iterations: max_iter, residual });
    }
    chart.check(spec, &q, EPS_CHART)?;
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_frame<L: LevelSet>(spec: &L, q: &[f64], frame: &[Vec<f64>]) {
        let (_, jac) = eval_constraint(spec, q);
        let (n, m) = (spec.ambient_dim(), spec.codim());
        for (a, ca) in frame.iter().enumerate() {
            for (b, cb) in frame.iter().enumerate() {
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot(ca, cb) - expect).abs() < 1e-12);
            }
            for i in 0..m {
                assert!(dot(&jac[i * n..(i + 1) * n], ca).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sphere_constraint_values() {
        let s = Ellipsoid::unit_sphere(3);
        let (v, j) = eval_constraint(&s, &[1.0, 0.0, 0.0]);
        assert_eq!(v, vec![0.0]);
        assert_eq!(j, vec![2.0, 0.0, 0.0]);
        let (v, j) = eval_constraint(&s, &[0.0, 0.0, 0.0]);
        assert_eq!(v, vec![-1.0]);
        assert_eq!(j, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn ellipsoid_constraint_values() {
        let e = Ellipsoid::new(vec![1.0, 0.8, 0.6]).unwrap();
        let (v, j) = eval_constraint(&e, &[0.0, 0.8, 0.0]);
        assert!(v[0].abs() < 1e-15);
        assert!((j[1] - 2.5).abs() < 1e-14);
        assert_eq!(j[0], 0.0);
        assert_eq!(j[2], 0.0);
    }

    #[test]
    fn invalid_axes_are_rejected() {
        assert!(Ellipsoid::new(vec![1.0, -1.0]).is_err());
        assert!(Ellipsoid::new(vec![1.0]).is_err());
        assert!(Ellipsoid::new(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn frames_span_the_kernel() {
        let s = Ellipsoid::unit_sphere(3);
        let q = [1.0, 0.0, 0.0];
        let e = tangent_frame(&s, &q).unwrap();
        check_frame(&s, &q, &e);
        assert!(e.iter().all(|c| c[0].abs() < 1e-15));

        let plane = Hyperplane::coordinate(3, 2);
        let q = [0.3, -0.2, 0.0];
        let e = tangent_frame(&plane, &q).unwrap();
        check_frame(&plane, &q, &e);
        assert!(e.iter().all(|c| c[2].abs() < 1e-15));

        let el = Ellipsoid::new(vec![1.0, 0.8, 0.6]).unwrap();
        let q = [0.0, 0.8, 0.0];
        let e = tangent_frame(&el, &q).unwrap();
        check_frame(&el, &q, &e);
    }

    #[test]
    fn frame_sign_convention() {
        let el = Ellipsoid::new(vec![1.0, 0.8, 0.6, 0.5]).unwrap();
        let q = el.point_from_direction(&[0.3, -0.5, 0.2, 0.7]);
        let e = tangent_frame(&el, &q).unwrap();
        check_frame(&el, &q, &e);
        for c in &e {
            let lead = c.iter().fold(0.0f64, |m, x| if x.abs() > m.abs() { *x } else { m });
            assert!(lead > 0.0);
        }
        assert_eq!(e, tangent_frame(&el, &q).unwrap());
    }

    #[test]
    fn frame_requires_point_on_manifold() {
        let s = Ellipsoid::unit_sphere(3);
        assert!(matches!(tangent_frame(&s, &[1.1, 0.0, 0.0]), Err(Error::ConstraintViolated(_))));
    }

    #[test]
    fn frame_rejects_rank_deficiency() {
        // g(q) = q1^2 has zero Jacobian on its zero set
        struct Degenerate;
        impl LevelSet for Degenerate {
            fn ambient_dim(&self) -> usize {
                2
            }
            fn codim(&self) -> usize {
                1
            }
            fn value<S: Scalar>(&self, q: &[S], out: &mut [S]) {
                out[0] = q[0] * q[0];
            }
            fn jacobian<S: Scalar>(&self, q: &[S], out: &mut [S]) {
                out[0] = q[0] * 2.0;
                out[1] = S::zero();
            }
            fn diameter(&self) -> f64 {
                1.0
            }
        }
        assert!(matches!(tangent_frame(&Degenerate, &[0.0, 0.5]), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn chart_lift_examples() {
        let s = Ellipsoid::unit_sphere(3);
        let chart = OutputChart::Deletion { dropped_axis: 2, orientation_sign: 1.0 };
        let q = chart_lift(&s, &chart, &[0.6, 0.0], &[0.6, 0.0, 0.7], 1e-14, 50).unwrap();
        assert!((q[2] - 0.8).abs() < 1e-13);
        let q = chart_lift(&s, &chart, &[0.0, 0.0], &[0.0, 0.0, 1.0], 1e-14, 50).unwrap();
        assert_eq!(q, vec![0.0, 0.0, 1.0]);
        let plane = Hyperplane::coordinate(3, 2);
        let q = chart_lift(&plane, &chart, &[0.25, -1.5], &[0.0, 0.0, 0.4], 1e-14, 50).unwrap();
        assert_eq!(q, vec![0.25, -1.5, 0.0]);
    }

    #[test]
    fn chart_lift_reports_invalid_chart() {
        let s = Ellipsoid::unit_sphere(3);
        let chart = OutputChart::Deletion { dropped_axis: 2, orientation_sign: 1.0 };
        let r = chart_lift(&s, &chart, &[0.999, 0.0], &[0.999, 0.0, 0.05], 1e-14, 50);
        assert!(matches!(r, Err(Error::ChartInvalid { .. })));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let e = Ellipsoid::new(vec![1.0, 0.8, 0.6]).unwrap();
        for q in [[0.3, -0.2, 0.4], [0.9, 0.1, -0.05], [-0.2, 0.5, 0.3]] {
            let (_, jac) = eval_constraint(&e, &q);
            for j in 0..3 {
                let h = 1e-6;
                let mut qp = q;
                let mut qm = q;
                qp[j] += h;
                qm[j] -= h;
                let fd = (eval_constraint(&e, &qp).0[0] - eval_constraint(&e, &qm).0[0]) / (2.0 * h);
                assert!((fd - jac[j]).abs() <= 1e-6 * jac[j].abs().max(1.0));
            }
        }
    }

    #[test]
    fn hessian_contraction_of_ellipsoid() {
        let e = Ellipsoid::new(vec![1.0, 0.5]).unwrap();
        let h = hessian_contract(&e, &[0.2, 0.1], &[3.0]);
        assert_eq!(h, vec![6.0, 0.0, 0.0, 24.0]);
    }
}
