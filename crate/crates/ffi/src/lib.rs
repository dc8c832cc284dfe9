//! C ABI over the `cutlocus` crate.
//!
//! Every function returns a [`ClStatus`]; results go through out-pointers.
//! Objects are opaque handles created by `cl_*_new`/`cl_*_compute` and
//! released by the matching `cl_*_free`. After a failure,
//! [`cl_last_error_message`] describes it (per thread).
//!
//! Arrays are passed as pointer plus length. Output buffers that are too
//! short yield [`ClStatus::BufferTooSmall`]; the `*_len` query functions
//! report the size needed.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cutlocus::bvp::{count_solutions, BvpProblem, CountOptions, SeedGrid};
use cutlocus::geometry::{Ellipsoid, Hyperplane, LevelSet, Manifold};
use cutlocus::integrators::{integrate, DiscreteTrajectory, Scheme, SolverConfig};
use cutlocus::locus::{
    classify_singular_point, compute_locus, det_at, sample, ChartMap, EndpointMap, LocusConfig, LocusDiagram, MeshBox,
    Singularity, SingularityTolerances,
};
use cutlocus::Error;

/// Status codes returned by every function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidDimension = 3,
    NewtonDiverged = 4,
    RankDeficient = 5,
    ConstraintViolated = 6,
    ChartInvalid = 7,
    EvaluationFailed = 8,
    BranchMismatch = 9,
    BufferTooSmall = 10,
    Panic = 99,
}

/// Discretisation selector for `scheme` arguments.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClScheme {
    Del = 0,
    SympEuler = 1,
    Rk2 = 2,
    Kkt = 3,
}

/// Singularity label reported by [`cl_classify`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClLabel {
    Fold = 0,
    Cusp = 1,
    UmbilicCandidate = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClSolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClClassification {
    /// A [`ClLabel`] value.
    pub label: i32,
    pub det: f64,
    pub kernel_cosine: f64,
    pub kernel_derivative: f64,
    /// Smallest singular value of the Jacobian.
    pub sigma_min: f64,
    /// Second smallest singular value (0 for one-dimensional charts).
    pub sigma_second: f64,
}

pub struct ClManifold(Manifold);
pub struct ClTrajectory(DiscreteTrajectory);
pub struct ClEndpointMap(EndpointMap<Manifold>);
pub struct ClLocus(LocusDiagram);

struct Failure(ClStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.root() {
            Error::NewtonDiverged { .. } => ClStatus::NewtonDiverged,
            Error::RankDeficient(_) => ClStatus::RankDeficient,
            Error::ConstraintViolated(_) => ClStatus::ConstraintViolated,
            Error::ChartInvalid { .. } => ClStatus::ChartInvalid,
            Error::EvaluationFailed(_) => ClStatus::EvaluationFailed,
            Error::InvalidDimension { .. } => ClStatus::InvalidDimension,
            Error::BranchMismatch(_) => ClStatus::BranchMismatch,
            Error::InvalidInput(_) | Error::StepFailed { .. } => ClStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn fail<T>(status: ClStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ClStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ClStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("panic inside cutlocus");
            ClStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return fail(ClStatus::NullPointer, format!("{what} is null"));
    }
    let s = std::slice::from_raw_parts(p, len);
    if s.iter().any(|x| !x.is_finite()) {
        return fail(ClStatus::InvalidArgument, format!("{what} has non-finite entries"));
    }
    Ok(s)
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(ClStatus::NullPointer, format!("{what} is null")))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return fail(ClStatus::NullPointer, "output pointer is null");
    }
    out.write(value);
    Ok(())
}

unsafe fn copy_out(data: &[f64], out: *mut f64, len: usize) -> Result<(), Failure> {
    if out.is_null() {
        return fail(ClStatus::NullPointer, "output buffer is null");
    }
    if len < data.len() {
        return fail(ClStatus::BufferTooSmall, format!("buffer holds {len} values, {} needed", data.len()));
    }
    ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
    Ok(())
}

fn scheme(code: i32) -> Result<Scheme, Failure> {
    match code {
        0 => Ok(Scheme::Del),
        1 => Ok(Scheme::SympEuler),
        2 => Ok(Scheme::Rk2),
        3 => Ok(Scheme::Kkt),
        other => fail(ClStatus::InvalidArgument, format!("unknown scheme code {other}")),
    }
}

unsafe fn config(cfg: *const ClSolverConfig) -> Result<SolverConfig, Failure> {
    let c = match cfg.as_ref() {
        None => SolverConfig::default(),
        Some(c) => SolverConfig { tol: c.tol, max_iter: c.max_iter, damping: c.damping },
    };
    c.validate()?;
    Ok(c)
}

fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread. The pointer stays valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn cl_solver_config_default() -> ClSolverConfig {
    let c = SolverConfig::default();
    ClSolverConfig { tol: c.tol, max_iter: c.max_iter, damping: c.damping }
}

/// Ellipsoid with semi-axes `axes[0..n]`.
#[no_mangle]
pub unsafe extern "C" fn cl_ellipsoid_new(axes: *const f64, n: usize, out: *mut *mut ClManifold) -> ClStatus {
    guard(|| {
        let e = Ellipsoid::new(slice(axes, n, "axes")?.to_vec())?;
        write_out(out, Box::into_raw(Box::new(ClManifold(Manifold::Ellipsoid(e)))))
    })
}

/// Hyperplane `normal . q = offset` in `R^n`.
#[no_mangle]
pub unsafe extern "C" fn cl_hyperplane_new(normal: *const f64, n: usize, offset: f64, out: *mut *mut ClManifold) -> ClStatus {
    guard(|| {
        let normal = slice(normal, n, "normal")?.to_vec();
        if n < 2 || normal.iter().all(|x| *x == 0.0) || !offset.is_finite() {
            return fail(ClStatus::InvalidArgument, "hyperplane needs n >= 2, a nonzero normal and a finite offset");
        }
        write_out(out, Box::into_raw(Box::new(ClManifold(Manifold::Hyperplane(Hyperplane { normal, offset })))))
    })
}

#[no_mangle]
pub unsafe extern "C" fn cl_manifold_free(m: *mut ClManifold) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Ambient dimension `n`, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn cl_manifold_ambient_dim(m: *const ClManifold) -> usize {
    m.as_ref().map_or(0, |m| m.0.ambient_dim())
}

/// Radial projection of `q[0..n]` onto an ellipsoid.
#[no_mangle]
pub unsafe extern "C" fn cl_manifold_project(m: *const ClManifold, q: *const f64, n: usize, out: *mut f64) -> ClStatus {
    guard(|| {
        let m = handle(m, "manifold")?;
        let q = slice(q, n, "q")?;
        match &m.0 {
            Manifold::Ellipsoid(e) => copy_out(&e.project_radially(q)?, out, n),
            Manifold::Hyperplane(_) => fail(ClStatus::InvalidArgument, "radial projection needs an ellipsoid"),
        }
    })
}

/// Integrates `steps` steps from `(q0, p0)` (both of length `n`).
#[no_mangle]
pub unsafe extern "C" fn cl_integrate(
    m: *const ClManifold,
    scheme_code: i32,
    q0: *const f64,
    p0: *const f64,
    n: usize,
    steps: usize,
    cfg: *const ClSolverConfig,
    out: *mut *mut ClTrajectory,
) -> ClStatus {
    guard(|| {
        let m = handle(m, "manifold")?;
        let (q0, p0) = (slice(q0, n, "q0")?, slice(p0, n, "p0")?);
        let traj = integrate(scheme(scheme_code)?, &m.0, q0, p0, steps, &config(cfg)?)?;
        write_out(out, Box::into_raw(Box::new(ClTrajectory(traj))))
    })
}

#[no_mangle]
pub unsafe extern "C" fn cl_trajectory_free(t: *mut ClTrajectory) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Number of steps `N` (positions are `N + 1` rows), or 0 for null.
#[no_mangle]
pub unsafe extern "C" fn cl_trajectory_steps(t: *const ClTrajectory) -> usize {
    t.as_ref().map_or(0, |t| t.0.steps())
}

/// Number of doubles written by [`cl_trajectory_positions`].
#[no_mangle]
pub unsafe extern "C" fn cl_trajectory_positions_len(t: *const ClTrajectory) -> usize {
    t.as_ref().map_or(0, |t| t.0.qs.iter().map(Vec::len).sum())
}

/// Positions `q_0 .. q_N`, row-major.
#[no_mangle]
pub unsafe extern "C" fn cl_trajectory_positions(t: *const ClTrajectory, out: *mut f64, len: usize) -> ClStatus {
    guard(|| copy_out(&flatten(&handle(t, "trajectory")?.0.qs), out, len))
}

/// Number of doubles written by [`cl_trajectory_multipliers`].
#[no_mangle]
pub unsafe extern "C" fn cl_trajectory_multipliers_len(t: *const ClTrajectory) -> usize {
    t.as_ref().map_or(0, |t| t.0.lambdas.iter().map(Vec::len).sum())
}

/// Multipliers, row-major (DEL and symplectic Euler: `lambda_1 ..
/// lambda_{N-1}`; midpoint rule: `lambda_0 .. lambda_{N-1}`).
#[no_mangle]
pub unsafe extern "C" fn cl_trajectory_multipliers(t: *const ClTrajectory, out: *mut f64, len: usize) -> ClStatus {
    guard(|| copy_out(&flatten(&handle(t, "trajectory")?.0.lambdas), out, len))
}

/// Polygonal length `sum |q_{k+1} - q_k|`.
#[no_mangle]
pub unsafe extern "C" fn cl_trajectory_length(t: *const ClTrajectory, out: *mut f64) -> ClStatus {
    guard(|| write_out(out, handle(t, "trajectory")?.0.length()))
}

/// Endpoint map in the tangent chart at `base` (length `n`, on the manifold).
#[no_mangle]
pub unsafe extern "C" fn cl_endpoint_map_new(
    m: *const ClManifold,
    scheme_code: i32,
    base: *const f64,
    n: usize,
    steps: usize,
    cfg: *const ClSolverConfig,
    out: *mut *mut ClEndpointMap,
) -> ClStatus {
    guard(|| {
        let m = handle(m, "manifold")?;
        let base = slice(base, n, "base")?.to_vec();
        let map = EndpointMap::new(scheme(scheme_code)?, m.0.clone(), base, steps, config(cfg)?)?;
        write_out(out, Box::into_raw(Box::new(ClEndpointMap(map))))
    })
}

#[no_mangle]
pub unsafe extern "C" fn cl_endpoint_map_free(map: *mut ClEndpointMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Chart dimension `d`, or 0 for null.
#[no_mangle]
pub unsafe extern "C" fn cl_endpoint_map_chart_dim(map: *const ClEndpointMap) -> usize {
    map.as_ref().map_or(0, |m| m.0.input_dim())
}

/// `q_N` for chart point `v[0..d]`; writes `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn cl_endpoint_map_eval(map: *const ClEndpointMap, v: *const f64, d: usize, out: *mut f64, len: usize) -> ClStatus {
    guard(|| {
        let map = handle(map, "endpoint map")?;
        let q = map.0.endpoint(slice(v, d, "v")?)?;
        copy_out(&q, out, len)
    })
}

/// Oriented Jacobian determinant at `v[0..d]`.
#[no_mangle]
pub unsafe extern "C" fn cl_endpoint_map_det(map: *const ClEndpointMap, v: *const f64, d: usize, out: *mut f64) -> ClStatus {
    guard(|| {
        let map = handle(map, "endpoint map")?;
        write_out(out, det_at(&map.0, slice(v, d, "v")?)?)
    })
}

/// Singularity classification at `v[0..d]` with cusp threshold `eps_cusp`.
#[no_mangle]
pub unsafe extern "C" fn cl_classify(
    map: *const ClEndpointMap,
    v: *const f64,
    d: usize,
    eps_cusp: f64,
    out: *mut ClClassification,
) -> ClStatus {
    guard(|| {
        let map = handle(map, "endpoint map")?;
        let v = slice(v, d, "v")?;
        if !(eps_cusp > 0.0 && eps_cusp.is_finite()) {
            return fail(ClStatus::InvalidArgument, "eps_cusp must be positive");
        }
        let reference = sample(&map.0, &vec![0.0; d])?.sigma[0];
        let tol = SingularityTolerances { eps_cusp, eps_umb: LocusConfig::default().umb_rel * reference };
        let c = classify_singular_point(&map.0, v, &tol)?;
        let s = &c.sigma;
        let label = match c.label {
            Singularity::Fold => ClLabel::Fold,
            Singularity::Cusp => ClLabel::Cusp,
            Singularity::UmbilicCandidate => ClLabel::UmbilicCandidate,
        };
        write_out(
            out,
            ClClassification {
                label: label as i32,
                det: c.det,
                kernel_cosine: c.kernel_cosine(),
                kernel_derivative: c.kernel_derivative,
                sigma_min: s[s.len() - 1],
                sigma_second: if s.len() >= 2 { s[s.len() - 2] } else { 0.0 },
            },
        )
    })
}

/// Locus pipeline on the box `[lo_i, hi_i]` with `res[i]` nodes per axis
/// (`d` axes, default tolerances).
#[no_mangle]
pub unsafe extern "C" fn cl_locus_compute(
    map: *const ClEndpointMap,
    lo: *const f64,
    hi: *const f64,
    res: *const usize,
    d: usize,
    out: *mut *mut ClLocus,
) -> ClStatus {
    guard(|| {
        let map = handle(map, "endpoint map")?;
        if res.is_null() {
            return fail(ClStatus::NullPointer, "res is null");
        }
        let res = std::slice::from_raw_parts(res, d);
        let bounds = MeshBox::new(slice(lo, d, "lo")?.to_vec(), slice(hi, d, "hi")?.to_vec())?;
        let diag = compute_locus(&map.0, &bounds, res, &LocusConfig::default())?;
        write_out(out, Box::into_raw(Box::new(ClLocus(diag))))
    })
}

#[no_mangle]
pub unsafe extern "C" fn cl_locus_free(l: *mut ClLocus) {
    if !l.is_null() {
        drop(Box::from_raw(l));
    }
}

/// Number of critical-set vertices.
#[no_mangle]
pub unsafe extern "C" fn cl_locus_vertex_count(l: *const ClLocus) -> usize {
    l.as_ref().map_or(0, |l| l.0.critical_set.vertices.len())
}

/// Critical-set vertices in chart coordinates, row-major (`count * d`).
#[no_mangle]
pub unsafe extern "C" fn cl_locus_vertices(l: *const ClLocus, out: *mut f64, len: usize) -> ClStatus {
    guard(|| copy_out(&flatten(&handle(l, "locus")?.0.critical_set.vertices), out, len))
}

/// Images of the critical-set vertices, row-major (`count * n`).
#[no_mangle]
pub unsafe extern "C" fn cl_locus_images(l: *const ClLocus, out: *mut f64, len: usize) -> ClStatus {
    guard(|| copy_out(&flatten(&handle(l, "locus")?.0.locus), out, len))
}

#[no_mangle]
pub unsafe extern "C" fn cl_locus_cusp_count(l: *const ClLocus) -> usize {
    l.as_ref().map_or(0, |l| l.0.cusp_count())
}

#[no_mangle]
pub unsafe extern "C" fn cl_locus_umbilic_count(l: *const ClLocus) -> usize {
    l.as_ref().map_or(0, |l| l.0.umbilic_count())
}

/// The full diagram as JSON; release with [`cl_string_free`].
#[no_mangle]
pub unsafe extern "C" fn cl_locus_to_json(l: *const ClLocus, out: *mut *mut c_char) -> ClStatus {
    guard(|| {
        let l = handle(l, "locus")?;
        let s = cutlocus::export::to_json(&l.0).map_err(|e| Failure(ClStatus::EvaluationFailed, e.to_string()))?;
        let c = CString::new(s).map_err(|e| Failure(ClStatus::EvaluationFailed, e.to_string()))?;
        write_out(out, c.into_raw())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Counts discrete geodesics from `q0` to `q_n` (length `n`) no longer than
/// `bound`, by multistart shooting over `directions x speeds` seeds. If
/// `lengths` is non-null, up to `lengths_len` lengths are written in
/// ascending order.
#[no_mangle]
pub unsafe extern "C" fn cl_count_solutions(
    m: *const ClManifold,
    q0: *const f64,
    q_n: *const f64,
    n: usize,
    steps: usize,
    cfg: *const ClSolverConfig,
    bound: f64,
    directions: usize,
    speeds: usize,
    count: *mut usize,
    lengths: *mut f64,
    lengths_len: usize,
) -> ClStatus {
    guard(|| {
        let m = handle(m, "manifold")?;
        if directions == 0 || speeds == 0 {
            return fail(ClStatus::InvalidArgument, "seed grid must be nonempty");
        }
        let prob = BvpProblem::new(m.0.clone(), slice(q0, n, "q0")?.to_vec(), slice(q_n, n, "q_n")?.to_vec(), steps, config(cfg)?)?;
        let report = count_solutions(&prob, &CountOptions::new(bound, SeedGrid::new(directions, speeds)))?;
        write_out(count, report.count())?;
        if !lengths.is_null() {
            for (i, s) in report.solutions.iter().take(lengths_len).enumerate() {
                lengths.add(i).write(s.length);
            }
        }
        Ok(())
    })
}
