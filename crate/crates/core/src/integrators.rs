//! Discretisations of the constrained geodesic equations on `M = g^{-1}(0)`.
//!
//! * discrete Euler-Lagrange (DEL) recurrence with a discrete Legendre
//!   transform for the first step,
//! * constrained symplectic Euler (equivalent to DEL after eliminating the
//!   momenta),
//! * the non-symplectic constrained explicit midpoint rule,
//! * the direct KKT system of the discretised control problem.
//!
//! Every step is a pure function of its inputs and generic over [`Scalar`],
//! so the same code computes derivatives of endpoint maps.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::geometry::{hessian_contract, LevelSet};
use crate::linalg::{norm_re, Lu};

const MIN_DAMPING: f64 = 1.0 / 64.0;
const POLISH_STEPS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Residual tolerance (Euclidean norm).
    pub tol: f64,
    pub max_iter: usize,
    /// Initial Newton step scale; halved on residual increase down to 1/64.
    pub damping: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tol: 1e-12, max_iter: 50, damping: 1.0 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::InvalidInput("solver tolerance must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidInput("max_iter must be at least 1".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidInput("damping must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Del,
    SympEuler,
    Rk2,
    Kkt,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Del => "del",
            Scheme::SympEuler => "sympeuler",
            Scheme::Rk2 => "rk2",
            Scheme::Kkt => "kkt",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "del" => Ok(Scheme::Del),
            "sympeuler" | "symplectic-euler" => Ok(Scheme::SympEuler),
            "rk2" | "midpoint" => Ok(Scheme::Rk2),
            "kkt" => Ok(Scheme::Kkt),
            other => Err(Error::InvalidInput(format!("unknown scheme '{other}'"))),
        }
    }
}

/// Positions, multipliers and (optionally) momenta on `[0, 1]` with `N dt = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteTrajectory<S = f64> {
    pub dt: f64,
    /// `q_0 .. q_N`.
    pub qs: Vec<Vec<S>>,
    /// DEL, symplectic Euler and KKT: `lambda_1 .. lambda_{N-1}`;
    /// midpoint rule: `lambda_0 .. lambda_{N-1}`.
    pub lambdas: Vec<Vec<S>>,
    pub ps: Option<Vec<Vec<S>>>,
}

impl<S: Scalar> DiscreteTrajectory<S> {
    pub fn steps(&self) -> usize {
        self.qs.len() - 1
    }

    pub fn endpoint(&self) -> &[S] {
        self.qs.last().expect("trajectory has at least one point")
    }

    /// Real parts of every stored quantity.
    pub fn values(&self) -> DiscreteTrajectory<f64> {
        let re = |v: &Vec<Vec<S>>| v.iter().map(|x| x.iter().map(Scalar::re).collect()).collect();
        DiscreteTrajectory { dt: self.dt, qs: re(&self.qs), lambdas: re(&self.lambdas), ps: self.ps.as_ref().map(re) }
    }
}

impl DiscreteTrajectory<f64> {
    /// `sum_k |q_{k+1} - q_k|`.
    pub fn length(&self) -> f64 {
        self.qs.windows(2).map(|w| crate::linalg::dist(&w[0], &w[1])).sum()
    }

    /// Post-processed momenta `p_k = (q_{k+1} - q_k) / dt`, `k = 0 .. N-1`.
    pub fn difference_momenta(&self) -> Vec<Vec<f64>> {
        self.qs.windows(2).map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| (b - a) / self.dt).collect()).collect()
    }
}

/// Damped Newton iteration on `F(x) = 0`.
///
/// `eval` returns the residual (in the scalar type) and the Jacobian at the
/// real part of `x` (row-major). After the value part has converged,
/// `S::ORDER + 1` further undamped steps are taken: one polishes the value
/// to round-off and one per differentiation order makes the derivative
/// parts converge as well. Results then do not depend on `cfg.tol` beyond
/// round-off.
pub(crate) fn newton<S: Scalar>(
    x: &mut [S],
    cfg: &SolverConfig,
    mut eval: impl FnMut(&[S]) -> (Vec<S>, Vec<f64>),
) -> Result<()> {
    let k = x.len();
    let (mut r, mut a) = eval(x);
    let mut rn = norm_re(&r);
    let mut iters = 0;
    let mut extra = 0;
    loop {
        if rn <= cfg.tol {
            if extra > S::ORDER {
                return Ok(());
            }
            let dx = Lu::new(a, k)?.solve(&r);
            for (xi, di) in x.iter_mut().zip(&dx) {
                *xi -= *di;
            }
            (r, a) = eval(x);
            rn = norm_re(&r);
            extra += 1;
            continue;
        }
        if iters >= cfg.max_iter || !rn.is_finite() {
            return Err(Error::NewtonDiverged { iterations: iters, residual: rn });
        }
        iters += 1;
        let dx = Lu::new(a.clone(), k)?.solve(&r);
        let mut alpha = cfg.damping;
        loop {
            let trial: Vec<S> = x.iter().zip(&dx).map(|(xi, di)| *xi - *di * alpha).collect();
            let (rt, at) = eval(&trial);
            let rtn = norm_re(&rt);
            if rtn < rn || rtn <= cfg.tol {
                x.copy_from_slice(&trial);
                r = rt;
                a = at;
                rn = rtn;
                break;
            }
            alpha *= 0.5;
            if alpha < MIN_DAMPING {
                return Err(Error::NewtonDiverged { iterations: iters, residual: rn });
            }
        }
    }
}

fn constraint_jacobian<S: Scalar, L: LevelSet>(spec: &L, q: &[S]) -> Vec<S> {
    let mut jac = vec![S::zero(); spec.codim() * spec.ambient_dim()];
    spec.jacobian(q, &mut jac);
    jac
}

fn constraint_value<S: Scalar, L: LevelSet>(spec: &L, q: &[S]) -> Vec<S> {
    let mut g = vec![S::zero(); spec.codim()];
    spec.value(q, &mut g);
    g
}

fn re_vec<S: Scalar>(x: &[S]) -> Vec<f64> {
    x.iter().map(Scalar::re).collect()
}

/// `G^T lambda` for a row-major `m x n` Jacobian.
fn jt_times<S: Scalar>(jac: &[S], lambda: &[S], n: usize) -> Vec<S> {
    let m = lambda.len();
    (0..n).map(|j| (0..m).fold(S::zero(), |acc, i| acc + jac[i * n + j] * lambda[i])).collect()
}

/// Solves `(y - linear)/dt + coef * G0^T lambda = 0, g(y) = 0` for `(y, lambda)`,
/// the common shape of the DEL step and the discrete Legendre transform.
fn solve_position_multiplier<S: Scalar, L: LevelSet>(
    spec: &L,
    linear: &[S],
    g0: &[S],
    coef: f64,
    dt: f64,
    predictor: Vec<S>,
    lambda_guess: Vec<S>,
    cfg: &SolverConfig,
) -> Result<(Vec<S>, Vec<S>)> {
    let (n, m) = (spec.ambient_dim(), spec.codim());
    let g0_re = re_vec(g0);
    let mut x = predictor;
    x.extend(lambda_guess);
    let mut jac_y = vec![0.0; m * n];
    newton(&mut x, cfg, |x| {
        let (y, lambda) = x.split_at(n);
        let force = jt_times(g0, lambda, n);
        let mut r = Vec::with_capacity(n + m);
        for i in 0..n {
            r.push((y[i] - linear[i]) / dt + force[i] * coef);
        }
        r.extend(constraint_value(spec, y));
        let y_re = re_vec(y);
        spec.jacobian(&y_re, &mut jac_y);
        let k = n + m;
        let mut a = vec![0.0; k * k];
        for i in 0..n {
            a[i * k + i] = 1.0 / dt;
            for l in 0..m {
                a[i * k + n + l] = coef * g0_re[l * n + i];
            }
        }
        for l in 0..m {
            for j in 0..n {
                a[(n + l) * k + j] = jac_y[l * n + j];
            }
        }
        (r, a)
    })?;
    let lambda = x.split_off(n);
    Ok((x, lambda))
}

/// One DEL step: solves
/// `(q_next - 2 q_cur + q_prev)/dt + dt g'(q_cur)^T lambda = 0`, `g(q_next) = 0`.
///
/// Newton starts from the predictor `2 q_cur - q_prev` and `lambda_guess`
/// (zero if absent), which selects the root continuous in the step size.
pub fn del_step<S: Scalar, L: LevelSet>(
    spec: &L,
    q_prev: &[S],
    q_cur: &[S],
    lambda_guess: Option<&[S]>,
    dt: f64,
    cfg: &SolverConfig,
) -> Result<(Vec<S>, Vec<S>)> {
    let n = spec.ambient_dim();
    let linear: Vec<S> = (0..n).map(|i| q_cur[i] * 2.0 - q_prev[i]).collect();
    let g_cur = constraint_jacobian(spec, q_cur);
    let guess = lambda_guess.map_or_else(|| vec![S::zero(); spec.codim()], <[S]>::to_vec);
    solve_position_multiplier(spec, &linear, &g_cur, dt, dt, linear.clone(), guess, cfg)
}

/// Discrete Legendre transform: solves
/// `p0 = (q1 - q0)/dt + g'(q0)^T lambda0`, `g(q1) = 0` for `(q1, lambda0)`.
pub fn discrete_legendre<S: Scalar, L: LevelSet>(
    spec: &L,
    q0: &[S],
    p0: &[S],
    dt: f64,
    cfg: &SolverConfig,
) -> Result<(Vec<S>, Vec<S>)> {
    let n = spec.ambient_dim();
    let linear: Vec<S> = (0..n).map(|i| q0[i] + p0[i] * dt).collect();
    let g0 = constraint_jacobian(spec, q0);
    solve_position_multiplier(spec, &linear, &g0, 1.0, dt, linear.clone(), vec![S::zero(); spec.codim()], cfg)
}

/// Solves `g(base - c * G(at)^T lambda) = 0` for `lambda` (m-dimensional).
fn solve_multiplier<S: Scalar, L: LevelSet>(
    spec: &L,
    base: &[S],
    g_at: &[S],
    c: f64,
    guess: Vec<S>,
    cfg: &SolverConfig,
) -> Result<Vec<S>> {
    let (n, m) = (spec.ambient_dim(), spec.codim());
    let g_at_re = re_vec(g_at);
    let mut lambda = guess;
    let mut jac = vec![0.0; m * n];
    newton(&mut lambda, cfg, |lambda| {
        let shift = jt_times(g_at, lambda, n);
        let y: Vec<S> = (0..n).map(|i| base[i] - shift[i] * c).collect();
        let r = constraint_value(spec, &y);
        spec.jacobian(&re_vec(&y), &mut jac);
        let mut a = vec![0.0; m * m];
        for i in 0..m {
            for l in 0..m {
                a[i * m + l] = -c * (0..n).map(|j| jac[i * n + j] * g_at_re[l * n + j]).sum::<f64>();
            }
        }
        (r, a)
    })?;
    Ok(lambda)
}

/// Returned by the one-step methods.
#[derive(Debug, Clone, PartialEq)]
pub struct Step<S> {
    pub q_next: Vec<S>,
    pub p_next: Vec<S>,
    pub lambda: Vec<S>,
}

/// Constrained symplectic Euler step
/// `q_next = q + dt p`, `p_next = p - dt g'(q_next)^T lambda_next`, where
/// `lambda_next` is fixed by requiring `g(q_next + dt p_next) = 0`.
///
/// Requires `q + dt p` on `M` (within `cfg.tol`).
pub fn symplectic_euler_step<S: Scalar, L: LevelSet>(
    spec: &L,
    q_cur: &[S],
    p_cur: &[S],
    lambda_guess: Option<&[S]>,
    dt: f64,
    cfg: &SolverConfig,
) -> Result<Step<S>> {
    let n = spec.ambient_dim();
    let q_next: Vec<S> = (0..n).map(|i| q_cur[i] + p_cur[i] * dt).collect();
    let gn = norm_re(&constraint_value(spec, &q_next));
    if gn > cfg.tol.max(1e-10) {
        return Err(Error::ConstraintViolated(gn));
    }
    let g_next = constraint_jacobian(spec, &q_next);
    let base: Vec<S> = (0..n).map(|i| q_next[i] + p_cur[i] * dt).collect();
    let guess = lambda_guess.map_or_else(|| vec![S::zero(); spec.codim()], <[S]>::to_vec);
    let lambda = solve_multiplier(spec, &base, &g_next, dt * dt, guess, cfg)?;
    let force = jt_times(&g_next, &lambda, n);
    let p_next = (0..n).map(|i| p_cur[i] - force[i] * dt).collect();
    Ok(Step { q_next, p_next, lambda })
}

/// Constrained explicit midpoint step:
/// `q_next = q + dt (p - dt/2 g'(q)^T lambda)` with `g(q_next) = 0`,
/// `p_next = p - dt g'(q + dt/2 p)^T lambda`.
pub fn rk2_step<S: Scalar, L: LevelSet>(
    spec: &L,
    q_cur: &[S],
    p_cur: &[S],
    lambda_guess: Option<&[S]>,
    dt: f64,
    cfg: &SolverConfig,
) -> Result<Step<S>> {
    let n = spec.ambient_dim();
    let g_cur = constraint_jacobian(spec, q_cur);
    let base: Vec<S> = (0..n).map(|i| q_cur[i] + p_cur[i] * dt).collect();
    let guess = lambda_guess.map_or_else(|| vec![S::zero(); spec.codim()], <[S]>::to_vec);
    let lambda = solve_multiplier(spec, &base, &g_cur, 0.5 * dt * dt, guess, cfg)?;
    let shift = jt_times(&g_cur, &lambda, n);
    let q_next: Vec<S> = (0..n).map(|i| base[i] - shift[i] * (0.5 * dt * dt)).collect();
    let mid: Vec<S> = (0..n).map(|i| q_cur[i] + p_cur[i] * (0.5 * dt)).collect();
    let g_mid = constraint_jacobian(spec, &mid);
    let force = jt_times(&g_mid, &lambda, n);
    let p_next = (0..n).map(|i| p_cur[i] - force[i] * dt).collect();
    Ok(Step { q_next, p_next, lambda })
}

fn check_start<S: Scalar, L: LevelSet>(spec: &L, q0: &[S], p0: &[S], n_steps: usize) -> Result<()> {
    let n = spec.ambient_dim();
    if q0.len() != n {
        return Err(Error::InvalidDimension { expected: n, got: q0.len() });
    }
    if p0.len() != n {
        return Err(Error::InvalidDimension { expected: n, got: p0.len() });
    }
    if n_steps == 0 {
        return Err(Error::InvalidInput("number of steps must be positive".into()));
    }
    let gn = norm_re(&constraint_value(spec, q0));
    if gn > crate::geometry::TOL_CONSTRAINT {
        return Err(Error::ConstraintViolated(gn));
    }
    Ok(())
}

/// DEL trajectory from `(q0, q1)` over `n_steps` steps.
pub fn del_from_first_step<S: Scalar, L: LevelSet>(
    spec: &L,
    q0: Vec<S>,
    q1: Vec<S>,
    n_steps: usize,
    cfg: &SolverConfig,
) -> Result<DiscreteTrajectory<S>> {
    let dt = 1.0 / n_steps as f64;
    let mut qs = Vec::with_capacity(n_steps + 1);
    qs.push(q0);
    qs.push(q1);
    let mut lambdas: Vec<Vec<S>> = Vec::with_capacity(n_steps.saturating_sub(1));
    for k in 1..n_steps {
        let guess = lambdas.last().map(Vec::as_slice);
        let (q_next, lambda) = del_step(spec, &qs[k - 1], &qs[k], guess, dt, cfg).map_err(|e| e.at_step(k))?;
        qs.push(q_next);
        lambdas.push(lambda);
    }
    Ok(DiscreteTrajectory { dt, qs, lambdas, ps: None })
}

/// Integrates `n_steps` steps of `scheme` over `[0, 1]` from `(q0, p0)`.
///
/// DEL and symplectic Euler obtain `q_1` by the discrete Legendre transform;
/// symplectic Euler then uses `p_0 = (q_1 - q_0)/dt`. The KKT method is a
/// boundary value formulation and is rejected here (see [`kkt_solve`]).
pub fn integrate<S: Scalar, L: LevelSet>(
    scheme: Scheme,
    spec: &L,
    q0: &[S],
    p0: &[S],
    n_steps: usize,
    cfg: &SolverConfig,
) -> Result<DiscreteTrajectory<S>> {
    check_start(spec, q0, p0, n_steps)?;
    let n = spec.ambient_dim();
    let dt = 1.0 / n_steps as f64;
    match scheme {
        Scheme::Del => {
            let (q1, _) = discrete_legendre(spec, q0, p0, dt, cfg).map_err(|e| e.at_step(0))?;
            del_from_first_step(spec, q0.to_vec(), q1, n_steps, cfg)
        }
        Scheme::SympEuler => {
            let (q1, _) = discrete_legendre(spec, q0, p0, dt, cfg).map_err(|e| e.at_step(0))?;
            let p_start: Vec<S> = (0..n).map(|i| (q1[i] - q0[i]) / dt).collect();
            let mut qs = vec![q0.to_vec()];
            let mut ps = vec![p_start];
            let mut lambdas: Vec<Vec<S>> = Vec::with_capacity(n_steps);
            for k in 0..n_steps {
                let (q, p) = (qs[k].clone(), ps[k].clone());
                if k + 1 == n_steps {
                    qs.push((0..n).map(|i| q[i] + p[i] * dt).collect());
                    break;
                }
                let guess = lambdas.last().map(Vec::as_slice);
                let step = symplectic_euler_step(spec, &q, &p, guess, dt, cfg).map_err(|e| e.at_step(k))?;
                qs.push(step.q_next);
                ps.push(step.p_next);
                lambdas.push(step.lambda);
            }
            Ok(DiscreteTrajectory { dt, qs, lambdas, ps: Some(ps) })
        }
        Scheme::Rk2 => {
            let mut qs = vec![q0.to_vec()];
            let mut ps = vec![p0.to_vec()];
            let mut lambdas: Vec<Vec<S>> = Vec::with_capacity(n_steps);
            for k in 0..n_steps {
                let guess = lambdas.last().map(Vec::as_slice);
                let step = rk2_step(spec, &qs[k], &ps[k], guess, dt, cfg).map_err(|e| e.at_step(k))?;
                qs.push(step.q_next);
                ps.push(step.p_next);
                lambdas.push(step.lambda);
            }
            Ok(DiscreteTrajectory { dt, qs, lambdas, ps: Some(ps) })
        }
        Scheme::Kkt => Err(Error::InvalidInput("kkt is a boundary value method; use kkt_solve".into())),
    }
}

/// Residuals of the DEL recurrence at every interior index, `max_k` of the
/// Euclidean norm of `((q_{k+1} - 2 q_k + q_{k-1})/dt + dt g'(q_k)^T lambda_k, g(q_{k+1}))`.
pub fn del_residual<L: LevelSet>(spec: &L, traj: &DiscreteTrajectory) -> f64 {
    let n = spec.ambient_dim();
    let dt = traj.dt;
    let mut worst = 0.0f64;
    for k in 1..traj.qs.len() - 1 {
        let g = constraint_jacobian(spec, &traj.qs[k]);
        let f = jt_times(&g, &traj.lambdas[k - 1], n);
        let mut r: Vec<f64> =
            (0..n).map(|i| (traj.qs[k + 1][i] - 2.0 * traj.qs[k][i] + traj.qs[k - 1][i]) / dt + dt * f[i]).collect();
        r.extend(constraint_value(spec, &traj.qs[k + 1]));
        worst = worst.max(crate::linalg::norm(&r));
    }
    worst
}

/// Full state of the direct method: positions `q_0 .. q_N`, multipliers
/// `lambda_1 .. lambda_{N-1}`, controls `u_0 .. u_{N-1}` and state-equation
/// multipliers `mu_0 .. mu_{N-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktSolution {
    pub trajectory: DiscreteTrajectory,
    pub us: Vec<Vec<f64>>,
    pub mus: Vec<Vec<f64>>,
}

impl KktSolution {
    /// Controls and multipliers eliminated from a position sequence:
    /// `mu_k = (q_{k+1} - q_k)/dt^2`, `u_k = dt mu_k`.
    pub fn from_trajectory(trajectory: DiscreteTrajectory) -> Self {
        let dt = trajectory.dt;
        let mus: Vec<Vec<f64>> = trajectory
            .qs
            .windows(2)
            .map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| (b - a) / (dt * dt)).collect())
            .collect();
        let us = mus.iter().map(|mu| mu.iter().map(|x| dt * x).collect()).collect();
        Self { trajectory, us, mus }
    }
}

/// Stacked stationarity conditions of
/// `J = sum_k 1/2 |u_k|^2 - g(q_k)^T lambda_k + mu_k^T (q_{k+1} - q_k - dt u_k)`:
/// `dJ/dmu_k`, `dJ/du_k` (`k = 0..N-1`), `dJ/dq_k`, `dJ/dlambda_k` (`k = 1..N-1`).
pub fn kkt_residual_vector<L: LevelSet>(spec: &L, sol: &KktSolution) -> Vec<f64> {
    let n = spec.ambient_dim();
    let traj = &sol.trajectory;
    let dt = traj.dt;
    let nn = traj.steps();
    let mut r = Vec::new();
    for k in 0..nn {
        for i in 0..n {
            r.push(traj.qs[k + 1][i] - traj.qs[k][i] - dt * sol.us[k][i]);
        }
        for i in 0..n {
            r.push(sol.us[k][i] - dt * sol.mus[k][i]);
        }
    }
    for k in 1..nn {
        let g = constraint_jacobian(spec, &traj.qs[k]);
        let f = jt_times(&g, &traj.lambdas[k - 1], n);
        for i in 0..n {
            r.push(-f[i] - sol.mus[k][i] + sol.mus[k - 1][i]);
        }
        for gi in constraint_value(spec, &traj.qs[k]) {
            r.push(-gi);
        }
    }
    r
}

/// Max-norm of [`kkt_residual_vector`].
pub fn kkt_residual<L: LevelSet>(spec: &L, sol: &KktSolution) -> f64 {
    kkt_residual_vector(spec, sol).iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Solves the KKT system of the direct method between `q0` and `q_n` by a
/// global Newton iteration.
///
/// The controls and state multipliers are eliminated (`u_k = dt mu_k`,
/// `mu_k = (q_{k+1} - q_k)/dt^2`), leaving the `(N-1)(n+m)` unknowns
/// `(q_k, lambda_k)`; they are restored in the returned solution.
pub fn kkt_solve<L: LevelSet>(
    spec: &L,
    q0: &[f64],
    q_n: &[f64],
    n_steps: usize,
    cfg: &SolverConfig,
    initial_guess: &DiscreteTrajectory,
) -> Result<KktSolution> {
    let (n, m) = (spec.ambient_dim(), spec.codim());
    if n_steps < 2 {
        return Err(Error::InvalidInput("kkt needs at least two steps".into()));
    }
    if initial_guess.qs.len() != n_steps + 1 {
        return Err(Error::InvalidDimension { expected: n_steps + 1, got: initial_guess.qs.len() });
    }
    let dt = 1.0 / n_steps as f64;
    let dt2 = dt * dt;
    let b = n + m;
    let unknowns = (n_steps - 1) * b;
    let mut x = Vec::with_capacity(unknowns);
    for k in 1..n_steps {
        x.extend_from_slice(&initial_guess.qs[k]);
        match initial_guess.lambdas.get(k - 1) {
            Some(l) if l.len() == m => x.extend_from_slice(l),
            _ => x.extend(std::iter::repeat_n(0.0, m)),
        }
    }
    let pos = |x: &[f64], k: usize| -> Vec<f64> {
        if k == 0 {
            q0.to_vec()
        } else if k == n_steps {
            q_n.to_vec()
        } else {
            x[(k - 1) * b..(k - 1) * b + n].to_vec()
        }
    };
    let system = |x: &[f64]| {
        let mut r = vec![0.0; unknowns];
        let mut a = vec![0.0; unknowns * unknowns];
        for k in 1..n_steps {
            let row0 = (k - 1) * b;
            let (qm, qk, qp) = (pos(x, k - 1), pos(x, k), pos(x, k + 1));
            let lambda = &x[row0 + n..row0 + b];
            let g = constraint_jacobian(spec, &qk);
            let f = jt_times(&g, lambda, n);
            for i in 0..n {
                // dt^2 dJ/dq_k = dt^2 (-g'^T lambda - mu_k + mu_{k-1}); the
                // scaling keeps the Newton tolerance meaningful for small dt
                r[row0 + i] = -dt2 * f[i] - (qp[i] - 2.0 * qk[i] + qm[i]);
            }
            for (l, gl) in constraint_value(spec, &qk).into_iter().enumerate() {
                r[row0 + n + l] = -gl;
            }
            let h = hessian_contract(spec, &qk, lambda);
            for i in 0..n {
                let row = (row0 + i) * unknowns;
                for j in 0..n {
                    a[row + row0 + j] = -dt2 * h[i * n + j];
                }
                a[row + row0 + i] += 2.0;
                for l in 0..m {
                    a[row + row0 + n + l] = -dt2 * g[l * n + i];
                }
                if k > 1 {
                    a[row + row0 - b + i] = -1.0;
                }
                if k + 1 < n_steps {
                    a[row + row0 + b + i] = -1.0;
                }
            }
            for l in 0..m {
                let row = (row0 + n + l) * unknowns;
                for j in 0..n {
                    a[row + row0 + j] = -g[l * n + j];
                }
            }
        }
        (r, a)
    };
    newton(&mut x, cfg, system)?;
    // Polish to round-off: the tolerance applies to the scaled rows.
    for _ in 0..POLISH_STEPS {
        let (r, a) = system(&x);
        let rn = norm_re(&r);
        let dx = Lu::new(a, unknowns)?.solve(&r);
        let trial: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a - b).collect();
        if norm_re(&system(&trial).0) >= rn {
            break;
        }
        x = trial;
    }
    let mut qs = Vec::with_capacity(n_steps + 1);
    let mut lambdas = Vec::with_capacity(n_steps - 1);
    qs.push(q0.to_vec());
    for k in 1..n_steps {
        qs.push(x[(k - 1) * b..(k - 1) * b + n].to_vec());
        lambdas.push(x[(k - 1) * b + n..k * b].to_vec());
    }
    qs.push(q_n.to_vec());
    Ok(KktSolution::from_trajectory(DiscreteTrajectory { dt, qs, lambdas, ps: None }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Dual;
    use crate::geometry::{Ellipsoid, Hyperplane};
    use crate::linalg::{dist, dot, norm};

    fn cfg() -> SolverConfig {
        SolverConfig::default()
    }

    #[test]
    fn del_step_on_plane_is_straight() {
        let plane = Hyperplane::coordinate(3, 2);
        let (q, l) = del_step(&plane, &[0.0, 0.0, 0.0], &[0.1, 0.0, 0.0], None, 0.1, &cfg()).unwrap();
        assert!(dist(&q, &[0.2, 0.0, 0.0]) < 1e-15);
        assert!(l[0].abs() < 1e-15);
    }

    #[test]
    fn del_step_on_sphere_closed_form() {
        let s = Ellipsoid::unit_sphere(3);
        let th: f64 = 0.1;
        let dt = 0.1;
        let prev = [th.cos(), -th.sin(), 0.0];
        let (q, l) = del_step(&s, &prev, &[1.0, 0.0, 0.0], None, dt, &cfg()).unwrap();
        assert!(dist(&q, &[th.cos(), th.sin(), 0.0]) < 1e-14);
        assert!((l[0] - (1.0 - th.cos()) / (dt * dt)).abs() < 1e-12);
        // the other multiplier root would land at -q_prev
        assert!(dist(&q, &[-prev[0], -prev[1], -prev[2]]) > 1.0);
    }

    #[test]
    fn legendre_examples() {
        let s = Ellipsoid::new(vec![1.0, 0.8, 0.6]).unwrap();
        let q0 = s.point_from_direction(&[0.3, 0.4, 0.5]);
        let (q1, l0) = discrete_legendre(&s, &q0, &[0.0; 3], 0.1, &cfg()).unwrap();
        assert!(dist(&q1, &q0) < 1e-15 && l0[0].abs() < 1e-15);

        let plane = Hyperplane::coordinate(3, 2);
        let (q1, l0) = discrete_legendre(&plane, &[0.0; 3], &[1.0, 0.0, 0.0], 0.1, &cfg()).unwrap();
        assert!(dist(&q1, &[0.1, 0.0, 0.0]) < 1e-15 && l0[0].abs() < 1e-15);

        let sph = Ellipsoid::unit_sphere(3);
        let dt = 0.1;
        let (q1, l0) = discrete_legendre(&sph, &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], dt, &cfg()).unwrap();
        assert!((norm(&q1) - 1.0).abs() < 1e-12);
        let r: Vec<f64> = (0..3).map(|i| (q1[i] - [1.0, 0.0, 0.0][i]) / dt + 2.0 * l0[0] * [1.0, 0.0, 0.0][i] - [0.0, 1.0, 0.0][i]).collect();
        assert!(norm(&r) < 1e-12);
    }

    #[test]
    fn symplectic_euler_on_plane() {
        let plane = Hyperplane::coordinate(3, 2);
        let st = symplectic_euler_step(&plane, &[0.0; 3], &[1.0, 0.0, 0.0], None, 0.1, &cfg()).unwrap();
        assert!(dist(&st.q_next, &[0.1, 0.0, 0.0]) < 1e-15);
        assert!(dist(&st.p_next, &[1.0, 0.0, 0.0]) < 1e-15);
        assert!(st.lambda[0].abs() < 1e-15);
    }

    #[test]
    fn symplectic_euler_eliminates_to_del() {
        let s = Ellipsoid::unit_sphere(3);
        let dt = 0.1;
        let (q1, _) = discrete_legendre(&s, &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.3], dt, &cfg()).unwrap();
        let p0: Vec<f64> = (0..3).map(|i| (q1[i] - [1.0, 0.0, 0.0][i]) / dt).collect();
        let st = symplectic_euler_step(&s, &[1.0, 0.0, 0.0], &p0, None, dt, &cfg()).unwrap();
        assert!((norm(&st.q_next) - 1.0).abs() < 1e-12);
        let q2: Vec<f64> = (0..3).map(|i| st.q_next[i] + dt * st.p_next[i]).collect();
        let r: Vec<f64> = (0..3)
            .map(|i| (q2[i] - 2.0 * st.q_next[i] + [1.0, 0.0, 0.0][i]) / dt + dt * 2.0 * st.q_next[i] * st.lambda[0])
            .collect();
        assert!(norm(&r) < 1e-12);
    }

    #[test]
    fn symplectic_euler_requires_landing_on_manifold() {
        let s = Ellipsoid::unit_sphere(3);
        let r = symplectic_euler_step(&s, &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], None, 0.1, &cfg());
        assert!(matches!(r, Err(Error::ConstraintViolated(_))));
    }

    #[test]
    fn rk2_examples() {
        let plane = Hyperplane::coordinate(3, 2);
        let st = rk2_step(&plane, &[0.0; 3], &[1.0, 0.0, 0.0], None, 0.1, &cfg()).unwrap();
        assert!(dist(&st.q_next, &[0.1, 0.0, 0.0]) < 1e-15);
        assert!(dist(&st.p_next, &[1.0, 0.0, 0.0]) < 1e-15);
        assert!(st.lambda[0].abs() < 1e-15);

        let s = Ellipsoid::unit_sphere(3);
        let st = rk2_step(&s, &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], None, 0.1, &cfg()).unwrap();
        assert!((dot(&st.q_next, &st.q_next) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_momentum_is_stationary() {
        let e = Ellipsoid::new(vec![1.0, 0.8, 0.6]).unwrap();
        let q0 = e.point_from_direction(&[0.2, -0.7, 0.4]);
        for scheme in [Scheme::Del, Scheme::SympEuler, Scheme::Rk2] {
            let t = integrate(scheme, &e, &q0, &[0.0; 3], 10, &cfg()).unwrap();
            assert!(t.qs.iter().all(|q| dist(q, &q0) < 1e-15), "{scheme}");
        }
    }

    #[test]
    fn del_reaches_sphere_antipode() {
        let s = Ellipsoid::unit_sphere(3);
        let t = integrate(Scheme::Del, &s, &[1.0, 0.0, 0.0], &[0.0, std::f64::consts::PI, 0.0], 100, &cfg()).unwrap();
        assert!(dist(t.endpoint(), &[-1.0, 0.0, 0.0]) <= 25.0 * 1e-4);
        assert_eq!(t.lambdas.len(), 99);
        assert!(del_residual(&s, &t) < 1e-11);
    }

    #[test]
    fn del_on_sphere_conserves_chords() {
        let s = Ellipsoid::unit_sphere(3);
        let t = integrate(Scheme::Del, &s, &[1.0, 0.0, 0.0], &[0.0, 2.0, 1.0], 60, &cfg()).unwrap();
        let chords: Vec<f64> = t.qs.windows(2).map(|w| dist(&w[0], &w[1])).collect();
        for c in &chords {
            assert!((c - chords[0]).abs() <= 1e-12 * chords[0]);
        }
    }

    #[test]
    fn kkt_on_plane_is_straight_line() {
        let plane = Hyperplane::coordinate(3, 2);
        let n = 10;
        let guess = DiscreteTrajectory {
            dt: 0.1,
            qs: (0..=n).map(|k| vec![(k as f64 / 10.0).powi(2), 0.05 * (k % 2) as f64, 0.0]).collect(),
            lambdas: vec![],
            ps: None,
        };
        let sol = kkt_solve(&plane, &[0.0; 3], &[1.0, 0.0, 0.0], n, &cfg(), &guess).unwrap();
        for (k, q) in sol.trajectory.qs.iter().enumerate() {
            assert!(dist(q, &[k as f64 / 10.0, 0.0, 0.0]) < 1e-13);
        }
        assert!(sol.trajectory.lambdas.iter().all(|l| l[0].abs() < 1e-10));
        assert!(kkt_residual(&plane, &sol) < 1e-12);
    }

    #[test]
    fn time_reversal_of_del() {
        let e = Ellipsoid::new(vec![1.0, 0.8, 0.6]).unwrap();
        let q0 = e.point_from_direction(&[0.5, 0.5, 0.5]);
        let frame = crate::geometry::tangent_frame(&e, &q0).unwrap();
        let p0: Vec<f64> = (0..3).map(|i| 1.3 * frame[0][i] - 0.4 * frame[1][i]).collect();
        let t = integrate(Scheme::Del, &e, &q0, &p0, 40, &cfg()).unwrap();
        let mut rev = t.clone();
        rev.qs.reverse();
        rev.lambdas.reverse();
        // the reversed sequence satisfies the same recurrence; the constraint row
        // now refers to q_{k+1} of the reversed sequence, which also lies on M
        assert!(del_residual(&e, &rev) < 1e-10);
    }

    #[test]
    fn dual_integration_matches_value_path() {
        let e = Ellipsoid::new(vec![1.0, 0.8, 0.6]).unwrap();
        let q0 = e.point_from_direction(&[0.5, 0.5, 0.5]);
        let frame = crate::geometry::tangent_frame(&e, &q0).unwrap();
        let p0: Vec<f64> = (0..3).map(|i| 1.3 * frame[0][i] - 0.4 * frame[1][i]).collect();
        let plain = integrate(Scheme::Del, &e, &q0, &p0, 20, &cfg()).unwrap();
        let qd: Vec<Dual<f64, 2>> = q0.iter().map(|&x| Dual::constant_of(x)).collect();
        let pd: Vec<Dual<f64, 2>> = p0.iter().map(|&x| Dual::constant_of(x)).collect();
        let dual = integrate(Scheme::Del, &e, &qd, &pd, 20, &cfg()).unwrap();
        assert!(dist(&dual.values().qs[20], &plain.qs[20]) < 1e-13);
        assert!(dual.qs[20].iter().all(|x| x.d.iter().all(|d| *d == 0.0)));
    }
}
