//! Two-point boundary value problems for discrete geodesics.
//!
//! Shooting unknowns are `(q_1, lambda_{N-1})`: DEL is iterated from
//! `(q_0, q_1)` up to `q_{N-1}`, the last step is the explicit update
//! `q_N = 2 q_{N-1} - q_{N-2} - dt^2 g'(q_{N-1})^T lambda_{N-1}`, and Newton
//! drives `(q_N - target, g(q_1))` to zero.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{value_and_jacobian, DualFn, Scalar};
use crate::error::{Error, Result};
use crate::geometry::{LevelSet, TangentChart, TOL_CONSTRAINT};
use crate::integrators::{del_step, discrete_legendre, integrate, DiscreteTrajectory, Scheme, SolverConfig};
use crate::linalg::{dist, norm, Lu};

#[derive(Debug, Clone)]
pub struct BvpProblem<L> {
    pub spec: L,
    pub q0: Vec<f64>,
    pub q_n: Vec<f64>,
    pub steps: usize,
    pub cfg: SolverConfig,
}

impl<L: LevelSet> BvpProblem<L> {
    pub fn new(spec: L, q0: Vec<f64>, q_n: Vec<f64>, steps: usize, cfg: SolverConfig) -> Result<Self> {
        let n = spec.ambient_dim();
        for q in [&q0, &q_n] {
            if q.len() != n {
                return Err(Error::InvalidDimension { expected: n, got: q.len() });
            }
            let mut g = vec![0.0; spec.codim()];
            spec.value(q, &mut g);
            let gn = norm(&g);
            if gn > TOL_CONSTRAINT {
                return Err(Error::ConstraintViolated(gn));
            }
        }
        if steps < 2 {
            return Err(Error::InvalidInput("boundary value problem needs at least two steps".into()));
        }
        cfg.validate()?;
        Ok(Self { spec, q0, q_n, steps, cfg })
    }

    fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeodesicSolution {
    pub trajectory: DiscreteTrajectory,
    pub length: f64,
    /// Initial difference momentum `(q_1 - q_0)/dt` in the tangent frame at `q_0`.
    pub seed_chart_coords: Vec<f64>,
    /// Norm of the shooting residual at the solution.
    pub residual: f64,
}

/// Positions `q_0 .. q_N` and multipliers obtained by shooting.
fn shoot<S: Scalar, L: LevelSet>(
    prob: &BvpProblem<L>,
    q1: &[S],
    lambda_last: &[S],
) -> Result<(Vec<Vec<S>>, Vec<Vec<S>>)> {
    let n = prob.spec.ambient_dim();
    let m = prob.spec.codim();
    let dt = prob.dt();
    let nn = prob.steps;
    let mut qs: Vec<Vec<S>> = vec![prob.q0.iter().map(|&x| S::constant(x)).collect(), q1.to_vec()];
    let mut lambdas: Vec<Vec<S>> = Vec::with_capacity(nn - 1);
    for k in 1..nn - 1 {
        let guess = lambdas.last().map(Vec::as_slice);
        let (q, l) = del_step(&prob.spec, &qs[k - 1], &qs[k], guess, dt, &prob.cfg).map_err(|e| e.at_step(k))?;
        qs.push(q);
        lambdas.push(l);
    }
    let (qa, qb) = (&qs[nn - 2], &qs[nn - 1]);
    let mut g = vec![S::zero(); m * n];
    prob.spec.jacobian(qb, &mut g);
    let last: Vec<S> = (0..n)
        .map(|i| {
            let f = (0..m).fold(S::zero(), |acc, l| acc + g[l * n + i] * lambda_last[l]);
            qb[i] * 2.0 - qa[i] - f * (dt * dt)
        })
        .collect();
    qs.push(last);
    lambdas.push(lambda_last.to_vec());
    Ok((qs, lambdas))
}

/// `(psi(q_1, lambda_{N-1}) - q_N, g(q_1))`.
pub fn shooting_residual<S: Scalar, L: LevelSet>(prob: &BvpProblem<L>, q1: &[S], lambda_last: &[S]) -> Result<Vec<S>> {
    let n = prob.spec.ambient_dim();
    let m = prob.spec.codim();
    if q1.len() != n {
        return Err(Error::InvalidDimension { expected: n, got: q1.len() });
    }
    if lambda_last.len() != m {
        return Err(Error::InvalidDimension { expected: m, got: lambda_last.len() });
    }
    let (qs, _) = shoot(prob, q1, lambda_last)?;
    let mut r: Vec<S> = qs[prob.steps].iter().zip(&prob.q_n).map(|(a, &b)| *a - b).collect();
    let mut g = vec![S::zero(); m];
    prob.spec.value(q1, &mut g);
    r.extend(g);
    Ok(r)
}

struct Shooting<'a, L>(&'a BvpProblem<L>);

impl<L: LevelSet> DualFn for Shooting<'_, L> {
    fn eval<S: Scalar>(&self, x: &[S]) -> Result<Vec<S>> {
        let n = self.0.spec.ambient_dim();
        shooting_residual(self.0, &x[..n], &x[n..])
    }
}

/// Newton on the shooting system with the AD Jacobian, then reconstruction
/// of the trajectory.
pub fn solve_bvp<L: LevelSet>(prob: &BvpProblem<L>, q1_guess: &[f64], lambda_guess: &[f64]) -> Result<GeodesicSolution> {
    let n = prob.spec.ambient_dim();
    let m = prob.spec.codim();
    let f = Shooting(prob);
    let mut x: Vec<f64> = q1_guess.iter().chain(lambda_guess).copied().collect();
    if x.len() != n + m {
        return Err(Error::InvalidDimension { expected: n + m, got: x.len() });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite shooting guess".into()));
    }
    let cfg = &prob.cfg;
    let (mut r, mut jac) = value_and_jacobian(&f, &x).map_err(|e| e.root().clone())?;
    let mut rn = norm(&r);
    let mut iters = 0;
    // Newton with step halving; shooting residuals are well scaled so the
    // same tolerance as the per-step solves applies.
    while rn > cfg.tol {
        if iters >= cfg.max_iter {
            return Err(Error::NewtonDiverged { iterations: iters, residual: rn });
        }
        iters += 1;
        let lu = Lu::new(jac.clone(), n + m)?;
        let dx = lu.solve(&r);
        let mut alpha = cfg.damping;
        loop {
            let trial: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a - alpha * b).collect();
            match value_and_jacobian(&f, &trial) {
                Ok((rt, jt)) if norm(&rt) < rn || alpha <= 1.0 / 64.0 => {
                    let rtn = norm(&rt);
                    if !rtn.is_finite() {
                        return Err(Error::NewtonDiverged { iterations: iters, residual: rtn });
                    }
                    x = trial;
                    r = rt;
                    jac = jt;
                    rn = rtn;
                    break;
                }
                Ok(_) => alpha *= 0.5,
                Err(e) if alpha <= 1.0 / 64.0 => return Err(e.root().clone()),
                Err(_) => alpha *= 0.5,
            }
        }
    }
    let (qs, lambdas) = shoot(prob, &x[..n], &x[n..])?;
    // The explicit last step also admits the second root of the final DEL
    // step; keep only solutions reproduced by the predictor-started solve.
    let nn = prob.steps;
    let guess = (nn >= 3).then(|| lambdas[nn - 3].as_slice());
    let (q_last, _) = del_step(&prob.spec, &qs[nn - 2], &qs[nn - 1], guess, prob.dt(), cfg).map_err(|e| e.at_step(nn - 1))?;
    let mismatch = dist(&q_last, &prob.q_n);
    if mismatch > 1e-8 * prob.spec.diameter().max(1.0) {
        return Err(Error::BranchMismatch(mismatch));
    }
    let trajectory = DiscreteTrajectory { dt: prob.dt(), qs, lambdas, ps: None };
    let length = trajectory.length();
    let chart = TangentChart::at(&prob.spec, prob.q0.clone())?;
    let p: Vec<f64> = trajectory.qs[1].iter().zip(&prob.q0).map(|(a, b)| (a - b) / prob.dt()).collect();
    let seed_chart_coords = chart.frame.iter().map(|c| crate::linalg::dot(c, &p)).collect();
    Ok(GeodesicSolution { trajectory, length, seed_chart_coords, residual: rn })
}

/// Shooting guess `(q_1, lambda_{N-1})` from an initial momentum: `q_1` by the
/// discrete Legendre transform, `lambda_{N-1}` from the DEL trajectory.
pub fn guess_from_momentum<L: LevelSet>(prob: &BvpProblem<L>, p0: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (q1, _) = discrete_legendre(&prob.spec, &prob.q0, p0, prob.dt(), &prob.cfg)?;
    let lambda = match integrate(Scheme::Del, &prob.spec, &prob.q0, p0, prob.steps, &prob.cfg) {
        Ok(t) => t.lambdas.last().cloned().unwrap_or_else(|| vec![0.0; prob.spec.codim()]),
        Err(_) => vec![0.0; prob.spec.codim()],
    };
    Ok((q1, lambda))
}

/// Multistart grid: `directions` chart directions (for `d = 2`: equally
/// spaced angles; otherwise `directions` per spherical-angle axis) times
/// `speeds` magnitudes in `(0, bound]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedGrid {
    pub directions: usize,
    pub speeds: usize,
    /// Offset of the angular grid as a fraction of one cell, in `[0, 1)`.
    pub phase: f64,
}

impl SeedGrid {
    pub fn new(directions: usize, speeds: usize) -> Self {
        Self { directions, speeds, phase: 0.5 }
    }

    pub fn doubled(self) -> Self {
        Self { directions: 2 * self.directions, speeds: 2 * self.speeds, ..self }
    }

    /// Chart-coordinate initial momenta; the zero momentum comes first.
    pub fn momenta(&self, d: usize, bound: f64) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; d]];
        let dirs = unit_directions(d, self.directions.max(1), self.phase);
        for s in 1..=self.speeds {
            let r = bound * s as f64 / self.speeds as f64;
            for u in &dirs {
                out.push(u.iter().map(|x| r * x).collect());
            }
        }
        out
    }
}

fn unit_directions(d: usize, k: usize, phase: f64) -> Vec<Vec<f64>> {
    use std::f64::consts::PI;
    match d {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..k).map(|i| {
            let t = 2.0 * PI * (i as f64 + phase) / k as f64;
            vec![t.cos(), t.sin()]
        }).collect(),
        _ => {
            // product grid in hyperspherical angles; polar angles at midpoints
            let mut out = Vec::new();
            let polar = d - 2;
            let total = k.pow(polar as u32);
            for idx in 0..total {
                let mut rem = idx;
                let mut angles = Vec::with_capacity(d - 1);
                for _ in 0..polar {
                    angles.push(PI * ((rem % k) as f64 + 0.5) / k as f64);
                    rem /= k;
                }
                for j in 0..k {
                    let mut a = angles.clone();
                    a.push(2.0 * PI * (j as f64 + phase) / k as f64);
                    let mut u = vec![1.0; d];
                    for (i, t) in a.iter().enumerate() {
                        for x in u.iter_mut().skip(i + 1) {
                            *x *= t.sin();
                        }
                        u[i] *= t.cos();
                    }
                    // last coordinate already carries the sines
                    out.push(u);
                }
            }
            out
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountOptions {
    pub length_bound: f64,
    pub grid: SeedGrid,
    /// Deduplication radius on `q_1` relative to the diameter of `M`.
    pub dedup_rel: f64,
    /// Absolute slack on the length bound.
    pub bound_tol: f64,
}

impl CountOptions {
    pub fn new(length_bound: f64, grid: SeedGrid) -> Self {
        Self { length_bound, grid, dedup_rel: 1e-6, bound_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub solutions: Vec<GeodesicSolution>,
    pub seeds: usize,
    pub diverged: usize,
    /// Converged solutions longer than the bound (after deduplication).
    pub discarded_long: usize,
}

impl CountReport {
    pub fn count(&self) -> usize {
        self.solutions.len()
    }

    pub fn diverged_fraction(&self) -> f64 {
        if self.seeds == 0 {
            0.0
        } else {
            self.diverged as f64 / self.seeds as f64
        }
    }
}

/// Multistart shooting: every seed momentum is turned into a shooting guess
/// and solved; converged solutions are sorted canonically (length, then
/// lexicographic `q_1`) and deduplicated by `|q_1 - q_1'| <= dedup`.
pub fn count_solutions<L: LevelSet>(prob: &BvpProblem<L>, opts: &CountOptions) -> Result<CountReport> {
    if !(opts.length_bound > 0.0 && opts.length_bound.is_finite()) {
        return Err(Error::InvalidInput("length bound must be positive".into()));
    }
    let chart = TangentChart::at(&prob.spec, prob.q0.clone())?;
    let seeds = opts.grid.momenta(chart.dim(), opts.length_bound);
    let results: Vec<Option<GeodesicSolution>> = seeds
        .par_iter()
        .map(|v| {
            let p0 = chart.tangent(v);
            let (q1, lambda) = guess_from_momentum(prob, &p0).ok()?;
            solve_bvp(prob, &q1, &lambda).ok()
        })
        .collect();
    let diverged = results.iter().filter(|r| r.is_none()).count();
    let mut sols: Vec<GeodesicSolution> = results.into_iter().flatten().collect();
    sols.sort_by(|a, b| {
        a.length.total_cmp(&b.length).then_with(|| {
            a.trajectory.qs[1].iter().zip(&b.trajectory.qs[1]).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let delta = opts.dedup_rel * prob.spec.diameter();
    let mut unique: Vec<GeodesicSolution> = Vec::new();
    for s in sols {
        if !unique.iter().any(|u| dist(&u.trajectory.qs[1], &s.trajectory.qs[1]) <= delta) {
            unique.push(s);
        }
    }
    let (solutions, long): (Vec<_>, Vec<_>) = unique.into_iter().partition(|s| s.length <= opts.length_bound + opts.bound_tol);
    Ok(CountReport { solutions, seeds: seeds.len(), diverged, discarded_long: long.len() })
}
