//! Command-line front end. Each command writes one self-describing JSON
//! document (or CSV table) to `--output` or stdout.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bvp::{count_solutions, BvpProblem, CountOptions, SeedGrid};
use crate::error::Error;
use crate::export::{to_json, trajectory_csv};
use crate::geometry::{eval_constraint, Ellipsoid, Hyperplane, LevelSet, Manifold, TangentChart};
use crate::integrators::{integrate, kkt_residual, kkt_solve, DiscreteTrajectory, Scheme, SolverConfig};
use crate::linalg::{dist, norm};
use crate::locus::{
    classify_singular_point, conjugate_box, locus_from_scan, scan_mesh, sample, EndpointMap, LocusConfig, LocusDiagram,
    MeshBox, MeshScan, Singularity, SingularityTolerances,
};

pub const EXIT_NUMERICAL: u8 = 2;
pub const EXIT_USAGE: u8 = 64;
pub const EXIT_IO: u8 = 74;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Numerical(Error),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Io { .. } => EXIT_IO,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidInput(_) | Error::InvalidDimension { .. } => CliError::Usage(e.to_string()),
            other => CliError::Numerical(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "cutlocus", version, about = "Discrete geodesics, conjugate loci and their singularities on ellipsoids")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate one discrete geodesic from (q0, p0).
    Geodesic(GeodesicArgs),
    /// Find all discrete geodesics between two points up to a length bound.
    Connect(ConnectArgs),
    /// Critical set, conjugate locus and singular points of the endpoint map.
    Locus(LocusArgs),
    /// Classify the endpoint map at one chart point.
    Classify(ClassifyArgs),
    /// Two schemes on an identical mesh, with a difference summary.
    Compare(CompareArgs),
    /// Endpoint error and empirical order over a sequence of step counts.
    Convergence(ConvergenceArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// del, sympeuler, rk2 or kkt.
    #[arg(long, default_value = "del", value_parser = parse_scheme)]
    pub scheme: Scheme,
    /// Ellipsoid semi-axes.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with = "plane")]
    pub ellipsoid: Option<Vec<f64>>,
    /// Hyperplane through the origin with this normal.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub plane: Option<Vec<f64>>,
    /// Base point; projected radially onto an ellipsoid.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub q0: Option<Vec<f64>>,
    /// Number of steps N on [0, 1].
    #[arg(long, default_value_t = 50, value_parser = parse_steps)]
    pub steps: usize,
    /// Newton tolerance of the per-step solves.
    #[arg(long, default_value_t = 1e-12, value_parser = parse_positive)]
    pub tol: f64,
    #[arg(long, default_value_t = 50, value_parser = parse_count)]
    pub max_iter: usize,
    /// Worker threads (default: all cores). Output does not depend on it.
    #[arg(long, value_parser = parse_count)]
    pub threads: Option<usize>,
    /// Output file (default: stdout).
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Seed for the multistart grid phase.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct GeodesicArgs {
    #[command(flatten)]
    pub common: Common,
    /// Initial momentum (ambient coordinates, must be tangent).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with = "v")]
    pub p0: Option<Vec<f64>>,
    /// Initial momentum in tangent-chart coordinates.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub v: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct ConnectArgs {
    #[command(flatten)]
    pub common: Common,
    /// Target point; projected radially onto an ellipsoid.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub to: Vec<f64>,
    /// Length bound (default 3 pi / 2).
    #[arg(long, value_parser = parse_positive)]
    pub bound: Option<f64>,
    /// Seed directions (per angle axis when d > 2).
    #[arg(long, default_value_t = 16, value_parser = parse_count)]
    pub directions: usize,
    /// Seed speeds in (0, bound].
    #[arg(long, default_value_t = 8, value_parser = parse_count)]
    pub speeds: usize,
    /// Include full trajectories in the output.
    #[arg(long)]
    pub trajectories: bool,
}

#[derive(Debug, Clone, Args)]
pub struct MeshArgs {
    /// Nodes per axis: one value for all axes or one per axis.
    #[arg(long, value_delimiter = ',', value_parser = parse_nodes)]
    pub mesh: Option<Vec<usize>>,
    /// Chart box as lo:hi per axis, comma separated (default: from ray searches).
    #[arg(long = "box", value_parser = parse_box, allow_hyphen_values = true)]
    pub bounds: Option<MeshBox>,
    /// Radius limit of the ray searches for the automatic box.
    #[arg(long, value_parser = parse_positive)]
    pub r_max: Option<f64>,
    /// Kernel-derivative threshold for cusps.
    #[arg(long, default_value_t = LocusConfig::default().eps_cusp, value_parser = parse_positive)]
    pub eps_cusp: f64,
    /// Refined sigma_{d-1} / sigma_1 accepted as corank 2.
    #[arg(long, default_value_t = LocusConfig::default().umb_accept_rel, value_parser = parse_positive)]
    pub umb_accept_rel: f64,
    /// Include the determinant at every mesh node.
    #[arg(long)]
    pub with_scan: bool,
}

#[derive(Debug, Args)]
pub struct LocusArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub mesh: MeshArgs,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub common: Common,
    /// Chart point.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub v: Vec<f64>,
    #[arg(long, default_value_t = LocusConfig::default().eps_cusp, value_parser = parse_positive)]
    pub eps_cusp: f64,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub mesh: MeshArgs,
    /// Second scheme (the first is --scheme).
    #[arg(long, default_value = "rk2", value_parser = parse_scheme)]
    pub against: Scheme,
}

#[derive(Debug, Args)]
pub struct ConvergenceArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with = "v")]
    pub p0: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub v: Option<Vec<f64>>,
    /// Step counts.
    #[arg(long, value_delimiter = ',', default_value = "25,50,100,200", value_parser = parse_steps)]
    pub ns: Vec<usize>,
}

fn parse_scheme(s: &str) -> std::result::Result<Scheme, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_positive(s: &str) -> std::result::Result<f64, String> {
    let x: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if x.is_finite() && x > 0.0 {
        Ok(x)
    } else {
        Err("must be positive and finite".into())
    }
}

fn parse_count(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_steps(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if n >= 2 => Ok(n),
        Ok(_) => Err("must be at least 2".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_nodes(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if n >= 2 => Ok(n),
        Ok(_) => Err("need at least 2 nodes per axis".into()),
        Err(e) => Err(e.to_string()),
    }
}

/// `lo:hi[,lo:hi...]`.
pub fn parse_box(s: &str) -> std::result::Result<MeshBox, String> {
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for part in s.split(',') {
        let (a, b) = part.split_once(':').ok_or_else(|| format!("expected lo:hi, got '{part}'"))?;
        lo.push(a.trim().parse::<f64>().map_err(|e| format!("'{a}': {e}"))?);
        hi.push(b.trim().parse::<f64>().map_err(|e| format!("'{b}': {e}"))?);
    }
    MeshBox::new(lo, hi).map_err(|e| e.to_string())
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let common = match &cli.command {
        Command::Geodesic(a) => &a.common,
        Command::Connect(a) => &a.common,
        Command::Locus(a) => &a.common,
        Command::Classify(a) => &a.common,
        Command::Compare(a) => &a.common,
        Command::Convergence(a) => &a.common,
    };
    let out = common.output.clone();
    let body = match common.threads {
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| CliError::Usage(e.to_string()))?
            .install(|| dispatch(&cli.command))?,
        None => dispatch(&cli.command)?,
    };
    write_output(out.as_deref(), &body)
}

fn dispatch(cmd: &Command) -> CliResult<String> {
    match cmd {
        Command::Geodesic(a) => run_geodesic(a),
        Command::Connect(a) => run_connect(a),
        Command::Locus(a) => run_locus(a),
        Command::Classify(a) => run_classify(a),
        Command::Compare(a) => run_compare(a),
        Command::Convergence(a) => run_convergence(a),
    }
}

fn write_output(path: Option<&Path>, body: &str) -> CliResult<()> {
    use std::io::Write;
    match path {
        Some(p) => std::fs::write(p, body).map_err(|source| CliError::Io { path: p.to_path_buf(), source }),
        None => std::io::stdout()
            .lock()
            .write_all(body.as_bytes())
            .map_err(|source| CliError::Io { path: "<stdout>".into(), source }),
    }
}

fn json<T: Serialize>(v: &T) -> CliResult<String> {
    to_json(v).map_err(|e| CliError::Numerical(Error::EvaluationFailed(e.to_string())))
}

/// Manifold, base point and solver settings shared by all commands.
struct Setup {
    manifold: Manifold,
    q0: Vec<f64>,
    cfg: SolverConfig,
}

const DEFAULT_AXES: [f64; 3] = [1.0, 0.8, 0.6];
const DEFAULT_DIRECTION: [f64; 4] = [0.3, 0.5, 0.6, 0.55];

fn manifold_point(manifold: &Manifold, q: &[f64]) -> CliResult<Vec<f64>> {
    if q.len() != manifold.ambient_dim() {
        return Err(CliError::Usage(format!("point has {} coordinates, expected {}", q.len(), manifold.ambient_dim())));
    }
    if q.iter().any(|x| !x.is_finite()) {
        return Err(CliError::Usage("point coordinates must be finite".into()));
    }
    match manifold {
        Manifold::Ellipsoid(e) => Ok(e.project_radially(q)?),
        Manifold::Hyperplane(h) => {
            let (g, _) = eval_constraint(h, q);
            let nn = norm(&h.normal);
            Ok(q.iter().zip(&h.normal).map(|(x, a)| x - g[0] * a / (nn * nn)).collect())
        }
    }
}

impl Setup {
    fn new(c: &Common) -> CliResult<Self> {
        let manifold = match (&c.ellipsoid, &c.plane) {
            (_, Some(normal)) => {
                if normal.len() < 2 || normal.iter().any(|x| !x.is_finite()) || norm(normal) == 0.0 {
                    return Err(CliError::Usage("plane normal must be finite, nonzero, with n >= 2".into()));
                }
                Manifold::Hyperplane(Hyperplane { normal: normal.clone(), offset: 0.0 })
            }
            (Some(axes), None) => {
                if axes.len() < 2 {
                    return Err(CliError::Usage("an ellipsoid needs at least two semi-axes".into()));
                }
                Manifold::Ellipsoid(Ellipsoid::new(axes.clone())?)
            }
            (None, None) => Manifold::Ellipsoid(Ellipsoid::new(DEFAULT_AXES.to_vec())?),
        };
        let n = manifold.ambient_dim();
        let q0 = match (&c.q0, &manifold) {
            (Some(q), m) => manifold_point(m, q)?,
            (None, Manifold::Ellipsoid(e)) => {
                let u: Vec<f64> = if n <= DEFAULT_DIRECTION.len() { DEFAULT_DIRECTION[..n].to_vec() } else { vec![1.0; n] };
                e.point_from_direction(&u)
            }
            (None, Manifold::Hyperplane(_)) => vec![0.0; n],
        };
        let cfg = SolverConfig { tol: c.tol, max_iter: c.max_iter, ..SolverConfig::default() };
        Ok(Self { manifold, q0, cfg })
    }

    fn chart(&self) -> CliResult<TangentChart> {
        Ok(TangentChart::at(&self.manifold, self.q0.clone())?)
    }

    /// Initial momentum from `--p0` (ambient) or `--v` (chart).
    fn momentum(&self, p0: &Option<Vec<f64>>, v: &Option<Vec<f64>>) -> CliResult<(Vec<f64>, Vec<f64>)> {
        let chart = self.chart()?;
        match (p0, v) {
            (Some(p), _) => {
                if p.len() != self.manifold.ambient_dim() {
                    return Err(CliError::Usage(format!("--p0 needs {} components", self.manifold.ambient_dim())));
                }
                let v: Vec<f64> = chart.frame.iter().map(|e| crate::linalg::dot(e, p)).collect();
                Ok((p.clone(), v))
            }
            (None, Some(v)) => {
                if v.len() != chart.dim() {
                    return Err(CliError::Usage(format!("--v needs {} components", chart.dim())));
                }
                Ok((chart.tangent(v), v.clone()))
            }
            (None, None) => Err(CliError::Usage("give the initial momentum with --p0 or --v".into())),
        }
    }

    fn endpoint_map(&self, scheme: Scheme, steps: usize) -> CliResult<EndpointMap<Manifold>> {
        if scheme == Scheme::Kkt {
            return Err(CliError::Usage("kkt has no initial value endpoint map; use del, sympeuler or rk2".into()));
        }
        Ok(EndpointMap::new(scheme, self.manifold.clone(), self.q0.clone(), steps, self.cfg)?)
    }

    fn axes(&self) -> Option<Vec<f64>> {
        match &self.manifold {
            Manifold::Ellipsoid(e) => Some(e.axes().to_vec()),
            Manifold::Hyperplane(_) => None,
        }
    }
}

#[derive(Debug, Serialize)]
struct Tolerances {
    newton_tol: f64,
    max_iter: usize,
    damping: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    locus: Option<LocusTolerances>,
}

#[derive(Debug, Serialize)]
struct LocusTolerances {
    onset_rel: f64,
    eps_onset: f64,
    eps_cusp: f64,
    eps_umb: f64,
    eps_umb_accept: f64,
    umb_screen: f64,
    max_failure_fraction: f64,
}

#[derive(Debug, Serialize)]
struct Meta {
    command: &'static str,
    version: &'static str,
    scheme: Scheme,
    manifold: Manifold,
    axes: Option<Vec<f64>>,
    q0: Vec<f64>,
    #[serde(rename = "N")]
    steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    mesh: Option<Vec<usize>>,
    #[serde(rename = "box", skip_serializing_if = "Option::is_none")]
    bounds: Option<MeshBox>,
    #[serde(skip_serializing_if = "Option::is_none")]
    box_source: Option<&'static str>,
    tolerances: Tolerances,
    seed: Option<u64>,
}

fn meta(command: &'static str, scheme: Scheme, s: &Setup, c: &Common) -> Meta {
    Meta {
        command,
        version: env!("CARGO_PKG_VERSION"),
        scheme,
        manifold: s.manifold.clone(),
        axes: s.axes(),
        q0: s.q0.clone(),
        steps: c.steps,
        mesh: None,
        bounds: None,
        box_source: None,
        tolerances: Tolerances { newton_tol: s.cfg.tol, max_iter: s.cfg.max_iter, damping: s.cfg.damping, locus: None },
        seed: c.seed,
    }
}

fn lambda_offset(scheme: Scheme) -> usize {
    match scheme {
        Scheme::Rk2 => 0,
        _ => 1,
    }
}

#[derive(Serialize)]
struct GeodesicOut<'a> {
    meta: Meta,
    v: Vec<f64>,
    p0: Vec<f64>,
    #[serde(flatten)]
    trajectory: &'a DiscreteTrajectory,
    length: f64,
    max_constraint: f64,
}

fn max_constraint<L: LevelSet>(spec: &L, qs: &[Vec<f64>]) -> f64 {
    qs.iter().map(|q| eval_constraint(spec, q).0.iter().fold(0.0f64, |m, x| m.max(x.abs()))).fold(0.0, f64::max)
}

fn run_geodesic(a: &GeodesicArgs) -> CliResult<String> {
    let c = &a.common;
    let s = Setup::new(c)?;
    if c.scheme == Scheme::Kkt {
        return Err(CliError::Usage("kkt is a boundary value method; use `connect --scheme kkt`".into()));
    }
    let (p0, v) = s.momentum(&a.p0, &a.v)?;
    let traj = integrate(c.scheme, &s.manifold, &s.q0, &p0, c.steps, &s.cfg)?;
    match a.format {
        Format::Csv => Ok(trajectory_csv(&traj, lambda_offset(c.scheme))),
        Format::Json => json(&GeodesicOut {
            meta: meta("geodesic", c.scheme, &s, c),
            v,
            p0,
            length: traj.length(),
            max_constraint: max_constraint(&s.manifold, &traj.qs),
            trajectory: &traj,
        }),
    }
}

#[derive(Serialize)]
struct SolutionOut {
    length: f64,
    q1: Vec<f64>,
    seed_chart_coords: Vec<f64>,
    shooting_residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    kkt_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kkt_shift: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trajectory: Option<DiscreteTrajectory>,
}

#[derive(Serialize)]
struct ConnectOut {
    meta: Meta,
    target: Vec<f64>,
    length_bound: f64,
    grid: SeedGrid,
    count: usize,
    solutions: Vec<SolutionOut>,
    seeds: usize,
    diverged: usize,
    discarded_long: usize,
}

/// Grid phase from the seed; the unseeded grid uses the mid-cell phase.
pub fn grid_phase(seed: Option<u64>) -> f64 {
    match seed {
        Some(s) => ChaCha8Rng::seed_from_u64(s).random::<f64>(),
        None => 0.5,
    }
}

fn run_connect(a: &ConnectArgs) -> CliResult<String> {
    let c = &a.common;
    let s = Setup::new(c)?;
    if c.scheme == Scheme::Rk2 {
        return Err(CliError::Usage("shooting uses the variational discretisation; use del, sympeuler or kkt".into()));
    }
    let target = manifold_point(&s.manifold, &a.to)?;
    let bound = a.bound.unwrap_or(1.5 * PI);
    let grid = SeedGrid { phase: grid_phase(c.seed), ..SeedGrid::new(a.directions, a.speeds) };
    let prob = BvpProblem::new(s.manifold.clone(), s.q0.clone(), target.clone(), c.steps, s.cfg)?;
    let report = count_solutions(&prob, &CountOptions::new(bound, grid))?;
    let mut solutions = Vec::with_capacity(report.solutions.len());
    for sol in &report.solutions {
        let (kkt_res, shift, traj) = if c.scheme == Scheme::Kkt {
            let k = kkt_solve(&s.manifold, &s.q0, &target, c.steps, &s.cfg, &sol.trajectory)?;
            let shift = k.trajectory.qs.iter().zip(&sol.trajectory.qs).map(|(x, y)| dist(x, y)).fold(0.0, f64::max);
            (Some(kkt_residual(&s.manifold, &k)), Some(shift), k.trajectory)
        } else {
            (None, None, sol.trajectory.clone())
        };
        solutions.push(SolutionOut {
            length: traj.length(),
            q1: traj.qs[1].clone(),
            seed_chart_coords: sol.seed_chart_coords.clone(),
            shooting_residual: sol.residual,
            kkt_residual: kkt_res,
            kkt_shift: shift,
            trajectory: a.trajectories.then_some(traj),
        });
    }
    json(&ConnectOut {
        meta: meta("connect", c.scheme, &s, c),
        target,
        length_bound: bound,
        grid,
        count: solutions.len(),
        solutions,
        seeds: report.seeds,
        diverged: report.diverged,
        discarded_long: report.discarded_long,
    })
}

#[derive(Debug, Serialize)]
struct CuspOut {
    chart: Vec<f64>,
    image: Vec<f64>,
    det: f64,
    kernel_cosine: f64,
    refined: bool,
}

#[derive(Debug, Serialize)]
struct UmbilicOut {
    chart: Vec<f64>,
    image: Vec<f64>,
    sigma: (f64, f64),
    det: f64,
    accepted: bool,
    cluster_size: usize,
}

#[derive(Debug, Serialize)]
struct CuspLinesOut {
    chart: Vec<Vec<f64>>,
    image: Vec<Vec<f64>>,
    segments: Vec<[usize; 2]>,
}

#[derive(Debug, Serialize)]
struct ScanOut {
    res: Vec<usize>,
    det: Vec<Option<f64>>,
}

#[derive(Debug, Serialize)]
struct Diagnostics {
    failure_fraction: f64,
    failed_nodes: usize,
    dropped_vertices: usize,
    skipped_cells: usize,
    unrefined_vertices: usize,
    degenerate_polylines: usize,
    rejected_cusp_candidates: usize,
    min_sigma_vertex: Option<f64>,
    min_sigma_refined: Option<f64>,
}

#[derive(Debug, Serialize)]
struct LocusPayload {
    meta: Meta,
    critical_set: Vec<Vec<f64>>,
    locus: Vec<Vec<f64>>,
    cells: Vec<Vec<usize>>,
    polylines: Vec<crate::locus::Polyline>,
    labels: Vec<Singularity>,
    kernel_cosine: Vec<f64>,
    sigma: Vec<Vec<f64>>,
    cusps: Vec<CuspOut>,
    cusp_lines: Option<CuspLinesOut>,
    umbilics: Vec<UmbilicOut>,
    umbilic_candidates: Vec<UmbilicOut>,
    failures: usize,
    diagnostics: Diagnostics,
    #[serde(skip_serializing_if = "Option::is_none")]
    scan: Option<ScanOut>,
}

fn locus_config(m: &MeshArgs) -> LocusConfig {
    LocusConfig { eps_cusp: m.eps_cusp, umb_accept_rel: m.umb_accept_rel, ..LocusConfig::default() }
}

fn resolve_mesh(m: &MeshArgs, d: usize) -> CliResult<Vec<usize>> {
    match &m.mesh {
        None => Ok(vec![if d >= 3 { 24 } else { 96 }; d]),
        Some(r) if r.len() == 1 => Ok(vec![r[0]; d]),
        Some(r) if r.len() == d => Ok(r.clone()),
        Some(r) => Err(CliError::Usage(format!("--mesh has {} values for a {d}-dimensional chart", r.len()))),
    }
}

/// Box from `--box` or from ray searches for the first conjugate radius.
fn resolve_box(m: &MeshArgs, map: &EndpointMap<Manifold>, s: &Setup) -> CliResult<(MeshBox, &'static str)> {
    let d = map.chart.dim();
    if let Some(b) = &m.bounds {
        if b.dim() != d {
            return Err(CliError::Usage(format!("--box has {} axes for a {d}-dimensional chart", b.dim())));
        }
        return Ok((b.clone(), "user"));
    }
    let scale = match &s.manifold {
        Manifold::Ellipsoid(e) => e.axes().iter().fold(0.0f64, |acc, a| acc.max(*a)),
        Manifold::Hyperplane(_) => 1.0,
    };
    let r_max = m.r_max.unwrap_or(1.25 * PI * scale);
    let rays = if d >= 3 { 256 } else { 96 };
    Ok((conjugate_box(map, r_max, rays, 0.05)?, "auto"))
}

fn payload(diag: LocusDiagram, scan: Option<&MeshScan>, mut meta: Meta, cfg: &LocusConfig) -> LocusPayload {
    meta.mesh = Some(diag.res.clone());
    meta.bounds = Some(diag.bounds.clone());
    if let Some(l) = meta.tolerances.locus.as_mut() {
        l.eps_onset = diag.eps_onset;
        l.eps_umb = diag.eps_umb;
        l.eps_umb_accept = diag.eps_umb_accept;
    } else {
        meta.tolerances.locus = Some(LocusTolerances {
            onset_rel: cfg.onset_rel,
            eps_onset: diag.eps_onset,
            eps_cusp: diag.eps_cusp,
            eps_umb: diag.eps_umb,
            eps_umb_accept: diag.eps_umb_accept,
            umb_screen: cfg.umb_screen,
            max_failure_fraction: cfg.max_failure_fraction,
        });
    }
    let mut cusps = Vec::new();
    let mut rejected = 0;
    for (p, image) in diag.cusps.iter().zip(&diag.cusp_images) {
        if p.label == Singularity::Cusp {
            cusps.push(CuspOut {
                chart: p.chart.clone(),
                image: image.clone(),
                det: p.det,
                kernel_cosine: p.kernel_cosine,
                refined: p.refined,
            });
        } else {
            rejected += 1;
        }
    }
    let candidates: Vec<UmbilicOut> = diag
        .umbilics
        .as_ref()
        .map(|u| {
            u.candidates
                .iter()
                .zip(&diag.umbilic_images)
                .map(|(c, image)| UmbilicOut {
                    chart: c.chart.clone(),
                    image: image.clone(),
                    sigma: c.sigma_pair,
                    det: c.det,
                    accepted: c.accepted,
                    cluster_size: c.cluster_size,
                })
                .collect()
        })
        .unwrap_or_default();
    let (accepted, candidates): (Vec<_>, Vec<_>) = candidates.into_iter().partition(|c| c.accepted);
    let cusp_lines = diag.cusp_lines.as_ref().map(|l| CuspLinesOut {
        chart: l.points.clone(),
        image: diag.cusp_line_images.clone().unwrap_or_default(),
        segments: l.segments.clone(),
    });
    let diagnostics = Diagnostics {
        failure_fraction: diag.failure_fraction,
        failed_nodes: diag.failed_nodes,
        dropped_vertices: diag.dropped_vertices,
        skipped_cells: diag.critical_set.skipped_cells,
        unrefined_vertices: diag.critical_set.unrefined,
        degenerate_polylines: diag.degenerate_polylines,
        rejected_cusp_candidates: rejected,
        min_sigma_vertex: diag.umbilics.as_ref().and_then(|u| u.min_sigma_vertex),
        min_sigma_refined: diag.umbilics.as_ref().and_then(|u| u.min_sigma_refined),
    };
    LocusPayload {
        meta,
        failures: diag.failed_nodes,
        critical_set: diag.critical_set.vertices,
        locus: diag.locus,
        cells: diag.critical_set.cells,
        polylines: diag.critical_set.polylines,
        labels: diag.labels,
        kernel_cosine: diag.kernel_cosine,
        sigma: diag.sigma,
        cusps,
        cusp_lines,
        umbilics: accepted,
        umbilic_candidates: candidates,
        diagnostics,
        scan: scan.map(|s| ScanOut { res: s.res.clone(), det: s.det.clone() }),
    }
}

fn run_locus(a: &LocusArgs) -> CliResult<String> {
    let c = &a.common;
    let s = Setup::new(c)?;
    let map = s.endpoint_map(c.scheme, c.steps)?;
    let res = resolve_mesh(&a.mesh, map.chart.dim())?;
    let (bounds, source) = resolve_box(&a.mesh, &map, &s)?;
    let cfg = locus_config(&a.mesh);
    let scan = scan_mesh(&map, &bounds, &res)?;
    let diag = locus_from_scan(&map, &scan, &cfg)?;
    let mut m = meta("locus", c.scheme, &s, c);
    m.box_source = Some(source);
    json(&payload(diag, a.mesh.with_scan.then_some(&scan), m, &cfg))
}

#[derive(Serialize)]
struct ClassifyOut {
    meta: Meta,
    v: Vec<f64>,
    image: Vec<f64>,
    label: Singularity,
    det: f64,
    grad_det: Vec<f64>,
    kernel: Vec<f64>,
    kernel_derivative: f64,
    kernel_cosine: f64,
    sigma: Vec<f64>,
    eps_cusp: f64,
    eps_umb: f64,
}

fn run_classify(a: &ClassifyArgs) -> CliResult<String> {
    let c = &a.common;
    let s = Setup::new(c)?;
    let map = s.endpoint_map(c.scheme, c.steps)?;
    if a.v.len() != map.chart.dim() {
        return Err(CliError::Usage(format!("--v needs {} components", map.chart.dim())));
    }
    let reference = sample(&map, &vec![0.0; map.chart.dim()])?.sigma[0];
    let tol = SingularityTolerances { eps_cusp: a.eps_cusp, eps_umb: LocusConfig::default().umb_rel * reference };
    let cl = classify_singular_point(&map, &a.v, &tol)?;
    let image = map.endpoint(&a.v)?;
    json(&ClassifyOut {
        meta: meta("classify", c.scheme, &s, c),
        v: a.v.clone(),
        image,
        label: cl.label,
        det: cl.det,
        kernel_cosine: cl.kernel_cosine(),
        grad_det: cl.grad_det,
        kernel: cl.kernel,
        kernel_derivative: cl.kernel_derivative,
        sigma: cl.sigma,
        eps_cusp: tol.eps_cusp,
        eps_umb: tol.eps_umb,
    })
}

/// Smallest `sigma_{d-1}` over critical vertices and refined candidates.
fn min_second_sigma(diag: &LocusDiagram) -> Option<f64> {
    let vertex = diag.sigma.iter().filter_map(|s| (s.len() >= 2).then(|| s[s.len() - 2])).min_by(f64::total_cmp);
    match (vertex, diag.min_sigma()) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}

#[derive(Serialize)]
struct Pair<T> {
    first: T,
    second: T,
}

#[derive(Serialize)]
struct CompareDiff {
    schemes: Pair<Scheme>,
    min_sigma: Pair<Option<f64>>,
    umbilics: Pair<usize>,
    cusps: Pair<usize>,
    critical_vertices: Pair<usize>,
    min_sigma_difference: f64,
    umbilic_count_difference: usize,
    cusp_count_difference: usize,
    max_det_difference: f64,
}

#[derive(Serialize)]
struct CompareOut {
    diagrams: [LocusPayload; 2],
    diff: CompareDiff,
}

fn run_compare(a: &CompareArgs) -> CliResult<String> {
    let c = &a.common;
    let s = Setup::new(c)?;
    let map_a = s.endpoint_map(c.scheme, c.steps)?;
    let map_b = s.endpoint_map(a.against, c.steps)?;
    let res = resolve_mesh(&a.mesh, map_a.chart.dim())?;
    let (bounds, source) = resolve_box(&a.mesh, &map_a, &s)?;
    let cfg = locus_config(&a.mesh);
    let scan_a = scan_mesh(&map_a, &bounds, &res)?;
    let scan_b = scan_mesh(&map_b, &bounds, &res)?;
    let max_det_difference = scan_a
        .det
        .iter()
        .zip(&scan_b.det)
        .map(|(x, y)| match (x, y) {
            (Some(x), Some(y)) => (x - y).abs(),
            (None, None) => 0.0,
            _ => f64::INFINITY,
        })
        .fold(0.0, f64::max);
    let da = locus_from_scan(&map_a, &scan_a, &cfg)?;
    let db = locus_from_scan(&map_b, &scan_b, &cfg)?;
    let (sa, sb) = (min_second_sigma(&da), min_second_sigma(&db));
    let diff = CompareDiff {
        schemes: Pair { first: c.scheme, second: a.against },
        min_sigma: Pair { first: sa, second: sb },
        umbilics: Pair { first: da.umbilic_count(), second: db.umbilic_count() },
        cusps: Pair { first: da.cusp_count(), second: db.cusp_count() },
        critical_vertices: Pair { first: da.critical_set.vertices.len(), second: db.critical_set.vertices.len() },
        min_sigma_difference: match (sa, sb) {
            (Some(x), Some(y)) => (x - y).abs(),
            (None, None) => 0.0,
            _ => f64::INFINITY,
        },
        umbilic_count_difference: da.umbilic_count().abs_diff(db.umbilic_count()),
        cusp_count_difference: da.cusp_count().abs_diff(db.cusp_count()),
        max_det_difference,
    };
    let mut ma = meta("compare", c.scheme, &s, c);
    ma.box_source = Some(source);
    let mut mb = meta("compare", a.against, &s, c);
    mb.box_source = Some(source);
    let with = a.mesh.with_scan;
    json(&CompareOut {
        diagrams: [payload(da, with.then_some(&scan_a), ma, &cfg), payload(db, with.then_some(&scan_b), mb, &cfg)],
        diff,
    })
}

/// Exact time-one geodesic endpoint on a round sphere centred at the
/// origin or on a hyperplane, if the manifold is one.
fn exact_endpoint(m: &Manifold, q0: &[f64], p0: &[f64]) -> Option<Vec<f64>> {
    match m {
        Manifold::Hyperplane(_) => Some(q0.iter().zip(p0).map(|(q, p)| q + p).collect()),
        Manifold::Ellipsoid(e) => {
            let r = e.axes()[0];
            if e.axes().iter().any(|a| (a - r).abs() > 1e-14 * r) {
                return None;
            }
            let speed = norm(p0);
            if speed == 0.0 {
                return Some(q0.to_vec());
            }
            let w = speed / r;
            Some(q0.iter().zip(p0).map(|(q, p)| q * w.cos() + p / w * w.sin()).collect())
        }
    }
}

fn run_convergence(a: &ConvergenceArgs) -> CliResult<String> {
    use std::fmt::Write as _;
    let c = &a.common;
    let s = Setup::new(c)?;
    if c.scheme == Scheme::Kkt {
        return Err(CliError::Usage("convergence runs initial value schemes; use del, sympeuler or rk2".into()));
    }
    let (p0, _) = s.momentum(&a.p0, &a.v)?;
    let exact = exact_endpoint(&s.manifold, &s.q0, &p0);
    let end = |n: usize| -> CliResult<Vec<f64>> { Ok(integrate(c.scheme, &s.manifold, &s.q0, &p0, n, &s.cfg)?.endpoint().to_vec()) };
    let mut errors = Vec::with_capacity(a.ns.len());
    for &n in &a.ns {
        let e = match &exact {
            Some(x) => dist(&end(n)?, x),
            None => dist(&end(n)?, &end(2 * n)?),
        };
        errors.push(e);
    }
    let floor = 1e-13 * s.manifold.diameter().max(1.0);
    let mut out = String::from("N,error,order\n");
    for (i, (&n, &e)) in a.ns.iter().zip(&errors).enumerate() {
        let _ = write!(out, "{n},{e:.16e},");
        if i > 0 && e > floor && errors[i - 1] > floor {
            let order = (errors[i - 1] / e).ln() / (n as f64 / a.ns[i - 1] as f64).ln();
            let _ = write!(out, "{order:.16e}");
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_parsing() {
        let b = parse_box("-2.6:2.6,-3.4:3.4").unwrap();
        assert_eq!(b.lo, vec![-2.6, -3.4]);
        assert_eq!(b.hi, vec![2.6, 3.4]);
        assert!(parse_box("1:0").is_err());
        assert!(parse_box("1,2").is_err());
        assert!(parse_box("a:b").is_err());
    }

    #[test]
    fn steps_below_two_are_rejected() {
        let r = Cli::try_parse_from(["cutlocus", "geodesic", "--steps", "0", "--v", "1,0"]);
        assert!(r.is_err());
    }

    #[test]
    fn exact_sphere_endpoint() {
        let m = Manifold::Ellipsoid(Ellipsoid::unit_sphere(3));
        let q = exact_endpoint(&m, &[1.0, 0.0, 0.0], &[0.0, PI, 0.0]).unwrap();
        assert!(dist(&q, &[-1.0, 0.0, 0.0]) < 1e-15);
        let e = Manifold::Ellipsoid(Ellipsoid::new(vec![1.0, 0.8, 0.6]).unwrap());
        assert!(exact_endpoint(&e, &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).is_none());
    }

    #[test]
    fn seeded_phase_is_reproducible() {
        assert_eq!(grid_phase(Some(7)), grid_phase(Some(7)));
        assert_ne!(grid_phase(Some(7)), grid_phase(Some(8)));
        assert_eq!(grid_phase(None), 0.5);
        let p = grid_phase(Some(1));
        assert!((0.0..1.0).contains(&p));
    }

    #[test]
    fn numerical_and_usage_errors_map_to_exit_codes() {
        assert_eq!(CliError::from(Error::InvalidInput("x".into())).exit_code(), EXIT_USAGE);
        assert_eq!(CliError::from(Error::NewtonDiverged { iterations: 3, residual: 1.0 }).exit_code(), EXIT_NUMERICAL);
    }
}
