//! Command-line front end and the solver dispatch it shares with the C API.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::discretize::{Grid, GridFunction, QuadratureRule};
use crate::error::Error;
use crate::kernelspec::{parse_problem, ProblemKind, ProblemSpec};
use crate::lq_volterra::K1Variant;
use crate::{lq_fredholm, lq_volterra, nl_fredholm, oracle, quadform};

pub const SCHEMA_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_NONCONVERGENCE: i32 = 4;

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Parse(_) => EXIT_PARSE,
        Error::NonConvergence { .. } => EXIT_NONCONVERGENCE,
        _ => EXIT_SOLVER,
    }
}

#[derive(Debug, Parser)]
#[command(name = "icopt", version, about = "Optimal control of integral-equation systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve a problem and write solution files.
    Solve(SolveArgs),
    /// Certify positive definiteness of the quadratic form at two resolutions.
    CheckPd(CommonArgs),
    /// Compare the solver against the brute-force oracle.
    OracleCompare(CommonArgs),
    /// Estimate convergence orders over a ladder of grid sizes.
    Convergence(ConvergenceArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Problem definition (JSON).
    #[arg(long)]
    pub problem: PathBuf,
    /// Number of grid nodes (overrides the problem file).
    #[arg(long)]
    pub n: Option<usize>,
    /// Quadrature rule: `trapezoid` or `gauss`.
    #[arg(long)]
    pub rule: Option<QuadratureRule>,
    /// Fixed-point tolerance (nonlinear problems).
    #[arg(long)]
    pub tol: Option<f64>,
    /// Iteration cap (nonlinear problems).
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Picard damping in (0, 1] (nonlinear problems).
    #[arg(long)]
    pub damping: Option<f64>,
    /// Also solve by the resolvent path and report the agreement (Volterra).
    #[arg(long)]
    pub compare_paths: bool,
    /// Build `K1` with `B(σ, t)` in place of `B(σ, s)` (Volterra).
    #[arg(long)]
    pub use_printed_k1: bool,
    /// Omit wall-clock timings so output is byte-reproducible.
    #[arg(long)]
    pub no_timings: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutFormat {
    Json,
    Csv,
    Both,
}

#[derive(Debug, Clone, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum, default_value = "json")]
    pub out: OutFormat,
    /// Directory for solution.json / solution.csv.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ConvergenceArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated grid sizes; the largest is the reference solution.
    #[arg(long, value_delimiter = ',', default_value = "17,33,65,129,257")]
    pub ladder: Vec<usize>,
}

/// Solver choices that are not part of the problem file.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub compare_paths: bool,
    pub use_printed_k1: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Discrepancy {
    pub name: String,
    pub value: f64,
    pub note: String,
}

/// Everything a solve produces, independent of problem kind.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub kind: ProblemKind,
    pub grid: Arc<Grid>,
    pub cost: f64,
    pub control: GridFunction,
    pub state: Option<GridFunction>,
    pub costate: Option<GridFunction>,
    pub residuals: BTreeMap<String, f64>,
    pub verdict: Option<String>,
    pub path_agreement: Option<f64>,
    pub iterations: Option<usize>,
    pub discrepancies: Vec<Discrepancy>,
}

/// Parses problem text and applies command-line overrides to its settings.
pub fn load_spec(text: &str, c: &CommonArgs) -> crate::Result<ProblemSpec> {
    let mut spec = parse_problem(text)?;
    if let Some(n) = c.n {
        spec.settings.grid_n = n;
    }
    if let Some(r) = c.rule {
        spec.settings.rule = r;
    }
    if let Some(t) = c.tol {
        spec.settings.tol = t;
    }
    if let Some(m) = c.max_iter {
        spec.settings.max_iter = m;
    }
    if let Some(d) = c.damping {
        spec.settings.damping = d;
    }
    Ok(spec)
}

fn residuals(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn oracle_control(spec: &ProblemSpec, grid: &Arc<Grid>, m: usize) -> crate::Result<GridFunction> {
    let qp = oracle::assemble_qp(spec, grid)?;
    let sol = oracle::qp_minimize(&qp)?;
    GridFunction::from_stacked(grid.clone(), m, &sol.u)
}

/// Solves `spec` on its own grid settings.
pub fn solve_problem(spec: &ProblemSpec, opts: RunOptions) -> crate::Result<Outcome> {
    let grid = spec.grid()?;
    let mut out = Outcome {
        kind: spec.kind,
        grid: grid.clone(),
        cost: 0.0,
        control: GridFunction::zeros(grid.clone(), 1),
        state: None,
        costate: None,
        residuals: BTreeMap::new(),
        verdict: None,
        path_agreement: None,
        iterations: None,
        discrepancies: Vec::new(),
    };
    match spec.kind {
        ProblemKind::QuadForm => {
            let p = quadform::QuadFormProblem::from_spec(spec, &grid)?;
            let min = quadform::minimize(&p)?;
            out.cost = min.e_min;
            out.control = min.w_star;
            out.verdict = Some(min.certificate.verdict.as_str().to_string());
            out.residuals = residuals(&[
                ("half_linear_identity", min.half_linear_defect),
                ("quadratic_identity", min.quadratic_defect),
            ]);
        }
        ProblemKind::FredholmLQ => {
            let p = lq_fredholm::FredholmLQProblem::from_spec(spec, &grid)?;
            let s = lq_fredholm::solve(&p)?;
            out.cost = s.cost;
            out.control = s.u_star;
            out.state = Some(s.state);
            out.verdict = Some(s.certificate.verdict.as_str().to_string());
            out.path_agreement = Some(s.two_path_gap);
            out.residuals = residuals(&[
                ("stationarity", s.stationarity_residual),
                ("dynamics", s.dynamics_residual),
            ]);
        }
        ProblemKind::VolterraLQ => {
            let p = lq_volterra::VolterraLQProblem::from_spec(spec, &grid)?;
            let variant = if opts.use_printed_k1 {
                K1Variant::Printed
            } else {
                K1Variant::Derived
            };
            let s = lq_volterra::solve(
                &p,
                lq_volterra::SolveOptions {
                    variant,
                    compare_paths: opts.compare_paths,
                },
            )?;
            if opts.use_printed_k1 {
                let derived = lq_volterra::derived_kernels(&p, K1Variant::Derived)?;
                let printed = lq_volterra::derived_kernels(&p, K1Variant::Printed)?;
                let reference = oracle_control(spec, &grid, p.control_dim())?;
                let derived_sol = lq_volterra::solve_joint(&p, &derived)?;
                out.discrepancies.push(Discrepancy {
                    name: "k1_printed_vs_derived".into(),
                    value: crate::linalg::max_abs(&(printed.k1.data() - derived.k1.data())),
                    note: "max-norm difference of the two K1 kernels".into(),
                });
                out.discrepancies.push(Discrepancy {
                    name: "oracle_gap_printed_k1".into(),
                    value: s.u_star.max_diff(&reference),
                    note: "control gap to the oracle with K1 built from B(σ, t)".into(),
                });
                out.discrepancies.push(Discrepancy {
                    name: "oracle_gap_derived_k1".into(),
                    value: derived_sol.u_star.max_diff(&reference),
                    note: "control gap to the oracle with the derived K1".into(),
                });
            }
            out.cost = s.cost;
            out.control = s.u_star;
            out.state = Some(s.y_star);
            out.costate = Some(s.psi_star);
            out.path_agreement = s.path_agreement;
            out.residuals = residuals(&[
                ("stationarity", s.stationarity_residual),
                ("costate", s.costate_residual),
                ("dynamics", s.dynamics_residual),
            ]);
        }
        ProblemKind::NonlinearFredholm => {
            let p = nl_fredholm::NonlinearFredholmProblem::from_spec(spec, &grid)?;
            let (s, checks) = nl_fredholm::solve(&p, nl_fredholm::IterationSettings::from_spec(spec))?;
            out.cost = s.cost;
            out.control = s.u_star;
            out.state = Some(s.iterate.phi);
            out.costate = Some(s.iterate.psi);
            out.iterations = Some(s.iterate.iteration);
            out.residuals = residuals(&[
                ("fixed_point_state", s.iterate.residual_phi),
                ("fixed_point_costate", s.iterate.residual_psi),
                ("dynamics", s.residuals.dynamics),
                ("costate", s.residuals.costate),
                ("stationarity", s.residuals.stationarity),
            ]);
            let worst = checks.iter().map(|c| c.worst_relative_error).fold(0.0, f64::max);
            out.residuals.insert("gradient_validation".into(), worst);
            out.discrepancies.push(Discrepancy {
                name: "costate_printed_form".into(),
                value: s.printed_costate_discrepancy,
                note: "costate right-hand side with the cross term lacking its trailing inverse of G, minus the derived one".into(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct GridInfo {
    pub n: usize,
    pub rule: String,
    pub a: f64,
    pub b: f64,
}

impl GridInfo {
    fn of(g: &Grid) -> Self {
        GridInfo {
            n: g.len(),
            rule: g.rule().to_string(),
            a: g.a(),
            b: g.b(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Summary {
    pub cost: Option<f64>,
    pub residuals: BTreeMap<String, f64>,
    pub verdict: Option<String>,
    pub path_agreement: Option<f64>,
    pub iterations: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolutionData {
    pub nodes: Vec<f64>,
    pub control_dim: usize,
    /// Node-major: component `c` at node `i` is entry `i * control_dim + c`.
    pub control: Vec<f64>,
    pub state_dim: Option<usize>,
    pub state: Option<Vec<f64>>,
    pub costate: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    pub problem_kind: String,
    pub grid: GridInfo,
    pub summary: Summary,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
    pub discrepancies: Vec<Discrepancy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solution: Option<SolutionData>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<BTreeMap<String, f64>>,
}

impl RunReport {
    /// Report for `out` without timings or solution arrays.
    pub fn from_outcome(command: &str, out: &Outcome) -> Self {
        RunReport {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            problem_kind: out.kind.to_string(),
            grid: GridInfo::of(&out.grid),
            summary: Summary {
                cost: Some(out.cost),
                residuals: out.residuals.clone(),
                verdict: out.verdict.clone(),
                path_agreement: out.path_agreement,
                iterations: out.iterations,
            },
            details: serde_json::Value::Null,
            discrepancies: out.discrepancies.clone(),
            solution: None,
            timings: None,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

impl Outcome {
    pub fn solution_data(&self) -> SolutionData {
        SolutionData {
            nodes: self.grid.nodes().to_vec(),
            control_dim: self.control.dim(),
            control: self.control.stacked().as_slice().to_vec(),
            state_dim: self.state.as_ref().map(|s| s.dim()),
            state: self.state.as_ref().map(|s| s.stacked().as_slice().to_vec()),
            costate: self.costate.as_ref().map(|s| s.stacked().as_slice().to_vec()),
        }
    }

    /// One row per node: index, abscissa, control, state, costate components.
    pub fn to_csv(&self) -> String {
        let var = if self.kind == ProblemKind::VolterraLQ { "t" } else { "x" };
        let mut cols = vec!["node".to_string(), var.to_string()];
        let mut blocks: Vec<(&str, &GridFunction)> = vec![("u", &self.control)];
        if let Some(s) = &self.state {
            blocks.push(("state", s));
        }
        if let Some(s) = &self.costate {
            blocks.push(("costate", s));
        }
        for (name, f) in &blocks {
            cols.extend((1..=f.dim()).map(|c| format!("{name}{c}")));
        }
        let mut s = cols.join(",");
        s.push('\n');
        for (i, x) in self.grid.nodes().iter().enumerate() {
            write!(s, "{i},{x}").unwrap();
            for (_, f) in &blocks {
                for v in f.values().row(i).iter() {
                    write!(s, ",{v}").unwrap();
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Stage timer that records nothing when timings are disabled.
struct Timer {
    enabled: bool,
    start: Instant,
    stages: BTreeMap<String, f64>,
}

impl Timer {
    fn new(enabled: bool) -> Self {
        Timer {
            enabled,
            start: Instant::now(),
            stages: BTreeMap::new(),
        }
    }

    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let r = f();
        self.stages.insert(stage.to_string(), t.elapsed().as_secs_f64());
        r
    }

    fn finish(mut self) -> Option<BTreeMap<String, f64>> {
        self.enabled.then(|| {
            self.stages.insert("total".into(), self.start.elapsed().as_secs_f64());
            self.stages
        })
    }
}

/// A command failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_PARSE,
        message: message.into(),
    }
}

fn read_spec(c: &CommonArgs) -> Result<ProblemSpec, CliError> {
    let text = std::fs::read_to_string(&c.problem)
        .map_err(|e| usage(format!("cannot read {}: {e}", c.problem.display())))?;
    Ok(load_spec(&text, c)?)
}

fn run_options(c: &CommonArgs) -> RunOptions {
    RunOptions {
        compare_paths: c.compare_paths,
        use_printed_k1: c.use_printed_k1,
    }
}

/// Solves and writes `solution.json` and/or `solution.csv` into `out_dir`.
pub fn cmd_solve(args: &SolveArgs) -> Result<RunReport, CliError> {
    let c = &args.common;
    let mut timer = Timer::new(!c.no_timings);
    let spec = timer.time("parse", || read_spec(c))?;
    let out = timer.time("solve", || solve_problem(&spec, run_options(c)))?;
    let mut report = RunReport::from_outcome("solve", &out);
    report.solution = Some(out.solution_data());
    report.timings = timer.finish();
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| usage(format!("cannot create {}: {e}", args.out_dir.display())))?;
    let write = |name: &str, body: &str| -> Result<(), CliError> {
        let path = args.out_dir.join(name);
        std::fs::write(&path, body).map_err(|e| CliError {
            code: EXIT_SOLVER,
            message: format!("cannot write {}: {e}", path.display()),
        })
    };
    if matches!(args.out, OutFormat::Json | OutFormat::Both) {
        write("solution.json", &report.to_json())?;
    }
    if matches!(args.out, OutFormat::Csv | OutFormat::Both) {
        write("solution.csv", &out.to_csv())?;
    }
    report.solution = None;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct PdLevel {
    pub grid_n: usize,
    pub min_eigenvalue: Option<f64>,
    pub verdict: String,
    pub k1_spd: bool,
}

fn pd_level(spec: &ProblemSpec) -> crate::Result<(Arc<Grid>, PdLevel)> {
    let grid = spec.grid()?;
    let form = match spec.kind {
        ProblemKind::QuadForm => quadform::QuadFormProblem::from_spec(spec, &grid)?,
        ProblemKind::FredholmLQ => {
            let p = lq_fredholm::FredholmLQProblem::from_spec(spec, &grid)?;
            let (phi1, b1) = lq_fredholm::reduce_state(&p)?;
            lq_fredholm::assemble_reduced_form(&p, &phi1, &b1)?.form
        }
        k => {
            return Err(Error::precondition(format!(
                "check-pd applies to QuadForm and FredholmLQ problems, not {k}"
            )))
        }
    };
    let cert = quadform::certify_pd(&form.symmetrized())?;
    Ok((
        grid,
        PdLevel {
            grid_n: cert.grid_n,
            min_eigenvalue: cert.min_eigenvalue,
            verdict: cert.verdict.as_str().to_string(),
            k1_spd: cert.k1_spd,
        },
    ))
}

/// Reports the smallest generalized eigenvalue at `n` and `2n − 1` nodes.
pub fn cmd_check_pd(c: &CommonArgs) -> Result<RunReport, CliError> {
    let mut timer = Timer::new(!c.no_timings);
    let spec = timer.time("parse", || read_spec(c))?;
    let mut fine = spec.clone();
    fine.settings.grid_n = 2 * spec.settings.grid_n - 1;
    let (grid, coarse_level) = timer.time("certify", || pd_level(&spec))?;
    let (_, fine_level) = timer.time("certify_refined", || pd_level(&fine))?;
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        command: "check-pd".into(),
        problem_kind: spec.kind.to_string(),
        grid: GridInfo::of(&grid),
        summary: Summary {
            verdict: Some(coarse_level.verdict.clone()),
            ..Summary::default()
        },
        details: serde_json::json!({
            "levels": [coarse_level, fine_level],
            "verdict_stable": coarse_level.verdict == fine_level.verdict,
        }),
        discrepancies: Vec::new(),
        solution: None,
        timings: timer.finish(),
    };
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleComparison {
    pub control_gap: Option<f64>,
    pub cost_gap: f64,
    pub oracle_cost: f64,
    pub fd_gradient_norm: f64,
    pub oracle_hessian_pd: Option<bool>,
}

/// Runs the module solver and the oracle on the same grid.
pub fn oracle_compare(spec: &ProblemSpec, out: &Outcome) -> crate::Result<OracleComparison> {
    let grid = &out.grid;
    let fd_gradient_norm = oracle::fd_gradient(spec, grid, &out.control, 1e-5)?.max_abs();
    if spec.kind == ProblemKind::NonlinearFredholm {
        let oracle_cost = oracle::direct_cost(spec, grid, &out.control)?;
        return Ok(OracleComparison {
            control_gap: None,
            cost_gap: (oracle_cost - out.cost).abs(),
            oracle_cost,
            fd_gradient_norm,
            oracle_hessian_pd: None,
        });
    }
    let qp = oracle::assemble_qp(spec, grid)?;
    let sol = oracle::qp_minimize(&qp)?;
    let reference = GridFunction::from_stacked(grid.clone(), out.control.dim(), &sol.u)?;
    Ok(OracleComparison {
        control_gap: Some(out.control.max_diff(&reference)),
        cost_gap: (sol.value - out.cost).abs(),
        oracle_cost: sol.value,
        fd_gradient_norm,
        oracle_hessian_pd: Some(sol.hessian_pd),
    })
}

pub fn cmd_oracle_compare(c: &CommonArgs) -> Result<RunReport, CliError> {
    let mut timer = Timer::new(!c.no_timings);
    let spec = timer.time("parse", || read_spec(c))?;
    let out = timer.time("solve", || solve_problem(&spec, run_options(c)))?;
    let cmp = timer.time("oracle", || oracle_compare(&spec, &out))?;
    let mut report = RunReport::from_outcome("oracle-compare", &out);
    report.details = serde_json::to_value(&cmp).expect("comparison serializes");
    report.timings = timer.finish();
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct LadderLevel {
    pub grid_n: usize,
    pub cost: f64,
    pub cost_error: Option<f64>,
    pub control_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceStudy {
    pub levels: Vec<LadderLevel>,
    /// Pairwise orders between consecutive non-reference levels; `None` once
    /// an error reaches the roundoff floor.
    pub cost_orders: Vec<Option<f64>>,
    pub control_orders: Vec<Option<f64>>,
    /// Least-squares slope of `log error` against `log h` over the levels
    /// above the roundoff floor.
    pub cost_order: Option<f64>,
    pub control_order: Option<f64>,
}

/// Barycentric weights for Gauss–Legendre nodes mapped from `[-1, 1]`.
fn gauss_barycentric_weights(grid: &Grid) -> Vec<f64> {
    let half = 0.5 * (grid.b() - grid.a());
    let mid = 0.5 * (grid.a() + grid.b());
    grid.nodes()
        .iter()
        .zip(grid.weights())
        .enumerate()
        .map(|(j, (&x, &w))| {
            let t = (x - mid) / half;
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            sign * ((1.0 - t * t) * w / half).sqrt()
        })
        .collect()
}

/// Values of `f` at the point `x`, interpolated from its grid: piecewise
/// linear for trapezoid grids, global barycentric for Gauss grids.
pub fn interpolate(f: &GridFunction, x: f64) -> Vec<f64> {
    let g = f.grid();
    let nodes = g.nodes();
    let dim = f.dim();
    if let Some(i) = nodes.iter().position(|&t| (t - x).abs() <= 1e-14 * (1.0 + x.abs())) {
        return f.values().row(i).iter().cloned().collect();
    }
    match g.rule() {
        QuadratureRule::Trapezoid => {
            let k = nodes.partition_point(|&t| t < x).clamp(1, nodes.len() - 1);
            let s = (x - nodes[k - 1]) / (nodes[k] - nodes[k - 1]);
            (0..dim)
                .map(|c| (1.0 - s) * f.values()[(k - 1, c)] + s * f.values()[(k, c)])
                .collect()
        }
        QuadratureRule::GaussLegendre => {
            let lam = gauss_barycentric_weights(g);
            let mut num = vec![0.0; dim];
            let mut den = 0.0;
            for (j, &t) in nodes.iter().enumerate() {
                let c = lam[j] / (x - t);
                den += c;
                for (k, v) in num.iter_mut().enumerate() {
                    *v += c * f.values()[(j, k)];
                }
            }
            num.into_iter().map(|v| v / den).collect()
        }
    }
}

fn step(spec: &ProblemSpec, n: usize) -> f64 {
    let len = spec.domain.1 - spec.domain.0;
    match spec.settings.rule {
        QuadratureRule::Trapezoid => len / (n - 1) as f64,
        QuadratureRule::GaussLegendre => len / n as f64,
    }
}

fn pairwise_orders(h: &[f64], e: &[Option<f64>], floor: f64) -> Vec<Option<f64>> {
    h.windows(2)
        .zip(e.windows(2))
        .map(|(h, e)| match (e[0], e[1]) {
            (Some(a), Some(b)) if a > floor && b > floor => Some((a / b).ln() / (h[0] / h[1]).ln()),
            _ => None,
        })
        .collect()
}

fn fitted_order(h: &[f64], e: &[Option<f64>], floor: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = h
        .iter()
        .zip(e)
        .filter_map(|(&h, e)| e.filter(|&v| v > floor).map(|v| (h.ln(), v.ln())))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// Solves at every ladder size and measures errors against the finest one.
pub fn convergence_study(spec: &ProblemSpec, ladder: &[usize], opts: RunOptions) -> crate::Result<ConvergenceStudy> {
    let mut sizes = ladder.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.len() < 2 {
        return Err(Error::domain("a convergence ladder needs at least two distinct grid sizes"));
    }
    let outcomes = sizes
        .iter()
        .map(|&n| {
            let mut s = spec.clone();
            s.settings.grid_n = n;
            solve_problem(&s, opts)
        })
        .collect::<crate::Result<Vec<_>>>()?;
    let reference = outcomes.last().expect("ladder is non-empty");
    let mut levels = Vec::new();
    for (k, o) in outcomes.iter().enumerate() {
        let is_ref = k + 1 == outcomes.len();
        let control_error = (!is_ref).then(|| {
            o.grid
                .nodes()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let r = interpolate(&reference.control, x);
                    o.control
                        .values()
                        .row(i)
                        .iter()
                        .zip(r)
                        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
                })
                .fold(0.0f64, f64::max)
        });
        levels.push(LadderLevel {
            grid_n: sizes[k],
            cost: o.cost,
            cost_error: (!is_ref).then(|| (o.cost - reference.cost).abs()),
            control_error,
        });
    }
    let coarse = &levels[..levels.len() - 1];
    let h: Vec<f64> = coarse.iter().map(|l| step(spec, l.grid_n)).collect();
    let ce: Vec<Option<f64>> = coarse.iter().map(|l| l.cost_error).collect();
    let ue: Vec<Option<f64>> = coarse.iter().map(|l| l.control_error).collect();
    let cost_floor = 1e-13 * (1.0 + reference.cost.abs());
    let control_floor = 1e-13 * (1.0 + reference.control.max_abs());
    Ok(ConvergenceStudy {
        cost_orders: pairwise_orders(&h, &ce, cost_floor),
        control_orders: pairwise_orders(&h, &ue, control_floor),
        cost_order: fitted_order(&h, &ce, cost_floor),
        control_order: fitted_order(&h, &ue, control_floor),
        levels,
    })
}

pub fn cmd_convergence(args: &ConvergenceArgs) -> Result<RunReport, CliError> {
    let c = &args.common;
    let distinct: std::collections::BTreeSet<_> = args.ladder.iter().collect();
    if distinct.len() < 2 {
        return Err(usage("--ladder needs at least two distinct grid sizes"));
    }
    let mut timer = Timer::new(!c.no_timings);
    let spec = timer.time("parse", || read_spec(c))?;
    let study = timer.time("ladder", || convergence_study(&spec, &args.ladder, run_options(c)))?;
    let finest = *args.ladder.iter().max().expect("ladder is non-empty");
    let mut fine = spec.clone();
    fine.settings.grid_n = finest;
    let grid = fine.grid()?;
    let last = study.levels.last().expect("ladder is non-empty");
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        command: "convergence".into(),
        problem_kind: spec.kind.to_string(),
        grid: GridInfo::of(&grid),
        summary: Summary {
            cost: Some(last.cost),
            ..Summary::default()
        },
        details: serde_json::to_value(&study).expect("study serializes"),
        discrepancies: Vec::new(),
        solution: None,
        timings: timer.finish(),
    })
}

/// Runs the parsed command, returning the report to print on success.
pub fn run(cli: &Cli) -> Result<RunReport, CliError> {
    match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::CheckPd(c) => cmd_check_pd(c),
        Command::OracleCompare(c) => cmd_oracle_compare(c),
        Command::Convergence(a) => cmd_convergence(a),
    }
}

/// Process entry point: prints the report to stdout, diagnostics to stderr,
/// and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_PARSE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(report) => {
            print!("{}", report.to_json());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

/// Output location for `solution.json` under `dir`.
pub fn solution_path(dir: &Path) -> PathBuf {
    dir.join("solution.json")
}
