//! State-nonlinear, control-affine Fredholm control:
//!
//! `φ(x) = φ₀(x) + ∫ f(x, y, φ(y)) + F(x, y, φ(y))u(y) dy`,
//! `J = ∫ g₀(x, φ) + g₁ᵀ(x, φ)u + ½uᵀG(x, φ)u dx`.
//!
//! Pointwise minimization of the Hamiltonian gives
//! `u = −G⁻¹[g₁ + ∫Fᵀ(y, x, φ(x))ψᵀ(y)dy]`, and substituting it into the state
//! and costate equations leaves a coupled pair of Fredholm equations,
//! quadratic in `ψ`, solved here by damped successive substitution.
//!
//! Gradient conventions: `grad_f` is `∂f_r/∂φ_k` (`n × n`), `grad_g1` is
//! `∂g1_i/∂φ_k` (`m × n`), and `grad_F{k}`, `grad_G{k}` hold the derivative of
//! the whole matrix with respect to `φ_k`. The state index is always the free
//! index of a costate term.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::discretize::{Grid, GridFunction};
use crate::error::{Error, Result};
use crate::kernelspec::{KernelExpr, ProblemKind, ProblemSpec};
use crate::linalg;

/// Relative tolerance for user-supplied gradients against finite differences.
pub const GRADIENT_TOL: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct NonlinearFredholmProblem {
    grid: Arc<Grid>,
    n: usize,
    m: usize,
    pub phi0: GridFunction,
    f: KernelExpr,
    ff: KernelExpr,
    g0: KernelExpr,
    g1: KernelExpr,
    g: KernelExpr,
    grad_f: KernelExpr,
    grad_g0: KernelExpr,
    grad_g1: KernelExpr,
    grad_ff: Vec<KernelExpr>,
    grad_g: Vec<KernelExpr>,
}

impl NonlinearFredholmProblem {
    pub fn from_spec(spec: &ProblemSpec, grid: &Arc<Grid>) -> Result<Self> {
        if spec.kind != ProblemKind::NonlinearFredholm {
            return Err(Error::domain(format!(
                "expected a NonlinearFredholm problem, got {}",
                spec.kind
            )));
        }
        let (n, m) = spec.dims;
        let k = |r: &str| spec.kernel(r).clone();
        Ok(NonlinearFredholmProblem {
            grid: grid.clone(),
            n,
            m,
            phi0: GridFunction::from_column_field(&spec.field("phi0", grid)?)?,
            f: k("f"),
            ff: k("F"),
            g0: k("g0"),
            g1: k("g1"),
            g: k("G"),
            grad_f: k("grad_f"),
            grad_g0: k("grad_g0"),
            grad_g1: k("grad_g1"),
            grad_ff: (1..=n).map(|i| k(&format!("grad_F{i}"))).collect(),
            grad_g: (1..=n).map(|i| k(&format!("grad_G{i}"))).collect(),
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn control_dim(&self) -> usize {
        self.m
    }
}

fn slots(x: f64, y: f64, phi: &[f64]) -> Vec<f64> {
    let mut s = Vec::with_capacity(2 + phi.len());
    s.push(x);
    s.push(y);
    s.extend_from_slice(phi);
    s
}

fn eval(k: &KernelExpr, x: f64, y: f64, phi: &[f64]) -> Result<DMatrix<f64>> {
    k.eval_at(&slots(x, y, phi)).map_err(|message| Error::Eval {
        role: k.role().to_string(),
        location: format!("x = {x}, y = {y}, phi = {phi:?}"),
        message,
    })
}

fn one_arg(k: &KernelExpr, x: f64, phi: &[f64]) -> Result<DMatrix<f64>> {
    eval(k, x, 0.0, phi)
}

/// Local data at node `x` for a given state value.
struct Local {
    grad_g0: DVector<f64>,
    g1: DVector<f64>,
    grad_g1: DMatrix<f64>,
    g: DMatrix<f64>,
    g_inv: DMatrix<f64>,
    grad_g: Vec<DMatrix<f64>>,
}

fn local(p: &NonlinearFredholmProblem, x: f64, phi: &[f64]) -> Result<Local> {
    let g = one_arg(&p.g, x, phi)?;
    if !linalg::is_symmetric(&g, 1e-12) {
        return Err(Error::precondition(format!("G is not symmetric at x = {x}")));
    }
    let g_inv = linalg::invert_block(&g, String::new).map_err(|_| Error::Singular {
        rcond: 0.0,
        context: format!("G at x = {x}, phi = {phi:?}"),
    })?;
    Ok(Local {
        grad_g0: one_arg(&p.grad_g0, x, phi)?.column(0).clone_owned(),
        g1: one_arg(&p.g1, x, phi)?.column(0).clone_owned(),
        grad_g1: one_arg(&p.grad_g1, x, phi)?,
        grad_g: p.grad_g.iter().map(|k| one_arg(k, x, phi)).collect::<Result<_>>()?,
        g,
        g_inv,
    })
}

/// Kernels sampled at `(x_i, x_j, φ(x_j))`, row-major over `(i, j)`.
struct Tables {
    f: Vec<DVector<f64>>,
    ff: Vec<DMatrix<f64>>,
    grad_f: Vec<DMatrix<f64>>,
    grad_ff: Vec<Vec<DMatrix<f64>>>,
    locals: Vec<Local>,
}

impl Tables {
    fn new(p: &NonlinearFredholmProblem, phi: &GridFunction) -> Result<Self> {
        let nodes = p.grid.nodes();
        let nn = nodes.len();
        let rows: Vec<Vec<f64>> = (0..nn).map(|j| phi.values().row(j).iter().cloned().collect()).collect();
        let mut t = Tables {
            f: Vec::with_capacity(nn * nn),
            ff: Vec::with_capacity(nn * nn),
            grad_f: Vec::with_capacity(nn * nn),
            grad_ff: vec![Vec::with_capacity(nn * nn); p.n],
            locals: Vec::with_capacity(nn),
        };
        for (i, &x) in nodes.iter().enumerate() {
            for (j, &y) in nodes.iter().enumerate() {
                let s = slots(x, y, &rows[j]);
                let ev = |k: &KernelExpr| {
                    k.eval_at(&s).map_err(|message| Error::Eval {
                        role: k.role().to_string(),
                        location: format!("node pair ({i}, {j}) (x = {x}, y = {y})"),
                        message,
                    })
                };
                t.f.push(ev(&p.f)?.column(0).clone_owned());
                t.ff.push(ev(&p.ff)?);
                t.grad_f.push(ev(&p.grad_f)?);
                for (k, gk) in p.grad_ff.iter().enumerate() {
                    t.grad_ff[k].push(ev(gk)?);
                }
            }
        }
        for (j, &x) in nodes.iter().enumerate() {
            t.locals.push(local(p, x, &rows[j])?);
        }
        Ok(t)
    }

    /// `∫ Fᵀ(y, x_j, φ(x_j)) ψᵀ(y) dy` at every node `j`.
    fn f_psi(&self, p: &NonlinearFredholmProblem, psi: &GridFunction) -> Vec<DVector<f64>> {
        let nn = p.grid.len();
        let w = p.grid.weights();
        (0..nn)
            .map(|j| {
                let mut acc = DVector::zeros(p.m);
                for z in 0..nn {
                    acc += self.ff[z * nn + j].transpose() * psi.at(z) * w[z];
                }
                acc
            })
            .collect()
    }
}

/// `u*(x) = −G⁻¹(x, φ)[g₁(x, φ) + ∫Fᵀ(y, x, φ)ψᵀ(y)dy]` at a single point.
pub fn control_from_costate(
    p: &NonlinearFredholmProblem,
    x: f64,
    phi_at_x: &[f64],
    psi: &GridFunction,
) -> Result<DVector<f64>> {
    let loc = local(p, x, phi_at_x)?;
    let nodes = p.grid.nodes();
    let w = p.grid.weights();
    let mut v = loc.g1.clone();
    for (z, &y) in nodes.iter().enumerate() {
        v += eval(&p.ff, y, x, phi_at_x)?.transpose() * psi.at(z) * w[z];
    }
    Ok(-(&loc.g_inv * v))
}

/// `H = g₀ + g₁ᵀu + ½uᵀGu + ∫ψ(y)[f(y, x, φ) + F(y, x, φ)u]dy`.
pub fn hamiltonian(
    p: &NonlinearFredholmProblem,
    x: f64,
    phi_at_x: &[f64],
    u_at_x: &[f64],
    psi: &GridFunction,
) -> Result<f64> {
    let u = DVector::from_column_slice(u_at_x);
    let g0 = one_arg(&p.g0, x, phi_at_x)?[(0, 0)];
    let g1 = one_arg(&p.g1, x, phi_at_x)?;
    let g = one_arg(&p.g, x, phi_at_x)?;
    let mut h = g0 + g1.column(0).dot(&u) + 0.5 * u.dot(&(&g * &u));
    let w = p.grid.weights();
    for (z, &y) in p.grid.nodes().iter().enumerate() {
        let dyn_ = eval(&p.f, y, x, phi_at_x)? + eval(&p.ff, y, x, phi_at_x)? * &u;
        h += w[z] * psi.at(z).dot(&dyn_.column(0));
    }
    Ok(h)
}

/// Right-hand sides of the coupled equations at the iterate `(φ, ψ)`:
/// the state equation with `u` eliminated and the costate equation expanded
/// term by term.
struct Sweep {
    phi_rhs: DMatrix<f64>,
    psi_rhs: DMatrix<f64>,
    /// Costate right-hand side with the cross term missing its
    /// trailing `G⁻¹`.
    psi_rhs_printed: DMatrix<f64>,
}

fn sweep(p: &NonlinearFredholmProblem, t: &Tables, psi: &GridFunction) -> Sweep {
    let (n, nn) = (p.n, p.grid.len());
    let w = p.grid.weights();
    let fpsi = t.f_psi(p, psi);
    let mut phi_rhs = p.phi0.values().clone();
    let mut psi_rhs = DMatrix::zeros(nn, n);
    let mut psi_rhs_printed = DMatrix::zeros(nn, n);
    // G⁻¹g₁ and G⁻¹∫Fᵀψᵀ per node.
    let gi_g1: Vec<DVector<f64>> = t.locals.iter().map(|l| &l.g_inv * &l.g1).collect();
    let gi_fpsi: Vec<DVector<f64>> = t.locals.iter().zip(&fpsi).map(|(l, v)| &l.g_inv * v).collect();
    for i in 0..nn {
        let mut acc = DVector::zeros(n);
        for j in 0..nn {
            let fij = &t.ff[i * nn + j];
            acc += (&t.f[i * nn + j] - fij * &gi_g1[j] - fij * &gi_fpsi[j]) * w[j];
        }
        for c in 0..n {
            phi_rhs[(i, c)] += acc[c];
        }
    }
    for j in 0..nn {
        let l = &t.locals[j];
        let base = &l.grad_g0 - l.grad_g1.transpose() * (&gi_g1[j] + &gi_fpsi[j]);
        let mut psi_grad_f = DVector::zeros(n);
        for y in 0..nn {
            psi_grad_f += t.grad_f[y * nn + j].transpose() * psi.at(y) * w[y];
        }
        for k in 0..n {
            let dg = &l.grad_g[k];
            let quad_psi = 0.5 * gi_fpsi[j].dot(&(dg * &gi_fpsi[j]));
            let quad_g1 = 0.5 * gi_g1[j].dot(&(dg * &gi_g1[j]));
            let cross = gi_g1[j].dot(&(dg * &gi_fpsi[j]));
            let cross_printed = gi_g1[j].dot(&(dg * &fpsi[j]));
            let mut via_grad_ff = 0.0;
            for y in 0..nn {
                let gfk = &t.grad_ff[k][y * nn + j];
                via_grad_ff += w[y] * psi.at(y).dot(&(gfk * (&gi_g1[j] + &gi_fpsi[j])));
            }
            let common = base[k] + quad_psi + quad_g1 + psi_grad_f[k] - via_grad_ff;
            psi_rhs[(j, k)] = common + cross;
            psi_rhs_printed[(j, k)] = common + cross_printed;
        }
    }
    Sweep {
        phi_rhs,
        psi_rhs,
        psi_rhs_printed,
    }
}

#[derive(Debug, Clone)]
pub struct CoupledIterate {
    pub phi: GridFunction,
    pub psi: GridFunction,
    pub residual_phi: f64,
    pub residual_psi: f64,
    pub iteration: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct IterationSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
}

impl IterationSettings {
    pub fn from_spec(spec: &ProblemSpec) -> Self {
        IterationSettings {
            tol: spec.settings.tol,
            max_iter: spec.settings.max_iter,
            damping: spec.settings.damping,
        }
    }
}

/// Defects of the original optimality conditions at a candidate triple.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct OptimalityResiduals {
    /// State equation with `u = u*`.
    pub dynamics: f64,
    /// Costate equation `ψ = ∇_φH`.
    pub costate: f64,
    /// `g₁ᵀ + u*ᵀG + ∫ψF`.
    pub stationarity: f64,
}

pub fn optimality_residuals(
    p: &NonlinearFredholmProblem,
    phi: &GridFunction,
    u: &GridFunction,
    psi: &GridFunction,
) -> Result<OptimalityResiduals> {
    let t = Tables::new(p, phi)?;
    let (n, nn) = (p.n, p.grid.len());
    let w = p.grid.weights();
    let fpsi = t.f_psi(p, psi);
    let mut dynamics = 0.0f64;
    for i in 0..nn {
        let mut rhs = p.phi0.at(i);
        for j in 0..nn {
            rhs += (&t.f[i * nn + j] + &t.ff[i * nn + j] * u.at(j)) * w[j];
        }
        dynamics = dynamics.max((phi.at(i) - rhs).amax());
    }
    let (mut costate, mut stationarity) = (0.0f64, 0.0f64);
    for j in 0..nn {
        let l = &t.locals[j];
        let uj = u.at(j);
        stationarity = stationarity.max((&l.g1 + &l.g * &uj + &fpsi[j]).amax());
        let mut rhs = &l.grad_g0 + l.grad_g1.transpose() * &uj;
        for k in 0..n {
            rhs[k] += 0.5 * uj.dot(&(&l.grad_g[k] * &uj));
        }
        for y in 0..nn {
            let mut term = t.grad_f[y * nn + j].transpose() * psi.at(y);
            for k in 0..n {
                term[k] += psi.at(y).dot(&(&t.grad_ff[k][y * nn + j] * &uj));
            }
            rhs += term * w[y];
        }
        costate = costate.max((psi.at(j) - rhs).amax());
    }
    Ok(OptimalityResiduals {
        dynamics,
        costate,
        stationarity,
    })
}

#[derive(Debug, Clone)]
pub struct NlSolution {
    pub iterate: CoupledIterate,
    pub u_star: GridFunction,
    pub cost: f64,
    pub residuals: OptimalityResiduals,
    /// Max-norm gap at the solution between the costate right-hand side whose
    /// cross term lacks its trailing `G⁻¹` and the derived one.
    pub printed_costate_discrepancy: f64,
    pub history: Vec<(f64, f64)>,
}

fn control_at_iterate(p: &NonlinearFredholmProblem, t: &Tables, psi: &GridFunction) -> Result<GridFunction> {
    let fpsi = t.f_psi(p, psi);
    let nn = p.grid.len();
    let mut u = DMatrix::zeros(nn, p.m);
    for j in 0..nn {
        let l = &t.locals[j];
        let v = -(&l.g_inv * (&l.g1 + &fpsi[j]));
        u.row_mut(j).copy_from(&v.transpose());
    }
    GridFunction::new(p.grid.clone(), u)
}

/// `J` by quadrature at `(φ, u)`.
pub fn cost(p: &NonlinearFredholmProblem, phi: &GridFunction, u: &GridFunction) -> Result<f64> {
    let w = p.grid.weights();
    let mut total = 0.0;
    for (i, &x) in p.grid.nodes().iter().enumerate() {
        let ph: Vec<f64> = phi.values().row(i).iter().cloned().collect();
        let ui = u.at(i);
        let g = one_arg(&p.g, x, &ph)?;
        total += w[i]
            * (one_arg(&p.g0, x, &ph)?[(0, 0)] + one_arg(&p.g1, x, &ph)?.column(0).dot(&ui) + 0.5 * ui.dot(&(g * &ui)));
    }
    Ok(total)
}

/// Damped successive substitution `z ← (1 − θ)z + θ·RHS(z)` on `z = (φ, ψ)`,
/// from `φ = φ₀`, `ψ = 0`, until both defects are at most `tol`.
pub fn solve_coupled(p: &NonlinearFredholmProblem, s: IterationSettings) -> Result<NlSolution> {
    if !(s.damping > 0.0 && s.damping <= 1.0) {
        return Err(Error::domain("damping must lie in (0, 1]"));
    }
    let mut phi = p.phi0.clone();
    let mut psi = GridFunction::zeros(p.grid.clone(), p.n);
    let mut history = Vec::new();
    for iteration in 0..s.max_iter {
        let t = Tables::new(p, &phi)?;
        let sw = sweep(p, &t, &psi);
        let residual_phi = linalg::max_abs(&(phi.values() - &sw.phi_rhs));
        let residual_psi = linalg::max_abs(&(psi.values() - &sw.psi_rhs));
        history.push((residual_phi, residual_psi));
        if !(residual_phi.is_finite() && residual_psi.is_finite()) {
            break;
        }
        if residual_phi <= s.tol && residual_psi <= s.tol {
            let u_star = control_at_iterate(p, &t, &psi)?;
            let residuals = optimality_residuals(p, &phi, &u_star, &psi)?;
            let bound = 10.0 * s.tol;
            let scale = 1.0 + phi.max_abs().max(psi.max_abs()).max(u_star.max_abs());
            if residuals.dynamics > bound * scale
                || residuals.costate > bound * scale
                || residuals.stationarity > bound * scale
            {
                return Err(Error::Verification(format!(
                    "optimality conditions violated at the fixed point: {residuals:?}"
                )));
            }
            let printed_costate_discrepancy = linalg::max_abs(&(&sw.psi_rhs_printed - &sw.psi_rhs));
            let cost = cost(p, &phi, &u_star)?;
            return Ok(NlSolution {
                iterate: CoupledIterate {
                    phi,
                    psi,
                    residual_phi,
                    residual_psi,
                    iteration,
                },
                u_star,
                cost,
                residuals,
                printed_costate_discrepancy,
                history,
            });
        }
        let th = s.damping;
        phi = GridFunction::new(p.grid.clone(), phi.values() * (1.0 - th) + &sw.phi_rhs * th)?;
        psi = GridFunction::new(p.grid.clone(), psi.values() * (1.0 - th) + &sw.psi_rhs * th)?;
    }
    let (last_phi, last_psi) = history.last().copied().unwrap_or((f64::NAN, f64::NAN));
    Err(Error::NonConvergence {
        iterations: history.len(),
        last_phi,
        last_psi,
        history,
    })
}

/// How a gradient expression relates to its base.
#[derive(Clone, Copy)]
enum Layout {
    /// Entry `(r, k)` is `∂base_r/∂φ_k`.
    Column,
    /// Entry `k` is `∂base/∂φ_k` of a scalar base.
    Row,
    /// One matrix per state component `k`, each `∂base/∂φ_k`.
    Slice,
}

/// Worst relative disagreement of one gradient role with finite differences.
#[derive(Debug, Clone, Serialize)]
pub struct GradientCheck {
    pub role: String,
    pub worst_relative_error: f64,
}

/// Compares every supplied gradient with central differences of its base
/// expression at `samples` random points `(x, y, φ)`. The error measure is
/// `|fd − g| / max(1, |g|)`.
pub fn validate_gradients(p: &NonlinearFredholmProblem, samples: usize, seed: u64) -> Result<Vec<GradientCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (p.grid.a(), p.grid.b());
    let n = p.n;
    let pairings: Vec<(&KernelExpr, Vec<&KernelExpr>, Layout)> = vec![
        (&p.f, vec![&p.grad_f], Layout::Column),
        (&p.g0, vec![&p.grad_g0], Layout::Row),
        (&p.g1, vec![&p.grad_g1], Layout::Column),
        (&p.ff, p.grad_ff.iter().collect(), Layout::Slice),
        (&p.g, p.grad_g.iter().collect(), Layout::Slice),
    ];
    let mut out = Vec::new();
    for (base, grads, layout) in pairings {
        let mut worst = 0.0f64;
        let mut done = 0;
        let mut attempts = 0;
        while done < samples {
            attempts += 1;
            if attempts > 20 * samples {
                return Err(Error::Verification(format!(
                    "could not find {samples} admissible sample points for `{}`",
                    base.role()
                )));
            }
            let x = rng.random_range(a..b);
            let y = rng.random_range(a..b);
            let phi: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
            let Ok(_) = base.eval_at(&slots(x, y, &phi)) else { continue };
            let Ok(gvals) = grads.iter().map(|g| g.eval_at(&slots(x, y, &phi))).collect::<std::result::Result<Vec<_>, _>>() else {
                continue;
            };
            let mut fd = Vec::with_capacity(n);
            let mut ok = true;
            for k in 0..n {
                let h = 1e-6 * (1.0 + phi[k].abs());
                let mut up = phi.clone();
                up[k] += h;
                let mut dn = phi.clone();
                dn[k] -= h;
                match (base.eval_at(&slots(x, y, &up)), base.eval_at(&slots(x, y, &dn))) {
                    (Ok(u), Ok(d)) => fd.push((u - d) / (2.0 * h)),
                    _ => ok = false,
                }
            }
            if !ok {
                continue;
            }
            for k in 0..n {
                let (expect, got): (Vec<f64>, Vec<f64>) = match layout {
                    Layout::Column => (fd[k].iter().cloned().collect(), gvals[0].column(k).iter().cloned().collect()),
                    Layout::Row => (vec![fd[k][(0, 0)]], vec![gvals[0][(k, 0)]]),
                    Layout::Slice => (fd[k].iter().cloned().collect(), gvals[k].iter().cloned().collect()),
                };
                for (e, g) in expect.iter().zip(got.iter()) {
                    worst = worst.max((e - g).abs() / g.abs().max(1.0));
                }
            }
            done += 1;
        }
        let role = grads.iter().map(|g| g.role()).collect::<Vec<_>>().join(",");
        out.push(GradientCheck {
            role,
            worst_relative_error: worst,
        });
    }
    Ok(out)
}

/// Runs gradient validation, then the coupled iteration.
pub fn solve(p: &NonlinearFredholmProblem, s: IterationSettings) -> Result<(NlSolution, Vec<GradientCheck>)> {
    let checks = validate_gradients(p, 100, 0x5eed)?;
    if let Some(bad) = checks.iter().find(|c| !(c.worst_relative_error <= GRADIENT_TOL)) {
        return Err(Error::Verification(format!(
            "gradient `{}` disagrees with finite differences (relative error {:.3e})",
            bad.role, bad.worst_relative_error
        )));
    }
    Ok((solve_coupled(p, s)?, checks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernelspec::parse_problem;

    fn problem(text: &str) -> (ProblemSpec, NonlinearFredholmProblem) {
        let spec = parse_problem(text).unwrap();
        let g = spec.grid().unwrap();
        let p = NonlinearFredholmProblem::from_spec(&spec, &g).unwrap();
        (spec, p)
    }

    pub(crate) const SMALL: &str = r#"{"kind":"NonlinearFredholm","domain":{"a":0,"b":1},"dims":{"n":1,"m":1},
        "kernels":{"phi0":[["1+0.5*x"]],"f":[["0.3*x*y*sin(phi)"]],"F":[["0.4*cos(x)*(1+0.2*phi)"]],
        "g0":[["0.5*phi^2+0.1*x*phi"]],"g1":[["0.5*phi"]],"G":[["1+0.1*phi^2"]],
        "grad_f":[["0.3*x*y*cos(phi)"]],"grad_g0":[["phi+0.1*x"]],"grad_g1":[["0.5"]],
        "grad_F1":[["0.08*cos(x)"]],"grad_G1":[["0.2*phi"]]},
        "settings":{"grid_n":33,"rule":"gauss","tol":1e-11}}"#;

    fn settings(spec: &ProblemSpec) -> IterationSettings {
        IterationSettings::from_spec(spec)
    }

    #[test]
    fn gradient_validation_accepts_correct_and_flags_wrong() {
        let (_, p) = problem(SMALL);
        let checks = validate_gradients(&p, 100, 1).unwrap();
        assert!(checks.iter().all(|c| c.worst_relative_error < GRADIENT_TOL), "{checks:?}");
        let (_, bad) = problem(&SMALL.replace("0.3*x*y*cos(phi)", "0.3*x*y*cos(2*phi)"));
        let checks = validate_gradients(&bad, 100, 1).unwrap();
        assert!(checks.iter().any(|c| c.role == "grad_f" && c.worst_relative_error > 1e-3));
        assert!(matches!(solve(&bad, IterationSettings { tol: 1e-10, max_iter: 50, damping: 1.0 }), Err(Error::Verification(_))));
    }

    #[test]
    fn decoupled_case_converges_immediately() {
        let text = r#"{"kind":"NonlinearFredholm","domain":{"a":0,"b":1},"dims":{"n":1,"m":1},
            "kernels":{"phi0":[["x"]],"f":[["0"]],"F":[["0"]],
            "g0":[["exp(phi)"]],"g1":[["2"]],"G":[["4"]],
            "grad_f":[["0"]],"grad_g0":[["exp(phi)"]],"grad_g1":[["0"]],
            "grad_F1":[["0"]],"grad_G1":[["0"]]},"settings":{"grid_n":9}}"#;
        let (spec, p) = problem(text);
        let s = solve_coupled(&p, settings(&spec)).unwrap();
        assert!(s.iterate.iteration <= 2);
        assert!(s.iterate.phi.max_diff(&p.phi0) < 1e-15);
        for (i, &x) in p.grid.nodes().iter().enumerate() {
            assert!((s.iterate.psi.values()[(i, 0)] - x.exp()).abs() < 1e-14);
            assert!((s.u_star.values()[(i, 0)] + 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn control_from_costate_examples() {
        let (_, p) = problem(&SMALL.replace("0.4*cos(x)*(1+0.2*phi)", "0").replace("0.08*cos(x)", "0"));
        let psi = GridFunction::scalar_fn(p.grid.clone(), |x| x);
        let u = control_from_costate(&p, 0.3, &[0.7], &psi).unwrap();
        assert!((u[0] + 0.5 * 0.7 / (1.0 + 0.1 * 0.49)).abs() < 1e-15);

        let (_, p) = problem(&SMALL.replace("\"0.5*phi\"", "\"0\"").replace("\"0.5\"]]", "\"0\"]]"));
        let zero = GridFunction::zeros(p.grid.clone(), 1);
        assert_eq!(control_from_costate(&p, 0.3, &[0.7], &zero).unwrap()[0], 0.0);
    }

    #[test]
    fn hamiltonian_examples() {
        let (_, p) = problem(SMALL);
        let zero = GridFunction::zeros(p.grid.clone(), 1);
        let (x, phi) = (0.4, [0.9]);
        let h = hamiltonian(&p, x, &phi, &[0.0], &zero).unwrap();
        assert!((h - (0.5 * 0.81 + 0.1 * 0.4 * 0.9)).abs() < 1e-15);

        // ∂H/∂u vanishes at the pointwise minimizer
        let psi = GridFunction::scalar_fn(p.grid.clone(), |y| 0.3 + y);
        let u = control_from_costate(&p, x, &phi, &psi).unwrap()[0];
        let d = 1e-5;
        let hp = hamiltonian(&p, x, &phi, &[u + d], &psi).unwrap();
        let hm = hamiltonian(&p, x, &phi, &[u - d], &psi).unwrap();
        assert!(((hp - hm) / (2.0 * d)).abs() < 1e-7);
    }

    #[test]
    fn coupled_solve_satisfies_optimality_conditions() {
        let (spec, p) = problem(SMALL);
        let (s, _) = solve(&p, settings(&spec)).unwrap();
        let r = s.residuals;
        assert!(r.dynamics < 1e-9 && r.costate < 1e-9 && r.stationarity < 1e-9, "{r:?}");
        assert!(s.printed_costate_discrepancy > 0.0);
        let probe = crate::oracle::descent_probe(&spec, p.grid(), &s.u_star, 4, 0, 3).unwrap();
        assert!(probe.gradient_norm < 1e-7, "{probe:?}");
    }

    #[test]
    fn linear_quadratic_instance_matches_lq_solver() {
        let lq = r#"{"kind":"FredholmLQ","domain":{"a":0,"b":1},"dims":{"n":2,"m":1},
            "kernels":{"A":[["0.3*x*y","0.1"],["-0.2*cos(x-y)","0.25*y"]],"B":[["0.5+x*y"],["cos(x+y)"]],
            "phi0":[["1+x"],["sin(x)"]],"P":[["1","0.2"],["0.2","0.5+x"]],"Q":[["0.2*x"],["0.1"]],"R":[["1+x^2"]]},
            "settings":{"grid_n":33,"rule":"gauss"}}"#;
        let nl = r#"{"kind":"NonlinearFredholm","domain":{"a":0,"b":1},"dims":{"n":2,"m":1},
            "kernels":{"phi0":[["1+x"],["sin(x)"]],
            "f":[["0.3*x*y*phi1+0.1*phi2"],["-0.2*cos(x-y)*phi1+0.25*y*phi2"]],
            "F":[["0.5+x*y"],["cos(x+y)"]],
            "g0":[["0.5*phi1^2+0.2*phi1*phi2+0.5*(0.5+x)*phi2^2"]],"g1":[["0.2*x*phi1+0.1*phi2"]],"G":[["1+x^2"]],
            "grad_f":[["0.3*x*y","0.1"],["-0.2*cos(x-y)","0.25*y"]],
            "grad_g0":[["phi1+0.2*phi2"],["0.2*phi1+(0.5+x)*phi2"]],"grad_g1":[["0.2*x","0.1"]],
            "grad_F1":[["0"],["0"]],"grad_F2":[["0"],["0"]],"grad_G1":[["0"]],"grad_G2":[["0"]]},
            "settings":{"grid_n":33,"rule":"gauss","tol":1e-12,"max_iter":500}}"#;
        let lspec = parse_problem(lq).unwrap();
        let lp = crate::lq_fredholm::FredholmLQProblem::from_spec(&lspec, &lspec.grid().unwrap()).unwrap();
        let want = crate::lq_fredholm::solve(&lp).unwrap();
        let (spec, p) = problem(nl);
        let (got, _) = solve(&p, settings(&spec)).unwrap();
        let gap = got.u_star.max_diff(&want.u_star);
        assert!(gap < 1e-7, "control gap {gap:e}");
        assert!((got.cost - want.cost).abs() < 1e-9 * (1.0 + want.cost.abs()));
        assert_eq!(got.printed_costate_discrepancy, 0.0);
    }

    #[test]
    fn divergent_iteration_reports_history() {
        let (spec, p) = problem(&SMALL.replace("\"grid_n\":33", "\"grid_n\":9"));
        let s = IterationSettings {
            max_iter: 3,
            ..settings(&spec)
        };
        match solve_coupled(&p, s) {
            Err(Error::NonConvergence { iterations, history, .. }) => {
                assert_eq!(iterations, 3);
                assert_eq!(history.len(), 3);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }
}
