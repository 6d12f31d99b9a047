//! Brute-force verifier.
//!
//! Every problem is discretized directly as a finite-dimensional minimization
//! over the stacked control vector: the state is eliminated with a dense
//! solve of the discretized dynamics and the cost is summed with the grid
//! weights. Only grids and kernel sampling are shared with the solvers.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen, LU};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::discretize::{Grid, GridFunction, MatrixKernelField};
use crate::error::{Error, Result};
use crate::kernelspec::{KernelExpr, ProblemKind, ProblemSpec};

/// `½uᵀHu + rᵀu + c0` over the node-major stacked control.
#[derive(Debug, Clone)]
pub struct DiscreteQP {
    pub h: DMatrix<f64>,
    pub r: DVector<f64>,
    pub c0: f64,
    pub nodes: usize,
    pub components: usize,
}

impl DiscreteQP {
    /// Stacked index of component `c` at node `i`.
    pub fn index(&self, node: usize, component: usize) -> usize {
        node * self.components + component
    }

    pub fn value(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.h * u)) + self.r.dot(u) + self.c0
    }

    pub fn gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.h * u + &self.r
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub u: DVector<f64>,
    pub value: f64,
    pub hessian_pd: bool,
    pub min_eigenvalue: f64,
}

fn dense_lu(m: DMatrix<f64>, what: &str) -> Result<LU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    let lu = m.lu();
    let diag_ok = lu.u().diagonal().iter().all(|d| d.is_finite() && *d != 0.0);
    if !diag_ok {
        return Err(Error::Singular {
            rcond: 0.0,
            context: format!("oracle: {what}"),
        });
    }
    Ok(lu)
}

fn solve_lu(lu: &LU<f64, nalgebra::Dyn, nalgebra::Dyn>, rhs: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    match lu.solve(rhs) {
        Some(x) if x.iter().all(|v| v.is_finite()) => Ok(x),
        _ => Err(Error::Singular {
            rcond: 0.0,
            context: format!("oracle: {what}"),
        }),
    }
}

fn block_diag_weighted(k: &MatrixKernelField, w: &[f64]) -> DMatrix<f64> {
    let (r, c) = (k.rows(), k.cols());
    let mut m = DMatrix::zeros(w.len() * r, w.len() * c);
    for (i, wi) in w.iter().enumerate() {
        m.view_mut((i * r, i * c), (r, c)).copy_from(&(k.at(i) * *wi));
    }
    m
}

/// Linear dynamics `y = y0 + Â y + B̂ u` with the cost blocks already weighted.
struct LinearModel {
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    b_hat: DMatrix<f64>,
    y0: DVector<f64>,
    wp: DMatrix<f64>,
    wq: DMatrix<f64>,
    wr: DMatrix<f64>,
}

impl LinearModel {
    fn new(spec: &ProblemSpec, grid: &Arc<Grid>) -> Result<Self> {
        let a = spec.field("A", grid)?;
        let b = spec.field("B", grid)?;
        let (a_hat, b_hat, y0_role) = match spec.kind {
            ProblemKind::FredholmLQ => (a.weighted_operator(), b.weighted_operator(), "phi0"),
            ProblemKind::VolterraLQ => {
                let omega = grid.causal_weights();
                (a.operator_with_weights(&omega), b.operator_with_weights(&omega), "y0")
            }
            k => return Err(Error::domain(format!("no linear dynamics for {k}"))),
        };
        let n = a_hat.nrows();
        let lu = dense_lu(DMatrix::identity(n, n) - a_hat, "discretized dynamics")?;
        let y0 = spec.field(y0_role, grid)?.data().column(0).clone_owned();
        let w = grid.weights();
        let p = spec.field("P", grid)?;
        let q = spec.field("Q", grid)?;
        let r = spec.field("R", grid)?;
        Ok(LinearModel {
            lu,
            b_hat,
            y0,
            wp: block_diag_weighted(&p, w),
            wq: block_diag_weighted(&q, w),
            wr: block_diag_weighted(&r, w),
        })
    }

    fn state(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        let rhs = &self.y0 + &self.b_hat * u;
        let x = solve_lu(&self.lu, &DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice()), "state")?;
        Ok(x.column(0).clone_owned())
    }

    fn cost(&self, u: &DVector<f64>) -> Result<f64> {
        let y = self.state(u)?;
        Ok(0.5 * y.dot(&(&self.wp * &y)) + y.dot(&(&self.wq * u)) + 0.5 * u.dot(&(&self.wr * u)))
    }

    fn qp(&self, nodes: usize) -> Result<DiscreteQP> {
        let phi_u = solve_lu(&self.lu, &self.b_hat, "control-to-state map")?;
        let phi0 = self.state(&DVector::zeros(self.b_hat.ncols()))?;
        let cross = phi_u.transpose() * &self.wq;
        let h = phi_u.transpose() * &self.wp * &phi_u + &cross + cross.transpose() + &self.wr;
        let h = (&h + h.transpose()) * 0.5;
        let r = phi_u.transpose() * (&self.wp * &phi0) + self.wq.transpose() * &phi0;
        let c0 = 0.5 * phi0.dot(&(&self.wp * &phi0));
        Ok(DiscreteQP {
            components: h.nrows() / nodes,
            h,
            r,
            c0,
            nodes,
        })
    }
}

struct QuadModel {
    h: DMatrix<f64>,
    r: DVector<f64>,
}

impl QuadModel {
    fn new(spec: &ProblemSpec, grid: &Arc<Grid>) -> Result<Self> {
        let k1 = spec.field("K1", grid)?;
        let k2 = spec.field("K2", grid)?;
        let r0 = spec.field("r0", grid)?;
        let w = grid.weights();
        let n = k1.rows();
        let nn = grid.len();
        let mut h = block_diag_weighted(&k1, w);
        for i in 0..nn {
            for j in 0..nn {
                let blk = k2.at2(i, j) * (w[i] * w[j]);
                let mut v = h.view_mut((i * n, j * n), (n, n));
                v += blk;
            }
        }
        let h = (&h + h.transpose()) * 0.5;
        let r = DVector::from_fn(nn * n, |k, _| w[k / n] * r0.data()[(k, 0)]);
        Ok(QuadModel { h, r })
    }

    fn cost(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.h * u)) + self.r.dot(u)
    }
}

/// Direct evaluation of state-nonlinear Fredholm dynamics and cost.
struct NonlinearModel<'a> {
    spec: &'a ProblemSpec,
    grid: Arc<Grid>,
    phi0: DMatrix<f64>,
    max_iter: usize,
}

const STATE_TOL: f64 = 1e-14;

impl<'a> NonlinearModel<'a> {
    fn new(spec: &'a ProblemSpec, grid: &Arc<Grid>) -> Result<Self> {
        let phi0 = spec.field("phi0", grid)?;
        let n = spec.state_dim();
        let phi0 = DMatrix::from_fn(grid.len(), n, |i, c| phi0.data()[(i * n + c, 0)]);
        Ok(NonlinearModel {
            spec,
            grid: grid.clone(),
            phi0,
            max_iter: spec.settings.max_iter.max(2000),
        })
    }

    fn eval(&self, k: &KernelExpr, x: f64, y: f64, phi: &[f64]) -> Result<DMatrix<f64>> {
        let mut slots = Vec::with_capacity(2 + phi.len());
        slots.push(x);
        slots.push(y);
        slots.extend_from_slice(phi);
        k.eval_at(&slots).map_err(|message| Error::Eval {
            role: k.role().to_string(),
            location: format!("(x = {x}, y = {y}, phi = {phi:?})"),
            message,
        })
    }

    /// Solves `φ = φ0 + Σ_j w_j [f(x_i, y_j, φ_j) + F(x_i, y_j, φ_j) u_j]` by
    /// successive substitution.
    fn state(&self, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (n, nn) = (self.spec.state_dim(), self.grid.len());
        let x = self.grid.nodes();
        let w = self.grid.weights();
        let (f, ff) = (self.spec.kernel("f"), self.spec.kernel("F"));
        let mut phi = self.phi0.clone();
        for _ in 0..self.max_iter {
            let mut next = self.phi0.clone();
            for j in 0..nn {
                let pj: Vec<f64> = phi.row(j).iter().cloned().collect();
                let uj = u.row(j).transpose();
                for i in 0..nn {
                    let v = self.eval(f, x[i], x[j], &pj)? + self.eval(ff, x[i], x[j], &pj)? * &uj;
                    for c in 0..n {
                        next[(i, c)] += w[j] * v[(c, 0)];
                    }
                }
            }
            let delta = (&next - &phi).abs().max();
            phi = next;
            if delta <= STATE_TOL * (1.0 + phi.abs().max()) {
                return Ok(phi);
            }
            if !delta.is_finite() {
                break;
            }
        }
        Err(Error::Verification(
            "oracle: state fixed-point iteration did not converge".to_string(),
        ))
    }

    fn cost(&self, u: &DMatrix<f64>) -> Result<f64> {
        let phi = self.state(u)?;
        let x = self.grid.nodes();
        let w = self.grid.weights();
        let (g0, g1, g) = (self.spec.kernel("g0"), self.spec.kernel("g1"), self.spec.kernel("G"));
        let mut total = 0.0;
        for i in 0..self.grid.len() {
            let p: Vec<f64> = phi.row(i).iter().cloned().collect();
            let ui = u.row(i).transpose();
            let running = self.eval(g0, x[i], 0.0, &p)?[(0, 0)]
                + self.eval(g1, x[i], 0.0, &p)?.column(0).dot(&ui)
                + 0.5 * ui.dot(&(self.eval(g, x[i], 0.0, &p)? * &ui));
            total += w[i] * running;
        }
        Ok(total)
    }
}

enum Model<'a> {
    Quad(QuadModel),
    Linear(LinearModel),
    Nonlinear(NonlinearModel<'a>),
}

impl<'a> Model<'a> {
    fn new(spec: &'a ProblemSpec, grid: &Arc<Grid>) -> Result<Self> {
        Ok(match spec.kind {
            ProblemKind::QuadForm => Model::Quad(QuadModel::new(spec, grid)?),
            ProblemKind::FredholmLQ | ProblemKind::VolterraLQ => Model::Linear(LinearModel::new(spec, grid)?),
            ProblemKind::NonlinearFredholm => Model::Nonlinear(NonlinearModel::new(spec, grid)?),
        })
    }

    fn cost(&self, u: &DVector<f64>, m: usize) -> Result<f64> {
        match self {
            Model::Quad(q) => Ok(q.cost(u)),
            Model::Linear(l) => l.cost(u),
            Model::Nonlinear(nl) => {
                let um = DMatrix::from_fn(u.len() / m, m, |i, c| u[i * m + c]);
                nl.cost(&um)
            }
        }
    }
}

/// Number of control components the oracle optimizes over.
fn control_components(spec: &ProblemSpec) -> usize {
    match spec.kind {
        ProblemKind::QuadForm => spec.state_dim(),
        _ => spec.control_dim(),
    }
}

fn check_control(spec: &ProblemSpec, grid: &Arc<Grid>, u: &GridFunction) -> Result<usize> {
    let m = control_components(spec);
    if u.dim() != m || u.grid().len() != grid.len() {
        return Err(Error::domain(format!(
            "control has {} components on {} nodes, expected {m} on {}",
            u.dim(),
            u.grid().len(),
            grid.len()
        )));
    }
    Ok(m)
}

pub fn assemble_qp(spec: &ProblemSpec, grid: &Arc<Grid>) -> Result<DiscreteQP> {
    match Model::new(spec, grid)? {
        Model::Quad(q) => {
            let n = spec.state_dim();
            Ok(DiscreteQP {
                h: q.h,
                r: q.r,
                c0: 0.0,
                nodes: grid.len(),
                components: n,
            })
        }
        Model::Linear(l) => l.qp(grid.len()),
        Model::Nonlinear(_) => Err(Error::domain(
            "a nonlinear problem has no quadratic program; use the descent probe",
        )),
    }
}

pub fn qp_minimize(qp: &DiscreteQP) -> Result<QpSolution> {
    let eig = SymmetricEigen::new(qp.h.clone());
    let min_eigenvalue = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_abs = eig.eigenvalues.iter().fold(0.0f64, |a, l| a.max(l.abs()));
    let lu = dense_lu(qp.h.clone(), "QP Hessian")?;
    let rhs = -&qp.r;
    let u = solve_lu(&lu, &DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice()), "QP Hessian")?
        .column(0)
        .clone_owned();
    Ok(QpSolution {
        value: qp.value(&u),
        hessian_pd: min_eigenvalue > 1e-12 * max_abs.max(1.0),
        min_eigenvalue,
        u,
    })
}

/// The discrete cost evaluated from scratch at the control `u`.
pub fn direct_cost(spec: &ProblemSpec, grid: &Arc<Grid>, u: &GridFunction) -> Result<f64> {
    let m = check_control(spec, grid, u)?;
    Model::new(spec, grid)?.cost(&u.stacked(), m)
}

/// The state produced by `u` under the directly discretized dynamics.
pub fn direct_state(spec: &ProblemSpec, grid: &Arc<Grid>, u: &GridFunction) -> Result<GridFunction> {
    check_control(spec, grid, u)?;
    let n = spec.state_dim();
    match Model::new(spec, grid)? {
        Model::Quad(_) => Err(Error::domain("a quadratic form has no state")),
        Model::Linear(l) => GridFunction::from_stacked(grid.clone(), n, &l.state(&u.stacked())?),
        Model::Nonlinear(nl) => GridFunction::new(grid.clone(), nl.state(u.values())?),
    }
}

fn gradient_with(model: &Model, u: &DVector<f64>, m: usize, step: f64) -> Result<DVector<f64>> {
    let mut g = DVector::zeros(u.len());
    let mut probe = u.clone();
    for k in 0..u.len() {
        probe[k] = u[k] + step;
        let up = model.cost(&probe, m)?;
        probe[k] = u[k] - step;
        let down = model.cost(&probe, m)?;
        probe[k] = u[k];
        g[k] = (up - down) / (2.0 * step);
    }
    Ok(g)
}

/// Central finite-difference gradient of [`direct_cost`] with respect to
/// every stacked control coordinate.
pub fn fd_gradient(spec: &ProblemSpec, grid: &Arc<Grid>, u: &GridFunction, step: f64) -> Result<GridFunction> {
    if !(step > 0.0) {
        return Err(Error::domain("finite-difference step must be positive"));
    }
    let m = check_control(spec, grid, u)?;
    let model = Model::new(spec, grid)?;
    let g = gradient_with(&model, &u.stacked(), m, step)?;
    GridFunction::from_stacked(grid.clone(), m, &g)
}

/// Outcome of the local-minimum probe around a candidate control.
#[derive(Debug, Clone, Serialize)]
pub struct DescentProbe {
    pub cost: f64,
    pub gradient_norm: f64,
    /// Smallest `J(u* + εδ) − J(u*)` over the random probes.
    pub min_probe_increase: f64,
    /// Cost reached by backtracking gradient descent started near `u*`.
    pub descent_cost: f64,
    /// Max-norm distance between the descent end point and `u*`.
    pub descent_distance: f64,
}

impl DescentProbe {
    /// `u*` is stationary and no probe or descent found a lower cost.
    pub fn is_local_min(&self, grad_tol: f64) -> bool {
        let slack = 1e-12 * (1.0 + self.cost.abs());
        self.gradient_norm <= grad_tol
            && self.min_probe_increase >= -slack
            && self.descent_cost >= self.cost - slack
    }
}

/// Stationarity and local-minimality probe: finite-difference gradient at `u*`,
/// random two-sided perturbations, and a short backtracking gradient descent
/// from a perturbed start. Makes no global claim.
pub fn descent_probe(
    spec: &ProblemSpec,
    grid: &Arc<Grid>,
    u_star: &GridFunction,
    probes: usize,
    descent_steps: usize,
    seed: u64,
) -> Result<DescentProbe> {
    let m = check_control(spec, grid, u_star)?;
    let model = Model::new(spec, grid)?;
    let u0 = u_star.stacked();
    let cost = model.cost(&u0, m)?;
    let gradient_norm = gradient_with(&model, &u0, m, 1e-5)?.amax();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_probe_increase = f64::INFINITY;
    for _ in 0..probes {
        let d = DVector::from_fn(u0.len(), |_, _| rng.random_range(-1.0..1.0));
        for eps in [1e-2, 1e-3] {
            for sgn in [1.0, -1.0] {
                let inc = model.cost(&(&u0 + &d * (sgn * eps)), m)? - cost;
                min_probe_increase = min_probe_increase.min(inc);
            }
        }
    }
    // Steepest descent in the weighted inner product, started off u*.
    let w: Vec<f64> = (0..u0.len()).map(|k| grid.weights()[k / m]).collect();
    let mut u = &u0 + DVector::from_fn(u0.len(), |_, _| rng.random_range(-0.05..0.05));
    let mut j = model.cost(&u, m)?;
    for _ in 0..descent_steps {
        let g = gradient_with(&model, &u, m, 1e-6)?;
        let dir = DVector::from_fn(u.len(), |k, _| -g[k] / w[k]);
        let slope = g.dot(&dir);
        if slope >= 0.0 {
            break;
        }
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-12 {
            let trial = &u + &dir * t;
            let jt = model.cost(&trial, m)?;
            if jt <= j + 1e-4 * t * slope {
                u = trial;
                j = jt;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(DescentProbe {
        cost,
        gradient_norm,
        min_probe_increase,
        descent_cost: j,
        descent_distance: (&u - &u0).amax(),
    })
}
