//! Linear-quadratic control of a Volterra system
//!
//! `y(t) = y₀(t) + ∫₀ᵗ A(t, s)y(s) + B(t, s)u(s) ds`,
//! `J = ∫₀ᵀ ½yᵀPy + yᵀQu + ½uᵀRu dt`.
//!
//! The costate `ψ` is a row covector stored componentwise. Eliminating `u`
//! couples a forward Volterra equation for `y` with a backward one for `ψ`
//! through the kernel `K₁` over the whole horizon, so the optimal control is
//! non-causal.
//!
//! Discretization is chosen so that the discrete state/costate system is the
//! exact optimality system of the discretized cost: forward integrals use the
//! causal weights `ω` of the grid, backward integrals their adjoint
//! `α[i][j] = ω[j][i]·w_j / w_i`, and `K₁` inherits the product `ω·ω / w`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::discretize::{Arity, Grid, GridFunction, MatrixKernelField};
use crate::error::{Error, Result};
use crate::fredholm;
use crate::kernelspec::{ProblemKind, ProblemSpec};
use crate::linalg;

pub const STATIONARITY_TOL: f64 = 1e-8;
pub const COSTATE_TOL: f64 = 1e-8;
pub const DYNAMICS_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct VolterraLQProblem {
    pub a: MatrixKernelField,
    pub b: MatrixKernelField,
    pub y0: GridFunction,
    pub p: MatrixKernelField,
    pub q: MatrixKernelField,
    pub r: MatrixKernelField,
}

fn sym_one(k: &MatrixKernelField) -> MatrixKernelField {
    MatrixKernelField::one_from_fn(k.grid().clone(), k.rows(), k.cols(), |i, _| {
        let b = k.at(i);
        let bt = b.transpose();
        (b + bt) * 0.5
    })
}

impl VolterraLQProblem {
    pub fn new(
        a: MatrixKernelField,
        b: MatrixKernelField,
        y0: GridFunction,
        p: MatrixKernelField,
        q: MatrixKernelField,
        r: MatrixKernelField,
    ) -> Result<Self> {
        let n = y0.dim();
        let m = b.cols();
        let shapes = [
            ("A", &a, Arity::Two, n, n),
            ("B", &b, Arity::Two, n, m),
            ("P", &p, Arity::One, n, n),
            ("Q", &q, Arity::One, n, m),
            ("R", &r, Arity::One, m, m),
        ];
        for (name, k, arity, rows, cols) in shapes {
            if k.arity() != arity || k.rows() != rows || k.cols() != cols {
                return Err(Error::domain(format!("{name} must have {rows}x{cols} blocks")));
            }
            if k.grid() != y0.grid() {
                return Err(Error::domain("problem data live on different grids"));
            }
        }
        if y0.grid().a() != 0.0 {
            return Err(Error::domain("Volterra problems start at t = 0"));
        }
        Ok(VolterraLQProblem {
            p: sym_one(&p),
            r: sym_one(&r),
            a,
            b,
            y0,
            q,
        })
    }

    pub fn from_spec(spec: &ProblemSpec, grid: &Arc<Grid>) -> Result<Self> {
        if spec.kind != ProblemKind::VolterraLQ {
            return Err(Error::domain(format!("expected a VolterraLQ problem, got {}", spec.kind)));
        }
        Self::new(
            spec.field("A", grid)?,
            spec.field("B", grid)?,
            GridFunction::from_column_field(&spec.field("y0", grid)?)?,
            spec.field("P", grid)?,
            spec.field("Q", grid)?,
            spec.field("R", grid)?,
        )
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.y0.grid()
    }

    pub fn state_dim(&self) -> usize {
        self.y0.dim()
    }

    pub fn control_dim(&self) -> usize {
        self.b.cols()
    }

    fn r_inverses(&self) -> Result<Vec<DMatrix<f64>>> {
        let g = self.grid();
        (0..g.len())
            .map(|i| {
                let t = g.nodes()[i];
                linalg::invert_block(&self.r.at(i).clone_owned(), || format!("R at t = {t}"))
            })
            .collect()
    }
}

/// Which integrand defines `K₁(t, σ) = ∫₀^{min(t,σ)} B(σ, ·)R⁻¹(s)Bᵀ(t, s) ds`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum K1Variant {
    /// `B(σ, s)`: what substituting the optimal control into the dynamics gives.
    Derived,
    /// `B(σ, t)`: second argument frozen at `t`.
    Printed,
}

#[derive(Debug, Clone)]
pub struct DerivedKernels {
    /// `K₁(t, σ)`, `n × n`.
    pub k1: MatrixKernelField,
    /// `C(t, s) = Aᵀ(t, s) − Q(s)R⁻¹(s)Bᵀ(t, s)`, row-covector orientation.
    pub c: MatrixKernelField,
    pub variant: K1Variant,
}

pub fn derived_kernels(p: &VolterraLQProblem, variant: K1Variant) -> Result<DerivedKernels> {
    let r_inv = p.r_inverses()?;
    let grid = p.grid().clone();
    let (n, nn) = (p.state_dim(), grid.len());
    let omega = grid.causal_weights();
    let w = grid.weights();
    let c = MatrixKernelField::two_from_fn(grid.clone(), n, n, |i, j, _, _| {
        p.a.at2(i, j).transpose() - p.q.at(j) * &r_inv[j] * p.b.at2(i, j).transpose()
    });
    let m = p.control_dim();
    // Column block j of `rt`: (ω_ij / w_j) R⁻¹(s_j)Bᵀ(t_i, s_j) stacked over i.
    let rt: Vec<DMatrix<f64>> = (0..nn)
        .map(|j| {
            let mut blk = DMatrix::zeros(m, nn * n);
            for i in j..nn {
                let wt = omega[(i, j)] / w[j];
                if wt != 0.0 {
                    blk.columns_mut(i * n, n)
                        .copy_from(&(&r_inv[j] * p.b.at2(i, j).transpose() * wt));
                }
            }
            blk
        })
        .collect();
    let mut k1 = MatrixKernelField::zeros(grid.clone(), Arity::Two, n, n);
    match variant {
        K1Variant::Derived => {
            // z block (k, i) = Σ_j ω_kj B(σ_k, s_j) · rt_j block i = K₁(t_i, σ_k)
            let mut z = DMatrix::zeros(nn * n, nn * n);
            for (j, rtj) in rt.iter().enumerate() {
                let mut l = DMatrix::zeros(nn * n, m);
                for k in j..nn {
                    l.rows_mut(k * n, n).copy_from(&(p.b.at2(k, j) * omega[(k, j)]));
                }
                z += l * rtj;
            }
            for i in 0..nn {
                for k in 0..nn {
                    k1.set2(i, k, &z.view((k * n, i * n), (n, n)).clone_owned());
                }
            }
        }
        K1Variant::Printed => {
            for k in 0..nn {
                let mut y = DMatrix::zeros(m, nn * n);
                for (j, rtj) in rt.iter().enumerate().take(k + 1) {
                    y += rtj * omega[(k, j)];
                }
                for i in 0..nn {
                    k1.set2(i, k, &(p.b.at2(k, i) * y.columns(i * n, n)));
                }
            }
        }
    }
    Ok(DerivedKernels { k1, c, variant })
}

#[derive(Debug, Clone)]
pub struct VolterraSolution {
    pub u_star: GridFunction,
    pub y_star: GridFunction,
    pub psi_star: GridFunction,
    pub cost: f64,
    /// Max-norm gap between the joint-system and resolvent-path states, when
    /// both were run.
    pub path_agreement: Option<f64>,
    pub stationarity_residual: f64,
    pub costate_residual: f64,
    /// Defect of the original dynamics at `(y*, u*)`; only meaningful for
    /// [`K1Variant::Derived`].
    pub dynamics_residual: f64,
    pub variant: K1Variant,
}

/// Discrete operators shared by both solution paths.
struct Operators {
    /// Block `(i, j)`: `ω_ij C(t_i, t_j)ᵀ`.
    c_hat: DMatrix<f64>,
    /// Block `(i, k)`: `w_k K₁(t_i, t_k)ᵀ`.
    k_hat: DMatrix<f64>,
    /// `diag(P − QR⁻¹Qᵀ)`.
    m_hat: DMatrix<f64>,
    /// Block `(k, i)`: `α_ki [A(t_i, t_k) − B(t_i, t_k)R⁻¹(t_k)Qᵀ(t_k)]ᵀ`.
    d_adj: DMatrix<f64>,
}

fn operators(p: &VolterraLQProblem, d: &DerivedKernels) -> Result<Operators> {
    let r_inv = p.r_inverses()?;
    let grid = p.grid();
    let (n, nn) = (p.state_dim(), grid.len());
    let omega = grid.causal_weights();
    let alpha = grid.adjoint_causal_weights();
    let c_col = d.c.transpose_blocks();
    let c_hat = c_col.operator_with_weights(&omega);
    let k_hat = d.k1.transpose_blocks().weighted_operator();
    let mut m_hat = DMatrix::zeros(nn * n, nn * n);
    let mut d_adj = DMatrix::zeros(nn * n, nn * n);
    for k in 0..nn {
        let qk = p.q.at(k);
        let mk = p.p.at(k) - qk * &r_inv[k] * qk.transpose();
        m_hat.view_mut((k * n, k * n), (n, n)).copy_from(&mk);
        let rq = &r_inv[k] * qk.transpose();
        for i in k..nn {
            let a = alpha[(k, i)];
            if a == 0.0 {
                continue;
            }
            let dik = p.a.at2(i, k) - p.b.at2(i, k) * &rq;
            d_adj.view_mut((k * n, i * n), (n, n)).copy_from(&(dik.transpose() * a));
        }
    }
    Ok(Operators {
        c_hat,
        k_hat,
        m_hat,
        d_adj,
    })
}

/// `u(t) = −R⁻¹(t)[Qᵀ(t)y(t) + ∫ₜᵀ Bᵀ(s, t)ψᵀ(s) ds]`.
pub fn control_from_costate(p: &VolterraLQProblem, y: &GridFunction, psi: &GridFunction) -> Result<GridFunction> {
    let r_inv = p.r_inverses()?;
    let grid = p.grid();
    let (m, nn) = (p.control_dim(), grid.len());
    let bpsi = backward_b_integral(p, psi);
    let mut u = DMatrix::zeros(nn, m);
    for k in 0..nn {
        let v = -(&r_inv[k] * (p.q.at(k).transpose() * y.at(k) + &bpsi[k]));
        u.row_mut(k).copy_from(&v.transpose());
    }
    GridFunction::new(grid.clone(), u)
}

/// `∫ₜᵀ Bᵀ(s, t_k)ψᵀ(s) ds` at every node, with the adjoint weights.
fn backward_b_integral(p: &VolterraLQProblem, psi: &GridFunction) -> Vec<DVector<f64>> {
    let grid = p.grid();
    let alpha = grid.adjoint_causal_weights();
    let (m, nn) = (p.control_dim(), grid.len());
    (0..nn)
        .map(|k| {
            let mut acc = DVector::zeros(m);
            for i in k..nn {
                acc += p.b.at2(i, k).transpose() * psi.at(i) * alpha[(k, i)];
            }
            acc
        })
        .collect()
}

/// Max-norm of `Qᵀy + Ru + ∫ₜᵀBᵀ(s, t)ψᵀ(s)ds` (the transposed stationarity condition).
pub fn stationarity_residual(p: &VolterraLQProblem, y: &GridFunction, u: &GridFunction, psi: &GridFunction) -> f64 {
    let bpsi = backward_b_integral(p, psi);
    (0..p.grid().len())
        .map(|k| (p.q.at(k).transpose() * y.at(k) + p.r.at(k) * u.at(k) + &bpsi[k]).amax())
        .fold(0.0, f64::max)
}

/// Max-norm defect of `ψ(t) = yᵀP + uᵀQᵀ + ∫ₜᵀψ(s)A(s, t)ds`.
pub fn costate_residual(p: &VolterraLQProblem, y: &GridFunction, u: &GridFunction, psi: &GridFunction) -> f64 {
    let grid = p.grid();
    let alpha = grid.adjoint_causal_weights();
    let nn = grid.len();
    (0..nn)
        .map(|k| {
            let mut rhs = p.p.at(k) * y.at(k) + p.q.at(k) * u.at(k);
            for i in k..nn {
                rhs += p.a.at2(i, k).transpose() * psi.at(i) * alpha[(k, i)];
            }
            (psi.at(k) - rhs).amax()
        })
        .fold(0.0, f64::max)
}

/// Max-norm defect of the forward dynamics at `(y, u)`.
pub fn dynamics_residual(p: &VolterraLQProblem, y: &GridFunction, u: &GridFunction) -> f64 {
    let omega = p.grid().causal_weights();
    let rhs = p.y0.stacked() + p.a.operator_with_weights(&omega) * y.stacked() + p.b.operator_with_weights(&omega) * u.stacked();
    (y.stacked() - rhs).amax()
}

pub fn cost(p: &VolterraLQProblem, y: &GridFunction, u: &GridFunction) -> f64 {
    let w = p.grid().weights();
    (0..w.len())
        .map(|i| {
            let (f, v) = (y.at(i), u.at(i));
            w[i] * (0.5 * f.dot(&(p.p.at(i) * &f)) + f.dot(&(p.q.at(i) * &v)) + 0.5 * v.dot(&(p.r.at(i) * &v)))
        })
        .sum()
}

fn finish(
    p: &VolterraLQProblem,
    d: &DerivedKernels,
    y: DVector<f64>,
    psi: DVector<f64>,
) -> Result<VolterraSolution> {
    let grid = p.grid().clone();
    let n = p.state_dim();
    let y = GridFunction::from_stacked(grid.clone(), n, &y)?;
    let psi = GridFunction::from_stacked(grid, n, &psi)?;
    let u = control_from_costate(p, &y, &psi)?;
    Ok(VolterraSolution {
        cost: cost(p, &y, &u),
        stationarity_residual: stationarity_residual(p, &y, &u, &psi),
        costate_residual: costate_residual(p, &y, &u, &psi),
        dynamics_residual: dynamics_residual(p, &y, &u),
        path_agreement: None,
        variant: d.variant,
        u_star: u,
        y_star: y,
        psi_star: psi,
    })
}

/// Solves the coupled system
/// `y = y₀ + ∫₀ᵗ C(t, s)ᵀ y(s) ds − ∫₀ᵀ K₁(t, σ)ᵀ ψᵀ(σ) dσ`,
/// `ψ(t) = yᵀ(t)[P − QR⁻¹Qᵀ](t) + ∫ₜᵀ ψ(s)[A(s, t) − B(s, t)R⁻¹(t)Qᵀ(t)] ds`
/// as one dense linear system in `(y, ψ)`.
pub fn solve_joint(p: &VolterraLQProblem, d: &DerivedKernels) -> Result<VolterraSolution> {
    let ops = operators(p, d)?;
    let len = ops.c_hat.nrows();
    let mut op = DMatrix::zeros(2 * len, 2 * len);
    op.view_mut((0, 0), (len, len)).copy_from(&ops.c_hat);
    op.view_mut((0, len), (len, len)).copy_from(&(-&ops.k_hat));
    op.view_mut((len, 0), (len, len)).copy_from(&ops.m_hat);
    op.view_mut((len, len), (len, len)).copy_from(&ops.d_adj);
    let mut g = DVector::zeros(2 * len);
    g.rows_mut(0, len).copy_from(&p.y0.stacked());
    let z = fredholm::solve_dense_vec(op, &g, "joint state/costate system")?;
    finish(p, d, z.rows(0, len).clone_owned(), z.rows(len, len).clone_owned())
}

/// Resolvent route: with `S` the resolvent of `C` and
/// `S₁(t, σ) = ∫₀ᵗ K₁(s, σ)S(t, s) ds`, the state is
/// `yᵀ = y₀ᵀ + ∫₀ᵗ y₀ᵀS − ∫₀ᵀ ψK₁ − ∫₀ᵀ ψS₁`, and substituting it into the
/// costate equation leaves a second-kind Fredholm equation for `ψ` alone.
pub fn solve_resolvent_path(p: &VolterraLQProblem, d: &DerivedKernels) -> Result<VolterraSolution> {
    let ops = operators(p, d)?;
    let grid = p.grid();
    let omega = grid.causal_weights();
    let s = fredholm::volterra_resolvent(&d.c.transpose_blocks())?;
    let s_hat = s.kernel.operator_with_weights(&omega);
    let n = p.state_dim();
    // S₁ in column orientation, then weighted by w_σ.
    let s1_col = &s_hat * d.k1.transpose_blocks().data();
    let s1 = MatrixKernelField::from_data(grid.clone(), Arity::Two, n, n, s1_col)?;
    let s1_hat = s1.weighted_operator();
    let y0 = p.y0.stacked();
    let y0s = &y0 + &s_hat * &y0;
    let op = &ops.d_adj - &ops.m_hat * (&ops.k_hat + &s1_hat);
    let psi = fredholm::solve_dense_vec(op, &(&ops.m_hat * &y0s), "costate Fredholm equation")?;
    let y = y0s - &ops.k_hat * &psi - &s1_hat * &psi;
    finish(p, d, y, psi)
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub variant: K1Variant,
    pub compare_paths: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            variant: K1Variant::Derived,
            compare_paths: true,
        }
    }
}

/// Joint system as the primary path, the resolvent route as cross-check, and
/// the costate and stationarity conditions verified at the result.
pub fn solve(p: &VolterraLQProblem, opts: SolveOptions) -> Result<VolterraSolution> {
    let d = derived_kernels(p, opts.variant)?;
    let mut sol = solve_joint(p, &d)?;
    if opts.compare_paths {
        let alt = solve_resolvent_path(p, &d)?;
        sol.path_agreement = Some(sol.y_star.max_diff(&alt.y_star).max(sol.u_star.max_diff(&alt.u_star)));
    }
    if sol.stationarity_residual > STATIONARITY_TOL * (1.0 + sol.u_star.max_abs()) {
        return Err(Error::Verification(format!(
            "stationarity defect {:.3e}",
            sol.stationarity_residual
        )));
    }
    if sol.costate_residual > COSTATE_TOL * (1.0 + sol.psi_star.max_abs()) {
        return Err(Error::Verification(format!(
            "costate equation defect {:.3e}",
            sol.costate_residual
        )));
    }
    if opts.variant == K1Variant::Derived && sol.dynamics_residual > DYNAMICS_TOL * (1.0 + sol.y_star.max_abs()) {
        return Err(Error::Verification(format!(
            "state misses the dynamics by {:.3e}",
            sol.dynamics_residual
        )));
    }
    Ok(sol)
}
