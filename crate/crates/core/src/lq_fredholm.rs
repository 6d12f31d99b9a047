//! Linear-quadratic control of a Fredholm system
//!
//! `φ(x) = φ₀(x) + ∫ A(x, y)φ(y) + B(x, y)u(y) dy`,
//! `J = ∫ ½φᵀPφ + φᵀQu + ½uᵀRu dx`.
//!
//! The resolvent of `A` turns the state into `φ = φ₁ + ∫B₁u`, which makes `J`
//! a quadratic functional of `u` alone. That functional is minimized through
//! [`quadform`](crate::quadform), and the stationarity equation is solved
//! independently as a cross-check.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::discretize::{apply_kernel, Arity, Grid, GridFunction, MatrixKernelField};
use crate::error::{Error, Result};
use crate::fredholm::{self, Sign};
use crate::kernelspec::{ProblemKind, ProblemSpec};
use crate::linalg;
use crate::quadform::{self, PdCertificate, QuadFormProblem, Verdict};

/// Tolerance on the defect of the stationarity equation at `u*`.
pub const STATIONARITY_TOL: f64 = 1e-8;
/// Tolerance on the plug-back defect of the original dynamics.
pub const DYNAMICS_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct FredholmLQProblem {
    pub a: MatrixKernelField,
    pub b: MatrixKernelField,
    pub phi0: GridFunction,
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

fn expect_shape(k: &MatrixKernelField, name: &str, arity: Arity, rows: usize, cols: usize) -> Result<()> {
    if k.arity() != arity || k.rows() != rows || k.cols() != cols {
        return Err(Error::domain(format!(
            "{name} must be a {rows}x{cols} {} field, got {}x{}",
            if arity == Arity::One { "arity-one" } else { "arity-two" },
            k.rows(),
            k.cols()
        )));
    }
    Ok(())
}

impl FredholmLQProblem {
    /// Validates shapes and symmetrizes `P` and `R` nodewise.
    pub fn new(
        a: MatrixKernelField,
        b: MatrixKernelField,
        phi0: GridFunction,
        p: MatrixKernelField,
        q: MatrixKernelField,
        r: MatrixKernelField,
    ) -> Result<Self> {
        let n = phi0.dim();
        let m = b.cols();
        expect_shape(&a, "A", Arity::Two, n, n)?;
        expect_shape(&b, "B", Arity::Two, n, m)?;
        expect_shape(&p, "P", Arity::One, n, n)?;
        expect_shape(&q, "Q", Arity::One, n, m)?;
        expect_shape(&r, "R", Arity::One, m, m)?;
        let g = phi0.grid();
        if [&a, &b, &p, &q, &r].iter().any(|k| k.grid() != g) {
            return Err(Error::domain("problem data live on different grids"));
        }
        Ok(FredholmLQProblem {
            p: sym_one(&p),
            r: sym_one(&r),
            a,
            b,
            phi0,
            q,
        })
    }

    pub fn from_spec(spec: &ProblemSpec, grid: &Arc<Grid>) -> Result<Self> {
        if spec.kind != ProblemKind::FredholmLQ {
            return Err(Error::domain(format!("expected a FredholmLQ problem, got {}", spec.kind)));
        }
        Self::new(
            spec.field("A", grid)?,
            spec.field("B", grid)?,
            GridFunction::from_column_field(&spec.field("phi0", grid)?)?,
            spec.field("P", grid)?,
            spec.field("Q", grid)?,
            spec.field("R", grid)?,
        )
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.phi0.grid()
    }

    pub fn state_dim(&self) -> usize {
        self.phi0.dim()
    }

    pub fn control_dim(&self) -> usize {
        self.b.cols()
    }

    fn r_inverses(&self) -> Result<Vec<DMatrix<f64>>> {
        let g = self.grid();
        (0..g.len())
            .map(|i| {
                let x = g.nodes()[i];
                linalg::invert_block(&self.r.at(i).clone_owned(), || format!("R at x = {x}"))
            })
            .collect()
    }

    /// `diag(w_i P(x_i))`.
    fn weighted_p(&self) -> DMatrix<f64> {
        let w = self.grid().weights();
        let mut d = self.p.block_diagonal();
        let n = self.state_dim();
        for (i, wi) in w.iter().enumerate() {
            d.view_mut((i * n, i * n), (n, n)).scale_mut(*wi);
        }
        d
    }
}

/// `φ₁ = φ₀ + ∫Kφ₀` and `B₁ = B + ∫K B` with `K` the resolvent of `A`.
pub fn reduce_state(p: &FredholmLQProblem) -> Result<(GridFunction, MatrixKernelField)> {
    let k = fredholm::resolvent(&p.a)?;
    let phi1 = p.phi0.add(&apply_kernel(&k.resolvent, &p.phi0)?)?;
    let b1_data = p.b.data() + k.resolvent.weighted_operator() * p.b.data();
    let b1 = MatrixKernelField::from_data(p.grid().clone(), Arity::Two, p.state_dim(), p.control_dim(), b1_data)?;
    Ok((phi1, b1))
}

/// The control-only quadratic form and the constant `½∫φ₁ᵀPφ₁` it drops.
#[derive(Debug, Clone)]
pub struct ReducedForm {
    pub form: QuadFormProblem,
    pub constant: f64,
}

/// `K₁ = R`,
/// `K₂(x₁, x₂) = ∫B₁ᵀ(y, x₁)P(y)B₁(y, x₂)dy + B₁ᵀ(x₂, x₁)Q(x₂) + Qᵀ(x₁)B₁(x₁, x₂)`,
/// `r(x) = ∫B₁ᵀ(y, x)P(y)φ₁(y)dy + Qᵀ(x)φ₁(x)`.
pub fn assemble_reduced_form(
    p: &FredholmLQProblem,
    phi1: &GridFunction,
    b1: &MatrixKernelField,
) -> Result<ReducedForm> {
    let grid = p.grid().clone();
    let (n, m, nn) = (p.state_dim(), p.control_dim(), grid.len());
    let w = grid.weights();
    let mut k2 = MatrixKernelField::zeros(grid.clone(), Arity::Two, m, m);
    let mut pb1 = Vec::with_capacity(nn);
    for y in 0..nn {
        // Row block y of P(y)B₁(y, ·), pre-weighted.
        pb1.push(p.p.at(y) * b1.data().rows(y * n, n) * w[y]);
    }
    for x1 in 0..nn {
        let mut row = DMatrix::zeros(m, nn * m);
        for (y, pby) in pb1.iter().enumerate() {
            row += b1.at2(y, x1).transpose() * pby;
        }
        for x2 in 0..nn {
            let mut blk = row.columns(x2 * m, m).clone_owned();
            blk += b1.at2(x2, x1).transpose() * p.q.at(x2);
            blk += p.q.at(x1).transpose() * b1.at2(x1, x2);
            k2.set2(x1, x2, &blk);
        }
    }
    let mut r = DMatrix::zeros(nn, m);
    for x in 0..nn {
        let mut v: DVector<f64> = p.q.at(x).transpose() * phi1.at(x);
        for y in 0..nn {
            v += b1.at2(y, x).transpose() * (p.p.at(y) * phi1.at(y)) * w[y];
        }
        r.row_mut(x).copy_from(&v.transpose());
    }
    let constant = 0.5
        * (0..nn)
            .map(|i| w[i] * phi1.at(i).dot(&(p.p.at(i) * phi1.at(i))))
            .sum::<f64>();
    Ok(ReducedForm {
        form: QuadFormProblem::new(p.r.clone(), k2, GridFunction::new(grid, r)?)?,
        constant,
    })
}

/// Kernel and source of the stationarity equation
/// `u(x) = −R⁻¹(x)[c(x) + ∫ S(x, y) u(y) dy]`, stacked as dense matrices.
struct StationarityData {
    kernel: DMatrix<f64>,
    source: DVector<f64>,
    r_inv: Vec<DMatrix<f64>>,
}

fn stationarity_data(p: &FredholmLQProblem, phi1: &GridFunction, b1: &MatrixKernelField) -> Result<StationarityData> {
    let r_inv = p.r_inverses()?;
    let (m, nn) = (p.control_dim(), p.grid().len());
    let wp = p.weighted_p();
    let b1d = b1.data();
    // ∫B₁ᵀ(z, x)P(z)B₁(z, y)dz and ∫B₁ᵀ(z, x)P(z)φ₁(z)dz in one pass.
    let mut kernel = b1d.transpose() * &wp * b1d;
    let mut source = b1d.transpose() * (&wp * phi1.stacked());
    for x in 0..nn {
        let qx = p.q.at(x);
        let mut s = source.rows_mut(x * m, m);
        s += qx.transpose() * phi1.at(x);
        for y in 0..nn {
            // Column-form coefficient of u(y) in the variation at x.
            let cross = qx.transpose() * b1.at2(x, y) + b1.at2(y, x).transpose() * p.q.at(y);
            let mut blk = kernel.view_mut((x * m, y * m), (m, m));
            blk += cross;
        }
    }
    Ok(StationarityData { kernel, source, r_inv })
}

/// Solves the stationarity equation
/// `u = −R⁻¹[Qᵀφ₁ + ∫B₁ᵀ(z, ·)P(z)φ₁(z)dz + ∫{Qᵀ(x)B₁(x, y) + B₁ᵀ(y, x)Q(y) + ∫B₁ᵀ(z, x)P(z)B₁(z, y)dz} u(y) dy]`
/// as a second-kind Fredholm equation.
pub fn solve_stationarity(p: &FredholmLQProblem, phi1: &GridFunction, b1: &MatrixKernelField) -> Result<GridFunction> {
    let d = stationarity_data(p, phi1, b1)?;
    let grid = p.grid().clone();
    let (m, nn) = (p.control_dim(), grid.len());
    let mut scaled = d.kernel.clone();
    let mut g = DVector::zeros(nn * m);
    for x in 0..nn {
        let rows = &d.r_inv[x] * d.kernel.rows(x * m, m);
        scaled.rows_mut(x * m, m).copy_from(&rows);
        g.rows_mut(x * m, m).copy_from(&(-(&d.r_inv[x] * d.source.rows(x * m, m))));
    }
    let kernel = MatrixKernelField::from_data(grid.clone(), Arity::Two, m, m, scaled)?;
    let g = GridFunction::from_stacked(grid, m, &g)?;
    fredholm::solve_second_kind(&kernel, &g, Sign::Minus)
}

/// Max-norm defect of the stationarity equation at `u`.
pub fn stationarity_residual(
    p: &FredholmLQProblem,
    phi1: &GridFunction,
    b1: &MatrixKernelField,
    u: &GridFunction,
) -> Result<f64> {
    let d = stationarity_data(p, phi1, b1)?;
    let (m, nn) = (p.control_dim(), p.grid().len());
    let w = p.grid().weights();
    let us = u.stacked();
    let wu = DVector::from_fn(nn * m, |k, _| w[k / m] * us[k]);
    let inner = &d.source + &d.kernel * wu;
    let mut worst = 0.0f64;
    for x in 0..nn {
        let rhs = -(&d.r_inv[x] * inner.rows(x * m, m));
        worst = worst.max((us.rows(x * m, m) - rhs).amax());
    }
    Ok(worst)
}

/// `φ = φ₁ + ∫B₁u`.
pub fn state_from_control(phi1: &GridFunction, b1: &MatrixKernelField, u: &GridFunction) -> Result<GridFunction> {
    phi1.add(&apply_kernel(b1, u)?)
}

/// `J` by direct quadrature.
pub fn cost(p: &FredholmLQProblem, phi: &GridFunction, u: &GridFunction) -> f64 {
    let w = p.grid().weights();
    (0..w.len())
        .map(|i| {
            let (f, v) = (phi.at(i), u.at(i));
            w[i] * (0.5 * f.dot(&(p.p.at(i) * &f)) + f.dot(&(p.q.at(i) * &v)) + 0.5 * v.dot(&(p.r.at(i) * &v)))
        })
        .sum()
}

/// Max-norm defect of the original dynamics at `(φ, u)`.
pub fn dynamics_residual(p: &FredholmLQProblem, phi: &GridFunction, u: &GridFunction) -> Result<f64> {
    let rhs = p.phi0.add(&apply_kernel(&p.a, phi)?)?.add(&apply_kernel(&p.b, u)?)?;
    Ok(phi.max_diff(&rhs))
}

#[derive(Debug, Clone)]
pub struct LQSolution {
    pub u_star: GridFunction,
    pub state: GridFunction,
    pub cost: f64,
    pub stationarity_residual: f64,
    pub certificate: PdCertificate,
    /// Not certified positive definite: only stationarity is claimed.
    pub stationary_only: bool,
    /// Max-norm gap between the stationarity solve and the form minimizer.
    pub two_path_gap: f64,
    pub dynamics_residual: f64,
    /// `½∫φ₁ᵀPφ₁`, the control-independent part of the cost.
    pub constant_term: f64,
}

pub fn solve(p: &FredholmLQProblem) -> Result<LQSolution> {
    let (phi1, b1) = reduce_state(p)?;
    let reduced = assemble_reduced_form(p, &phi1, &b1)?;
    let min = quadform::minimize(&reduced.form)?;
    let u_star = min.w_star;
    let via_equation = solve_stationarity(p, &phi1, &b1)?;
    let two_path_gap = via_equation.max_diff(&u_star);
    let state = state_from_control(&phi1, &b1, &u_star)?;
    let stationarity_residual = stationarity_residual(p, &phi1, &b1, &u_star)?;
    let dynamics_residual = dynamics_residual(p, &state, &u_star)?;
    let j = cost(p, &state, &u_star);
    let u_scale = 1.0 + u_star.max_abs();
    if stationarity_residual > STATIONARITY_TOL * u_scale {
        return Err(Error::Verification(format!(
            "stationarity defect {stationarity_residual:.3e} at the minimizer"
        )));
    }
    if dynamics_residual > DYNAMICS_TOL * (1.0 + state.max_abs()) {
        return Err(Error::Verification(format!(
            "reconstructed state misses the dynamics by {dynamics_residual:.3e}"
        )));
    }
    Ok(LQSolution {
        stationary_only: min.certificate.verdict != Verdict::PositiveDefinite,
        certificate: min.certificate,
        u_star,
        state,
        cost: j,
        stationarity_residual,
        two_path_gap,
        dynamics_residual,
        constant_term: reduced.constant,
    })
}
