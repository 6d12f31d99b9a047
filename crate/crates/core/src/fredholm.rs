//! Second-kind Fredholm and Volterra machinery on Nyström grids.
//!
//! Conventions: functions are column vectors at every node, so the Fredholm
//! operator is `(𝒦w)(x) = ∫ K(x, y) w(y) dy`. The backward Volterra solve
//! follows the row-covector convention of costate equations,
//! `w(t) = g(t) + ∫_t^T w(s) C(s, t) ds`, which in column form uses `C(s, t)ᵀ`.

use nalgebra::{DMatrix, DVector};

use crate::discretize::{Arity, GridFunction, MatrixKernelField};
use crate::error::{Error, Result};
use crate::linalg::{self, Factored};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

fn check_square(k: &MatrixKernelField, g: &GridFunction) -> Result<()> {
    if k.arity() != Arity::Two {
        return Err(Error::domain("second-kind solve needs an arity-two kernel"));
    }
    if k.rows() != k.cols() {
        return Err(Error::domain(format!(
            "kernel blocks must be square, got {}x{}",
            k.rows(),
            k.cols()
        )));
    }
    if k.cols() != g.dim() {
        return Err(Error::domain(format!(
            "kernel is {}x{} but right-hand side has {} components",
            k.rows(),
            k.cols(),
            g.dim()
        )));
    }
    if k.grid().as_ref() != g.grid().as_ref() {
        return Err(Error::domain("kernel and right-hand side live on different grids"));
    }
    Ok(())
}

/// Solves `(I − op) w = g` for a dense discretized operator, checking the
/// max-norm residual against `1e-10·(1 + max|g|)`.
pub(crate) fn solve_dense_vec(op: DMatrix<f64>, g: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    let n = op.nrows();
    let m = DMatrix::identity(n, n) - &op;
    let f = Factored::new(m.clone(), context)?;
    let w = f.solve_vec(g);
    let residual = (&m * &w - g).amax();
    let tol = 1e-10 * (1.0 + g.amax());
    if !(residual <= tol) {
        return Err(Error::Verification(format!(
            "{context}: residual {residual:.3e} exceeds {tol:.3e}"
        )));
    }
    Ok(w)
}

fn solve_dense(op: DMatrix<f64>, g: &GridFunction, context: &str) -> Result<GridFunction> {
    let w = solve_dense_vec(op, &g.stacked(), context)?;
    GridFunction::from_stacked(g.grid().clone(), g.dim(), &w)
}

/// Solves `w(x) = g(x) + sign·∫_G K(x, y) w(y) dy` by a dense Nyström solve.
pub fn solve_second_kind(k: &MatrixKernelField, g: &GridFunction, sign: Sign) -> Result<GridFunction> {
    check_square(k, g)?;
    let op = k.weighted_operator() * sign.value();
    solve_dense(op, g, "second-kind Fredholm solve")
}

/// Max-norm defect of `w − g − sign·𝒦w`.
pub fn second_kind_residual(
    k: &MatrixKernelField,
    g: &GridFunction,
    sign: Sign,
    w: &GridFunction,
) -> Result<f64> {
    let kw = crate::discretize::apply_kernel(k, w)?;
    Ok(w.sub(g)?.sub(&kw.scaled(sign.value()))?.max_abs())
}

/// Resolvent `K` of a kernel `A`: `K(x, y) = A(x, y) + ∫_G A(x, z) K(z, y) dz`,
/// so that the solution of `w = g + 𝒜w` is `w = g + 𝒦g`.
#[derive(Debug, Clone)]
pub struct ResolventKernel {
    pub base: MatrixKernelField,
    pub resolvent: MatrixKernelField,
    pub residual_norm: f64,
}

/// Tolerance on the resolvent equation's discrete defect.
pub const RESOLVENT_TOL: f64 = 1e-9;

pub fn resolvent(a: &MatrixKernelField) -> Result<ResolventKernel> {
    if a.arity() != Arity::Two || a.rows() != a.cols() {
        return Err(Error::domain("resolvent needs a square arity-two kernel"));
    }
    let aw = a.weighted_operator();
    let n = aw.nrows();
    let f = Factored::new(DMatrix::identity(n, n) - &aw, "resolvent kernel")?;
    let k = f.solve(a.data());
    let residual_norm = linalg::max_abs(&(&k - a.data() - &aw * &k));
    let scale = 1.0 + linalg::max_abs(a.data());
    if !(residual_norm <= RESOLVENT_TOL * scale) {
        return Err(Error::Verification(format!(
            "resolvent defect {residual_norm:.3e} above tolerance"
        )));
    }
    let resolvent =
        MatrixKernelField::from_data(a.grid().clone(), Arity::Two, a.rows(), a.cols(), k)?;
    Ok(ResolventKernel {
        base: a.clone(),
        resolvent,
        residual_norm,
    })
}

impl ResolventKernel {
    /// Max-norm defect of the discrete operator identity `(I − 𝒜)(I + 𝒦) = I`.
    pub fn identity_defect(&self) -> f64 {
        let aw = self.base.weighted_operator();
        let kw = self.resolvent.weighted_operator();
        let n = aw.nrows();
        let id = DMatrix::<f64>::identity(n, n);
        linalg::max_abs(&((&id - aw) * (&id + kw) - id))
    }
}

/// Column-form Volterra solve `w = g + Σ_j ω[i][j] Kc(t_i, t_j) w_j` for an
/// arbitrary triangular weight table.
pub(crate) fn solve_masked(
    kernel_col: &MatrixKernelField,
    g: &GridFunction,
    omega: &DMatrix<f64>,
    context: &str,
) -> Result<GridFunction> {
    check_square(kernel_col, g)?;
    let op = kernel_col.operator_with_weights(omega);
    solve_dense(op, g, context)
}

/// Solves a second-kind Volterra equation.
///
/// * forward: `w(t) = g(t) + ∫_0^t C(t, s) w(s) ds`
/// * backward: `w(t) = g(t) + ∫_t^T w(s) C(s, t) ds` (row-covector convention)
///
/// Each node `t_i` integrates with its own prefix rule (see
/// [`Grid::causal_weights`](crate::discretize::Grid::causal_weights)).
pub fn solve_volterra_second_kind(
    c: &MatrixKernelField,
    g: &GridFunction,
    direction: Direction,
) -> Result<GridFunction> {
    check_square(c, g)?;
    let grid = g.grid();
    match direction {
        Direction::Forward => solve_masked(c, g, &grid.causal_weights(), "forward Volterra solve"),
        Direction::Backward => solve_masked(
            &c.adjoint(),
            g,
            &grid.anticausal_weights(),
            "backward Volterra solve",
        ),
    }
}

/// Resolvent of a forward Volterra kernel under the causal rule.
///
/// `kernel` holds `S` such that the discrete solution of
/// `w = g + ∫_0^t C(t, s) w(s) ds` is exactly `w = g + ∫_0^t S(t, s) g(s) ds`
/// with the same per-row trapezoid weights.
#[derive(Debug, Clone)]
pub struct VolterraResolvent {
    pub kernel: MatrixKernelField,
    pub residual_norm: f64,
}

pub fn volterra_resolvent(c: &MatrixKernelField) -> Result<VolterraResolvent> {
    if c.arity() != Arity::Two || c.rows() != c.cols() {
        return Err(Error::domain("Volterra resolvent needs a square arity-two kernel"));
    }
    let grid = c.grid().clone();
    let omega = grid.causal_weights();
    let cw = c.operator_with_weights(&omega);
    let n = cw.nrows();
    let f = Factored::new(DMatrix::identity(n, n) - &cw, "Volterra resolvent")?;
    let sw = f.solve(&cw);
    let residual_norm = linalg::max_abs(&(&sw - &cw - &cw * &sw));
    if !(residual_norm <= RESOLVENT_TOL * (1.0 + linalg::max_abs(&cw))) {
        return Err(Error::Verification(format!(
            "Volterra resolvent defect {residual_norm:.3e} above tolerance"
        )));
    }
    let d = c.rows();
    let mut s = MatrixKernelField::zeros(grid.clone(), Arity::Two, d, d);
    for i in 0..grid.len() {
        for j in 0..=i {
            let wij = omega[(i, j)];
            let blk = if wij > 0.0 {
                sw.view((i * d, j * d), (d, d)) / wij
            } else {
                c.at2(i, j).clone_owned()
            };
            s.set2(i, j, &blk);
        }
    }
    Ok(VolterraResolvent {
        kernel: s,
        residual_norm,
    })
}
