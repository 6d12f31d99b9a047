//! Quadrature grids, sampled functions and sampled matrix kernels.
//!
//! Every integral operator becomes a weighted matrix and every L² pairing a
//! weighted dot product over the grid nodes. Vector-valued functions are
//! stacked node-major: component `c` at node `i` sits at index `i * dim + c`.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DMatrixView, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuadratureRule {
    #[serde(rename = "trapezoid")]
    Trapezoid,
    #[serde(rename = "gauss")]
    GaussLegendre,
}

impl std::str::FromStr for QuadratureRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "trapezoid" => Ok(QuadratureRule::Trapezoid),
            "gauss" | "gauss-legendre" => Ok(QuadratureRule::GaussLegendre),
            other => Err(format!("unknown quadrature rule `{other}` (expected trapezoid|gauss)")),
        }
    }
}

impl std::fmt::Display for QuadratureRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QuadratureRule::Trapezoid => "trapezoid",
            QuadratureRule::GaussLegendre => "gauss",
        })
    }
}

/// Quadrature nodes and weights on `[a, b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    a: f64,
    b: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    rule: QuadratureRule,
}

impl Grid {
    pub fn new(a: f64, b: f64, n: usize, rule: QuadratureRule) -> Result<Arc<Grid>> {
        make_grid(a, b, n, rule)
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn rule(&self) -> QuadratureRule {
        self.rule
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `|G| = b − a`.
    pub fn measure(&self) -> f64 {
        self.b - self.a
    }

    /// Weights `ω[i][j]` of the rule for `∫_a^{t_i} f(s) ds ≈ Σ_j ω[i][j] f(t_j)`.
    ///
    /// Trapezoid grids use the trapezoid rule on `t_0..=t_i`, re-derived per
    /// row. Gauss grids use cells: with `c_i = a + Σ_{j<i} w_j`, row `i` gives
    /// weight `w_j` to every `j < i` and `t_i − c_i` to `t_i`. Gauss nodes sit
    /// within `O(h²)` of their cell centres, so the rule is second order, and
    /// column sums match the quadrature weights. On a uniform grid the two
    /// constructions coincide.
    pub fn causal_weights(&self) -> DMatrix<f64> {
        let n = self.len();
        let t = &self.nodes;
        let mut w = DMatrix::zeros(n, n);
        match self.rule {
            QuadratureRule::Trapezoid => {
                for i in 0..n {
                    for j in 0..i {
                        let half = 0.5 * (t[j + 1] - t[j]);
                        w[(i, j)] += half;
                        w[(i, j + 1)] += half;
                    }
                }
            }
            QuadratureRule::GaussLegendre => {
                let mut cell = self.a;
                for i in 0..n {
                    for j in 0..i {
                        w[(i, j)] = self.weights[j];
                    }
                    w[(i, i)] = t[i] - cell;
                    cell += self.weights[i];
                }
            }
        }
        w
    }

    /// Weights for `∫_{t_i}^b f(s) ds`, the mirror image of [`Grid::causal_weights`].
    pub fn anticausal_weights(&self) -> DMatrix<f64> {
        let n = self.len();
        let t = &self.nodes;
        let mut w = DMatrix::zeros(n, n);
        match self.rule {
            QuadratureRule::Trapezoid => {
                for i in 0..n {
                    for j in i..n - 1 {
                        let half = 0.5 * (t[j + 1] - t[j]);
                        w[(i, j)] += half;
                        w[(i, j + 1)] += half;
                    }
                }
            }
            QuadratureRule::GaussLegendre => {
                let mut cell = self.b;
                for i in (0..n).rev() {
                    for j in i + 1..n {
                        w[(i, j)] = self.weights[j];
                    }
                    w[(i, i)] = cell - t[i];
                    cell -= self.weights[i];
                }
            }
        }
        w
    }

    /// Discrete adjoint of the causal rule: `α[i][j] = ω[j][i] w_j / w_i`.
    ///
    /// These are the weights a backward integral `∫_{t_i}^b` must carry for
    /// the discrete state/costate pair to be the exact optimality system of the
    /// discretized cost.
    pub fn adjoint_causal_weights(&self) -> DMatrix<f64> {
        let omega = self.causal_weights();
        let w = &self.weights;
        let n = self.len();
        DMatrix::from_fn(n, n, |i, j| omega[(j, i)] * w[j] / w[i])
    }
}

/// Builds nodes and weights for `rule` on `[a, b]` with `n` points.
pub fn make_grid(a: f64, b: f64, n: usize, rule: QuadratureRule) -> Result<Arc<Grid>> {
    if !(a.is_finite() && b.is_finite() && a < b) {
        return Err(Error::domain(format!("invalid interval [{a}, {b}]")));
    }
    if n < 2 {
        return Err(Error::domain(format!("grid needs at least 2 nodes, got {n}")));
    }
    let (nodes, weights) = match rule {
        QuadratureRule::Trapezoid => {
            let h = (b - a) / (n - 1) as f64;
            let nodes = (0..n)
                .map(|i| if i == n - 1 { b } else { a + h * i as f64 })
                .collect();
            let mut weights = vec![h; n];
            weights[0] = 0.5 * h;
            weights[n - 1] = 0.5 * h;
            (nodes, weights)
        }
        QuadratureRule::GaussLegendre => {
            let (x, w) = gauss_legendre_reference(n);
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            (
                x.iter().map(|xi| mid + half * xi).collect(),
                w.iter().map(|wi| half * wi).collect(),
            )
        }
    };
    Ok(Arc::new(Grid {
        a,
        b,
        nodes,
        weights,
        rule,
    }))
}

/// Gauss–Legendre nodes (ascending) and weights on `[-1, 1]` by Newton
/// iteration on the three-term Legendre recurrence.
pub fn gauss_legendre_reference(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                let (_, d) = legendre_with_derivative(n, z);
                dp = d;
                break;
            }
        }
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

fn same_grid(a: &Arc<Grid>, b: &Arc<Grid>) -> bool {
    Arc::ptr_eq(a, b) || **a == **b
}

/// A vector-valued function sampled at the grid nodes (`N × dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: Arc<Grid>,
    values: DMatrix<f64>,
}

impl GridFunction {
    pub fn new(grid: Arc<Grid>, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != grid.len() {
            return Err(Error::domain(format!(
                "grid function has {} rows, grid has {} nodes",
                values.nrows(),
                grid.len()
            )));
        }
        if values.ncols() == 0 {
            return Err(Error::domain("grid function needs at least one component"));
        }
        Ok(GridFunction { grid, values })
    }

    pub fn zeros(grid: Arc<Grid>, dim: usize) -> Self {
        let n = grid.len();
        GridFunction {
            grid,
            values: DMatrix::zeros(n, dim),
        }
    }

    pub fn from_fn(grid: Arc<Grid>, dim: usize, mut f: impl FnMut(f64) -> Vec<f64>) -> Self {
        let n = grid.len();
        let mut values = DMatrix::zeros(n, dim);
        for (i, &x) in grid.nodes().iter().enumerate() {
            let v = f(x);
            assert_eq!(v.len(), dim, "component count mismatch");
            for (c, vc) in v.into_iter().enumerate() {
                values[(i, c)] = vc;
            }
        }
        GridFunction { grid, values }
    }

    pub fn scalar_fn(grid: Arc<Grid>, mut f: impl FnMut(f64) -> f64) -> Self {
        Self::from_fn(grid, 1, |x| vec![f(x)])
    }

    /// Rebuilds a function from its node-major stacked vector.
    pub fn from_stacked(grid: Arc<Grid>, dim: usize, v: &DVector<f64>) -> Result<Self> {
        if v.len() != grid.len() * dim {
            return Err(Error::domain(format!(
                "stacked vector of length {} does not fit {} nodes x {} components",
                v.len(),
                grid.len(),
                dim
            )));
        }
        let n = grid.len();
        let values = DMatrix::from_fn(n, dim, |i, c| v[i * dim + c]);
        Ok(GridFunction { grid, values })
    }

    /// Reads an arity-one `n × 1` field as an `n`-component function.
    pub fn from_column_field(k: &MatrixKernelField) -> Result<Self> {
        if k.arity() != Arity::One || k.cols() != 1 {
            return Err(Error::domain(format!(
                "expected an arity-one column field, got {}x{}",
                k.rows(),
                k.cols()
            )));
        }
        Self::from_stacked(k.grid().clone(), k.rows(), &k.data().column(0).clone_owned())
    }

    pub fn stacked(&self) -> DVector<f64> {
        let (n, d) = self.values.shape();
        DVector::from_fn(n * d, |k, _| self.values[(k / d, k % d)])
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Value at node `i` as a column vector.
    pub fn at(&self, i: usize) -> DVector<f64> {
        self.values.row(i).transpose()
    }

    pub fn max_abs(&self) -> f64 {
        crate::linalg::max_abs(&self.values)
    }

    /// Max-norm distance to another function on the same grid.
    pub fn max_diff(&self, other: &GridFunction) -> f64 {
        assert_eq!(self.values.shape(), other.values.shape());
        crate::linalg::max_abs(&(&self.values - &other.values))
    }

    pub fn scaled(&self, s: f64) -> GridFunction {
        GridFunction {
            grid: self.grid.clone(),
            values: &self.values * s,
        }
    }

    pub fn add(&self, other: &GridFunction) -> Result<GridFunction> {
        check_compatible(self, other)?;
        Ok(GridFunction {
            grid: self.grid.clone(),
            values: &self.values + &other.values,
        })
    }

    pub fn sub(&self, other: &GridFunction) -> Result<GridFunction> {
        check_compatible(self, other)?;
        Ok(GridFunction {
            grid: self.grid.clone(),
            values: &self.values - &other.values,
        })
    }
}

fn check_compatible(f: &GridFunction, g: &GridFunction) -> Result<()> {
    if !same_grid(&f.grid, &g.grid) {
        return Err(Error::domain("grid functions live on different grids"));
    }
    if f.dim() != g.dim() {
        return Err(Error::domain(format!(
            "component count mismatch: {} vs {}",
            f.dim(),
            g.dim()
        )));
    }
    Ok(())
}

/// `Σ_i w_i f(x_i)·g(x_i)`.
pub fn inner_product(f: &GridFunction, g: &GridFunction) -> Result<f64> {
    check_compatible(f, g)?;
    let w = f.grid.weights();
    Ok((0..f.grid.len())
        .map(|i| w[i] * f.values.row(i).dot(&g.values.row(i)))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arity {
    One,
    Two,
}

/// Matrix-valued kernel sampled at nodes (arity one) or node pairs (arity two).
///
/// Storage is a single dense matrix: `(N·rows) × cols` for arity one and
/// `(N·rows) × (N·cols)` for arity two, block `(i, j)` holding `K(x_i, x_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixKernelField {
    grid: Arc<Grid>,
    arity: Arity,
    rows: usize,
    cols: usize,
    data: DMatrix<f64>,
}

impl MatrixKernelField {
    pub fn zeros(grid: Arc<Grid>, arity: Arity, rows: usize, cols: usize) -> Self {
        let n = grid.len();
        let data = match arity {
            Arity::One => DMatrix::zeros(n * rows, cols),
            Arity::Two => DMatrix::zeros(n * rows, n * cols),
        };
        MatrixKernelField {
            grid,
            arity,
            rows,
            cols,
            data,
        }
    }

    pub fn from_data(
        grid: Arc<Grid>,
        arity: Arity,
        rows: usize,
        cols: usize,
        data: DMatrix<f64>,
    ) -> Result<Self> {
        let n = grid.len();
        let expected = match arity {
            Arity::One => (n * rows, cols),
            Arity::Two => (n * rows, n * cols),
        };
        if rows == 0 || cols == 0 || data.shape() != expected {
            return Err(Error::domain(format!(
                "kernel data shape {:?} does not match {rows}x{cols} blocks on {n} nodes",
                data.shape()
            )));
        }
        Ok(MatrixKernelField {
            grid,
            arity,
            rows,
            cols,
            data,
        })
    }

    pub fn one_from_fn(
        grid: Arc<Grid>,
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, f64) -> DMatrix<f64>,
    ) -> Self {
        let mut k = Self::zeros(grid.clone(), Arity::One, rows, cols);
        for (i, &x) in grid.nodes().iter().enumerate() {
            let blk = f(i, x);
            assert_eq!(blk.shape(), (rows, cols), "block shape mismatch");
            k.data.view_mut((i * rows, 0), (rows, cols)).copy_from(&blk);
        }
        k
    }

    pub fn two_from_fn(
        grid: Arc<Grid>,
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize, f64, f64) -> DMatrix<f64>,
    ) -> Self {
        let mut k = Self::zeros(grid.clone(), Arity::Two, rows, cols);
        let nodes = grid.nodes();
        for (i, &x) in nodes.iter().enumerate() {
            for (j, &y) in nodes.iter().enumerate() {
                let blk = f(i, j, x, y);
                assert_eq!(blk.shape(), (rows, cols), "block shape mismatch");
                k.data
                    .view_mut((i * rows, j * cols), (rows, cols))
                    .copy_from(&blk);
            }
        }
        k
    }

    /// Scalar convenience constructor for arity-two kernels.
    pub fn scalar_two(grid: Arc<Grid>, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        Self::two_from_fn(grid, 1, 1, |_, _, x, y| DMatrix::from_element(1, 1, f(x, y)))
    }

    pub fn scalar_one(grid: Arc<Grid>, mut f: impl FnMut(f64) -> f64) -> Self {
        Self::one_from_fn(grid, 1, 1, |_, x| DMatrix::from_element(1, 1, f(x)))
    }

    /// Constant matrix block at every node (arity one).
    pub fn constant_one(grid: Arc<Grid>, m: &DMatrix<f64>) -> Self {
        Self::one_from_fn(grid, m.nrows(), m.ncols(), |_, _| m.clone())
    }

    /// Constant matrix block at every node pair (arity two).
    pub fn constant_two(grid: Arc<Grid>, m: &DMatrix<f64>) -> Self {
        Self::two_from_fn(grid, m.nrows(), m.ncols(), |_, _, _, _| m.clone())
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn arity(&self) -> Arity {
        self.arity
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// `K(x_i)` for arity one.
    pub fn at(&self, i: usize) -> DMatrixView<'_, f64> {
        debug_assert_eq!(self.arity, Arity::One);
        self.data.view((i * self.rows, 0), (self.rows, self.cols))
    }

    /// `K(x_i, x_j)` for arity two.
    pub fn at2(&self, i: usize, j: usize) -> DMatrixView<'_, f64> {
        debug_assert_eq!(self.arity, Arity::Two);
        self.data
            .view((i * self.rows, j * self.cols), (self.rows, self.cols))
    }

    pub fn set2(&mut self, i: usize, j: usize, blk: &DMatrix<f64>) {
        self.data
            .view_mut((i * self.rows, j * self.cols), (self.rows, self.cols))
            .copy_from(blk);
    }

    /// Transposes every block: `K(x, y) ↦ K(x, y)ᵀ`.
    pub fn transpose_blocks(&self) -> Self {
        let n = self.grid.len();
        match self.arity {
            Arity::One => {
                Self::one_from_fn(self.grid.clone(), self.cols, self.rows, |i, _| {
                    self.at(i).transpose()
                })
            }
            Arity::Two => {
                let mut out = Self::zeros(self.grid.clone(), Arity::Two, self.cols, self.rows);
                for i in 0..n {
                    for j in 0..n {
                        out.set2(i, j, &self.at2(i, j).transpose());
                    }
                }
                out
            }
        }
    }

    /// Swaps the arguments: `K(x, y) ↦ K(y, x)`.
    pub fn swap_args(&self) -> Self {
        assert_eq!(self.arity, Arity::Two);
        let n = self.grid.len();
        let mut out = Self::zeros(self.grid.clone(), Arity::Two, self.rows, self.cols);
        for i in 0..n {
            for j in 0..n {
                out.set2(i, j, &self.at2(j, i).clone_owned());
            }
        }
        out
    }

    /// The kernel `K(y, x)ᵀ` of the adjoint integral operator.
    pub fn adjoint(&self) -> Self {
        self.swap_args().transpose_blocks()
    }

    /// Dense Nyström matrix with block `(i, j)` equal to `w_j K(x_i, x_j)`.
    pub fn weighted_operator(&self) -> DMatrix<f64> {
        assert_eq!(self.arity, Arity::Two);
        let w = self.grid.weights();
        let mut m = self.data.clone();
        for (j, wj) in w.iter().enumerate() {
            m.columns_mut(j * self.cols, self.cols).scale_mut(*wj);
        }
        m
    }

    /// Dense matrix with block `(i, j)` equal to `ω[i][j] K(x_i, x_j)` for an
    /// arbitrary `N × N` weight table (e.g. the causal Volterra rule).
    pub fn operator_with_weights(&self, omega: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(self.arity, Arity::Two);
        let n = self.grid.len();
        assert_eq!(omega.shape(), (n, n));
        let mut m = self.data.clone();
        for i in 0..n {
            for j in 0..n {
                m.view_mut((i * self.rows, j * self.cols), (self.rows, self.cols))
                    .scale_mut(omega[(i, j)]);
            }
        }
        m
    }

    /// Block-diagonal matrix `diag(K(x_0), …, K(x_{N-1}))` of an arity-one field.
    pub fn block_diagonal(&self) -> DMatrix<f64> {
        assert_eq!(self.arity, Arity::One);
        let n = self.grid.len();
        let mut m = DMatrix::zeros(n * self.rows, n * self.cols);
        for i in 0..n {
            m.view_mut((i * self.rows, i * self.cols), (self.rows, self.cols))
                .copy_from(&self.at(i));
        }
        m
    }
}

/// `(∫_G K(x, y) f(y) dy)(x_i) = Σ_j w_j K(x_i, x_j) f(x_j)`.
pub fn apply_kernel(k: &MatrixKernelField, f: &GridFunction) -> Result<GridFunction> {
    if k.arity != Arity::Two {
        return Err(Error::domain("apply_kernel needs an arity-two kernel"));
    }
    if !same_grid(&k.grid, &f.grid) {
        return Err(Error::domain("kernel and function live on different grids"));
    }
    if k.cols != f.dim() {
        return Err(Error::domain(format!(
            "kernel has {} columns but function has {} components",
            k.cols,
            f.dim()
        )));
    }
    let out = k.weighted_operator() * f.stacked();
    GridFunction::from_stacked(k.grid.clone(), k.rows, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn two_point_trapezoid() {
        let g = make_grid(0.0, 1.0, 2, QuadratureRule::Trapezoid).unwrap();
        assert_eq!(g.nodes(), &[0.0, 1.0]);
        assert_eq!(g.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn uniform_trapezoid_weights() {
        let g = make_grid(0.0, 2.0, 3, QuadratureRule::Trapezoid).unwrap();
        assert_eq!(g.weights(), &[0.5, 1.0, 0.5]);
    }

    #[test]
    fn gauss_five_point_matches_published_values() {
        // Abramowitz & Stegun 25.4.30, n = 5.
        let x_ref = [0.0, 0.538_469_310_105_683_1, 0.906_179_845_938_664];
        let w_ref = [
            0.568_888_888_888_888_9,
            0.478_628_670_499_366_5,
            0.236_926_885_056_189_1,
        ];
        let (x, w) = gauss_legendre_reference(5);
        assert_relative_eq!(x[2], x_ref[0], epsilon = 1e-15);
        assert_relative_eq!(x[3], x_ref[1], epsilon = 1e-15);
        assert_relative_eq!(x[4], x_ref[2], epsilon = 1e-15);
        assert_relative_eq!(x[0], -x_ref[2], epsilon = 1e-15);
        assert_relative_eq!(w[2], w_ref[0], epsilon = 1e-15);
        assert_relative_eq!(w[1], w_ref[1], epsilon = 1e-15);
        assert_relative_eq!(w[4], w_ref[2], epsilon = 1e-15);

        let g = make_grid(0.0, 1.0, 5, QuadratureRule::GaussLegendre).unwrap();
        let sum: f64 = g.weights().iter().sum();
        assert!((sum - 1.0).abs() < 1e-14);
        for (xi, xr) in g.nodes().iter().zip(x.iter()) {
            assert_relative_eq!(*xi, 0.5 + 0.5 * xr, epsilon = 1e-15);
        }
    }

    #[test]
    fn invalid_grids_rejected() {
        assert!(matches!(
            make_grid(1.0, 0.0, 5, QuadratureRule::Trapezoid),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            make_grid(0.0, 1.0, 1, QuadratureRule::GaussLegendre),
            Err(Error::Domain(_))
        ));
        assert!(make_grid(0.0, f64::NAN, 4, QuadratureRule::Trapezoid).is_err());
    }

    #[test]
    fn weights_sum_to_length() {
        for rule in [QuadratureRule::Trapezoid, QuadratureRule::GaussLegendre] {
            for n in [2, 3, 17, 64, 129, 257] {
                let g = make_grid(-0.3, 2.2, n, rule).unwrap();
                let s: f64 = g.weights().iter().sum();
                assert!(((s - 2.5) / 2.5).abs() < 1e-12, "{rule} n={n} sum={s}");
                assert!(g.weights().iter().all(|w| *w > 0.0));
                assert!(g.nodes().windows(2).all(|p| p[0] < p[1]));
            }
        }
        let g = make_grid(-0.3, 2.2, 9, QuadratureRule::Trapezoid).unwrap();
        assert_eq!(g.nodes()[0], -0.3);
        assert_eq!(g.nodes()[8], 2.2);
    }

    #[test]
    fn inner_product_examples() {
        let g = make_grid(0.0, 1.0, 7, QuadratureRule::GaussLegendre).unwrap();
        let one = GridFunction::scalar_fn(g.clone(), |_| 1.0);
        assert_relative_eq!(inner_product(&one, &one).unwrap(), 1.0, epsilon = 1e-14);

        let g = make_grid(0.0, 1.0, 101, QuadratureRule::Trapezoid).unwrap();
        let x = GridFunction::scalar_fn(g.clone(), |x| x);
        let one = GridFunction::scalar_fn(g.clone(), |_| 1.0);
        assert!((inner_product(&x, &one).unwrap() - 0.5).abs() < 1e-12);

        let g = make_grid(0.0, 1.0, 5, QuadratureRule::GaussLegendre).unwrap();
        let x2 = GridFunction::scalar_fn(g.clone(), |x| x * x);
        let one = GridFunction::scalar_fn(g.clone(), |_| 1.0);
        assert!((inner_product(&x2, &one).unwrap() - 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn inner_product_rejects_mismatch() {
        let g1 = make_grid(0.0, 1.0, 5, QuadratureRule::Trapezoid).unwrap();
        let g2 = make_grid(0.0, 1.0, 6, QuadratureRule::Trapezoid).unwrap();
        let f = GridFunction::zeros(g1.clone(), 1);
        let h = GridFunction::zeros(g2, 1);
        assert!(inner_product(&f, &h).is_err());
        let v = GridFunction::zeros(g1, 2);
        assert!(inner_product(&f, &v).is_err());
    }

    #[test]
    fn quadrature_exactness() {
        let g = make_grid(0.0, 3.0, 11, QuadratureRule::Trapezoid).unwrap();
        let lin = GridFunction::scalar_fn(g.clone(), |x| 2.0 * x - 1.0);
        let one = GridFunction::scalar_fn(g.clone(), |_| 1.0);
        let exact = 9.0 - 3.0;
        assert!(((inner_product(&lin, &one).unwrap() - exact) / exact).abs() < 1e-12);

        for n in 1..=12usize {
            let g = make_grid(-1.0, 2.0, n.max(2), QuadratureRule::GaussLegendre).unwrap();
            let n = g.len();
            let one = GridFunction::scalar_fn(g.clone(), |_| 1.0);
            for deg in 0..=(2 * n - 1) {
                let p = GridFunction::scalar_fn(g.clone(), |x| x.powi(deg as i32));
                let exact = (2f64.powi(deg as i32 + 1) - (-1f64).powi(deg as i32 + 1))
                    / (deg as f64 + 1.0);
                let got = inner_product(&p, &one).unwrap();
                assert!(
                    (got - exact).abs() <= 1e-12 * exact.abs().max(1.0),
                    "n={n} deg={deg} got={got} exact={exact}"
                );
            }
        }
    }

    #[test]
    fn apply_kernel_examples() {
        let g = make_grid(0.0, 1.0, 9, QuadratureRule::Trapezoid).unwrap();
        let z = MatrixKernelField::zeros(g.clone(), Arity::Two, 2, 2);
        let f = GridFunction::from_fn(g.clone(), 2, |x| vec![x, 1.0 - x]);
        assert_eq!(apply_kernel(&z, &f).unwrap().max_abs(), 0.0);

        let id = MatrixKernelField::constant_two(g.clone(), &DMatrix::identity(2, 2));
        let c = GridFunction::from_fn(g.clone(), 2, |_| vec![3.0, -2.0]);
        let out = apply_kernel(&id, &c).unwrap();
        assert!(out.max_diff(&c) < 1e-14);

        let gg = make_grid(0.0, 1.0, 20, QuadratureRule::GaussLegendre).unwrap();
        let phi = |x: f64| 3f64.sqrt() * x;
        let k = MatrixKernelField::scalar_two(gg.clone(), |x, y| phi(x) * phi(y));
        let f = GridFunction::scalar_fn(gg.clone(), phi);
        let out = apply_kernel(&k, &f).unwrap();
        assert!(out.max_diff(&f) < 1e-13);
    }

    #[test]
    fn apply_kernel_shape_mismatch() {
        let g = make_grid(0.0, 1.0, 4, QuadratureRule::Trapezoid).unwrap();
        let k = MatrixKernelField::zeros(g.clone(), Arity::Two, 2, 3);
        let f = GridFunction::zeros(g.clone(), 2);
        assert!(apply_kernel(&k, &f).is_err());
        let k1 = MatrixKernelField::zeros(g, Arity::One, 2, 2);
        assert!(apply_kernel(&k1, &f).is_err());
    }

    #[test]
    fn causal_weights_integrate_linear_functions_on_every_prefix() {
        let g = make_grid(0.0, 2.0, 13, QuadratureRule::Trapezoid).unwrap();
        let omega = g.causal_weights();
        let back = g.anticausal_weights();
        let t = g.nodes();
        for i in 0..g.len() {
            let fwd: f64 = (0..g.len()).map(|j| omega[(i, j)] * t[j]).sum();
            let bwd: f64 = (0..g.len()).map(|j| back[(i, j)] * t[j]).sum();
            assert!((fwd - 0.5 * t[i] * t[i]).abs() < 1e-14);
            assert!((bwd - 0.5 * (4.0 - t[i] * t[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn gauss_cell_weights_are_second_order() {
        let prefix_error = |n: usize| {
            let g = make_grid(0.0, 2.0, n, QuadratureRule::GaussLegendre).unwrap();
            let (omega, back) = (g.causal_weights(), g.anticausal_weights());
            let t = g.nodes();
            let mut worst = 0.0f64;
            for i in 0..n {
                let one: f64 = (0..n).map(|j| omega[(i, j)]).sum();
                let one_back: f64 = (0..n).map(|j| back[(i, j)]).sum();
                assert!((one - t[i]).abs() < 1e-14 && (one_back - (2.0 - t[i])).abs() < 1e-14);
                let fwd: f64 = (0..n).map(|j| omega[(i, j)] * t[j].exp()).sum();
                let bwd: f64 = (0..n).map(|j| back[(i, j)] * t[j].exp()).sum();
                worst = worst.max((fwd - (t[i].exp() - 1.0)).abs());
                worst = worst.max((bwd - (2f64.exp() - t[i].exp())).abs());
            }
            for j in 0..n {
                assert!((omega[(n - 1, j)] - g.weights()[j]).abs() < 1e-15 || j == n - 1);
            }
            worst
        };
        let (e1, e2) = (prefix_error(32), prefix_error(64));
        assert!(e2 < 1e-3 && e1 / e2 > 3.5, "{e1:e} {e2:e}");
    }

    #[test]
    fn trapezoid_last_row_is_the_full_rule() {
        let g = make_grid(0.0, 1.0, 9, QuadratureRule::Trapezoid).unwrap();
        let omega = g.causal_weights();
        for j in 0..9 {
            assert!((omega[(8, j)] - g.weights()[j]).abs() < 1e-15);
        }
    }
}
