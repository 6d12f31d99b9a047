//! Quadratic functionals on `L²(G → ℝⁿ)`:
//!
//! `E(w) = ½∬ wᵀ(x) K₂(x, y) w(y) + ∫ ½ wᵀ(x) K₁(x) w(x) + r₀ᵀ(x) w(x)`.
//!
//! The minimizer solves `K₁w + ∫K₂w + r₀ = 0`, rewritten as the second-kind
//! equation `w = −∫K₁⁻¹K₂w − K₁⁻¹r₀`.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::discretize::{Arity, Grid, GridFunction, MatrixKernelField};
use crate::error::{Error, Result};
use crate::fredholm::{self, Sign};
use crate::kernelspec::{ProblemKind, ProblemSpec};
use crate::linalg;

/// Certification margin around the coercivity threshold `λ_min = −1`.
pub const PD_MARGIN: f64 = 1e-9;

/// Relative tolerance for the minimum-value identities.
pub const IDENTITY_TOL: f64 = 1e-8;

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct QuadFormProblem {
    pub k1: MatrixKernelField,
    pub k2: MatrixKernelField,
    pub r0: GridFunction,
}

impl QuadFormProblem {
    pub fn new(k1: MatrixKernelField, k2: MatrixKernelField, r0: GridFunction) -> Result<Self> {
        let n = r0.dim();
        if k1.arity() != Arity::One || k1.rows() != n || k1.cols() != n {
            return Err(Error::domain(format!("K1 must be an arity-one {n}x{n} field")));
        }
        if k2.arity() != Arity::Two || k2.rows() != n || k2.cols() != n {
            return Err(Error::domain(format!("K2 must be an arity-two {n}x{n} field")));
        }
        if k1.grid() != r0.grid() || k2.grid() != r0.grid() {
            return Err(Error::domain("K1, K2 and r0 live on different grids"));
        }
        Ok(QuadFormProblem { k1, k2, r0 })
    }

    pub fn from_spec(spec: &ProblemSpec, grid: &Arc<Grid>) -> Result<Self> {
        if spec.kind != ProblemKind::QuadForm {
            return Err(Error::domain(format!("expected a QuadForm problem, got {}", spec.kind)));
        }
        let r0 = GridFunction::from_column_field(&spec.field("r0", grid)?)?;
        Self::new(spec.field("K1", grid)?, spec.field("K2", grid)?, r0)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.r0.grid()
    }

    pub fn dim(&self) -> usize {
        self.r0.dim()
    }

    pub fn symmetrized(&self) -> Self {
        let (k1, k2) = symmetrize(&self.k1, &self.k2);
        QuadFormProblem {
            k1,
            k2,
            r0: self.r0.clone(),
        }
    }

    pub fn is_symmetric(&self) -> bool {
        k1_symmetric(&self.k1) && linalg::is_symmetric(self.k2.data(), SYMMETRY_TOL)
    }

    fn check_arg(&self, w: &GridFunction) -> Result<()> {
        if w.dim() != self.dim() || w.grid() != self.grid() {
            return Err(Error::domain(format!(
                "argument has {} components on a {}-node grid, problem expects {} on {}",
                w.dim(),
                w.grid().len(),
                self.dim(),
                self.grid().len()
            )));
        }
        Ok(())
    }
}

fn k1_symmetric(k1: &MatrixKernelField) -> bool {
    (0..k1.grid().len()).all(|i| linalg::is_symmetric(&k1.at(i).clone_owned(), SYMMETRY_TOL))
}

/// `K̃₁(x) = ½[K₁(x) + K₁ᵀ(x)]`, `K̃₂(x, y) = ½[K₂(x, y) + K₂ᵀ(y, x)]`.
///
/// With node-major stacking the second is just `½(D + Dᵀ)` of the data matrix.
pub fn symmetrize(
    k1: &MatrixKernelField,
    k2: &MatrixKernelField,
) -> (MatrixKernelField, MatrixKernelField) {
    let s1 = MatrixKernelField::one_from_fn(k1.grid().clone(), k1.rows(), k1.cols(), |i, _| {
        let b = k1.at(i);
        let bt = b.transpose();
        (b + bt) * 0.5
    });
    let d = k2.data();
    let s2 = MatrixKernelField::from_data(
        k2.grid().clone(),
        Arity::Two,
        k2.rows(),
        k2.cols(),
        (d + d.transpose()) * 0.5,
    )
    .expect("symmetrization preserves shape");
    (s1, s2)
}

/// Purely quadratic part `E_q(w) = ½∫wᵀK₁w + ½∬wᵀK₂w`.
pub fn eval_e_q(p: &QuadFormProblem, w: &GridFunction) -> Result<f64> {
    p.check_arg(w)?;
    let weights = p.grid().weights();
    let k2w = p.k2.weighted_operator() * w.stacked();
    let n = p.dim();
    let mut total = 0.0;
    for (i, wi) in weights.iter().enumerate() {
        let v = w.at(i);
        let local = v.dot(&(p.k1.at(i) * &v));
        let nonlocal = v.dot(&k2w.rows(i * n, n));
        total += 0.5 * wi * (local + nonlocal);
    }
    Ok(total)
}

pub fn eval_e(p: &QuadFormProblem, w: &GridFunction) -> Result<f64> {
    let q = eval_e_q(p, w)?;
    let weights = p.grid().weights();
    let lin: f64 = (0..weights.len())
        .map(|i| weights[i] * p.r0.values().row(i).dot(&w.values().row(i)))
        .sum();
    Ok(q + lin)
}

/// Block kernel `K̃(x, y) = [[K₁(x)/|G|, K₂(x, y)], [K₂(y, x), K₁(y)/|G|]]`.
fn extended_block(p: &QuadFormProblem, i: usize, j: usize, measure: f64) -> DMatrix<f64> {
    let n = p.dim();
    let mut kt = DMatrix::zeros(2 * n, 2 * n);
    kt.view_mut((0, 0), (n, n)).copy_from(&(p.k1.at(i) / measure));
    kt.view_mut((0, n), (n, n)).copy_from(&p.k2.at2(i, j));
    kt.view_mut((n, 0), (n, n)).copy_from(&p.k2.at2(j, i));
    kt.view_mut((n, n), (n, n)).copy_from(&(p.k1.at(j) / measure));
    kt
}

fn eval_extended_parts(p: &QuadFormProblem, w: &GridFunction, v: &GridFunction) -> Result<(f64, f64)> {
    p.check_arg(w)?;
    p.check_arg(v)?;
    let n = p.dim();
    let measure = p.grid().measure();
    if !(measure > 0.0) {
        return Err(Error::domain("extension needs |G| > 0"));
    }
    let weights = p.grid().weights();
    let (mut quad, mut lin) = (0.0, 0.0);
    let mut z = nalgebra::DVector::zeros(2 * n);
    let mut rt = nalgebra::DVector::zeros(2 * n);
    for (i, wi) in weights.iter().enumerate() {
        for (j, wj) in weights.iter().enumerate() {
            z.rows_mut(0, n).copy_from(&w.at(i));
            z.rows_mut(n, n).copy_from(&v.at(j));
            rt.rows_mut(0, n).copy_from(&(p.r0.at(i) / measure));
            rt.rows_mut(n, n).copy_from(&(p.r0.at(j) / measure));
            let kt = extended_block(p, i, j, measure);
            quad += wi * wj * z.dot(&(&kt * &z));
            lin += wi * wj * rt.dot(&z);
        }
    }
    Ok((0.25 * quad, 0.5 * lin))
}

/// `Ẽ(w, v) = ¼∬[wᵀ(x) vᵀ(y)] K̃(x, y) [w(x); v(y)] + ½∬ r̃ᵀ(x, y) [w(x); v(y)]`
/// with `r̃(x, y) = [r₀(x); r₀(y)] / |G|`. Expects a symmetrized problem.
pub fn eval_e_extended(p: &QuadFormProblem, w: &GridFunction, v: &GridFunction) -> Result<f64> {
    let (q, l) = eval_extended_parts(p, w, v)?;
    Ok(q + l)
}

/// Quadratic part `Ẽ_q(w, v)` of the extension.
pub fn eval_e_extended_q(p: &QuadFormProblem, w: &GridFunction, v: &GridFunction) -> Result<f64> {
    eval_extended_parts(p, w, v).map(|(q, _)| q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    PositiveDefinite,
    PositiveSemiDefinite,
    Indefinite,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::PositiveDefinite => "PositiveDefinite",
            Verdict::PositiveSemiDefinite => "PositiveSemiDefinite",
            Verdict::Indefinite => "Indefinite",
        }
    }
}

/// Discrete coercivity certificate for the pair `(K₁, K₂)`.
///
/// `min_eigenvalue` is the smallest eigenvalue of the symmetric matrix with
/// blocks `√w_i K₁^{-1/2}(x_i) K₂(x_i, x_j) K₁^{-1/2}(x_j) √w_j`; it is absent
/// when some `K₁(x_i)` is not positive definite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PdCertificate {
    pub min_eigenvalue: Option<f64>,
    pub verdict: Verdict,
    pub k1_spd: bool,
    pub grid_n: usize,
}

pub fn certify_pd(p: &QuadFormProblem) -> Result<PdCertificate> {
    if !k1_symmetric(&p.k1) {
        return Err(Error::precondition("K1 is not symmetric; symmetrize the problem first"));
    }
    if !linalg::is_symmetric(p.k2.data(), SYMMETRY_TOL) {
        return Err(Error::precondition("K2 is not symmetric; symmetrize the problem first"));
    }
    let grid = p.grid();
    let nn = grid.len();
    let n = p.dim();
    let mut inv_sqrt = Vec::with_capacity(nn);
    for i in 0..nn {
        match linalg::spd_inv_sqrt(&p.k1.at(i).clone_owned()) {
            Some(s) => inv_sqrt.push(s * grid.weights()[i].sqrt()),
            None => {
                return Ok(PdCertificate {
                    min_eigenvalue: None,
                    verdict: Verdict::Indefinite,
                    k1_spd: false,
                    grid_n: nn,
                })
            }
        }
    }
    let mut m = DMatrix::zeros(nn * n, nn * n);
    for i in 0..nn {
        for j in 0..nn {
            let blk = &inv_sqrt[i] * p.k2.at2(i, j) * &inv_sqrt[j];
            m.view_mut((i * n, j * n), (n, n)).copy_from(&blk);
        }
    }
    let m = (&m + m.transpose()) * 0.5;
    let lambda = linalg::min_eigenvalue(&m);
    let verdict = if lambda > -1.0 + PD_MARGIN {
        Verdict::PositiveDefinite
    } else if (lambda + 1.0).abs() <= PD_MARGIN {
        Verdict::PositiveSemiDefinite
    } else {
        Verdict::Indefinite
    };
    Ok(PdCertificate {
        min_eigenvalue: Some(lambda),
        verdict,
        k1_spd: true,
        grid_n: nn,
    })
}

#[derive(Debug, Clone)]
pub struct Minimizer {
    pub w_star: GridFunction,
    pub e_min: f64,
    pub certificate: PdCertificate,
    /// Set when the pair is not certified positive definite: `w_star` is then
    /// only claimed to be a stationary point.
    pub stationary_only: bool,
    /// `|E(w*) − ½⟨r₀, w*⟩|`.
    pub half_linear_defect: f64,
    /// `|E(w*) + E_q(w*)|`.
    pub quadratic_defect: f64,
}

/// `K₁(x)w(x) + ∫K₂(x, y)w(y)dy + r₀(x) = 0`, solved as a second-kind equation.
pub(crate) fn solve_stationary(p: &QuadFormProblem) -> Result<GridFunction> {
    let grid = p.grid().clone();
    let nn = grid.len();
    let n = p.dim();
    let mut k1_inv = Vec::with_capacity(nn);
    for i in 0..nn {
        let x = grid.nodes()[i];
        k1_inv.push(linalg::invert_block(&p.k1.at(i).clone_owned(), || {
            format!("K1 at x = {x}")
        })?);
    }
    let kernel = MatrixKernelField::two_from_fn(grid.clone(), n, n, |i, j, _, _| {
        &k1_inv[i] * p.k2.at2(i, j)
    });
    let g = GridFunction::from_fn(grid.clone(), n, |_| vec![0.0; n]);
    let mut gv = g.values().clone();
    for i in 0..nn {
        let v = -(&k1_inv[i] * p.r0.at(i));
        gv.row_mut(i).copy_from(&v.transpose());
    }
    let g = GridFunction::new(grid, gv)?;
    fredholm::solve_second_kind(&kernel, &g, Sign::Minus)
}

/// Minimizes `E` after symmetrizing; checks `E(w*) = ½⟨r₀, w*⟩ = −E_q(w*)`.
pub fn minimize(p: &QuadFormProblem) -> Result<Minimizer> {
    let sym = p.symmetrized();
    let certificate = certify_pd(&sym)?;
    let w_star = solve_stationary(&sym)?;
    let e_min = eval_e(&sym, &w_star)?;
    let e_q = eval_e_q(&sym, &w_star)?;
    let half_lin = 0.5 * crate::discretize::inner_product(&sym.r0, &w_star)?;
    let half_linear_defect = (e_min - half_lin).abs();
    let quadratic_defect = (e_min + e_q).abs();
    let scale = IDENTITY_TOL * (1.0 + e_min.abs());
    if half_linear_defect > scale || quadratic_defect > scale {
        return Err(Error::Verification(format!(
            "minimum-value identities violated: |E − ½⟨r0,w⟩| = {half_linear_defect:.3e}, |E + E_q| = {quadratic_defect:.3e}"
        )));
    }
    Ok(Minimizer {
        stationary_only: certificate.verdict != Verdict::PositiveDefinite,
        w_star,
        e_min,
        certificate,
        half_linear_defect,
        quadratic_defect,
    })
}
