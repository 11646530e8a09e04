//! Normal-equation solves, fits and exact leverage computation.
//!
//! Small problems factor S = sum_i x_i x_i' once with a dense Cholesky;
//! large ones fall back to conjugate gradients with a Jacobi preconditioner.
//! Both paths sit behind one `Solver` handle so the callers never branch.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::design::{DesignMatrix, QuadraticForm};
use crate::error::{Error, Result};
use crate::sparse::SparseRow;

/// Tuning knobs for the linear-system backend.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Use a dense Cholesky when k is at most this.
    pub dense_threshold: usize,
    /// Relative residual target for conjugate gradients.
    pub cg_tol: f64,
    /// Iteration cap for conjugate gradients.
    pub cg_max_iters: usize,
    /// Force the iterative path regardless of size (used by tests).
    pub force_iterative: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            dense_threshold: 2000,
            cg_tol: 1e-10,
            cg_max_iters: 10_000,
            force_iterative: false,
        }
    }
}

enum Backend {
    Dense(Cholesky<f64, Dyn>),
    Cg { rows: Arc<Vec<SparseRow>>, inv_diag: Vec<f64>, tol: f64, max_iters: usize },
}

/// A factored (or matrix-free) handle on S = sum_i x_i x_i'.
pub struct Solver {
    k: usize,
    backend: Backend,
}

impl Solver {
    pub fn new(design: &DesignMatrix, cfg: &SolverConfig) -> Result<Solver> {
        let k = design.k;
        if !cfg.force_iterative && k <= cfg.dense_threshold {
            let s = design.sxx_dense();
            let chol = Cholesky::new(s).ok_or(Error::RankDeficient)?;
            Ok(Solver { k, backend: Backend::Dense(chol) })
        } else {
            let diag = design.sxx_diag();
            if diag.iter().any(|&d| d <= 0.0) {
                return Err(Error::RankDeficient);
            }
            let inv_diag = diag.iter().map(|d| 1.0 / d).collect();
            Ok(Solver {
                k,
                backend: Backend::Cg {
                    rows: Arc::new(design.rows.clone()),
                    inv_diag,
                    tol: cfg.cg_tol,
                    max_iters: cfg.cg_max_iters,
                },
            })
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.backend, Backend::Dense(_))
    }

    /// Lower Cholesky factor when the dense path is active.
    pub fn cholesky_l(&self) -> Option<DMatrix<f64>> {
        match &self.backend {
            Backend::Dense(c) => Some(c.l()),
            _ => None,
        }
    }

    /// Solve S x = b.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.backend {
            Backend::Dense(chol) => Ok(chol.solve(b)),
            Backend::Cg { rows, inv_diag, tol, max_iters } => {
                cg_solve(rows, inv_diag, b, *tol, *max_iters)
            }
        }
    }

    /// Solve S x = b for many right-hand sides in parallel.
    pub fn solve_many(&self, bs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        bs.par_iter().map(|b| self.solve(b)).collect()
    }

    /// Solve with a sparse right-hand side.
    pub fn solve_sparse(&self, b: &SparseRow) -> Result<DVector<f64>> {
        self.solve(&b.to_dense(self.k))
    }
}

fn sxx_apply(rows: &[SparseRow], v: &DVector<f64>) -> DVector<f64> {
    let mut out = vec![0.0; v.len()];
    let vs = v.as_slice();
    for r in rows {
        let t = r.dot(vs);
        r.add_scaled_into(t, &mut out);
    }
    DVector::from_vec(out)
}

/// Preconditioned conjugate gradients on S x = b with diag(S) scaling.
fn cg_solve(
    rows: &[SparseRow],
    inv_diag: &[f64],
    b: &DVector<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<DVector<f64>> {
    let k = b.len();
    let bnorm = b.norm();
    if bnorm == 0.0 {
        return Ok(DVector::zeros(k));
    }
    let mut x = DVector::zeros(k);
    let mut r = b.clone();
    let mut z = DVector::from_iterator(k, r.iter().zip(inv_diag).map(|(ri, d)| ri * d));
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    for _ in 0..max_iters {
        let ap = sxx_apply(rows, &p);
        let pap = p.dot(&ap);
        if pap <= 0.0 {
            return Err(Error::RankDeficient);
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        if r.norm() <= tol * bnorm {
            return Ok(x);
        }
        z = DVector::from_iterator(k, r.iter().zip(inv_diag).map(|(ri, d)| ri * d));
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        p = &z + &p * beta;
    }
    Err(Error::NotConverged { iters: max_iters, residual: r.norm() / bnorm })
}

/// Least-squares fit of y on the design.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta: DVector<f64>,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
    pub rss: f64,
}

pub fn fit(design: &DesignMatrix, y: &DVector<f64>, solver: &Solver) -> Result<FitResult> {
    if y.len() != design.n {
        return Err(Error::Validation(format!(
            "outcome has length {}, design has {} rows",
            y.len(),
            design.n
        )));
    }
    let xty = design.xt_apply(y.as_slice());
    let beta = solver.solve(&xty)?;
    let fitted = design.apply(beta.as_slice());
    let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(yi, fi)| yi - fi).collect();
    let rss = crate::util::pairwise_sum(&residuals.iter().map(|e| e * e).collect::<Vec<_>>());
    Ok(FitResult { beta, fitted, residuals, rss })
}

/// Whether leverages are exact or randomized approximations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LeverageMode {
    Exact,
    Sketched { projections: usize },
}

/// Per-observation leverages P_ii and the quadratic-form weights B_ii,
/// one B series per requested form.
#[derive(Debug, Clone)]
pub struct LeverageSet {
    pub p: Vec<f64>,
    pub b: Vec<Vec<f64>>,
    pub mode: LeverageMode,
    /// per observation: true when the value comes from an exact solve rather
    /// than a randomized projection
    pub exact: Vec<bool>,
}

impl LeverageSet {
    pub fn n(&self) -> usize {
        self.p.len()
    }

    /// Sketched observations that were replaced by exact solves.
    pub fn exact_fallbacks(&self) -> usize {
        match self.mode {
            LeverageMode::Exact => 0,
            LeverageMode::Sketched { .. } => self.exact.iter().filter(|x| **x).count(),
        }
    }

    pub fn m(&self, i: usize) -> f64 {
        1.0 - self.p[i]
    }

    pub fn max_p(&self) -> f64 {
        self.p.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
    }
}

/// Exact leverages via one normal-equation solve per observation.
pub fn exact_leverages(
    design: &DesignMatrix,
    forms: &[&QuadraticForm],
    solver: &Solver,
) -> Result<LeverageSet> {
    let (set, _z) = exact_leverages_with_z(design, forms, solver, false)?;
    Ok(set)
}

/// Same, optionally returning the solved vectors z_i = S^{-1} x_i for reuse
/// by pairwise machinery and cluster estimators.
pub fn exact_leverages_with_z(
    design: &DesignMatrix,
    forms: &[&QuadraticForm],
    solver: &Solver,
    keep_z: bool,
) -> Result<(LeverageSet, Vec<DVector<f64>>)> {
    let zs: Vec<DVector<f64>> = design
        .rows
        .par_iter()
        .map(|r| solver.solve_sparse(r))
        .collect::<Result<_>>()?;
    let mut p = Vec::with_capacity(design.n);
    for (i, z) in zs.iter().enumerate() {
        p.push(design.rows[i].dot(z.as_slice()));
    }
    let mut b = Vec::with_capacity(forms.len());
    for form in forms {
        let series: Vec<f64> = zs.par_iter().map(|z| form.quad(z)).collect();
        b.push(series);
    }
    let set = LeverageSet { p, b, mode: LeverageMode::Exact, exact: vec![true; design.n] };
    Ok((set, if keep_z { zs } else { Vec::new() }))
}

/// Leave-one-out residual y_i - x_i' beta_{-i} = (y_i - x_i' beta) / (1 - P_ii).
pub fn leave_out_residual(residual: f64, p_ii: f64, index: usize, guard: f64) -> Result<f64> {
    if p_ii >= 1.0 - guard {
        return Err(Error::LeverageOne { index, value: p_ii });
    }
    Ok(residual / (1.0 - p_ii))
}
