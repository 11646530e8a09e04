//! Variance estimation and weak-identification robust inference.
//!
//! The estimated quadratic form decomposes exactly over the generalized
//! eigenpairs of (A, S_xx). When a handful of eigenvalues carry most of the
//! curvature the usual normal approximation fails; inference then conditions
//! on the corresponding linear combinations and works with an ellipsoidal
//! confidence region in (b, theta_q) space.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::design::{DesignMatrix, QuadraticForm};
use crate::error::{Error, Result};
use crate::estimators::PairwiseCtx;
use crate::network::SplitSamplePlan;
use crate::solver::Solver;
use crate::sparse::SparseRow;
use crate::util::{rademacher, stream_rng, sum_by};

/// Leading generalized eigenpairs of A v = lambda S_xx v with v' S_xx v = I.
#[derive(Debug, Clone)]
pub struct EigenInfo {
    /// eigenvalues sorted by absolute value, descending
    pub lambda: Vec<f64>,
    /// eigenvectors, one column per pair (k x r)
    pub v: DMatrix<f64>,
    /// observation weights w_il = v_l' x_i (n x r)
    pub w: DMatrix<f64>,
    /// sum of squared eigenvalues over the whole spectrum
    pub trace_sq: f64,
    /// lambda_l^2 / trace_sq
    pub shares: Vec<f64>,
}

/// Compute the top `r` eigenpairs. Dense solvers get an exact reduction via
/// the Cholesky factor of S_xx; iterative solvers run Lanczos with full
/// reorthogonalization and estimate the squared trace stochastically.
pub fn top_eigen(
    design: &DesignMatrix,
    form: &QuadraticForm,
    solver: &Solver,
    r: usize,
) -> Result<EigenInfo> {
    let r = r.min(design.k).max(1);
    let (lambda, v, trace_sq) = if solver.is_dense() {
        dense_eigen(design, form, solver, r)?
    } else {
        lanczos_eigen(design, form, solver, r)?
    };
    let n = design.n;
    let mut w = DMatrix::zeros(n, lambda.len());
    for l in 0..lambda.len() {
        let col = v.column(l);
        for i in 0..n {
            w[(i, l)] = design.rows[i].dot(col.as_slice());
        }
    }
    let shares = lambda.iter().map(|l| l * l / trace_sq.max(1e-300)).collect();
    Ok(EigenInfo { lambda, v, w, trace_sq, shares })
}

fn dense_eigen(
    design: &DesignMatrix,
    form: &QuadraticForm,
    solver: &Solver,
    r: usize,
) -> Result<(Vec<f64>, DMatrix<f64>, f64)> {
    let k = design.k;
    let l = solver.cholesky_l().ok_or(Error::RankDeficient)?;
    let a = form.dense();
    // M = L^-1 A L^-T is symmetric with the same eigenvalues
    let y = l
        .clone()
        .solve_lower_triangular(&a)
        .ok_or(Error::RankDeficient)?;
    let zt = l
        .clone()
        .solve_lower_triangular(&y.transpose())
        .ok_or(Error::RankDeficient)?;
    let mut m = zt.transpose();
    for i in 0..k {
        for j in (i + 1)..k {
            let s = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
    let eig = SymmetricEigen::new(m);
    let trace_sq = eig.eigenvalues.iter().map(|x| x * x).sum();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .abs()
            .partial_cmp(&eig.eigenvalues[a].abs())
            .unwrap()
    });
    let keep = r.min(k);
    let mut lambda = Vec::with_capacity(keep);
    let mut v = DMatrix::zeros(k, keep);
    for (slot, &idx) in order.iter().take(keep).enumerate() {
        lambda.push(eig.eigenvalues[idx]);
        // back-transform u to v = L^-T u
        let u = eig.eigenvectors.column(idx).clone_owned();
        let vi = l.tr_solve_lower_triangular(&u).ok_or(Error::RankDeficient)?;
        v.set_column(slot, &vi);
    }
    Ok((lambda, v, trace_sq))
}

fn lanczos_eigen(
    design: &DesignMatrix,
    form: &QuadraticForm,
    solver: &Solver,
    r: usize,
) -> Result<(Vec<f64>, DMatrix<f64>, f64)> {
    let k = design.k;
    let m_iters = k.min((4 * r + 80).max(120));
    let mut rng = stream_rng(0xE16E, 0);
    let mut q_list: Vec<DVector<f64>> = Vec::new();
    let mut sq_list: Vec<DVector<f64>> = Vec::new();
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();

    let s_apply = |v: &DVector<f64>| -> DVector<f64> {
        let mut out = vec![0.0; k];
        design.sxx_matvec(v.as_slice(), &mut out);
        DVector::from_vec(out)
    };

    let v0: DVector<f64> =
        DVector::from_iterator(k, (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let sv0 = s_apply(&v0);
    let nrm = v0.dot(&sv0).sqrt();
    if !(nrm > 0.0) {
        return Err(Error::RankDeficient);
    }
    q_list.push(&v0 / nrm);
    sq_list.push(&sv0 / nrm);

    for j in 0..m_iters {
        let aq = form.apply(&q_list[j]);
        let u = solver.solve(&aq)?;
        let alpha = q_list[j].dot(&aq);
        alphas.push(alpha);
        let mut res = u;
        // full reorthogonalization in the S inner product, twice for safety
        for _ in 0..2 {
            for (qi, sqi) in q_list.iter().zip(&sq_list) {
                let coef = sqi.dot(&res);
                res.axpy(-coef, qi, 1.0);
            }
        }
        let sres = s_apply(&res);
        let beta = res.dot(&sres).max(0.0).sqrt();
        if beta < 1e-12 || j + 1 == m_iters || q_list.len() == k {
            break;
        }
        betas.push(beta);
        q_list.push(&res / beta);
        sq_list.push(&sres / beta);
    }

    let t_dim = alphas.len();
    let mut t = DMatrix::zeros(t_dim, t_dim);
    for j in 0..t_dim {
        t[(j, j)] = alphas[j];
        if j + 1 < t_dim {
            t[(j, j + 1)] = betas[j];
            t[(j + 1, j)] = betas[j];
        }
    }
    let eig = SymmetricEigen::new(t);
    let mut order: Vec<usize> = (0..t_dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .abs()
            .partial_cmp(&eig.eigenvalues[a].abs())
            .unwrap()
    });
    let keep = r.min(t_dim);
    let mut lambda = Vec::with_capacity(keep);
    let mut v = DMatrix::zeros(k, keep);
    for (slot, &idx) in order.iter().take(keep).enumerate() {
        lambda.push(eig.eigenvalues[idx]);
        let y = eig.eigenvectors.column(idx);
        let mut vi = DVector::zeros(k);
        for (j, qj) in q_list.iter().enumerate() {
            vi.axpy(y[j], qj, 1.0);
        }
        v.set_column(slot, &vi);
    }

    // stochastic estimate of sum of squared eigenvalues
    let probes = 256;
    let mut acc = 0.0;
    for probe in 0..probes {
        let g = DVector::from_iterator(
            k,
            (0..k).map(|j| rademacher(0x7E57, 2, probe as u64, j as u64)),
        );
        let h1 = solver.solve(&g)?;
        let h2 = form.apply(&h1);
        let h3 = solver.solve(&h2)?;
        let h4 = form.apply(&h3);
        acc += g.dot(&h4);
    }
    Ok((lambda, v, acc / probes as f64))
}

/// Number of eigenvalues whose squared share of the curvature meets the
/// threshold; the usual cutoff is one tenth.
pub fn select_q(eigen: &EigenInfo, threshold: f64) -> usize {
    eigen.shares.iter().take_while(|s| **s >= threshold).count()
}

/// Everything y-independent that the variance estimator needs, precomputed
/// once per design so Monte Carlo replications pay only O(n^2) arithmetic.
#[derive(Debug, Clone)]
pub struct VariancePlan {
    pub n: usize,
    pub q: usize,
    pub lambda: Vec<f64>,
    pub w: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub c_tilde: DMatrix<f64>,
    pub c_q: DMatrix<f64>,
    pub c_tilde_q: DMatrix<f64>,
    /// which split predicts i when the pair partner sits in the other split
    s_star: Vec<u8>,
    /// product rule per ordered pair, 1..=6
    case: Vec<u8>,
    pub qflag: Vec<bool>,
    rows1: Vec<SparseRow>,
    rows2: Vec<SparseRow>,
    /// ordered pairs forced onto upward-biased fallback products
    pub fallback_pairs: usize,
}

/// Behavior knobs for the variance evaluation.
#[derive(Debug, Clone, Copy)]
pub struct VhatOptions {
    pub leverage_guard: f64,
}

impl Default for VhatOptions {
    fn default() -> Self {
        VhatOptions { leverage_guard: 1e-8 }
    }
}

fn contains_idx(row: &SparseRow, l: u32) -> bool {
    row.indices().binary_search(&l).is_ok()
}

fn supports_disjoint(a: &SparseRow, b: &SparseRow) -> bool {
    let (ia, ib) = (a.indices(), b.indices());
    let (mut x, mut y) = (0usize, 0usize);
    while x < ia.len() && y < ib.len() {
        match ia[x].cmp(&ib[y]) {
            std::cmp::Ordering::Less => x += 1,
            std::cmp::Ordering::Greater => y += 1,
            std::cmp::Ordering::Equal => return false,
        }
    }
    true
}

fn c_tilde_from(c: &DMatrix<f64>, rows1: &[SparseRow], rows2: &[SparseRow]) -> DMatrix<f64> {
    let n = c.nrows();
    let mut ct = DMatrix::zeros(n, n);
    for m in 0..n {
        for (i, w1) in rows1[m].iter() {
            let cmi = c[(m, i as usize)];
            for (l, w2) in rows2[m].iter() {
                let add = 2.0 * cmi * c[(m, l as usize)] * w1 * w2;
                ct[(i as usize, l as usize)] += add;
                ct[(l as usize, i as usize)] += add;
            }
        }
    }
    for i in 0..n {
        for l in 0..n {
            if l != i {
                let v = c[(i, l)];
                ct[(i, l)] += v * v;
            }
        }
    }
    ct
}

/// Assemble the variance plan for the first `q` eigenpairs (q = 0 keeps the
/// full kernel only).
pub fn prepare_variance(
    ctx: &PairwiseCtx,
    plan: &SplitSamplePlan,
    eigen: Option<&EigenInfo>,
    q: usize,
) -> Result<VariancePlan> {
    let n = ctx.n();
    if plan.n() != n {
        return Err(Error::LabelMismatch(format!(
            "split plan covers {} rows, design has {n}",
            plan.n()
        )));
    }
    let (lambda, w) = if q > 0 {
        let e = eigen.ok_or(Error::InsufficientEigen { needed: q, got: 0 })?;
        if e.lambda.len() < q {
            return Err(Error::InsufficientEigen { needed: q, got: e.lambda.len() });
        }
        (e.lambda[..q].to_vec(), e.w.columns(0, q).clone_owned())
    } else {
        (Vec::new(), DMatrix::zeros(n, 0))
    };

    // kernel with the top-q directions removed
    let mut c_q = ctx.c.clone();
    if q > 0 {
        let mdiag: Vec<f64> = (0..n).map(|i| 1.0 - ctx.p[(i, i)]).collect();
        for s in 0..q {
            let ls = lambda[s];
            for i in 0..n {
                let wi = w[(i, s)];
                for l in 0..n {
                    if l == i {
                        continue;
                    }
                    let wl = w[(l, s)];
                    let m_il = -ctx.p[(i, l)];
                    let k_il =
                        wi * wl - 0.5 * m_il * (wi * wi / mdiag[i] + wl * wl / mdiag[l]);
                    c_q[(i, l)] -= ls * k_il;
                }
            }
        }
    }

    let c_tilde = c_tilde_from(&ctx.c, &plan.rows1, &plan.rows2);
    let c_tilde_q = if q > 0 {
        c_tilde_from(&c_q, &plan.rows1, &plan.rows2)
    } else {
        c_tilde.clone()
    };

    // classify every ordered pair once
    let mut s_star = vec![1u8; n * n];
    let mut case = vec![0u8; n * n];
    let mut fallback_pairs = 0usize;
    for i in 0..n {
        for l in 0..n {
            if l == i {
                continue;
            }
            let lu = l as u32;
            let in1 = contains_idx(&plan.rows1[i], lu);
            let in2 = contains_idx(&plan.rows2[i], lu);
            s_star[i * n + l] = if in1 { 2 } else { 1 };
            let unavail_i = in1 && plan.q[i];
            let iu = i as u32;
            let in1_rev = contains_idx(&plan.rows1[l], iu);
            let in2_rev = contains_idx(&plan.rows2[l], iu);
            let unavail_l = in1_rev && plan.q[l];
            let cs = if !unavail_i && !unavail_l {
                let ri = if in1 { &plan.rows2[i] } else { &plan.rows1[i] };
                let rl = if in1_rev { &plan.rows2[l] } else { &plan.rows1[l] };
                if supports_disjoint(ri, rl) {
                    1
                } else if !in1 && !in2 {
                    2
                } else if !in1_rev && !in2_rev {
                    3
                } else {
                    4
                }
            } else if !unavail_i {
                4
            } else if !unavail_l {
                5
            } else {
                6
            };
            if cs >= 4 {
                fallback_pairs += 1;
            }
            case[i * n + l] = cs;
        }
    }

    Ok(VariancePlan {
        n,
        q,
        lambda,
        w,
        p: ctx.p.clone(),
        c: ctx.c.clone(),
        c_tilde,
        c_q,
        c_tilde_q,
        s_star,
        case,
        qflag: plan.q.clone(),
        rows1: plan.rows1.clone(),
        rows2: plan.rows2.clone(),
        fallback_pairs,
    })
}

/// Per-observation building blocks shared by the variance formulas.
struct EvalPieces {
    a1: Vec<f64>,
    a2: Vec<f64>,
    tilde: Vec<f64>,
    centered_sq: Vec<f64>,
    s_loo2: Vec<f64>,
}

fn eval_pieces(plan: &VariancePlan, y: &DVector<f64>, guard: f64) -> Result<EvalPieces> {
    let n = plan.n;
    let ybar = y.iter().sum::<f64>() / n as f64;
    let fitted = &plan.p * y;
    let mut a1 = vec![0.0; n];
    let mut a2 = vec![0.0; n];
    let mut tilde = vec![0.0; n];
    let mut centered_sq = vec![0.0; n];
    let mut s_loo2 = vec![0.0; n];
    for i in 0..n {
        let m = 1.0 - plan.p[(i, i)];
        if m <= guard {
            return Err(Error::LeverageOne { index: i, value: plan.p[(i, i)] });
        }
        let dev = y[i] - ybar;
        centered_sq[i] = dev * dev;
        let p1 = plan.rows1[i].dot(y.as_slice());
        let p2 = plan.rows2[i].dot(y.as_slice());
        a1[i] = y[i] * (y[i] - p1);
        let loo = (y[i] - fitted[i]) / m;
        if plan.qflag[i] {
            a2[i] = centered_sq[i];
            tilde[i] = centered_sq[i];
            s_loo2[i] = centered_sq[i];
        } else {
            a2[i] = y[i] * (y[i] - p2);
            tilde[i] = (y[i] - p1) * (y[i] - p2);
            s_loo2[i] = y[i] * loo;
        }
    }
    Ok(EvalPieces { a1, a2, tilde, centered_sq, s_loo2 })
}

/// The pair product entering -2 sum C~_il (s2 s2)_il, by precomputed case.
fn pair_product(plan: &EvalPieces, vp: &VariancePlan, i: usize, l: usize, ct: f64) -> f64 {
    let n = vp.n;
    let a_of = |j: usize, other: usize| -> f64 {
        if vp.s_star[j * n + other] == 1 {
            plan.a1[j]
        } else {
            plan.a2[j]
        }
    };
    let neg = ct < 0.0;
    match vp.case[i * n + l] {
        1 => a_of(i, l) * a_of(l, i),
        2 => plan.tilde[i] * a_of(l, i),
        3 => a_of(i, l) * plan.tilde[l],
        4 => {
            if neg {
                a_of(i, l) * plan.centered_sq[l]
            } else {
                0.0
            }
        }
        5 => {
            if neg {
                plan.centered_sq[i] * a_of(l, i)
            } else {
                0.0
            }
        }
        _ => {
            if neg {
                plan.centered_sq[i] * plan.centered_sq[l]
            } else {
                0.0
            }
        }
    }
}

fn quadratic_terms(
    pieces: &EvalPieces,
    vp: &VariancePlan,
    c: &DMatrix<f64>,
    ct: &DMatrix<f64>,
    y: &DVector<f64>,
) -> (DVector<f64>, f64, f64) {
    let n = vp.n;
    let cy = c * y;
    let t1 = 4.0 * sum_by(n, |i| cy[i] * cy[i] * pieces.tilde[i]);
    let mut t2 = 0.0;
    for i in 0..n {
        for l in 0..n {
            if l == i {
                continue;
            }
            let ctil = ct[(i, l)];
            if ctil != 0.0 {
                t2 += ctil * pair_product(pieces, vp, i, l, ctil);
            }
        }
    }
    (cy, t1, t1 - 2.0 * t2)
}

/// Relative floor applied when the bias-corrected variance lands at or below
/// zero. The leading diagonal term t1 is nonnegative by construction, so the
/// floored value stays positive whenever any weight touches the data.
const VHAT_FLOOR: f64 = 1e-6;

fn floor_vhat(t1: f64, vhat: f64) -> (f64, bool) {
    if vhat > 0.0 {
        (vhat, false)
    } else {
        (VHAT_FLOOR * t1, true)
    }
}

/// Variance estimate for the full estimator together with its value.
#[derive(Debug, Clone)]
pub struct VhatResult {
    pub theta: f64,
    pub vhat: f64,
    pub fallback_pairs: usize,
    pub conservative: bool,
}

pub fn vhat_theta(vp: &VariancePlan, y: &DVector<f64>, opts: &VhatOptions) -> Result<VhatResult> {
    let pieces = eval_pieces(vp, y, opts.leverage_guard)?;
    let (cy, t1, raw) = quadratic_terms(&pieces, vp, &vp.c, &vp.c_tilde, y);
    let (vhat, floored) = floor_vhat(t1, raw);
    let theta = sum_by(vp.n, |i| y[i] * cy[i]);
    Ok(VhatResult {
        theta,
        vhat,
        fallback_pairs: vp.fallback_pairs,
        conservative: floored || vp.qflag.iter().any(|x| *x),
    })
}

/// Joint variance of (b_hat_1..q, theta_hat_q) with the point estimates.
#[derive(Debug, Clone)]
pub struct WeakIdVariance {
    pub q: usize,
    pub lambda: Vec<f64>,
    pub b_hat: Vec<f64>,
    pub theta: f64,
    pub theta_q: f64,
    pub sigma: DMatrix<f64>,
    pub psd_adjusted: bool,
    pub fallback_pairs: usize,
    pub conservative: bool,
}

pub fn sigma_q_hat(vp: &VariancePlan, y: &DVector<f64>, opts: &VhatOptions) -> Result<WeakIdVariance> {
    let n = vp.n;
    let q = vp.q;
    let pieces = eval_pieces(vp, y, opts.leverage_guard)?;
    let cy_full = &vp.c * y;
    let theta = sum_by(n, |i| y[i] * cy_full[i]);

    let b_hat: Vec<f64> = (0..q).map(|s| sum_by(n, |i| vp.w[(i, s)] * y[i])).collect();
    let mut vb = DMatrix::zeros(q, q);
    for s in 0..q {
        for t in s..q {
            let v = sum_by(n, |i| vp.w[(i, s)] * vp.w[(i, t)] * pieces.s_loo2[i]);
            vb[(s, t)] = v;
            vb[(t, s)] = v;
        }
    }
    let theta_q = theta
        - (0..q)
            .map(|s| vp.lambda[s] * (b_hat[s] * b_hat[s] - vb[(s, s)]))
            .sum::<f64>();

    let (cq_y, t1_q, vt_raw) = quadratic_terms(&pieces, vp, &vp.c_q, &vp.c_tilde_q, y);
    let (vt, floored) = floor_vhat(t1_q, vt_raw);
    let mut sigma = DMatrix::zeros(q + 1, q + 1);
    for s in 0..q {
        for t in 0..q {
            sigma[(s, t)] = vb[(s, t)];
        }
        let cross = 2.0 * sum_by(n, |i| vp.w[(i, s)] * cq_y[i] * pieces.tilde[i]);
        sigma[(s, q)] = cross;
        sigma[(q, s)] = cross;
    }
    sigma[(q, q)] = vt;

    let (sigma, psd_adjusted) = psd_project(sigma);
    Ok(WeakIdVariance {
        q,
        lambda: vp.lambda.clone(),
        b_hat,
        theta,
        theta_q,
        sigma,
        psd_adjusted,
        fallback_pairs: vp.fallback_pairs,
        conservative: floored || vp.qflag.iter().any(|x| *x),
    })
}

/// Clip negative eigenvalues that exceed rounding noise.
fn psd_project(m: DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let eig = SymmetricEigen::new(m.clone());
    let trace: f64 = eig.eigenvalues.iter().sum::<f64>().abs().max(1e-300);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min >= -1e-10 * trace {
        return (m, false);
    }
    let d = eig.eigenvalues.map(|x| x.max(0.0));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose();
    (rebuilt, true)
}

fn chol_with_jitter(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let dim = m.nrows();
    let scale = m.diagonal().amax().max(1e-300);
    let mut jitter = 0.0;
    for _ in 0..12 {
        let mut trial = m.clone();
        for i in 0..dim {
            trial[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(trial) {
            return Ok(c.l());
        }
        jitter = if jitter == 0.0 { 1e-14 * scale } else { jitter * 10.0 };
    }
    Err(Error::RankDeficient)
}

/// Curvature index of the confidence region; zero means the region is an
/// interval and the normal critical value applies.
pub fn curvature(wiv: &WeakIdVariance) -> Result<f64> {
    let q = wiv.q;
    if q == 0 {
        return Ok(0.0);
    }
    let vb = wiv.sigma.view((0, 0), (q, q)).clone_owned();
    let cross = DVector::from_iterator(q, (0..q).map(|s| wiv.sigma[(s, q)]));
    let vt = wiv.sigma[(q, q)];
    let chol = Cholesky::new(vb.clone()).ok_or(Error::RankDeficient)?;
    let solved = chol.solve(&cross);
    let cond = vt - cross.dot(&solved);
    let rho_sq = if vt > 0.0 { 1.0 - cond / vt } else { 1.0 };
    if !(cond > 0.0) || 1.0 - rho_sq < 1e-12 {
        return Err(Error::SingularConditional(1.0 - rho_sq));
    }
    // spectral radius of Vb^{1/2} D Vb^{1/2}
    let eig = SymmetricEigen::new(vb);
    let sqrt_d = eig.eigenvalues.map(|x| x.max(0.0).sqrt());
    let half = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_d) * eig.eigenvectors.transpose();
    let d = DMatrix::from_diagonal(&DVector::from_vec(wiv.lambda.clone()));
    let mid = &half * d * &half;
    let meig = SymmetricEigen::new(mid);
    let radius = meig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    Ok(2.0 * radius / cond.sqrt())
}

/// Critical value for the curved region.
#[derive(Debug, Clone, Copy)]
pub struct CriticalValue {
    pub value: f64,
    pub se: f64,
    pub exact: bool,
    pub draws: usize,
}

static DRAWS_CACHE: OnceLock<Mutex<HashMap<(usize, usize, u64), Arc<Vec<(f64, f64)>>>>> =
    OnceLock::new();

fn simulation_draws(q: usize, draws: usize, seed: u64) -> Arc<Vec<(f64, f64)>> {
    let cache = DRAWS_CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap();
    guard
        .entry((q, draws, seed))
        .or_insert_with(|| {
            let mut rng = stream_rng(seed, q as u64 + 1);
            let mut out = Vec::with_capacity(draws);
            for _ in 0..draws {
                let mut chisq = 0.0;
                for _ in 0..q {
                    let z: f64 = rng.sample(StandardNormal);
                    chisq += z * z;
                }
                let z: f64 = rng.sample(StandardNormal);
                out.push((chisq, z.abs()));
            }
            Arc::new(out)
        })
        .clone()
}

/// Simulated quantile of sqrt(chisq_q + (chi_1 + 1/kappa)^2) - 1/kappa.
/// Monotone in kappa by common random numbers; kappa near zero and q = 0
/// collapse to the exact two-sided normal value.
pub fn critical_value(
    alpha: f64,
    q: usize,
    kappa: f64,
    draws: usize,
    seed: u64,
) -> Result<CriticalValue> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Validation(format!("alpha {alpha} outside (0,1)")));
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    if q == 0 || kappa < 1e-6 {
        return Ok(CriticalValue {
            value: normal.inverse_cdf(1.0 - alpha / 2.0),
            se: 0.0,
            exact: true,
            draws: 0,
        });
    }
    let draws = draws.max(1000);
    let table = simulation_draws(q, draws, seed);
    let inv_k = 1.0 / kappa;
    let mut rho: Vec<f64> = table
        .iter()
        .map(|&(chisq, chi1)| {
            let t = chi1 + inv_k;
            (chisq + t * t).sqrt() - inv_k
        })
        .collect();
    let rank = ((1.0 - alpha) * draws as f64).ceil() as usize;
    let rank = rank.clamp(1, draws);
    let pick = |r: &mut Vec<f64>, idx: usize| -> f64 {
        let (_, v, _) = r.select_nth_unstable_by(idx, |a, b| a.partial_cmp(b).unwrap());
        *v
    };
    let value = pick(&mut rho, rank - 1);
    let spread = (1.96 * (draws as f64 * alpha * (1.0 - alpha)).sqrt()).ceil() as usize;
    let lo_idx = rank.saturating_sub(spread + 1).max(0);
    let hi_idx = (rank + spread - 1).min(draws - 1);
    let lo = pick(&mut rho, lo_idx);
    let hi = pick(&mut rho, hi_idx);
    let se = ((hi - lo) / (2.0 * 1.96)).max(0.0);
    Ok(CriticalValue { value, se, exact: false, draws })
}

/// Inputs of the interval construction.
pub struct CiInputs<'a> {
    pub wiv: &'a WeakIdVariance,
    pub alpha: f64,
    pub draws: usize,
    pub seed: u64,
    /// extra absolute widening, e.g. a sketching bias bound
    pub widen: f64,
}

#[derive(Debug, Clone)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub q: usize,
    pub kappa: f64,
    pub critical: CriticalValue,
    pub theta: f64,
}

pub fn confidence_interval(inputs: &CiInputs) -> Result<ConfidenceInterval> {
    let wiv = inputs.wiv;
    let q = wiv.q;
    if q == 0 {
        let v = wiv.sigma[(0, 0)].max(0.0);
        let crit = critical_value(inputs.alpha, 0, 0.0, inputs.draws, inputs.seed)?;
        let half = crit.value * v.sqrt() + inputs.widen;
        return Ok(ConfidenceInterval {
            lower: wiv.theta - half,
            upper: wiv.theta + half,
            q: 0,
            kappa: 0.0,
            critical: crit,
            theta: wiv.theta,
        });
    }
    let kappa = curvature(wiv)?;
    let crit = critical_value(inputs.alpha, q, kappa, inputs.draws, inputs.seed)?;
    let z = crit.value;
    let (lower, upper) = if q == 1 {
        closed_form_extrema(wiv, z)?
    } else {
        ellipsoid_extrema(wiv, z, inputs.seed)?
    };
    Ok(ConfidenceInterval {
        lower: lower - inputs.widen,
        upper: upper + inputs.widen,
        q,
        kappa,
        critical: crit,
        theta: wiv.theta,
    })
}

/// Real roots of a polynomial given coefficients in descending degree.
fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let maxc = coeffs.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if maxc == 0.0 {
        return Vec::new();
    }
    let mut c: Vec<f64> = coeffs.to_vec();
    while c.len() > 1 && c[0].abs() <= 1e-14 * maxc {
        c.remove(0);
    }
    let d = c.len() - 1;
    match d {
        0 => Vec::new(),
        1 => vec![-c[1] / c[0]],
        _ => {
            // companion matrix of the monic polynomial
            let lead = c[0];
            let mut m = DMatrix::zeros(d, d);
            for i in 1..d {
                m[(i, i - 1)] = 1.0;
            }
            for i in 0..d {
                // coefficient of x^i is c[d - i]
                m[(i, d - 1)] = -c[d - i] / lead;
            }
            let eigs = m.complex_eigenvalues();
            eigs.iter()
                .filter(|e| e.im.abs() <= 1e-8 * (1.0 + e.re.abs()))
                .map(|e| e.re)
                .collect()
        }
    }
}

/// Exact interval endpoints for one conditioning direction: stationary
/// points of the boundary objective solve a quartic. Kept public so the
/// generic search path can be validated against it.
pub fn closed_form_extrema(wiv: &WeakIdVariance, z: f64) -> Result<(f64, f64)> {
    let vb = wiv.sigma[(0, 0)];
    let vt = wiv.sigma[(1, 1)];
    let cross = wiv.sigma[(0, 1)];
    if !(vb > 0.0 && vt > 0.0) {
        return Err(Error::RankDeficient);
    }
    let cond = (vt - cross * cross / vb).max(0.0);
    if cond <= 1e-12 * vt {
        return Err(Error::SingularConditional(cond / vt));
    }
    let s_vb = vb.sqrt();
    let s_cond = cond.sqrt();
    let lam = wiv.lambda[0];
    let b1 = wiv.b_hat[0];
    let tq = wiv.theta_q;
    // drift of theta along the conditioning margin
    let drift = cross / s_vb;
    let g1 = 2.0 * lam * vb / s_cond;
    let g0 = (2.0 * lam * s_vb * b1 + drift) / s_cond;
    let coeffs = [
        g1 * g1,
        -2.0 * g0 * g1,
        1.0 + g0 * g0 - z * z * g1 * g1,
        2.0 * g0 * g1 * z * z,
        -g0 * g0 * z * z,
    ];
    let mut candidates: Vec<f64> = real_roots(&coeffs)
        .into_iter()
        .filter(|u| u.abs() <= z * (1.0 + 1e-12))
        .map(|u| u.clamp(-z, z))
        .collect();
    candidates.push(-z);
    candidates.push(0.0);
    candidates.push(z);
    let f = |u: f64, sign: f64| -> f64 {
        let b = b1 - u * s_vb;
        lam * b * b + tq - drift * u + sign * s_cond * (z * z - u * u).max(0.0).sqrt()
    };
    let mut upper = f64::NEG_INFINITY;
    let mut lower = f64::INFINITY;
    for &u in &candidates {
        upper = upper.max(f(u, 1.0));
        lower = lower.min(f(u, -1.0));
    }
    Ok((lower, upper))
}

/// Maximize g'v + v'Hv/2 over the ball |v| <= radius by projected gradient
/// ascent from many starts, with a boundary polish when the multiplier
/// clears the spectrum.
fn ball_max(h: &DMatrix<f64>, g: &DVector<f64>, radius: f64, seed: u64) -> f64 {
    let dim = g.len();
    let lip = {
        let eig = SymmetricEigen::new(h.clone());
        eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
    };
    let step = 1.0 / (lip + g.norm() / radius.max(1e-12) + 1e-12);
    let fval = |v: &DVector<f64>| g.dot(v) + 0.5 * v.dot(&(h * v));
    let project = |mut v: DVector<f64>| -> DVector<f64> {
        let nrm = v.norm();
        if nrm > radius {
            v *= radius / nrm;
        }
        v
    };
    let mut starts: Vec<DVector<f64>> = vec![DVector::zeros(dim)];
    for j in 0..dim {
        let mut e = DVector::zeros(dim);
        e[j] = radius;
        starts.push(e.clone());
        starts.push(-e);
    }
    let mut rng = stream_rng(seed, 0x6A11);
    for _ in 0..8 {
        let mut v = DVector::from_iterator(
            dim,
            (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)),
        );
        let nrm = v.norm().max(1e-12);
        let shrink: f64 = rng.gen_range(0.0..1.0);
        v *= radius * shrink / nrm;
        starts.push(v);
    }
    let mut best = f64::NEG_INFINITY;
    for start in starts {
        let mut v = project(start);
        let mut prev = fval(&v);
        for _ in 0..50_000 {
            let grad = g + h * &v;
            let cand = project(&v + step * grad);
            let cur = fval(&cand);
            if (cand.clone() - &v).norm() < 1e-14 * (1.0 + radius) {
                v = cand;
                break;
            }
            if cur >= prev {
                v = cand;
                prev = cur;
            } else {
                break;
            }
        }
        // boundary polish: solve the stationarity system at the implied
        // multiplier when it dominates the spectrum
        if v.norm() >= radius * (1.0 - 1e-8) {
            for _ in 0..10 {
                let mu = v.dot(&(h * &v + g)) / (radius * radius);
                if !(mu.is_finite() && mu > 0.0) {
                    break;
                }
                let mut shifted = -h.clone();
                for i in 0..dim {
                    shifted[(i, i)] += mu;
                }
                match Cholesky::new(shifted) {
                    Some(ch) => {
                        let mut w = ch.solve(g);
                        let nrm = w.norm();
                        if nrm > 0.0 {
                            w *= radius / nrm;
                        }
                        if fval(&w) > fval(&v) + 1e-300 {
                            v = w;
                        } else {
                            break;
                        }
                    }
                    None => break,
                }
            }
        }
        best = best.max(fval(&v));
    }
    best
}

/// Interval endpoints via optimization over the ellipsoid. The dispatch in
/// `confidence_interval` prefers the closed form at q = 1; this search
/// handles any q and doubles as its cross-check.
pub fn ellipsoid_extrema(wiv: &WeakIdVariance, z: f64, seed: u64) -> Result<(f64, f64)> {
    let q = wiv.q;
    let dim = q + 1;
    let l = chol_with_jitter(&wiv.sigma)?;
    let mut xhat = DVector::zeros(dim);
    for s in 0..q {
        xhat[s] = wiv.b_hat[s];
    }
    xhat[q] = wiv.theta_q;
    let fx = |x: &DVector<f64>| -> f64 {
        (0..q).map(|s| wiv.lambda[s] * x[s] * x[s]).sum::<f64>() + x[q]
    };
    let mut grad = DVector::zeros(dim);
    for s in 0..q {
        grad[s] = 2.0 * wiv.lambda[s] * xhat[s];
    }
    grad[q] = 1.0;
    let mut hx = DMatrix::zeros(dim, dim);
    for s in 0..q {
        hx[(s, s)] = 2.0 * wiv.lambda[s];
    }
    let h = l.transpose() * &hx * &l;
    let g = l.transpose() * &grad;
    let c0 = fx(&xhat);
    let upper = c0 + ball_max(&h, &g, z, seed);
    let lower = c0 - ball_max(&(-&h), &(-&g), z, seed.wrapping_add(1));
    Ok((lower, upper))
}

/// Quadratic form for testing R beta = 0, scaled so its estimand is the
/// average squared restriction under the inverse Wald metric.
pub fn restriction_form(
    design: &DesignMatrix,
    solver: &Solver,
    r_rows: &DMatrix<f64>,
) -> Result<QuadraticForm> {
    let r = r_rows.nrows();
    let k = design.k;
    if r_rows.ncols() != k {
        return Err(Error::LabelMismatch(format!(
            "restriction matrix has {} columns, design has {k}",
            r_rows.ncols()
        )));
    }
    let solved: Vec<DVector<f64>> = (0..r)
        .map(|i| solver.solve(&r_rows.row(i).transpose().clone_owned()))
        .collect::<Result<_>>()?;
    let mut w = DMatrix::zeros(r, r);
    for i in 0..r {
        for j in 0..r {
            w[(i, j)] = r_rows.row(i).transpose().dot(&solved[j]);
        }
    }
    let chol = Cholesky::new(w).ok_or(Error::RankDeficient)?;
    // F = (1/sqrt(r)) L^-1 R gives A = F'F = (1/r) R' W^-1 R
    let f = chol.l().solve_lower_triangular(r_rows).ok_or(Error::RankDeficient)?;
    let scale = 1.0 / (r as f64).sqrt();
    let rows: Vec<SparseRow> = (0..r)
        .map(|i| {
            SparseRow::new(
                (0..k)
                    .map(|j| (j as u32, f[(i, j)] * scale))
                    .filter(|(_, v)| *v != 0.0)
                    .collect(),
            )
        })
        .collect();
    Ok(QuadraticForm::symmetric(
        crate::sparse::CenteredFactor::plain(rows, k, 1.0),
        r,
        "restriction",
    ))
}

#[derive(Debug, Clone, Copy)]
pub enum RestrictionMode {
    /// simulate the exact null law of the centered statistic
    FixedRank { draws: usize, seed: u64 },
    /// studentize and compare against the one-sided normal tail
    GrowingRank,
}

#[derive(Debug, Clone)]
pub struct TestReport {
    pub stat: f64,
    pub p_value: f64,
    pub rank: usize,
    pub theta: f64,
    pub vhat: f64,
}

/// Test of linear restrictions. The plan must be built with the restriction
/// form; for the fixed-rank mode it must carry all `rank` eigenpairs.
pub fn test_linear_restrictions(
    vp: &VariancePlan,
    y: &DVector<f64>,
    mode: RestrictionMode,
) -> Result<TestReport> {
    let opts = VhatOptions::default();
    match mode {
        RestrictionMode::FixedRank { draws, seed } => {
            let r = vp.q;
            if r == 0 {
                return Err(Error::InsufficientEigen { needed: 1, got: 0 });
            }
            let wiv = sigma_q_hat(vp, y, &opts)?;
            let vb = wiv.sigma.view((0, 0), (r, r)).clone_owned();
            let l = chol_with_jitter(&vb)?;
            let mut rng = stream_rng(seed, 0xF1);
            let inv_r = 1.0 / r as f64;
            let mut exceed = 0usize;
            let draws = draws.max(100);
            for _ in 0..draws {
                let zvec = DVector::from_iterator(
                    r,
                    (0..r).map(|_| rng.sample::<f64, _>(StandardNormal)),
                );
                let zdraw = &l * zvec;
                let stat_draw: f64 =
                    (0..r).map(|s| inv_r * (zdraw[s] * zdraw[s] - vb[(s, s)])).sum();
                if stat_draw >= wiv.theta {
                    exceed += 1;
                }
            }
            Ok(TestReport {
                stat: wiv.theta,
                p_value: (exceed + 1) as f64 / (draws + 1) as f64,
                rank: r,
                theta: wiv.theta,
                vhat: wiv.sigma[(r, r)],
            })
        }
        RestrictionMode::GrowingRank => {
            let res = vhat_theta(vp, y, &opts)?;
            if !(res.vhat > 0.0) {
                return Err(Error::Numerical("nonpositive variance estimate".into()));
            }
            let stat = res.theta / res.vhat.sqrt();
            let normal = Normal::new(0.0, 1.0).unwrap();
            Ok(TestReport {
                stat,
                p_value: 1.0 - normal.cdf(stat),
                rank: vp.q,
                theta: res.theta,
                vhat: res.vhat,
            })
        }
    }
}
