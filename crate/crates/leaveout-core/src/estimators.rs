//! Point estimators of quadratic forms theta = beta' A beta.
//!
//! The leave-out estimator replaces each error variance by
//! sigma2_i = y_i (y_i - x_i' beta_{-i}) and subtracts sum_i B_ii sigma2_i
//! from the plug-in estimate. It is unbiased under unrestricted
//! heteroscedasticity whenever every leverage stays below one. The module
//! also carries the competitors used for benchmarking (homoscedasticity-only
//! correction, jackknives) and the leave-cluster-out generalization.

use nalgebra::{DMatrix, DVector};

use crate::design::{DesignMatrix, DesignMode, EstimandSpec, QuadraticForm, Weighting};
use crate::error::{Error, Result};
use crate::solver::{exact_leverages_with_z, fit, FitResult, LeverageSet, Solver, SolverConfig};
use crate::util::{pairwise_sum, sum_by};

/// Leverage values this close to one abort the estimator.
pub const LEVERAGE_GUARD: f64 = 1e-8;

/// How a point estimate was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    PlugIn,
    LeaveOut,
    HomoscedasticOnly,
    LeaveClusterOut,
    Sketched,
}

/// A point estimate of one variance component.
#[derive(Debug, Clone)]
pub struct VarianceComponentEstimate {
    pub label: String,
    pub method: Method,
    pub theta: f64,
    pub plug_in: f64,
    /// theta = plug_in - bias_correction
    pub bias_correction: f64,
    pub max_p: f64,
    pub negative_sigma2: usize,
}

/// Leave-one-out error variance estimates sigma2_i = y_i (y_i - x_i' beta_{-i}).
/// Negative values are retained; the count is reported alongside.
pub fn sigma2_leave_out(
    y: &DVector<f64>,
    fit: &FitResult,
    lev: &LeverageSet,
    guard: f64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(lev.n());
    for i in 0..lev.n() {
        let loo = crate::solver::leave_out_residual(fit.residuals[i], lev.p[i], i, guard)?;
        out.push(y[i] * loo);
    }
    Ok(out)
}

/// HC2-style variance estimates (y_i - x_i' beta)^2 / (1 - P_ii).
pub fn sigma2_hc2(fit: &FitResult, lev: &LeverageSet, guard: f64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(lev.n());
    for i in 0..lev.n() {
        let loo = crate::solver::leave_out_residual(fit.residuals[i], lev.p[i], i, guard)?;
        out.push(fit.residuals[i] * loo);
    }
    Ok(out)
}

/// Plug-in estimate beta_hat' A beta_hat.
pub fn theta_plug_in(fit: &FitResult, form: &QuadraticForm) -> f64 {
    form.quad(&fit.beta)
}

/// Bias-corrected estimate from precomputed B_ii weights and variances.
pub fn theta_from_sigma2(plug_in: f64, b: &[f64], sigma2: &[f64]) -> f64 {
    plug_in - sum_by(b.len(), |i| b[i] * sigma2[i])
}

/// The leave-out estimator of theta for one of the forms carried by `lev`.
pub fn theta_leave_out(
    y: &DVector<f64>,
    fit: &FitResult,
    lev: &LeverageSet,
    form_idx: usize,
    form: &QuadraticForm,
) -> Result<VarianceComponentEstimate> {
    let sigma2 = sigma2_leave_out(y, fit, lev, LEVERAGE_GUARD)?;
    let plug_in = theta_plug_in(fit, form);
    let theta = theta_from_sigma2(plug_in, &lev.b[form_idx], &sigma2);
    Ok(VarianceComponentEstimate {
        label: form.label.clone(),
        method: Method::LeaveOut,
        theta,
        plug_in,
        bias_correction: plug_in - theta,
        max_p: lev.max_p(),
        negative_sigma2: sigma2.iter().filter(|s| **s < 0.0).count(),
    })
}

/// Homoscedasticity-only corrected estimate using sigma2 = RSS / (n - k).
pub fn theta_homosc(
    design: &DesignMatrix,
    y: &DVector<f64>,
    fit: &FitResult,
    lev: &LeverageSet,
    form_idx: usize,
    form: &QuadraticForm,
) -> Result<VarianceComponentEstimate> {
    let _ = y;
    if design.n <= design.k {
        return Err(Error::DegenerateDof { n: design.n, k: design.k });
    }
    let s2 = fit.rss / (design.n - design.k) as f64;
    let plug_in = theta_plug_in(fit, form);
    let sb = pairwise_sum(&lev.b[form_idx]);
    Ok(VarianceComponentEstimate {
        label: form.label.clone(),
        method: Method::HomoscedasticOnly,
        theta: plug_in - sb * s2,
        plug_in,
        bias_correction: sb * s2,
        max_p: lev.max_p(),
        negative_sigma2: 0,
    })
}

/// Dense pairwise machinery: P = X S^-1 X', B = Z' A Z and the U-statistic
/// kernel C with zero diagonal. Only for problems small enough to hold n x n.
pub struct PairwiseCtx {
    pub z: Vec<DVector<f64>>,
    pub p: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

pub fn build_pairwise(
    design: &DesignMatrix,
    form: &QuadraticForm,
    solver: &Solver,
) -> Result<PairwiseCtx> {
    let n = design.n;
    let (_, z) = exact_leverages_with_z(design, &[], solver, true)?;
    let az: Vec<DVector<f64>> = z.iter().map(|zi| form.apply(zi)).collect();
    let mut p = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, n);
    for i in 0..n {
        for l in i..n {
            let pij = design.rows[i].dot(z[l].as_slice());
            let bij = z[i].dot(&az[l]);
            p[(i, l)] = pij;
            p[(l, i)] = pij;
            b[(i, l)] = bij;
            b[(l, i)] = bij;
        }
    }
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        let mi = 1.0 - p[(i, i)];
        if mi <= LEVERAGE_GUARD {
            return Err(Error::LeverageOne { index: i, value: p[(i, i)] });
        }
        for l in 0..n {
            if l == i {
                continue;
            }
            let ml = 1.0 - p[(l, l)];
            let m_il = -p[(i, l)];
            c[(i, l)] = b[(i, l)] - 0.5 * m_il * (b[(i, i)] / mi + b[(l, l)] / ml);
        }
    }
    Ok(PairwiseCtx { z, p, b, c })
}

impl PairwiseCtx {
    pub fn n(&self) -> usize {
        self.p.nrows()
    }

    /// Row sums (C y)_i = sum_{l != i} C_il y_l.
    pub fn c_times(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.c * y
    }
}

/// U-statistic representation sum_i sum_{l != i} C_il y_i y_l.
pub fn theta_via_pairwise(ctx: &PairwiseCtx, y: &DVector<f64>) -> f64 {
    let cy = ctx.c_times(y);
    sum_by(y.len(), |i| y[i] * cy[i])
}

/// Change-of-variables representation sum_i y_i (A S^-1 x_i)' beta_{-i}.
pub fn theta_via_generalized_regressors(
    ctx: &PairwiseCtx,
    design: &DesignMatrix,
    form: &QuadraticForm,
    fit: &FitResult,
    y: &DVector<f64>,
) -> Result<f64> {
    let n = design.n;
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let m = 1.0 - ctx.p[(i, i)];
        if m <= LEVERAGE_GUARD {
            return Err(Error::LeverageOne { index: i, value: ctx.p[(i, i)] });
        }
        let beta_minus = &fit.beta - &ctx.z[i] * (fit.residuals[i] / m);
        let xt = form.apply(&ctx.z[i]);
        terms.push(y[i] * xt.dot(&beta_minus));
    }
    Ok(pairwise_sum(&terms))
}

/// Leave-cluster-out estimator: sum_i y_i (A S^-1 x_i)' beta_{-c(i)} where
/// the refit drops the whole cluster of observation i.
pub fn theta_cluster(
    design: &DesignMatrix,
    y: &DVector<f64>,
    form: &QuadraticForm,
    clusters: &[u32],
    solver: &Solver,
) -> Result<VarianceComponentEstimate> {
    if clusters.len() != design.n {
        return Err(Error::Validation("cluster labels must cover every design row".into()));
    }
    let f = fit(design, y, solver)?;
    let (lev, z) = exact_leverages_with_z(design, &[], solver, true)?;
    let az: Vec<DVector<f64>> = z.iter().map(|zi| form.apply(zi)).collect();
    let n_clusters = clusters.iter().map(|&c| c as usize + 1).max().unwrap_or(0);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for (i, &c) in clusters.iter().enumerate() {
        members[c as usize].push(i);
    }
    let mut terms = Vec::new();
    for (cid, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let m = idx.len();
        let mut pc = DMatrix::zeros(m, m);
        for (a, &i) in idx.iter().enumerate() {
            for (b, &l) in idx.iter().enumerate() {
                pc[(a, b)] = design.rows[i].dot(z[l].as_slice());
            }
        }
        let eye = DMatrix::identity(m, m);
        let i_minus = &eye - &pc;
        let chol = i_minus
            .cholesky()
            .ok_or_else(|| Error::ClusterLeverageOne(cid.to_string()))?;
        let e_c = DVector::from_iterator(m, idx.iter().map(|&i| f.residuals[i]));
        let u = chol.solve(&e_c);
        // beta_{-c} = beta - sum_{l in c} z_l u_l
        let mut beta_minus = f.beta.clone();
        for (a, &l) in idx.iter().enumerate() {
            beta_minus.axpy(-u[a], &z[l], 1.0);
        }
        for &i in idx {
            terms.push(y[i] * az[i].dot(&beta_minus));
        }
    }
    let theta = pairwise_sum(&terms);
    let plug_in = theta_plug_in(&f, form);
    Ok(VarianceComponentEstimate {
        label: form.label.clone(),
        method: Method::LeaveClusterOut,
        theta,
        plug_in,
        bias_correction: plug_in - theta,
        max_p: lev.max_p(),
        negative_sigma2: 0,
    })
}

/// Which jackknife corrections to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JackknifeVariant {
    /// n theta_PI - (n-1)/n sum_i theta_PI(-i)
    Observation,
    /// T theta_PI - (T-1)/T sum_t theta_PI(-t)
    Panel,
    /// 2 theta_PI - (theta_PI,first half + theta_PI,second half) / 2
    SplitPanel,
}

#[derive(Debug, Clone, Default)]
pub struct JackknifeEstimates {
    pub plug_in: f64,
    pub observation: Option<f64>,
    pub panel: Option<f64>,
    pub split_panel: Option<f64>,
}

/// Jackknife bias corrections of the plug-in estimator. The quadratic form
/// A is held fixed across all refits; only beta is re-estimated.
pub fn theta_jackknife_family(
    design: &DesignMatrix,
    y: &DVector<f64>,
    form: &QuadraticForm,
    cfg: &SolverConfig,
    variants: &[JackknifeVariant],
) -> Result<JackknifeEstimates> {
    let solver = Solver::new(design, cfg)?;
    let f = fit(design, y, &solver)?;
    let plug_in = theta_plug_in(&f, form);
    let mut out = JackknifeEstimates { plug_in, ..Default::default() };

    if variants.contains(&JackknifeVariant::Observation) {
        let (lev, z) = exact_leverages_with_z(design, &[], &solver, true)?;
        let n = design.n as f64;
        let mut subs = Vec::with_capacity(design.n);
        for i in 0..design.n {
            let m = lev.m(i);
            if m <= LEVERAGE_GUARD {
                return Err(Error::LeverageOne { index: i, value: lev.p[i] });
            }
            let beta_minus = &f.beta - &z[i] * (f.residuals[i] / m);
            subs.push(form.quad(&beta_minus));
        }
        out.observation = Some(n * plug_in - (n - 1.0) / n * pairwise_sum(&subs));
    }

    let needs_periods = variants.contains(&JackknifeVariant::Panel)
        || variants.contains(&JackknifeVariant::SplitPanel);
    if needs_periods {
        let mut periods: Vec<i64> = design.row_period.clone();
        periods.sort_unstable();
        periods.dedup();
        let t = periods.len();
        if t < 2 {
            return Err(Error::Validation(
                "panel jackknives need at least two distinct periods".into(),
            ));
        }
        if variants.contains(&JackknifeVariant::Panel) {
            let mut subs = Vec::with_capacity(t);
            for &drop in &periods {
                let sub = design.filter_rows(|i| design.row_period[i] != drop);
                let ssolver = Solver::new(&sub, cfg)?;
                let yv = DVector::from_iterator(
                    sub.n,
                    (0..design.n).filter(|&i| design.row_period[i] != drop).map(|i| y[i]),
                );
                let sf = fit(&sub, &yv, &ssolver)?;
                subs.push(form.quad(&sf.beta));
            }
            let tf = t as f64;
            out.panel = Some(tf * plug_in - (tf - 1.0) / tf * pairwise_sum(&subs));
        }
        if variants.contains(&JackknifeVariant::SplitPanel) {
            if t % 2 != 0 {
                return Err(Error::Validation(
                    "split-panel jackknife needs an even number of periods".into(),
                ));
            }
            let first: std::collections::HashSet<i64> =
                periods[..t / 2].iter().copied().collect();
            let mut halves = Vec::with_capacity(2);
            for half in 0..2 {
                let keep = |i: usize| first.contains(&design.row_period[i]) == (half == 0);
                let sub = design.filter_rows(keep);
                let ssolver = Solver::new(&sub, cfg)?;
                let yv = DVector::from_iterator(
                    sub.n,
                    (0..design.n).filter(|&i| keep(i)).map(|i| y[i]),
                );
                let sf = fit(&sub, &yv, &ssolver)?;
                halves.push(form.quad(&sf.beta));
            }
            out.split_panel = Some(2.0 * plug_in - 0.5 * (halves[0] + halves[1]));
        }
    }
    Ok(out)
}

/// Heteroscedasticity-robust variance of beta_hat built from the leave-out
/// variances: S^-1 (sum_i x_i x_i' sigma2_i) S^-1.
pub fn vcov_beta(
    design: &DesignMatrix,
    sigma2: &[f64],
    solver: &Solver,
) -> Result<DMatrix<f64>> {
    let k = design.k;
    let mut mid = DMatrix::zeros(k, k);
    for (i, r) in design.rows.iter().enumerate() {
        for (a, va) in r.iter() {
            for (b, vb) in r.iter() {
                mid[(a as usize, b as usize)] += va * vb * sigma2[i];
            }
        }
    }
    let cols: Vec<DVector<f64>> = (0..k).map(|j| mid.column(j).clone_owned()).collect();
    let w = solver.solve_many(&cols)?;
    // rows of S^-1 mid are columns of mid' S^-1; solve again for the outer S^-1
    let mut out = DMatrix::zeros(k, k);
    let wt: Vec<DVector<f64>> = (0..k)
        .map(|j| DVector::from_iterator(k, (0..k).map(|i| w[i][j])))
        .collect();
    let v = solver.solve_many(&wt)?;
    for j in 0..k {
        out.set_column(j, &v[j]);
    }
    // symmetrize roundoff
    let outt = out.transpose();
    Ok((out + outt) * 0.5)
}

/// Standard error of a linear contrast v' beta without forming the full
/// covariance matrix.
pub fn lincom_se(
    design: &DesignMatrix,
    sigma2: &[f64],
    solver: &Solver,
    v: &DVector<f64>,
) -> Result<f64> {
    let u = solver.solve(v)?;
    let var = sum_by(design.n, |i| {
        let xu = design.rows[i].dot(u.as_slice());
        xu * xu * sigma2[i]
    });
    if var < 0.0 {
        return Err(Error::Numerical(format!("negative contrast variance {var}")));
    }
    Ok(var.sqrt())
}

/// Full two-way decomposition on a levels design: plug-in,
/// homoscedasticity-only and leave-out estimates of the person and firm
/// variances, their covariance, and the index variance feeding R2.
#[derive(Debug, Clone)]
pub struct AkmDecomposition {
    pub components: Vec<VarianceComponentEstimate>,
    pub sigma2_y: f64,
    pub r2_plug_in: f64,
    pub r2_homosc: f64,
    pub r2_leave_out: f64,
    /// denominator is the raw mean squared deviation of y unless this is set
    pub corrected_denominator: bool,
    pub max_p: f64,
    pub negative_sigma2: usize,
}

pub fn decompose_akm(
    design: &DesignMatrix,
    y: &DVector<f64>,
    cfg: &SolverConfig,
    corrected_denominator: bool,
) -> Result<AkmDecomposition> {
    if design.mode != DesignMode::Levels {
        return Err(Error::LabelMismatch(
            "the two-way decomposition needs a levels design with person effects".into(),
        ));
    }
    let solver = Solver::new(design, cfg)?;
    let f = fit(design, y, &solver)?;
    let specs = [
        EstimandSpec::VarPerson,
        EstimandSpec::VarFirm,
        EstimandSpec::CovPersonFirm,
        EstimandSpec::CoefficientOfDetermination,
    ];
    let forms: Vec<QuadraticForm> = specs
        .iter()
        .map(|s| crate::design::build_quadratic_form(design, s, Weighting::PersonYear))
        .collect::<Result<_>>()?;
    let form_refs: Vec<&QuadraticForm> = forms.iter().collect();
    let (lev, _) = exact_leverages_with_z(design, &form_refs, &solver, false)?;
    let mut components = Vec::new();
    let mut negative = 0usize;
    for (idx, form) in forms.iter().enumerate() {
        let pi_est = VarianceComponentEstimate {
            label: form.label.clone(),
            method: Method::PlugIn,
            theta: theta_plug_in(&f, form),
            plug_in: theta_plug_in(&f, form),
            bias_correction: 0.0,
            max_p: lev.max_p(),
            negative_sigma2: 0,
        };
        let ho = theta_homosc(design, y, &f, &lev, idx, form)?;
        let kss = theta_leave_out(y, &f, &lev, idx, form)?;
        negative = negative.max(kss.negative_sigma2);
        components.push(pi_est);
        components.push(ho);
        components.push(kss);
    }
    let ybar = y.iter().sum::<f64>() / design.n as f64;
    let denom_n = if corrected_denominator { design.n - 1 } else { design.n } as f64;
    let sigma2_y = sum_by(design.n, |i| (y[i] - ybar) * (y[i] - ybar)) / denom_n;
    let idx_pi = components.len() - 3;
    let r2_plug_in = components[idx_pi].theta / sigma2_y;
    let r2_homosc = components[idx_pi + 1].theta / sigma2_y;
    let r2_leave_out = components[idx_pi + 2].theta / sigma2_y;
    Ok(AkmDecomposition {
        components,
        sigma2_y,
        r2_plug_in,
        r2_homosc,
        r2_leave_out,
        corrected_denominator,
        max_p: lev.max_p(),
        negative_sigma2: negative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_design, build_quadratic_form, DesignMatrix, ModelSpec, Obs, Panel};
    use crate::solver::exact_leverages;
    use rand::Rng;

    fn grouped_fixture(sizes: &[usize], seed: u64) -> (DesignMatrix, DVector<f64>, QuadraticForm) {
        let d = DesignMatrix::one_way(sizes);
        let q = build_quadratic_form(
            &d,
            &EstimandSpec::AnovaGroupVariance { centered: false },
            Weighting::PersonYear,
        )
        .unwrap();
        let mut rng = crate::util::stream_rng(seed, 0);
        let y = DVector::from_fn(d.n, |i, _| {
            (d.row_worker[i] as f64 * 0.7).sin() + rng.gen::<f64>() - 0.5
        });
        (d, y, q)
    }

    #[test]
    fn test_three_representations_agree() {
        let (d, y, q) = grouped_fixture(&[3, 4, 5, 3], 11);
        let solver = Solver::new(&d, &SolverConfig::default()).unwrap();
        let f = fit(&d, &y, &solver).unwrap();
        let lev = exact_leverages(&d, &[&q], &solver).unwrap();
        let est = theta_leave_out(&y, &f, &lev, 0, &q).unwrap();
        let ctx = build_pairwise(&d, &q, &solver).unwrap();
        let via_cov = theta_via_generalized_regressors(&ctx, &d, &q, &f, &y).unwrap();
        let via_pair = theta_via_pairwise(&ctx, &y);
        assert!((est.theta - via_cov).abs() < 1e-10 * (1.0 + est.theta.abs()));
        assert!((est.theta - via_pair).abs() < 1e-10 * (1.0 + est.theta.abs()));
    }

    #[test]
    fn test_kernel_diagonal_is_zero_and_symmetric() {
        let (d, _, q) = grouped_fixture(&[3, 3, 4], 5);
        let solver = Solver::new(&d, &SolverConfig::default()).unwrap();
        let ctx = build_pairwise(&d, &q, &solver).unwrap();
        for i in 0..ctx.n() {
            assert_eq!(ctx.c[(i, i)], 0.0);
            for l in 0..ctx.n() {
                assert!((ctx.c[(i, l)] - ctx.c[(l, i)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn test_anova_closed_form_leverages() {
        // one-way layout: P_ii = 1/T_g and B_ii = (1/(n T_g)) (1 - T_g / n)
        let sizes = [2usize, 5, 3];
        let d = DesignMatrix::one_way(&sizes);
        let q = build_quadratic_form(
            &d,
            &EstimandSpec::AnovaGroupVariance { centered: true },
            Weighting::PersonYear,
        )
        .unwrap();
        let solver = Solver::new(&d, &SolverConfig::default()).unwrap();
        let lev = exact_leverages(&d, &[&q], &solver).unwrap();
        let n = d.n as f64;
        for i in 0..d.n {
            let t = sizes[d.row_worker[i] as usize] as f64;
            assert!((lev.p[i] - 1.0 / t).abs() < 1e-12);
            let expect = (1.0 - t / n) / (n * t);
            assert!((lev.b[0][i] - expect).abs() < 1e-12, "row {i}");
        }
    }

    #[test]
    fn test_cluster_estimator_matches_explicit_refit() {
        let (d, y, q) = grouped_fixture(&[4, 4, 5], 21);
        let solver = Solver::new(&d, &SolverConfig::default()).unwrap();
        // clusters: pair adjacent observations
        let clusters: Vec<u32> = (0..d.n).map(|i| (i / 2) as u32).collect();
        let est = theta_cluster(&d, &y, &q, &clusters, &solver).unwrap();
        // oracle: explicit refit without each cluster
        let f = fit(&d, &y, &solver).unwrap();
        let s = d.sxx_dense();
        let mut expect = 0.0;
        for i in 0..d.n {
            let c = clusters[i];
            let keep: Vec<usize> = (0..d.n).filter(|&l| clusters[l] != c).collect();
            let mut sc = s.clone();
            let mut xty = DVector::zeros(d.k);
            for &l in &keep {
                d.rows[l].add_scaled_into(y[l], xty.as_mut_slice());
            }
            for l in 0..d.n {
                if clusters[l] == c {
                    let xl = d.rows[l].to_dense(d.k);
                    sc -= &xl * xl.transpose();
                }
            }
            let beta_minus = sc.cholesky().unwrap().solve(&xty);
            let zi = s.clone().cholesky().unwrap().solve(&d.rows[i].to_dense(d.k));
            expect += y[i] * q.apply(&zi).dot(&beta_minus);
        }
        assert!((est.theta - expect).abs() < 1e-9);
        let _ = f;
    }

    #[test]
    fn test_homosc_equals_leave_out_under_forced_homoscedastic_fit() {
        // when every residual is zero except through sigma2, the HO and
        // leave-out paths still share the plug-in term
        let (d, y, q) = grouped_fixture(&[3, 4, 4], 2);
        let solver = Solver::new(&d, &SolverConfig::default()).unwrap();
        let f = fit(&d, &y, &solver).unwrap();
        let lev = exact_leverages(&d, &[&q], &solver).unwrap();
        let ho = theta_homosc(&d, &y, &f, &lev, 0, &q).unwrap();
        let kss = theta_leave_out(&y, &f, &lev, 0, &q).unwrap();
        assert!((ho.plug_in - kss.plug_in).abs() < 1e-14);
    }

    #[test]
    fn test_jackknife_observation_matches_brute_force() {
        let (d, y, q) = grouped_fixture(&[4, 3, 4], 33);
        let est = theta_jackknife_family(
            &d,
            &y,
            &q,
            &SolverConfig::default(),
            &[JackknifeVariant::Observation],
        )
        .unwrap();
        // brute force: refit without each observation
        let solver = Solver::new(&d, &SolverConfig::default()).unwrap();
        let f = fit(&d, &y, &solver).unwrap();
        let pi = theta_plug_in(&f, &q);
        let mut acc = 0.0;
        for i in 0..d.n {
            let sub = d.filter_rows(|l| l != i);
            let ss = Solver::new(&sub, &SolverConfig::default()).unwrap();
            let yv = DVector::from_iterator(sub.n, (0..d.n).filter(|&l| l != i).map(|l| y[l]));
            let sf = fit(&sub, &yv, &ss).unwrap();
            acc += q.quad(&sf.beta);
        }
        let n = d.n as f64;
        let expect = n * pi - (n - 1.0) / n * acc;
        assert!((est.observation.unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn test_normalization_invariance_of_var_firm() {
        // re-normalizing the reference firm must not move the firm-variance
        // estimate
        let rows = vec![
            Obs { worker: "a".into(), firm: "F1".into(), period: 1, outcome: 0.3, covariates: vec![] },
            Obs { worker: "a".into(), firm: "F2".into(), period: 2, outcome: 1.1, covariates: vec![] },
            Obs { worker: "b".into(), firm: "F2".into(), period: 1, outcome: 0.6, covariates: vec![] },
            Obs { worker: "b".into(), firm: "F3".into(), period: 2, outcome: -0.2, covariates: vec![] },
            Obs { worker: "c".into(), firm: "F3".into(), period: 1, outcome: 0.9, covariates: vec![] },
            Obs { worker: "c".into(), firm: "F1".into(), period: 2, outcome: 0.4, covariates: vec![] },
            Obs { worker: "d".into(), firm: "F1".into(), period: 1, outcome: 0.5, covariates: vec![] },
            Obs { worker: "d".into(), firm: "F2".into(), period: 2, outcome: 0.8, covariates: vec![] },
        ];
        let panel = Panel::from_records(rows).unwrap();
        let mut thetas = Vec::new();
        for reference in ["F1", "F2", "F3"] {
            let spec = ModelSpec {
                mode: DesignMode::FirstDifference,
                use_covariates: true,
                reference_firm: Some(reference.into()),
            };
            let d = build_design(&panel, &spec).unwrap();
            let y = crate::design::project_outcome(&panel, &d);
            let q = build_quadratic_form(&d, &EstimandSpec::VarFirm, Weighting::PersonYear)
                .unwrap();
            let solver = Solver::new(&d, &SolverConfig::default()).unwrap();
            let f = fit(&d, &y, &solver).unwrap();
            let lev = exact_leverages(&d, &[&q], &solver).unwrap();
            thetas.push(theta_leave_out(&y, &f, &lev, 0, &q).unwrap().theta);
        }
        for t in &thetas[1..] {
            assert!((t - thetas[0]).abs() < 1e-8, "{thetas:?}");
        }
    }

    #[test]
    fn test_lincom_se_matches_vcov() {
        let (d, y, _) = grouped_fixture(&[3, 4, 5], 8);
        let solver = Solver::new(&d, &SolverConfig::default()).unwrap();
        let f = fit(&d, &y, &solver).unwrap();
        let lev = exact_leverages(&d, &[], &solver).unwrap();
        let s2 = sigma2_leave_out(&y, &f, &lev, LEVERAGE_GUARD).unwrap();
        let v = DVector::from_vec(vec![1.0, -1.0, 0.0]);
        let se = lincom_se(&d, &s2, &solver, &v).unwrap();
        let vc = vcov_beta(&d, &s2, &solver).unwrap();
        let direct = (v.transpose() * &vc * &v)[(0, 0)].sqrt();
        assert!((se - direct).abs() < 1e-10);
    }
}
