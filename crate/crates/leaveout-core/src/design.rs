//! Panels, design matrices and variance-component quadratic forms.
//!
//! A `Panel` is validated input data. `build_design` turns it into a sparse
//! `DesignMatrix` for one of two worker-firm layouts (levels with person and
//! firm dummies, or first differences with firm dummies only), and
//! `build_quadratic_form` produces the symmetric matrix A that defines a
//! variance component theta = beta' A beta in factored form.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sparse::{CenteredFactor, SparseRow};

/// One observation of the input panel.
#[derive(Debug, Clone)]
pub struct Obs {
    pub worker: String,
    pub firm: String,
    pub period: i64,
    pub outcome: f64,
    pub covariates: Vec<f64>,
}

/// Validated panel with interned worker and firm ids.
#[derive(Debug, Clone)]
pub struct Panel {
    pub rows: Vec<Obs>,
    workers: Vec<String>,
    firms: Vec<String>,
    worker_of_row: Vec<u32>,
    firm_of_row: Vec<u32>,
    /// row indices per worker, sorted by period
    worker_rows: Vec<Vec<u32>>,
    n_cov: usize,
}

impl Panel {
    pub fn from_records(rows: Vec<Obs>) -> Result<Panel> {
        if rows.is_empty() {
            return Err(Error::EmptyPanel);
        }
        let n_cov = rows[0].covariates.len();
        let mut workers: Vec<String> = Vec::new();
        let mut firms: Vec<String> = Vec::new();
        let mut wmap: HashMap<String, u32> = HashMap::new();
        let mut fmap: HashMap<String, u32> = HashMap::new();
        let mut worker_of_row = Vec::with_capacity(rows.len());
        let mut firm_of_row = Vec::with_capacity(rows.len());
        for r in &rows {
            if r.covariates.len() != n_cov {
                return Err(Error::Validation(format!(
                    "worker {} period {}: expected {} covariates, found {}",
                    r.worker,
                    r.period,
                    n_cov,
                    r.covariates.len()
                )));
            }
            if !r.outcome.is_finite() || r.covariates.iter().any(|c| !c.is_finite()) {
                return Err(Error::Validation(format!(
                    "worker {} period {}: non-finite value",
                    r.worker, r.period
                )));
            }
            let w = *wmap.entry(r.worker.clone()).or_insert_with(|| {
                workers.push(r.worker.clone());
                (workers.len() - 1) as u32
            });
            let f = *fmap.entry(r.firm.clone()).or_insert_with(|| {
                firms.push(r.firm.clone());
                (firms.len() - 1) as u32
            });
            worker_of_row.push(w);
            firm_of_row.push(f);
        }
        let mut worker_rows: Vec<Vec<u32>> = vec![Vec::new(); workers.len()];
        for (i, w) in worker_of_row.iter().enumerate() {
            worker_rows[*w as usize].push(i as u32);
        }
        for (w, rs) in worker_rows.iter_mut().enumerate() {
            rs.sort_by_key(|&i| rows[i as usize].period);
            for pair in rs.windows(2) {
                let (a, b) = (pair[0] as usize, pair[1] as usize);
                if rows[a].period == rows[b].period {
                    return Err(Error::DuplicateObservation(
                        workers[w].clone(),
                        rows[a].period,
                    ));
                }
            }
        }
        Ok(Panel { rows, workers, firms, worker_of_row, firm_of_row, worker_rows, n_cov })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn n_workers(&self) -> usize {
        self.workers.len()
    }

    pub fn n_firms(&self) -> usize {
        self.firms.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.n_cov
    }

    pub fn worker_label(&self, w: u32) -> &str {
        &self.workers[w as usize]
    }

    pub fn firm_label(&self, f: u32) -> &str {
        &self.firms[f as usize]
    }

    pub fn worker_of_row(&self, i: usize) -> u32 {
        self.worker_of_row[i]
    }

    pub fn firm_of_row(&self, i: usize) -> u32 {
        self.firm_of_row[i]
    }

    pub fn rows_of_worker(&self, w: u32) -> &[u32] {
        &self.worker_rows[w as usize]
    }

    /// Distinct firms visited by a worker, in order of first visit.
    pub fn firms_of_worker(&self, w: u32) -> Vec<u32> {
        let mut out = Vec::new();
        for &i in &self.worker_rows[w as usize] {
            let f = self.firm_of_row[i as usize];
            if !out.contains(&f) {
                out.push(f);
            }
        }
        out
    }

    /// New panel keeping only the selected workers. Ids are re-interned.
    pub fn subset_workers(&self, keep: &[bool]) -> Result<Panel> {
        let rows: Vec<Obs> = self
            .rows
            .iter()
            .enumerate()
            .filter(|(i, _)| keep[self.worker_of_row[*i] as usize])
            .map(|(_, r)| r.clone())
            .collect();
        Panel::from_records(rows)
    }
}

/// Worker-firm design layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DesignMode {
    /// One row per person-year with person and firm dummies.
    Levels,
    /// One row per mover, firm dummies differenced across the move.
    FirstDifference,
    /// Rows supplied directly, no panel structure.
    Generic,
}

/// What each design column represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnRole {
    PersonEffect(u32),
    FirmEffect(u32),
    Covariate(u32),
    /// Slope column of a grouped random-coefficients layout.
    GroupSlope(u32),
    /// Intercept column of a grouped layout.
    GroupMean(u32),
}

/// Person-year used for estimand weighting.
#[derive(Debug, Clone, Copy)]
pub struct PersonYear {
    pub design_row: u32,
    pub person: u32,
    pub firm: u32,
}

/// How a model is laid out before estimation.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub mode: DesignMode,
    pub use_covariates: bool,
    /// Firm whose effect is normalized to zero. Default: the firm with the
    /// most person-years, ties broken by smallest id.
    pub reference_firm: Option<String>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec { mode: DesignMode::FirstDifference, use_covariates: true, reference_firm: None }
    }
}

/// Sparse design matrix plus the bookkeeping needed by estimands and plans.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub n: usize,
    pub k: usize,
    pub rows: Vec<SparseRow>,
    pub roles: Vec<ColumnRole>,
    pub mode: DesignMode,
    /// panel worker (or group) index behind each design row
    pub row_worker: Vec<u32>,
    /// period label per design row (levels and grouped layouts)
    pub row_period: Vec<i64>,
    /// firm index -> design column (None for the reference firm)
    pub firm_col: Vec<Option<u32>>,
    /// person index -> design column (levels only)
    pub person_col: Vec<Option<u32>>,
    /// person-years backing the estimand weights
    pub person_years: Vec<PersonYear>,
    /// reference firm index, if the layout has firm dummies
    pub reference_firm: Option<u32>,
    /// number of groups for grouped layouts
    pub n_groups: usize,
}

impl DesignMatrix {
    /// Dense normal-equations matrix S = sum_i x_i x_i'.
    pub fn sxx_dense(&self) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.k, self.k);
        for r in &self.rows {
            for (a, va) in r.iter() {
                for (b, vb) in r.iter() {
                    s[(a as usize, b as usize)] += va * vb;
                }
            }
        }
        s
    }

    /// out = S v without forming S.
    pub fn sxx_matvec(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for r in &self.rows {
            let t = r.dot(v);
            r.add_scaled_into(t, out);
        }
    }

    /// diag(S), used as the Jacobi preconditioner.
    pub fn sxx_diag(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.k];
        for r in &self.rows {
            for (j, x) in r.iter() {
                d[j as usize] += x * x;
            }
        }
        d
    }

    /// X' u for a dense vector u of length n.
    pub fn xt_apply(&self, u: &[f64]) -> DVector<f64> {
        let mut out = vec![0.0; self.k];
        for (i, r) in self.rows.iter().enumerate() {
            r.add_scaled_into(u[i], &mut out);
        }
        DVector::from_vec(out)
    }

    /// x_i' v for every row.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| r.dot(v)).collect()
    }

    /// Grouped one-way layout: T_g observations on a group mean each.
    pub fn one_way(group_sizes: &[usize]) -> DesignMatrix {
        let n_groups = group_sizes.len();
        let mut rows = Vec::new();
        let mut row_worker = Vec::new();
        let mut row_period = Vec::new();
        for (g, &t) in group_sizes.iter().enumerate() {
            for s in 0..t {
                rows.push(SparseRow::new(vec![(g as u32, 1.0)]));
                row_worker.push(g as u32);
                row_period.push(s as i64 + 1);
            }
        }
        let n = rows.len();
        DesignMatrix {
            n,
            k: n_groups,
            rows,
            roles: (0..n_groups).map(|g| ColumnRole::GroupMean(g as u32)).collect(),
            mode: DesignMode::Generic,
            row_worker,
            row_period,
            firm_col: Vec::new(),
            person_col: Vec::new(),
            person_years: Vec::new(),
            reference_firm: None,
            n_groups,
        }
    }

    /// Grouped random-coefficients layout: intercept and slope per group,
    /// with a common regressor value per period.
    pub fn random_coefficients(n_groups: usize, xs: &[f64]) -> DesignMatrix {
        let t = xs.len();
        let mut rows = Vec::new();
        let mut row_worker = Vec::new();
        let mut row_period = Vec::new();
        for g in 0..n_groups {
            for (s, &x) in xs.iter().enumerate() {
                rows.push(SparseRow::new(vec![(g as u32, 1.0), ((n_groups + g) as u32, x)]));
                row_worker.push(g as u32);
                row_period.push(s as i64 + 1);
            }
        }
        let mut roles: Vec<ColumnRole> =
            (0..n_groups).map(|g| ColumnRole::GroupMean(g as u32)).collect();
        roles.extend((0..n_groups).map(|g| ColumnRole::GroupSlope(g as u32)));
        DesignMatrix {
            n: n_groups * t,
            k: 2 * n_groups,
            rows,
            roles,
            mode: DesignMode::Generic,
            row_worker,
            row_period,
            firm_col: Vec::new(),
            person_col: Vec::new(),
            person_years: Vec::new(),
            reference_firm: None,
            n_groups,
        }
    }

    /// Fully generic design from explicit rows.
    pub fn from_rows(rows: Vec<SparseRow>, k: usize) -> DesignMatrix {
        let n = rows.len();
        DesignMatrix {
            n,
            k,
            rows,
            roles: (0..k).map(|j| ColumnRole::Covariate(j as u32)).collect(),
            mode: DesignMode::Generic,
            row_worker: (0..n as u32).collect(),
            row_period: vec![0; n],
            firm_col: Vec::new(),
            person_col: Vec::new(),
            person_years: Vec::new(),
            reference_firm: None,
            n_groups: 0,
        }
    }

    /// Keep a subset of rows (same columns). Used by jackknife refits.
    pub fn filter_rows(&self, keep: impl Fn(usize) -> bool) -> DesignMatrix {
        let mut rows = Vec::new();
        let mut row_worker = Vec::new();
        let mut row_period = Vec::new();
        for i in 0..self.n {
            if keep(i) {
                rows.push(self.rows[i].clone());
                row_worker.push(self.row_worker[i]);
                row_period.push(self.row_period[i]);
            }
        }
        DesignMatrix {
            n: rows.len(),
            k: self.k,
            rows,
            roles: self.roles.clone(),
            mode: self.mode,
            row_worker,
            row_period,
            firm_col: self.firm_col.clone(),
            person_col: self.person_col.clone(),
            person_years: self.person_years.clone(),
            reference_firm: self.reference_firm,
            n_groups: self.n_groups,
        }
    }
}

/// Pick the normalized firm: most person-years, ties to the smallest label.
fn choose_reference_firm(panel: &Panel, spec: &ModelSpec) -> Result<u32> {
    if let Some(name) = &spec.reference_firm {
        for f in 0..panel.n_firms() as u32 {
            if panel.firm_label(f) == name {
                return Ok(f);
            }
        }
        return Err(Error::Validation(format!("reference firm {name} not present in panel")));
    }
    let mut counts = vec![0usize; panel.n_firms()];
    for i in 0..panel.n() {
        counts[panel.firm_of_row(i) as usize] += 1;
    }
    let mut best = 0u32;
    for f in 1..panel.n_firms() as u32 {
        let (cb, cf) = (counts[best as usize], counts[f as usize]);
        if cf > cb || (cf == cb && panel.firm_label(f) < panel.firm_label(best)) {
            best = f;
        }
    }
    Ok(best)
}

/// Build the design matrix for a worker-firm panel.
///
/// Levels: k = (#workers) + (#firms - 1) + (#covariates), one row per
/// person-year. First differences: one row per mover with the firm dummies
/// differenced across the move; stayers contribute no row but are retained in
/// the person-year weight list of levels designs.
pub fn build_design(panel: &Panel, spec: &ModelSpec) -> Result<DesignMatrix> {
    if panel.n() == 0 {
        return Err(Error::EmptyPanel);
    }
    for w in 0..panel.n_workers() as u32 {
        let rows = panel.rows_of_worker(w);
        if rows.len() < 2 {
            return Err(Error::SingletonWorker(panel.worker_label(w).to_string()));
        }
        if spec.mode == DesignMode::FirstDifference && rows.len() != 2 {
            return Err(Error::Validation(format!(
                "worker {} has {} observations; first differences require exactly 2",
                panel.worker_label(w),
                rows.len()
            )));
        }
        if panel.firms_of_worker(w).len() > 2 {
            return Err(Error::TooManyFirms(panel.worker_label(w).to_string()));
        }
    }
    let reference = choose_reference_firm(panel, spec)?;
    let n_firms = panel.n_firms();
    let n_cov = if spec.use_covariates { panel.n_covariates() } else { 0 };

    let mut firm_col: Vec<Option<u32>> = vec![None; n_firms];
    let mut roles: Vec<ColumnRole> = Vec::new();
    match spec.mode {
        DesignMode::Levels => {
            for p in 0..panel.n_workers() {
                roles.push(ColumnRole::PersonEffect(p as u32));
            }
        }
        DesignMode::FirstDifference => {}
        DesignMode::Generic => {
            return Err(Error::Validation("generic layouts are built from explicit rows".into()))
        }
    }
    let firm_base = roles.len();
    let mut next = firm_base as u32;
    for f in 0..n_firms as u32 {
        if f == reference {
            continue;
        }
        firm_col[f as usize] = Some(next);
        roles.push(ColumnRole::FirmEffect(f));
        next += 1;
    }
    for c in 0..n_cov {
        roles.push(ColumnRole::Covariate(c as u32));
    }
    let k = roles.len();
    let cov_base = k - n_cov;

    let mut rows = Vec::new();
    let mut row_worker = Vec::new();
    let mut row_period = Vec::new();
    let mut person_years = Vec::new();
    let mut person_col: Vec<Option<u32>> = Vec::new();

    match spec.mode {
        DesignMode::Levels => {
            person_col = (0..panel.n_workers() as u32).map(Some).collect();
            for i in 0..panel.n() {
                let w = panel.worker_of_row(i);
                let f = panel.firm_of_row(i);
                let mut pairs = vec![(w, 1.0)];
                if let Some(c) = firm_col[f as usize] {
                    pairs.push((c, 1.0));
                }
                for (c, v) in panel.rows[i].covariates.iter().enumerate().take(n_cov) {
                    pairs.push(((cov_base + c) as u32, *v));
                }
                rows.push(SparseRow::new(pairs));
                row_worker.push(w);
                row_period.push(panel.rows[i].period);
                person_years.push(PersonYear { design_row: rows.len() as u32 - 1, person: w, firm: f });
            }
        }
        DesignMode::FirstDifference => {
            for w in 0..panel.n_workers() as u32 {
                let obs = panel.rows_of_worker(w);
                let (i0, i1) = (obs[0] as usize, obs[1] as usize);
                let (f0, f1) = (panel.firm_of_row(i0), panel.firm_of_row(i1));
                if f0 == f1 {
                    // stayer: differenced row is identically zero, skip it
                    continue;
                }
                let mut pairs = Vec::new();
                if let Some(c) = firm_col[f1 as usize] {
                    pairs.push((c, 1.0));
                }
                if let Some(c) = firm_col[f0 as usize] {
                    pairs.push((c, -1.0));
                }
                for c in 0..n_cov {
                    let d = panel.rows[i1].covariates[c] - panel.rows[i0].covariates[c];
                    pairs.push(((cov_base + c) as u32, d));
                }
                rows.push(SparseRow::new(pairs));
                row_worker.push(w);
                row_period.push(panel.rows[i1].period);
                let dr = rows.len() as u32 - 1;
                person_years.push(PersonYear { design_row: dr, person: w, firm: f0 });
                person_years.push(PersonYear { design_row: dr, person: w, firm: f1 });
            }
            if rows.is_empty() {
                return Err(Error::Validation("no movers: differenced design is empty".into()));
            }
        }
        DesignMode::Generic => unreachable!(),
    }

    Ok(DesignMatrix {
        n: rows.len(),
        k,
        rows,
        roles,
        mode: spec.mode,
        row_worker,
        row_period,
        firm_col,
        person_col,
        person_years,
        reference_firm: Some(reference),
        n_groups: 0,
    })
}

/// Outcome vector matching the design rows (differenced for movers).
pub fn project_outcome(panel: &Panel, design: &DesignMatrix) -> DVector<f64> {
    match design.mode {
        DesignMode::FirstDifference => {
            let mut y = Vec::with_capacity(design.n);
            for &w in &design.row_worker {
                let obs = panel.rows_of_worker(w);
                let (i0, i1) = (obs[0] as usize, obs[1] as usize);
                y.push(panel.rows[i1].outcome - panel.rows[i0].outcome);
            }
            DVector::from_vec(y)
        }
        _ => DVector::from_vec(panel.rows.iter().map(|r| r.outcome).collect()),
    }
}

/// Within-worker demeaned levels design. Person columns drop out; what
/// remains are firm and covariate deviations. Used by leave-cluster-out at
/// the worker level, where the undemeaned person dummies would make every
/// cluster have leverage one.
pub fn build_demeaned_design(panel: &Panel, spec: &ModelSpec) -> Result<(DesignMatrix, DVector<f64>)> {
    let mut levels = spec.clone();
    levels.mode = DesignMode::Levels;
    let base = build_design(panel, &levels)?;
    let firm_base = panel.n_workers();
    let k = base.k - firm_base;
    let mut rows = Vec::with_capacity(base.n);
    let mut y = Vec::with_capacity(base.n);
    for w in 0..panel.n_workers() as u32 {
        let obs = panel.rows_of_worker(w);
        let t = obs.len() as f64;
        // mean firm/covariate loadings for this worker
        let mut mean: HashMap<u32, f64> = HashMap::new();
        let mut ymean = 0.0;
        for &i in obs {
            ymean += panel.rows[i as usize].outcome / t;
            for (j, v) in base.rows[i as usize].iter() {
                if (j as usize) >= firm_base {
                    *mean.entry(j - firm_base as u32).or_insert(0.0) += v / t;
                }
            }
        }
        for &i in obs {
            let mut pairs: Vec<(u32, f64)> = mean.iter().map(|(&j, &v)| (j, -v)).collect();
            for (j, v) in base.rows[i as usize].iter() {
                if (j as usize) >= firm_base {
                    pairs.push((j - firm_base as u32, v));
                }
            }
            rows.push(SparseRow::new(pairs));
            y.push(panel.rows[i as usize].outcome - ymean);
        }
    }
    let design = DesignMatrix {
        n: rows.len(),
        k,
        rows,
        roles: base.roles[firm_base..].to_vec(),
        mode: DesignMode::Levels,
        row_worker: (0..panel.n() as usize).map(|i| panel.worker_of_row(i)).collect(),
        row_period: (0..panel.n() as usize).map(|i| panel.rows[i].period).collect(),
        firm_col: base
            .firm_col
            .iter()
            .map(|c| c.map(|j| j - firm_base as u32))
            .collect(),
        person_col: Vec::new(),
        person_years: base.person_years.clone(),
        reference_firm: base.reference_firm,
        n_groups: 0,
    };
    Ok((design, DVector::from_vec(y)))
}

/// Symmetric quadratic form A = (F1' F2 + F2' F1) / 2 held in factored form.
#[derive(Debug, Clone)]
pub struct QuadraticForm {
    pub f1: Arc<CenteredFactor>,
    pub f2: Arc<CenteredFactor>,
    pub psd: bool,
    pub rank_hint: usize,
    pub label: String,
}

impl QuadraticForm {
    pub fn symmetric(f: CenteredFactor, rank_hint: usize, label: &str) -> Self {
        let f = Arc::new(f);
        QuadraticForm { f1: f.clone(), f2: f, psd: true, rank_hint, label: label.to_string() }
    }

    pub fn product(f1: CenteredFactor, f2: CenteredFactor, rank_hint: usize, label: &str) -> Self {
        QuadraticForm {
            f1: Arc::new(f1),
            f2: Arc::new(f2),
            psd: false,
            rank_hint,
            label: label.to_string(),
        }
    }

    pub fn k(&self) -> usize {
        self.f1.k()
    }

    /// Do f1 and f2 point at the same factor?
    pub fn is_symmetric_factored(&self) -> bool {
        Arc::ptr_eq(&self.f1, &self.f2)
    }

    /// A v.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.is_symmetric_factored() {
            self.f1.apply_t(&self.f1.apply(v))
        } else {
            let a = self.f1.apply_t(&self.f2.apply(v));
            let b = self.f2.apply_t(&self.f1.apply(v));
            (a + b) * 0.5
        }
    }

    /// v' A v.
    pub fn quad(&self, v: &DVector<f64>) -> f64 {
        if self.is_symmetric_factored() {
            let u = self.f1.apply(v);
            u.dot(&u)
        } else {
            self.f1.apply(v).dot(&self.f2.apply(v))
        }
    }

    /// Dense k x k materialization. Test-scale only.
    pub fn dense(&self) -> DMatrix<f64> {
        let k = self.k();
        let mut a = DMatrix::zeros(k, k);
        let mut e = DVector::zeros(k);
        for j in 0..k {
            e[j] = 1.0;
            let col = self.apply(&e);
            a.set_column(j, &col);
            e[j] = 0.0;
        }
        // symmetrize away roundoff
        let at = a.transpose();
        (a + at) * 0.5
    }

    /// Factor a dense symmetric matrix through its eigendecomposition.
    pub fn from_dense(a: &DMatrix<f64>, label: &str) -> QuadraticForm {
        let k = a.nrows();
        let sym = (a + a.transpose()) * 0.5;
        let eig = nalgebra::SymmetricEigen::new(sym);
        let tol = 1e-12 * eig.eigenvalues.amax().max(1e-300);
        let mut rows1 = Vec::new();
        let mut rows2 = Vec::new();
        let mut psd = true;
        for (l, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam.abs() <= tol {
                continue;
            }
            if lam < 0.0 {
                psd = false;
            }
            let s = lam.abs().sqrt();
            let q = eig.eigenvectors.column(l);
            let r1: Vec<(u32, f64)> =
                (0..k).map(|j| (j as u32, s * q[j])).filter(|p| p.1 != 0.0).collect();
            let r2: Vec<(u32, f64)> = (0..k)
                .map(|j| (j as u32, lam.signum() * s * q[j]))
                .filter(|p| p.1 != 0.0)
                .collect();
            rows1.push(SparseRow::new(r1));
            rows2.push(SparseRow::new(r2));
        }
        let rank = rows1.len();
        if psd {
            QuadraticForm::symmetric(CenteredFactor::plain(rows1, k, 1.0), rank, label)
        } else {
            // A = F1' F2 with F2 = sign-flipped F1, already symmetric as a product
            QuadraticForm {
                f1: Arc::new(CenteredFactor::plain(rows1, k, 1.0)),
                f2: Arc::new(CenteredFactor::plain(rows2, k, 1.0)),
                psd: false,
                rank_hint: rank,
                label: label.to_string(),
            }
        }
    }
}

/// Which units carry the estimand weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// Every person-year counts once (default).
    PersonYear,
    /// Every worker-firm match counts once.
    Match,
}

/// Variance components supported out of the box.
#[derive(Debug, Clone)]
pub enum EstimandSpec {
    /// Weighted variance of firm effects.
    VarFirm,
    /// Weighted variance of person effects (levels designs).
    VarPerson,
    /// Weighted covariance of person and firm effects (levels designs).
    CovPersonFirm,
    /// Variance of the whole linear index x'beta; the numerator of R2.
    CoefficientOfDetermination,
    /// Grouped one-way mean square: uncentered (1/n) sum_g T_g a_g^2 or the
    /// centered person-year weighted variance.
    AnovaGroupVariance { centered: bool },
    /// Same for the slope block of a random-coefficients layout.
    RandomCoefficientVariance { centered: bool },
    /// Any symmetric matrix.
    Custom(QuadraticForm),
}

fn firm_factor(design: &DesignMatrix, units: &[u32], scale: f64) -> CenteredFactor {
    let rows: Vec<SparseRow> = units
        .iter()
        .map(|&f| match design.firm_col[f as usize] {
            Some(c) => SparseRow::new(vec![(c, 1.0)]),
            None => SparseRow::empty(),
        })
        .collect();
    let mut f = CenteredFactor::centered(rows, design.k, scale);
    let _ = &mut f;
    f
}

fn person_factor(design: &DesignMatrix, units: &[u32], scale: f64) -> CenteredFactor {
    let rows: Vec<SparseRow> = units
        .iter()
        .map(|&p| {
            let c = design.person_col[p as usize].expect("levels design");
            SparseRow::new(vec![(c, 1.0)])
        })
        .collect();
    CenteredFactor::centered(rows, design.k, scale)
}

/// Units over which the weighted component is defined: one entry per
/// person-year (or per match) with its person and firm index.
fn weighting_units(design: &DesignMatrix, weighting: Weighting) -> Result<Vec<(u32, u32)>> {
    if design.person_years.is_empty() {
        return Err(Error::LabelMismatch(
            "estimand requires a worker-firm design with person-year bookkeeping".into(),
        ));
    }
    let mut units: Vec<(u32, u32)> =
        design.person_years.iter().map(|py| (py.person, py.firm)).collect();
    if weighting == Weighting::Match {
        units.dedup();
        let mut seen = std::collections::HashSet::new();
        units.retain(|u| seen.insert(*u));
    }
    Ok(units)
}

/// Build the quadratic form of an estimand on a given design.
pub fn build_quadratic_form(
    design: &DesignMatrix,
    spec: &EstimandSpec,
    weighting: Weighting,
) -> Result<QuadraticForm> {
    match spec {
        EstimandSpec::VarFirm => {
            let units = weighting_units(design, weighting)?;
            let m = units.len();
            let firms: Vec<u32> = units.iter().map(|u| u.1).collect();
            let f = firm_factor(design, &firms, 1.0 / (m as f64).sqrt());
            let r = design.firm_col.iter().flatten().count();
            Ok(QuadraticForm::symmetric(f, r, "var_firm"))
        }
        EstimandSpec::VarPerson => {
            if design.person_col.is_empty() {
                return Err(Error::LabelMismatch("person effects need a levels design".into()));
            }
            let units = weighting_units(design, weighting)?;
            let m = units.len();
            let persons: Vec<u32> = units.iter().map(|u| u.0).collect();
            let f = person_factor(design, &persons, 1.0 / (m as f64).sqrt());
            let r = design.person_col.len().saturating_sub(1);
            Ok(QuadraticForm::symmetric(f, r, "var_person"))
        }
        EstimandSpec::CovPersonFirm => {
            if design.person_col.is_empty() {
                return Err(Error::LabelMismatch("person effects need a levels design".into()));
            }
            let units = weighting_units(design, weighting)?;
            let m = units.len();
            let persons: Vec<u32> = units.iter().map(|u| u.0).collect();
            let firms: Vec<u32> = units.iter().map(|u| u.1).collect();
            let s = 1.0 / (m as f64).sqrt();
            let fp = person_factor(design, &persons, s);
            let ff = firm_factor(design, &firms, s);
            let r = 2 * design.firm_col.iter().flatten().count().min(design.person_col.len());
            Ok(QuadraticForm::product(fp, ff, r, "cov_person_firm"))
        }
        EstimandSpec::CoefficientOfDetermination => {
            let f = CenteredFactor::centered(
                design.rows.clone(),
                design.k,
                1.0 / (design.n as f64).sqrt(),
            );
            Ok(QuadraticForm::symmetric(f, design.k.saturating_sub(1), "var_index"))
        }
        EstimandSpec::AnovaGroupVariance { centered } => {
            if design.n_groups == 0 {
                return Err(Error::LabelMismatch("grouped layout required".into()));
            }
            let rows: Vec<SparseRow> = design
                .row_worker
                .iter()
                .map(|&g| SparseRow::new(vec![(g, 1.0)]))
                .collect();
            let scale = 1.0 / (design.n as f64).sqrt();
            let f = if *centered {
                CenteredFactor::centered(rows, design.k, scale)
            } else {
                CenteredFactor::plain(rows, design.k, scale)
            };
            let r = if *centered { design.n_groups - 1 } else { design.n_groups };
            Ok(QuadraticForm::symmetric(f, r, "anova_group_variance"))
        }
        EstimandSpec::RandomCoefficientVariance { centered } => {
            if design.n_groups == 0 || design.k != 2 * design.n_groups {
                return Err(Error::LabelMismatch("random-coefficients layout required".into()));
            }
            let rows: Vec<SparseRow> = design
                .row_worker
                .iter()
                .map(|&g| SparseRow::new(vec![((design.n_groups as u32) + g, 1.0)]))
                .collect();
            let scale = 1.0 / (design.n as f64).sqrt();
            let f = if *centered {
                CenteredFactor::centered(rows, design.k, scale)
            } else {
                CenteredFactor::plain(rows, design.k, scale)
            };
            let r = if *centered { design.n_groups - 1 } else { design.n_groups };
            Ok(QuadraticForm::symmetric(f, r, "rc_slope_variance"))
        }
        EstimandSpec::Custom(q) => {
            if q.k() != design.k {
                return Err(Error::LabelMismatch(format!(
                    "custom form has dimension {}, design has {}",
                    q.k(),
                    design.k
                )));
            }
            Ok(q.clone())
        }
    }
}
