//! Orchestration of the estimation pipeline: ingest, prune, design, solve,
//! estimate, and optionally the split-sample variance and intervals.

use std::path::Path;

use leaveout_core::{
    build_demeaned_design, build_design, build_pairwise, build_quadratic_form, build_split_plan,
    confidence_interval, exact_leverages, fit, jla_bias_bound, jla_sigma2, prepare_variance,
    project_outcome, prune_panel, select_q, sigma2_leave_out, sigma_q_hat, sketched_leverages,
    theta_from_sigma2, theta_leave_out, theta_plug_in, top_eigen, vhat_theta, CiInputs,
    DesignMatrix, DesignMode, EigenInfo, EstimandSpec, LeverageSet, MobilityGraph, ModelSpec, Obs,
    Panel, PruneLevel, QuadraticForm, SketchConfig, Solver, SolverConfig, VhatOptions, Weighting,
};
use nalgebra::DVector;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::ingest::read_panel;
use crate::report::{
    pruning_block, write_per_obs, Diagnostics, EigenDiag, EstimateRow, InferenceBlock, IntervalRow,
    JlaBlock, NamedValue, Report, SampleBlock,
};

pub fn estimand_spec(name: &str) -> Result<EstimandSpec> {
    match name {
        "var_firm" => Ok(EstimandSpec::VarFirm),
        "var_person" => Ok(EstimandSpec::VarPerson),
        "cov_person_firm" => Ok(EstimandSpec::CovPersonFirm),
        "r2" => Ok(EstimandSpec::CoefficientOfDetermination),
        other => Err(CliError::Config(format!("unknown estimand '{other}'"))),
    }
}

pub fn weighting_of(cfg: &RunConfig) -> Weighting {
    if cfg.estimands.weighting == "match" {
        Weighting::Match
    } else {
        Weighting::PersonYear
    }
}

pub fn prune_level(name: &str) -> Option<PruneLevel> {
    match name {
        "component" => Some(PruneLevel::Component),
        "leave_one_out" => Some(PruneLevel::LeaveOneOut),
        "leave_two_out" => Some(PruneLevel::LeaveTwoOut),
        _ => None,
    }
}

/// Subtract period means from outcomes, preserving row order.
pub fn adjust_period_effects(panel: &Panel) -> Result<Panel> {
    use std::collections::HashMap;
    let mut sum: HashMap<i64, (f64, usize)> = HashMap::new();
    for obs in &panel.rows {
        let e = sum.entry(obs.period).or_insert((0.0, 0));
        e.0 += obs.outcome;
        e.1 += 1;
    }
    let rows: Vec<Obs> = panel
        .rows
        .iter()
        .map(|obs| {
            let (s, c) = sum[&obs.period];
            let mut adjusted = obs.clone();
            adjusted.outcome -= s / c as f64;
            adjusted
        })
        .collect();
    Ok(Panel::from_records(rows)?)
}

fn model_spec(cfg: &RunConfig) -> ModelSpec {
    ModelSpec {
        mode: if cfg.model.mode == "levels" {
            DesignMode::Levels
        } else {
            DesignMode::FirstDifference
        },
        use_covariates: cfg.model.use_covariates,
        reference_firm: if cfg.model.reference_firm.is_empty() {
            None
        } else {
            Some(cfg.model.reference_firm.clone())
        },
    }
}

/// Everything later stages share: the pruned panel, design, outcome vector,
/// solver, fit and the estimand forms.
pub struct Prepared {
    pub panel: Panel,
    pub design: DesignMatrix,
    pub y: DVector<f64>,
    pub solver: Solver,
    pub fit: leaveout_core::FitResult,
    pub forms: Vec<(String, QuadraticForm)>,
    pub cluster_labels: Option<Vec<u32>>,
}

pub fn prepare(cfg: &RunConfig, report: &mut Report) -> Result<Prepared> {
    let panel = read_panel(Path::new(&cfg.input))?;
    let pruned = match prune_level(&cfg.pruning.level) {
        Some(level) => {
            let (p, stages) = prune_panel(&panel, level)?;
            report.pruning = Some(pruning_block(stages.stages));
            p
        }
        None => panel,
    };
    let pruned = if cfg.model.adjust_period_effects {
        adjust_period_effects(&pruned)?
    } else {
        pruned
    };

    let spec = model_spec(cfg);
    let (design, y, cluster_labels) = match cfg.leave_out.level.as_str() {
        "worker" => {
            let (d, y) = build_demeaned_design(&pruned, &spec)?;
            let labels = d.row_worker.clone();
            (d, y, Some(labels))
        }
        "match" => {
            if spec.mode != DesignMode::Levels {
                return Err(CliError::Config(
                    "match-level leave-out needs model.mode = \"levels\"".into(),
                ));
            }
            let d = build_design(&pruned, &spec)?;
            let y = project_outcome(&pruned, &d);
            let mut labels = Vec::with_capacity(d.n);
            let mut next = 0u32;
            let mut seen = std::collections::HashMap::new();
            for i in 0..d.n {
                let key = (pruned.worker_of_row(i), pruned.firm_of_row(i));
                let id = *seen.entry(key).or_insert_with(|| {
                    let id = next;
                    next += 1;
                    id
                });
                labels.push(id);
            }
            (d, y, Some(labels))
        }
        _ => {
            let d = build_design(&pruned, &spec)?;
            let y = project_outcome(&pruned, &d);
            (d, y, None)
        }
    };

    let solver = Solver::new(&design, &SolverConfig::default())?;
    let fitted = fit(&design, &y, &solver)?;

    let weighting = weighting_of(cfg);
    let mut forms = Vec::new();
    for name in &cfg.estimands.components {
        let spec = estimand_spec(name)?;
        let form = build_quadratic_form(&design, &spec, weighting)?;
        forms.push((name.clone(), form));
    }
    if forms.is_empty() {
        return Err(CliError::Config("no estimands configured".into()));
    }

    report.sample = Some(SampleBlock {
        observations: design.n,
        parameters: design.k,
        dof: design.n as i64 - design.k as i64,
        workers: pruned.n_workers(),
        firms: pruned.n_firms(),
        dense_solver: solver.is_dense(),
    });

    Ok(Prepared { panel: pruned, design, y, solver, fit: fitted, forms, cluster_labels })
}

fn method_name(m: leaveout_core::Method) -> &'static str {
    match m {
        leaveout_core::Method::PlugIn => "plug_in",
        leaveout_core::Method::LeaveOut => "leave_out",
        leaveout_core::Method::HomoscedasticOnly => "homoscedastic",
        leaveout_core::Method::LeaveClusterOut => "leave_cluster_out",
        leaveout_core::Method::Sketched => "sketched",
    }
}

/// Point estimates for every configured estimand: plug-in, homoscedastic
/// and leave-out always; the cluster refit when a cluster level is set; the
/// sketched correction when JLA is configured.
pub fn run_estimates(cfg: &RunConfig, prep: &Prepared, report: &mut Report) -> Result<LeverageSet> {
    let form_refs: Vec<&QuadraticForm> = prep.forms.iter().map(|(_, f)| f).collect();
    let lev = exact_leverages(&prep.design, &form_refs, &prep.solver)?;

    for (idx, (name, form)) in prep.forms.iter().enumerate() {
        let lo = theta_leave_out(&prep.y, &prep.fit, &lev, idx, form)?;
        let ho = leaveout_core::theta_homosc(&prep.design, &prep.y, &prep.fit, &lev, idx, form)?;
        report.estimates.push(EstimateRow {
            estimand: name.clone(),
            method: "plug_in".into(),
            theta: lo.plug_in,
            plug_in: lo.plug_in,
            bias_correction: 0.0,
            se: None,
            negative_sigma2: 0,
        });
        report.estimates.push(EstimateRow {
            estimand: name.clone(),
            method: method_name(ho.method).into(),
            theta: ho.theta,
            plug_in: ho.plug_in,
            bias_correction: ho.bias_correction,
            se: None,
            negative_sigma2: 0,
        });
        report.estimates.push(EstimateRow {
            estimand: name.clone(),
            method: method_name(lo.method).into(),
            theta: lo.theta,
            plug_in: lo.plug_in,
            bias_correction: lo.bias_correction,
            se: None,
            negative_sigma2: lo.negative_sigma2,
        });
        if let Some(labels) = &prep.cluster_labels {
            let cl = leaveout_core::theta_cluster(
                &prep.design,
                &prep.y,
                form,
                labels,
                &prep.solver,
            )?;
            report.estimates.push(EstimateRow {
                estimand: name.clone(),
                method: method_name(cl.method).into(),
                theta: cl.theta,
                plug_in: cl.plug_in,
                bias_correction: cl.bias_correction,
                se: None,
                negative_sigma2: 0,
            });
        }
    }

    if let Some(jla) = &cfg.jla {
        let sk_cfg = SketchConfig {
            projections: jla.projections,
            seed: jla.seed,
            fallback_threshold: jla.fallback_threshold,
        };
        let slev = sketched_leverages(&prep.design, &form_refs, &prep.solver, &sk_cfg)?;
        let sigma2 = jla_sigma2(&prep.y, &prep.fit.residuals, &slev)?;
        let mut bounds = Vec::new();
        for (idx, (name, form)) in prep.forms.iter().enumerate() {
            let plug_in = theta_plug_in(&prep.fit, form);
            let theta = theta_from_sigma2(plug_in, &slev.b[idx], &sigma2);
            report.estimates.push(EstimateRow {
                estimand: name.clone(),
                method: "sketched".into(),
                theta,
                plug_in,
                bias_correction: plug_in - theta,
                se: None,
                negative_sigma2: sigma2.iter().filter(|s| **s < 0.0).count(),
            });
            bounds.push(NamedValue {
                name: name.clone(),
                value: jla_bias_bound(&slev, idx, &sigma2),
            });
        }
        report.jla = Some(JlaBlock {
            projections: jla.projections,
            seed: jla.seed,
            exact_fallbacks: slev.exact_fallbacks(),
            bias_bounds: bounds,
            widen_applied: widen_active(prep.design.n, jla.projections),
        });
    }

    let sigma2 = sigma2_leave_out(&prep.y, &prep.fit, &lev, 1e-8)?;
    report.diagnostics = Some(Diagnostics {
        max_p: lev.max_p(),
        negative_sigma2: sigma2.iter().filter(|s| **s < 0.0).count(),
        eigen: eigen_diagnostics(prep)?,
    });

    if !cfg.per_obs.is_empty() {
        let workers: Vec<String> = prep
            .design
            .row_worker
            .iter()
            .map(|&w| prep.panel.worker_label(w).to_string())
            .collect();
        let b_named: Vec<(String, &[f64])> = prep
            .forms
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), lev.b[i].as_slice()))
            .collect();
        write_per_obs(Path::new(&cfg.per_obs), &workers, &lev.p, &b_named, &sigma2)?;
    }

    Ok(lev)
}

/// The sketching bias bound is added to interval endpoints only when
/// n / p^2 is non-negligible; below this the bound is dominated by Monte
/// Carlo noise in the interval itself.
const WIDEN_FLOOR: f64 = 1e-3;

pub fn widen_active(n: usize, projections: usize) -> bool {
    let p = projections as f64;
    n as f64 / (p * p) >= WIDEN_FLOOR
}

fn eigen_diagnostics(prep: &Prepared) -> Result<Vec<EigenDiag>> {
    let mut out = Vec::new();
    for (name, form) in &prep.forms {
        let r = 8usize.min(prep.design.k);
        let eigen = top_eigen(&prep.design, form, &prep.solver, r)?;
        let lindeberg = lindeberg_stats(&eigen);
        out.push(EigenDiag { estimand: name.clone(), shares: eigen.shares.clone(), lindeberg });
    }
    Ok(out)
}

/// Per eigenvector: max_i w_il^2 over the unit-normalized weight column.
fn lindeberg_stats(eigen: &EigenInfo) -> Vec<f64> {
    let (n, r) = (eigen.w.nrows(), eigen.w.ncols());
    (0..r)
        .map(|l| {
            let mut total = 0.0;
            let mut peak = 0.0f64;
            for i in 0..n {
                let v = eigen.w[(i, l)] * eigen.w[(i, l)];
                total += v;
                peak = peak.max(v);
            }
            if total > 0.0 {
                peak / total
            } else {
                0.0
            }
        })
        .collect()
}

/// Split-sample variance, q selection and the robust intervals for every
/// estimand. First-difference observation-level designs only; the plan is
/// built on the mover network.
pub fn run_inference(cfg: &RunConfig, prep: &Prepared, report: &mut Report) -> Result<()> {
    if prep.design.mode != DesignMode::FirstDifference || prep.cluster_labels.is_some() {
        return Err(CliError::Config(
            "inference requires model.mode = \"first_difference\" and leave_out.level = \"observation\"".into(),
        ));
    }
    let graph = MobilityGraph::from_panel(&prep.panel)?;
    let plan = build_split_plan(&prep.design, &graph, cfg.seed, cfg.inference.plan_cap)?;
    let opts = VhatOptions::default();

    for (name, form) in &prep.forms {
        let ctx = build_pairwise(&prep.design, form, &prep.solver)?;
        let r = lookahead_rank(cfg, prep.design.k);
        let eigen = top_eigen(&prep.design, form, &prep.solver, r)?;
        let q = match cfg.inference.q.as_str() {
            "auto" => select_q(&eigen, cfg.inference.threshold),
            fixed => fixed.parse::<usize>().unwrap_or(0).min(eigen.lambda.len()),
        };

        let widen = interval_widen(cfg, report, name);
        let mut intervals = Vec::new();
        let mut qs = vec![("selected", q)];
        if q >= 1 {
            qs.push(("q_minus_1", q - 1));
        }
        if near_threshold(cfg, &eigen, q) {
            qs.push(("q_plus_1", q + 1));
        }
        for (role, qq) in &qs {
            let vp = prepare_variance(&ctx, &plan, Some(&eigen), *qq)?;
            let wiv = sigma_q_hat(&vp, &prep.y, &opts)?;
            let ci = confidence_interval(&CiInputs {
                wiv: &wiv,
                alpha: cfg.inference.alpha,
                draws: cfg.inference.draws,
                seed: cfg.inference.seed,
                widen,
            })?;
            if *role == "selected" {
                let vp0 = prepare_variance(&ctx, &plan, None, 0)?;
                let vr = vhat_theta(&vp0, &prep.y, &opts)?;
                let q_share =
                    plan.q.iter().filter(|x| **x).count() as f64 / plan.n().max(1) as f64;
                let n = vp0.n;
                let pair_share =
                    vr.fallback_pairs as f64 / (n.max(2) * (n.max(2) - 1)) as f64;
                report.inference.push(InferenceBlock {
                    estimand: name.clone(),
                    theta: wiv.theta,
                    vhat: vr.vhat,
                    se: vr.vhat.max(0.0).sqrt(),
                    q_selected: q,
                    eigen_shares: eigen.shares.clone(),
                    intervals: Vec::new(),
                    union_lower: 0.0,
                    union_upper: 0.0,
                    q_share,
                    fallback_pair_share: pair_share,
                    conservative: vr.conservative,
                });
            }
            intervals.push(IntervalRow {
                role: role.to_string(),
                q: *qq,
                lower: ci.lower,
                upper: ci.upper,
                kappa: ci.kappa,
                critical_value: ci.critical.value,
            });
        }
        let block = report.inference.last_mut().expect("selected interval first");
        block.union_lower =
            intervals.iter().map(|i| i.lower).fold(f64::INFINITY, f64::min);
        block.union_upper =
            intervals.iter().map(|i| i.upper).fold(f64::NEG_INFINITY, f64::max);
        block.intervals = intervals;
    }
    // fill leave-out SE columns from the matching inference blocks
    for row in &mut report.estimates {
        if row.method == "leave_out" {
            if let Some(b) = report.inference.iter().find(|b| b.estimand == row.estimand) {
                row.se = Some(b.se);
            }
        }
    }
    Ok(())
}

fn lookahead_rank(cfg: &RunConfig, k: usize) -> usize {
    let base = match cfg.inference.q.as_str() {
        "auto" => 8,
        fixed => fixed.parse::<usize>().unwrap_or(0) + 2,
    };
    base.clamp(1, k)
}

/// q + 1 is plausible when its share lands within `near_factor` of the
/// selection threshold.
fn near_threshold(cfg: &RunConfig, eigen: &EigenInfo, q: usize) -> bool {
    if q >= eigen.shares.len() {
        return false;
    }
    eigen.shares[q] >= cfg.inference.threshold / cfg.inference.near_factor.max(1.0)
}

fn interval_widen(cfg: &RunConfig, report: &Report, estimand: &str) -> f64 {
    match (&cfg.jla, &report.jla) {
        (Some(jla), Some(block)) if widen_active(block_n(report), jla.projections) => block
            .bias_bounds
            .iter()
            .find(|b| b.name == estimand)
            .map(|b| b.value)
            .unwrap_or(0.0),
        _ => 0.0,
    }
}

fn block_n(report: &Report) -> usize {
    report.sample.as_ref().map(|s| s.observations).unwrap_or(0)
}
