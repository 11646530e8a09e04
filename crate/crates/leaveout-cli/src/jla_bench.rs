//! Side-by-side accuracy and timing of exact versus sketched leverages on
//! one design, across a grid of projection counts.

use std::time::Instant;

use leaveout_core::{
    build_design, build_quadratic_form, exact_leverages, fit, gen_sbm, jla_bias_bound, jla_sigma2,
    prune_panel, sigma2_leave_out, sketched_leverages, theta_from_sigma2, theta_plug_in,
    DesignMode, ModelSpec, PruneLevel, SbmConfig, SketchConfig, Solver, SolverConfig,
};
use nalgebra::DVector;
use rand::Rng;

use crate::config::RunConfig;
use crate::error::Result;
use crate::ingest::read_panel;
use crate::pipeline::{estimand_spec, prune_level, weighting_of};
use crate::report::{BenchBlock, BenchRow, Report};

/// Run the comparison. With an input file the real outcomes are used; with
/// no input an SBM design is simulated from the `[simulate]` block and
/// outcomes drawn once.
pub fn run_jla_bench(cfg: &RunConfig, grid: &[usize], report: &mut Report) -> Result<()> {
    let mut rng = leaveout_core::util::stream_rng(cfg.seed, 0);
    let panel = if cfg.input.is_empty() {
        let sim = &cfg.simulate;
        gen_sbm(
            &SbmConfig {
                blocks: sim.blocks,
                firms_per_block: sim.firms_per_block,
                movers: sim.movers,
                stayers_per_firm: sim.stayers_per_firm,
                p_between: sim.p_between,
            },
            &mut rng,
        )?
    } else {
        read_panel(std::path::Path::new(&cfg.input))?
    };
    let level = prune_level(&cfg.pruning.level).unwrap_or(PruneLevel::LeaveTwoOut);
    let (panel, _) = prune_panel(&panel, level)?;
    let spec = ModelSpec {
        mode: DesignMode::FirstDifference,
        use_covariates: cfg.model.use_covariates,
        reference_firm: None,
    };
    let design = build_design(&panel, &spec)?;
    let solver = Solver::new(&design, &SolverConfig::default())?;

    let estimand = cfg
        .estimands
        .components
        .first()
        .cloned()
        .unwrap_or_else(|| "var_firm".into());
    let form = build_quadratic_form(&design, &estimand_spec(&estimand)?, weighting_of(cfg))?;

    let t0 = Instant::now();
    let exact = exact_leverages(&design, &[&form], &solver)?;
    let exact_ms = t0.elapsed().as_secs_f64() * 1e3;

    let y = if cfg.input.is_empty() {
        // unit-variance outcomes around zero; accuracy is what matters here
        DVector::from_iterator(
            design.n,
            (0..design.n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)),
        )
    } else {
        leaveout_core::project_outcome(&panel, &design)
    };
    let f = fit(&design, &y, &solver)?;
    let s2_exact = sigma2_leave_out(&y, &f, &exact, 1e-8)?;
    let plug_in = theta_plug_in(&f, &form);
    let theta_exact = theta_from_sigma2(plug_in, &exact.b[0], &s2_exact);

    let fallback = cfg.jla.as_ref().map(|j| j.fallback_threshold).unwrap_or(1e-3);
    let mut rows = Vec::new();
    for &p in grid {
        let t = Instant::now();
        let lev = sketched_leverages(
            &design,
            &[&form],
            &solver,
            &SketchConfig { projections: p, seed: cfg.seed, fallback_threshold: fallback },
        )?;
        let elapsed_ms = t.elapsed().as_secs_f64() * 1e3;
        let s2 = jla_sigma2(&y, &f.residuals, &lev)?;
        let theta_sketched = theta_from_sigma2(plug_in, &lev.b[0], &s2);
        let mut max_p_err = 0.0f64;
        let mut sum_p_err = 0.0;
        let mut max_b_err = 0.0f64;
        for i in 0..design.n {
            let pe = (lev.p[i] - exact.p[i]).abs();
            max_p_err = max_p_err.max(pe);
            sum_p_err += pe;
            max_b_err = max_b_err.max((lev.b[0][i] - exact.b[0][i]).abs());
        }
        rows.push(BenchRow {
            projections: p,
            max_abs_p_error: max_p_err,
            mean_abs_p_error: sum_p_err / design.n as f64,
            max_abs_b_error: max_b_err,
            theta_exact,
            theta_sketched,
            bias_bound: jla_bias_bound(&lev, 0, &s2),
            exact_fallbacks: lev.exact_fallbacks(),
            elapsed_ms,
        });
    }
    report.bench = Some(BenchBlock {
        observations: design.n,
        parameters: design.k,
        exact_elapsed_ms: exact_ms,
        rows,
    });
    Ok(())
}
