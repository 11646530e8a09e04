//! Monte Carlo driver on the block mobility design: draw a network once,
//! replicate outcomes, summarize estimator bias and interval coverage.

use leaveout_core::{
    build_design, build_pairwise, build_quadratic_form, build_split_plan, confidence_interval,
    exact_leverages, firm_effect_beta, fit, gen_sbm, prepare_variance, prune_panel, select_q,
    sigma2_leave_out, sigma_q_hat, theta_from_sigma2, theta_homosc, theta_plug_in, top_eigen,
    vhat_theta, CiInputs, DesignMode, MobilityGraph, ModelSpec, Panel, PruneLevel, SbmConfig,
    Solver, SolverConfig, VhatOptions,
};
use rand::Rng;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::pipeline::{estimand_spec, prune_level, weighting_of};
use crate::report::{McBlock, Report, SampleBlock, StatRow};

/// Firm head counts per period; the heteroscedasticity model loads on the
/// log sizes at both ends of each move.
fn firm_sizes(panel: &Panel) -> std::collections::HashMap<(u32, i64), usize> {
    let mut sizes = std::collections::HashMap::new();
    for i in 0..panel.n() {
        *sizes.entry((panel.firm_of_row(i), panel.rows[i].period)).or_insert(0) += 1;
    }
    sizes
}

pub fn run_simulate(cfg: &RunConfig, report: &mut Report) -> Result<()> {
    let sim = &cfg.simulate;
    let sbm = SbmConfig {
        blocks: sim.blocks,
        firms_per_block: sim.firms_per_block,
        movers: sim.movers,
        stayers_per_firm: sim.stayers_per_firm,
        p_between: sim.p_between,
    };
    let mut rng = leaveout_core::util::stream_rng(cfg.seed, 0);
    let panel = gen_sbm(&sbm, &mut rng)?;
    let level = prune_level(&cfg.pruning.level).unwrap_or(PruneLevel::LeaveTwoOut);
    let (panel, prune_report) = prune_panel(&panel, level)?;
    report.pruning = Some(crate::report::pruning_block(prune_report.stages));

    let spec = ModelSpec {
        mode: DesignMode::FirstDifference,
        use_covariates: false,
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
    let lev = exact_leverages(&design, &[&form], &solver)?;

    // independent normal firm effects, scaled to the configured variance
    let psi: Vec<f64> = (0..panel.n_firms())
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * sim.psi_var.sqrt())
        .collect();
    let beta = firm_effect_beta(&design, &psi)?;
    let theta_true = form.quad(&beta);

    // log sigma2 = h0 + h1 B + h2 P + h3 ln L2 + h4 ln L1
    let sizes = firm_sizes(&panel);
    let h = sim.hetero;
    let sigma2: Vec<f64> = (0..design.n)
        .map(|i| {
            let w = design.row_worker[i];
            let obs = panel.rows_of_worker(w);
            let (i0, i1) = (obs[0] as usize, obs[1] as usize);
            let l1 = sizes[&(panel.firm_of_row(i0), panel.rows[i0].period)] as f64;
            let l2 = sizes[&(panel.firm_of_row(i1), panel.rows[i1].period)] as f64;
            (h[0] + h[1] * lev.b[0][i] + h[2] * lev.p[i] + h[3] * l2.ln() + h[4] * l1.ln()).exp()
        })
        .collect();

    report.sample = Some(SampleBlock {
        observations: design.n,
        parameters: design.k,
        dof: design.n as i64 - design.k as i64,
        workers: panel.n_workers(),
        firms: panel.n_firms(),
        dense_solver: solver.is_dense(),
    });

    // interval machinery shared by every replication
    let ci_setup = if sim.with_ci {
        let graph = MobilityGraph::from_panel(&panel)?;
        let plan = build_split_plan(&design, &graph, cfg.seed, cfg.inference.plan_cap)?;
        let ctx = build_pairwise(&design, &form, &solver)?;
        let eigen = top_eigen(&design, &form, &solver, 8.min(design.k))?;
        let q = match cfg.inference.q.as_str() {
            "auto" => select_q(&eigen, cfg.inference.threshold),
            fixed => fixed.parse::<usize>().unwrap_or(0).min(eigen.lambda.len()),
        };
        let vp = prepare_variance(&ctx, &plan, Some(&eigen), q)?;
        let vp0 = prepare_variance(&ctx, &plan, None, 0)?;
        Some((vp, vp0))
    } else {
        None
    };

    let scenario = leaveout_core::McScenario {
        label: estimand.clone(),
        reps: sim.reps,
        seed: cfg.seed.wrapping_add(1),
    };
    let opts = VhatOptions::default();
    let mc = leaveout_core::monte_carlo(&design, &beta, &sigma2, &scenario, |_rep, y| {
        let f = fit(&design, y, &solver)?;
        let plug_in = theta_plug_in(&f, &form);
        let s2 = sigma2_leave_out(y, &f, &lev, 1e-8)?;
        let lo = theta_from_sigma2(plug_in, &lev.b[0], &s2);
        let ho = theta_homosc(&design, y, &f, &lev, 0, &form)?.theta;
        let mut stats = vec![plug_in, ho, lo];
        if let Some((vp, vp0)) = &ci_setup {
            let vr = vhat_theta(vp0, y, &opts)?;
            let wiv = sigma_q_hat(vp, y, &opts)?;
            let ci = confidence_interval(&CiInputs {
                wiv: &wiv,
                alpha: cfg.inference.alpha,
                draws: cfg.inference.draws,
                seed: cfg.inference.seed,
                widen: 0.0,
            })?;
            let cover = (ci.lower <= theta_true && theta_true <= ci.upper) as usize as f64;
            stats.push(vr.vhat);
            stats.push(cover);
        }
        Ok(stats)
    })?;

    let mut names = vec!["theta_plug_in", "theta_homoscedastic", "theta_leave_out"];
    if sim.with_ci {
        names.push("vhat");
        names.push("ci_cover");
    }
    let statistics = names
        .iter()
        .enumerate()
        .map(|(j, name)| StatRow {
            name: name.to_string(),
            mean: mc.means[j],
            var: mc.vars[j],
            se_mean: mc.se_means[j],
        })
        .collect();
    report.monte_carlo = Some(McBlock {
        reps: mc.reps,
        theta_true,
        statistics,
        ci_coverage: if sim.with_ci { Some(mc.means[4]) } else { None },
    });
    Ok(())
}

/// Simulate refuses to run on an implicit seed; the flag or an explicit
/// config key is required so replications are reproducible on purpose.
pub fn require_explicit_seed(flag_seed: Option<u64>, config_path: Option<&str>) -> Result<()> {
    if flag_seed.is_some() {
        return Ok(());
    }
    if let Some(path) = config_path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {path}: {e}")))?;
        let value: toml::Value = text
            .parse()
            .map_err(|e| CliError::Config(format!("{path}: {e}")))?;
        if value.get("seed").is_some() {
            return Ok(());
        }
    }
    Err(CliError::Config("simulate requires an explicit --seed (or a seed key in the config file)".into()))
}
