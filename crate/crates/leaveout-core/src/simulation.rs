//! Synthetic designs and Monte Carlo drivers.
//!
//! The stochastic block mobility model concentrates worker flows inside
//! blocks; lowering the between-block rate starves the network of
//! identifying moves and pushes the top eigenvalue share toward one, which
//! is the regime where normal inference breaks down.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use crate::design::{DesignMatrix, Obs, Panel};
use crate::error::{Error, Result};
use crate::util::{mean_var, stream_rng};

#[derive(Debug, Clone)]
pub struct SbmConfig {
    pub blocks: usize,
    pub firms_per_block: usize,
    pub movers: usize,
    pub stayers_per_firm: usize,
    /// probability that a move crosses blocks
    pub p_between: f64,
}

impl Default for SbmConfig {
    fn default() -> Self {
        SbmConfig {
            blocks: 2,
            firms_per_block: 15,
            movers: 300,
            stayers_per_firm: 0,
            p_between: 0.08,
        }
    }
}

/// Two-period panel of movers (plus optional stayers) on a block mobility
/// structure. Outcomes are zero placeholders; fill them from a wage draw.
pub fn gen_sbm(cfg: &SbmConfig, rng: &mut impl Rng) -> Result<Panel> {
    if cfg.blocks == 0 || cfg.firms_per_block == 0 || cfg.movers == 0 {
        return Err(Error::Validation("empty block configuration".into()));
    }
    let total = cfg.blocks * cfg.firms_per_block;
    let firm_label = |f: usize| format!("f{f}");
    let mut rows = Vec::new();
    for m in 0..cfg.movers {
        let f1 = rng.gen_range(0..total);
        let b1 = f1 / cfg.firms_per_block;
        let cross = cfg.blocks > 1
            && (cfg.firms_per_block == 1 || rng.gen_bool(cfg.p_between));
        let f2 = if cross {
            let mut b2 = rng.gen_range(0..cfg.blocks - 1);
            if b2 >= b1 {
                b2 += 1;
            }
            b2 * cfg.firms_per_block + rng.gen_range(0..cfg.firms_per_block)
        } else {
            let mut f = rng.gen_range(0..cfg.firms_per_block - 1);
            if f >= f1 % cfg.firms_per_block {
                f += 1;
            }
            b1 * cfg.firms_per_block + f
        };
        for (t, f) in [(1i64, f1), (2i64, f2)] {
            rows.push(Obs {
                worker: format!("m{m}"),
                firm: firm_label(f),
                period: t,
                outcome: 0.0,
                covariates: vec![],
            });
        }
    }
    for f in 0..total {
        for s in 0..cfg.stayers_per_firm {
            for t in [1i64, 2] {
                rows.push(Obs {
                    worker: format!("s{f}_{s}"),
                    firm: firm_label(f),
                    period: t,
                    outcome: 0.0,
                    covariates: vec![],
                });
            }
        }
    }
    Panel::from_records(rows)
}

/// Coefficient vector reproducing the given per-firm effects on a design
/// with firm columns; the reference firm's effect is absorbed.
pub fn firm_effect_beta(design: &DesignMatrix, psi: &[f64]) -> Result<DVector<f64>> {
    if design.firm_col.is_empty() {
        return Err(Error::LabelMismatch("design has no firm columns".into()));
    }
    if psi.len() != design.firm_col.len() {
        return Err(Error::LabelMismatch(format!(
            "{} firm effects for {} firms",
            psi.len(),
            design.firm_col.len()
        )));
    }
    let reference = design
        .reference_firm
        .map(|f| psi[f as usize])
        .unwrap_or(0.0);
    let mut beta = DVector::zeros(design.k);
    for (f, col) in design.firm_col.iter().enumerate() {
        if let Some(c) = col {
            beta[*c as usize] = psi[f] - reference;
        }
    }
    Ok(beta)
}

/// Error variance profiles for simulated outcomes.
#[derive(Debug, Clone)]
pub enum HeteroModel {
    Homoscedastic { s2: f64 },
    /// log-linear in per-observation leverage diagnostics
    LeverageLinked { base: f64, on_b: f64, on_p: f64 },
    PerObservation(Vec<f64>),
}

pub fn sigma2_profile(
    model: &HeteroModel,
    p_diag: &[f64],
    b_diag: &[f64],
) -> Result<Vec<f64>> {
    match model {
        HeteroModel::Homoscedastic { s2 } => {
            if *s2 < 0.0 {
                return Err(Error::Validation("negative variance".into()));
            }
            Ok(vec![*s2; p_diag.len()])
        }
        HeteroModel::LeverageLinked { base, on_b, on_p } => Ok(p_diag
            .iter()
            .zip(b_diag)
            .map(|(p, b)| (base + on_b * b + on_p * p).exp())
            .collect()),
        HeteroModel::PerObservation(v) => {
            if v.len() != p_diag.len() {
                return Err(Error::LabelMismatch(format!(
                    "{} variances for {} observations",
                    v.len(),
                    p_diag.len()
                )));
            }
            Ok(v.clone())
        }
    }
}

/// One outcome draw y = X beta + sigma * eps with independent normal errors.
pub fn gen_wages(
    design: &DesignMatrix,
    beta: &DVector<f64>,
    sigma2: &[f64],
    rng: &mut impl Rng,
) -> DVector<f64> {
    let xb = design.apply(beta.as_slice());
    DVector::from_iterator(
        design.n,
        xb.iter().zip(sigma2).map(|(m, s2)| {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            m + s2.max(0.0).sqrt() * z
        }),
    )
}

#[derive(Debug, Clone)]
pub struct McScenario {
    pub label: String,
    pub reps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct McReport {
    pub label: String,
    pub reps: usize,
    /// per-statistic Monte Carlo means
    pub means: Vec<f64>,
    /// per-statistic Monte Carlo variances
    pub vars: Vec<f64>,
    /// standard errors of the means
    pub se_means: Vec<f64>,
}

/// Replicate a statistic across outcome draws. Each replication gets its own
/// random substream, so results do not depend on thread scheduling.
pub fn monte_carlo<F>(
    design: &DesignMatrix,
    beta: &DVector<f64>,
    sigma2: &[f64],
    sc: &McScenario,
    stat: F,
) -> Result<McReport>
where
    F: Fn(usize, &DVector<f64>) -> Result<Vec<f64>> + Sync,
{
    if sigma2.len() != design.n {
        return Err(Error::LabelMismatch(format!(
            "{} variances for {} observations",
            sigma2.len(),
            design.n
        )));
    }
    let xb = design.apply(beta.as_slice());
    let draws: Vec<Vec<f64>> = (0..sc.reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream_rng(sc.seed, rep as u64);
            let y = DVector::from_iterator(
                design.n,
                xb.iter().zip(sigma2).map(|(m, s2)| {
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    m + s2.max(0.0).sqrt() * z
                }),
            );
            stat(rep, &y)
        })
        .collect::<Result<_>>()?;
    let dim = draws.first().map(|d| d.len()).unwrap_or(0);
    let mut means = Vec::with_capacity(dim);
    let mut vars = Vec::with_capacity(dim);
    let mut se_means = Vec::with_capacity(dim);
    for j in 0..dim {
        let col: Vec<f64> = draws.iter().map(|d| d[j]).collect();
        let (m, v) = mean_var(&col);
        means.push(m);
        vars.push(v);
        se_means.push((v / col.len() as f64).sqrt());
    }
    Ok(McReport { label: sc.label.clone(), reps: sc.reps, means, vars, se_means })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_quadratic_form, EstimandSpec, Weighting};
    use crate::estimators::{build_pairwise, theta_via_pairwise};
    use crate::solver::{Solver, SolverConfig};

    #[test]
    fn test_sbm_panel_shapes_and_block_mixing() {
        let cfg = SbmConfig {
            blocks: 2,
            firms_per_block: 10,
            movers: 2000,
            stayers_per_firm: 1,
            p_between: 0.2,
        };
        let mut rng = stream_rng(42, 0);
        let panel = gen_sbm(&cfg, &mut rng).unwrap();
        assert_eq!(panel.n_workers(), 2000 + 20);
        assert_eq!(panel.n(), 2 * (2000 + 20));
        let mut cross = 0usize;
        for m in 0..2000u32 {
            let firms = panel.firms_of_worker(m);
            assert_eq!(firms.len(), 2);
            let labels: Vec<usize> = firms
                .iter()
                .map(|&f| panel.firm_label(f)[1..].parse::<usize>().unwrap())
                .collect();
            if labels[0] / 10 != labels[1] / 10 {
                cross += 1;
            }
        }
        let share = cross as f64 / 2000.0;
        assert!((share - 0.2).abs() < 0.04, "cross share {share}");
    }

    #[test]
    fn test_monte_carlo_is_deterministic_per_seed() {
        let d = DesignMatrix::one_way(&[3, 3, 3]);
        let beta = DVector::from_element(d.k, 1.0);
        let sigma2 = vec![0.5; d.n];
        let sc = McScenario { label: "det".into(), reps: 64, seed: 9 };
        let f = |_: usize, y: &DVector<f64>| Ok(vec![y.sum(), y.norm_squared()]);
        let a = monte_carlo(&d, &beta, &sigma2, &sc, f).unwrap();
        let b = monte_carlo(&d, &beta, &sigma2, &sc, f).unwrap();
        assert_eq!(a.means, b.means);
        assert_eq!(a.vars, b.vars);
    }

    #[test]
    fn test_zero_variance_reproduces_the_mean_exactly() {
        let d = DesignMatrix::one_way(&[2, 4]);
        let beta = DVector::from_vec(vec![1.5, -0.5]);
        let mut rng = stream_rng(1, 0);
        let y = gen_wages(&d, &beta, &vec![0.0; d.n], &mut rng);
        let xb = d.apply(beta.as_slice());
        for i in 0..d.n {
            assert_eq!(y[i], xb[i]);
        }
    }

    #[test]
    fn test_leave_out_estimate_is_unbiased_in_small_monte_carlo() {
        let d = DesignMatrix::one_way(&[4, 3, 5, 4]);
        let solver = Solver::new(&d, &SolverConfig::default()).unwrap();
        let form = build_quadratic_form(
            &d,
            &EstimandSpec::AnovaGroupVariance { centered: false },
            Weighting::PersonYear,
        )
        .unwrap();
        let ctx = build_pairwise(&d, &form, &solver).unwrap();
        let beta = DVector::from_vec(vec![1.0, -2.0, 0.5, 0.0]);
        let theta_true = form.quad(&beta);
        // strong heteroscedasticity across groups
        let sigma2: Vec<f64> = d
            .row_worker
            .iter()
            .map(|&g| [0.3, 2.0, 0.8, 1.5][g as usize])
            .collect();
        let sc = McScenario { label: "unbiased".into(), reps: 4000, seed: 77 };
        let rep = monte_carlo(&d, &beta, &sigma2, &sc, |_, y| {
            Ok(vec![theta_via_pairwise(&ctx, y)])
        })
        .unwrap();
        let err = (rep.means[0] - theta_true).abs();
        assert!(err < 4.0 * rep.se_means[0], "bias {err} vs se {}", rep.se_means[0]);
    }
}
