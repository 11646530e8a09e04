//! Randomized invariants that must hold on every design the generators can
//! produce, not just on the hand-built fixtures of the unit tests.

use leaveout_core::design::{build_quadratic_form, DesignMatrix, EstimandSpec, Weighting};
use leaveout_core::estimators::{
    build_pairwise, theta_leave_out, theta_via_generalized_regressors, theta_via_pairwise,
};
use leaveout_core::inference::critical_value;
use leaveout_core::network::{build_split_plan_grouped, prune_panel, MobilityGraph, PruneLevel};
use leaveout_core::simulation::{gen_sbm, SbmConfig};
use leaveout_core::solver::{exact_leverages, fit, Solver, SolverConfig};
use leaveout_core::util::stream_rng;
use leaveout_core::Error;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;

fn any_group_sizes() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(2usize..7, 2..8)
}

fn outcome_for(n: usize, seed: u64) -> DVector<f64> {
    let mut rng = stream_rng(seed, 0);
    DVector::from_iterator(n, (0..n).map(|_| rng.gen::<f64>() * 4.0 - 2.0))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn prop_estimator_routes_agree(sizes in any_group_sizes(), seed in 0u64..1_000_000) {
        let design = DesignMatrix::one_way(&sizes);
        let y = outcome_for(design.n, seed);
        let form = build_quadratic_form(
            &design,
            &EstimandSpec::AnovaGroupVariance { centered: true },
            Weighting::PersonYear,
        ).unwrap();
        let solver = Solver::new(&design, &SolverConfig::default()).unwrap();
        let f = fit(&design, &y, &solver).unwrap();
        let lev = exact_leverages(&design, &[&form], &solver).unwrap();
        let direct = theta_leave_out(&y, &f, &lev, 0, &form).unwrap().theta;
        let ctx = build_pairwise(&design, &form, &solver).unwrap();
        let pairwise = theta_via_pairwise(&ctx, &y);
        let genreg = theta_via_generalized_regressors(&ctx, &design, &form, &f, &y).unwrap();
        let scale = direct.abs().max(1.0);
        prop_assert!((direct - pairwise).abs() <= 1e-9 * scale);
        prop_assert!((direct - genreg).abs() <= 1e-9 * scale);
    }

    #[test]
    fn prop_kernel_is_symmetric_with_zero_diagonal(sizes in any_group_sizes()) {
        let design = DesignMatrix::one_way(&sizes);
        let form = build_quadratic_form(
            &design,
            &EstimandSpec::AnovaGroupVariance { centered: false },
            Weighting::PersonYear,
        ).unwrap();
        let solver = Solver::new(&design, &SolverConfig::default()).unwrap();
        let ctx = build_pairwise(&design, &form, &solver).unwrap();
        for i in 0..ctx.n() {
            prop_assert!(ctx.c[(i, i)].abs() < 1e-14);
            for l in (i + 1)..ctx.n() {
                prop_assert!((ctx.c[(i, l)] - ctx.c[(l, i)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prop_leverages_sum_to_rank_and_stay_in_range(sizes in any_group_sizes()) {
        let design = DesignMatrix::one_way(&sizes);
        let solver = Solver::new(&design, &SolverConfig::default()).unwrap();
        let lev = exact_leverages(&design, &[], &solver).unwrap();
        let total: f64 = lev.p.iter().sum();
        prop_assert!((total - design.k as f64).abs() < 1e-9);
        for &p in &lev.p {
            prop_assert!(p > 0.0 && p <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn prop_grouped_plan_valid_and_flags_small_groups(sizes in any_group_sizes()) {
        let design = DesignMatrix::one_way(&sizes);
        let plan = build_split_plan_grouped(&design).unwrap();
        prop_assert!(plan.validate(&design) < 1e-10);
        for (i, &g) in design.row_worker.iter().enumerate() {
            let t = sizes[g as usize];
            // a second disjoint predictor needs at least two other rows
            prop_assert_eq!(plan.q[i], t < 3);
        }
    }

    #[test]
    fn prop_pruning_is_idempotent(seed in 0u64..10_000, movers in 20usize..60) {
        let cfg = SbmConfig {
            blocks: 2,
            firms_per_block: 4,
            movers,
            stayers_per_firm: 1,
            p_between: 0.3,
        };
        let mut rng = stream_rng(seed, 9);
        let panel = gen_sbm(&cfg, &mut rng).unwrap();
        for level in [PruneLevel::Component, PruneLevel::LeaveOneOut, PruneLevel::LeaveTwoOut] {
            match prune_panel(&panel, level) {
                Ok((pruned, report)) => {
                    let last = report.stages.last().unwrap();
                    let (again, report2) = prune_panel(&pruned, level).unwrap();
                    let relast = report2.stages.last().unwrap();
                    prop_assert_eq!(last.person_years, relast.person_years);
                    prop_assert_eq!(last.firms, relast.firms);
                    prop_assert_eq!(again.rows.len(), pruned.rows.len());
                    let graph = MobilityGraph::from_panel(&pruned).unwrap();
                    match level {
                        PruneLevel::Component => prop_assert!(graph.is_connected()),
                        PruneLevel::LeaveOneOut => {
                            prop_assert!(graph.is_leave_one_out_connected())
                        }
                        PruneLevel::LeaveTwoOut => {
                            prop_assert!(graph.is_leave_two_out_connected())
                        }
                    }
                }
                // tiny draws can prune to nothing; that is a legal outcome
                Err(Error::EmptyPanel) | Err(Error::Disconnected) => {}
                Err(e) => return Err(TestCaseError::fail(format!("unexpected error {e}"))),
            }
        }
    }

    #[test]
    fn prop_critical_value_monotone_in_curvature(
        k1 in 0.05f64..5.0,
        k2 in 0.05f64..5.0,
    ) {
        let (lo, hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
        let a = critical_value(0.05, 1, lo, 20_000, 11).unwrap();
        let b = critical_value(0.05, 1, hi, 20_000, 11).unwrap();
        // common random numbers make the quantile exactly monotone
        prop_assert!(a.value <= b.value + 1e-12);
    }
}
