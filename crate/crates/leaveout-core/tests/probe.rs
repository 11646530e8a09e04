//! Scratch diagnostics, not part of the suite.

use leaveout_core::design::{build_design, build_quadratic_form, DesignMode, EstimandSpec, ModelSpec, Weighting};
use leaveout_core::estimators::build_pairwise;
use leaveout_core::inference::prepare_variance;
use leaveout_core::network::{build_split_plan, prune_panel, MobilityGraph, PruneLevel};
use leaveout_core::simulation::{gen_sbm, SbmConfig};
use leaveout_core::solver::{Solver, SolverConfig};
use leaveout_core::util::stream_rng;

#[test]
#[ignore]
fn probe_variance_plan_cases() {
    let cfg = SbmConfig {
        blocks: 2,
        firms_per_block: 10,
        movers: 250,
        stayers_per_firm: 0,
        p_between: 0.5,
    };
    for panel_seed in 300..305u64 {
        let mut rng = stream_rng(panel_seed, 0);
        let panel = gen_sbm(&cfg, &mut rng).unwrap();
        let (pruned, _) = prune_panel(&panel, PruneLevel::LeaveTwoOut).unwrap();
        let spec = ModelSpec { mode: DesignMode::FirstDifference, use_covariates: false, reference_firm: None };
        let design = build_design(&pruned, &spec).unwrap();
        if design.n < 200 {
            continue;
        }
        let graph = MobilityGraph::from_panel(&pruned).unwrap();
        let form = build_quadratic_form(&design, &EstimandSpec::VarFirm, Weighting::PersonYear).unwrap();
        let solver = Solver::new(&design, &SolverConfig::default()).unwrap();
        let ctx = build_pairwise(&design, &form, &solver).unwrap();
        for (cap, seed) in [(1usize, 0u64), (1, 1), (2, 0), (2, 1), (3, 0), (3, 1), (64, 0)] {
            let Ok(plan) = build_split_plan(&design, &graph, seed, cap) else { continue };
            let nq = plan.q.iter().filter(|q| **q).count();
            let worst = plan.validate(&design);
            let vp = prepare_variance(&ctx, &plan, None, 0).unwrap();
            let n = vp.n;
            let contains = |r: &leaveout_core::SparseRow, j: usize| r.indices().contains(&(j as u32));
            let disjoint = |a: &leaveout_core::SparseRow, b: &leaveout_core::SparseRow| {
                a.indices().iter().all(|j| !b.indices().contains(j))
            };
            let mut counts = [0usize; 7];
            let mut active = [0usize; 7];
            let mut active_weight = [0.0f64; 7];
            for i in 0..n {
                for l in 0..n {
                    if l == i { continue; }
                    let in1 = contains(&plan.rows1[i], l);
                    let in2 = contains(&plan.rows2[i], l);
                    let unavail_i = in1 && plan.q[i];
                    let in1r = contains(&plan.rows1[l], i);
                    let in2r = contains(&plan.rows2[l], i);
                    let unavail_l = in1r && plan.q[l];
                    let cs: usize = if !unavail_i && !unavail_l {
                        let ri = if in1 { &plan.rows2[i] } else { &plan.rows1[i] };
                        let rl = if in1r { &plan.rows2[l] } else { &plan.rows1[l] };
                        if disjoint(ri, rl) { 1 } else if !in1 && !in2 { 2 } else if !in1r && !in2r { 3 } else { 4 }
                    } else if !unavail_i { 4 } else if !unavail_l { 5 } else { 6 };
                    counts[cs] += 1;
                    if vp.c_tilde[(i, l)] != 0.0 {
                        active[cs] += 1;
                        active_weight[cs] += vp.c_tilde[(i, l)].abs();
                    }
                }
            }
            println!("active |C~| mass by case: {active_weight:?}");
            println!(
                "panel {panel_seed} n {n} cap {cap} plan seed {seed}: q {nq} validate {worst:.2e} fallback {} cases {:?} active {:?}",
                vp.fallback_pairs, counts, active
            );
            let s1_sizes: Vec<usize> = plan.rows1.iter().map(|r| r.nnz()).collect();
            let s2_sizes: Vec<usize> = plan.rows2.iter().map(|r| r.nnz()).collect();
            let hist = |v: &[usize]| {
                let mut h = std::collections::BTreeMap::new();
                for &x in v {
                    *h.entry(x).or_insert(0usize) += 1;
                }
                h
            };
            println!("  s1 sizes {:?}", hist(&s1_sizes));
            println!("  s2 sizes {:?}", hist(&s2_sizes));
            // how often is the case-4 overlap in the second supports vs first
            let mut mutual = 0usize;
            let mut overlap_kinds = [0usize; 4];
            for i in 0..n {
                for l in (i + 1)..n {
                    let i_in_l = contains(&plan.rows1[l], i) || contains(&plan.rows2[l], i);
                    let l_in_i = contains(&plan.rows1[i], l) || contains(&plan.rows2[i], l);
                    if i_in_l && l_in_i {
                        mutual += 1;
                        let ri = if contains(&plan.rows1[i], l) { &plan.rows2[i] } else { &plan.rows1[i] };
                        let rl = if contains(&plan.rows1[l], i) { &plan.rows2[l] } else { &plan.rows1[l] };
                        if !disjoint(ri, rl) {
                            let d11 = !disjoint(&plan.rows1[i], &plan.rows1[l]);
                            let d22 = !disjoint(&plan.rows2[i], &plan.rows2[l]);
                            overlap_kinds[(d11 as usize) + 2 * (d22 as usize)] += 1;
                        }
                    }
                }
            }
            println!("  mutual pairs {mutual}, overlap kinds (none,r1r1,r2r2,both) {overlap_kinds:?}");
        }
        break;
    }
}
