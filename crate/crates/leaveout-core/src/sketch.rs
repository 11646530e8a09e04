//! Randomized leverage approximation.
//!
//! Exact leverages need one normal-equation solve per observation. With p
//! random projections the count drops to p solves for P_ii plus p per
//! distinct quadratic-form factor, at the cost of simulation noise that the
//! downstream variance estimates correct for explicitly.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::design::{DesignMatrix, QuadraticForm};
use crate::error::{Error, Result};
use crate::solver::{LeverageMode, LeverageSet, Solver};
use crate::sparse::CenteredFactor;
use crate::util::rademacher;

#[derive(Debug, Clone, Copy)]
pub struct SketchConfig {
    /// number of random projections p
    pub projections: usize,
    pub seed: u64,
    /// observations with approximate P_ii above 1 - threshold are redone
    /// exactly; keeps the variance correction away from the 1/(1-P) pole
    pub fallback_threshold: f64,
}

impl Default for SketchConfig {
    fn default() -> Self {
        SketchConfig { projections: 500, seed: 0, fallback_threshold: 1e-3 }
    }
}

const TAG_P: u64 = 0;
const TAG_B: u64 = 1;

/// Approximate leverages: P_hat_ii = (1/p) |R X S^-1 x_i|^2 and, per form,
/// B_hat_ii = (1/p) (R F1 S^-1 x_i)' (R F2 S^-1 x_i). One projection matrix
/// serves every factor, so forms sharing a factor share its p solves.
pub fn sketched_leverages(
    design: &DesignMatrix,
    forms: &[&QuadraticForm],
    solver: &Solver,
    cfg: &SketchConfig,
) -> Result<LeverageSet> {
    let n = design.n;
    let p = cfg.projections.max(1);
    let seed = cfg.seed;

    // projections for P_ii: z_r = S^-1 X' r_row
    let zp: Vec<DVector<f64>> = (0..p)
        .into_par_iter()
        .map(|r| {
            let mut signs = vec![0.0f64; n];
            for (i, s) in signs.iter_mut().enumerate() {
                *s = rademacher(seed, TAG_P, r as u64, i as u64);
            }
            solver.solve(&design.xt_apply(&signs))
        })
        .collect::<Result<_>>()?;

    // distinct factors across all forms, deduplicated by pointer
    let mut slots: Vec<Arc<CenteredFactor>> = Vec::new();
    let mut slot_ids: HashMap<usize, usize> = HashMap::new();
    let mut form_slots: Vec<(usize, usize)> = Vec::new();
    for form in forms {
        let mut slot_of = |f: &Arc<CenteredFactor>| -> usize {
            let key = Arc::as_ptr(f) as usize;
            *slot_ids.entry(key).or_insert_with(|| {
                slots.push(f.clone());
                slots.len() - 1
            })
        };
        form_slots.push((slot_of(&form.f1), slot_of(&form.f2)));
    }
    // z_{s,r} = S^-1 F_s' g_row with a projection row over the factor units;
    // entries are keyed by unit index so equal-length factors see the same
    // projection, which the cross-product forms require
    let zb: Vec<Vec<DVector<f64>>> = slots
        .iter()
        .map(|f| {
            (0..p)
                .into_par_iter()
                .map(|r| {
                    let m = f.m();
                    let g = DVector::from_iterator(
                        m,
                        (0..m).map(|u| rademacher(seed, TAG_B, r as u64, u as u64)),
                    );
                    solver.solve(&f.apply_t(&g))
                })
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;

    let inv_p = 1.0 / p as f64;
    let mut p_hat = vec![0.0f64; n];
    let mut b_hat = vec![vec![0.0f64; n]; forms.len()];
    let per_obs: Vec<(f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = &design.rows[i];
            let mut pv = 0.0;
            for z in &zp {
                let d = row.dot(z.as_slice());
                pv += d * d;
            }
            let mut bs = Vec::with_capacity(forms.len());
            for &(s1, s2) in &form_slots {
                let mut acc = 0.0;
                if s1 == s2 {
                    for z in &zb[s1] {
                        let d = row.dot(z.as_slice());
                        acc += d * d;
                    }
                } else {
                    for (z1, z2) in zb[s1].iter().zip(&zb[s2]) {
                        acc += row.dot(z1.as_slice()) * row.dot(z2.as_slice());
                    }
                }
                bs.push(acc * inv_p);
            }
            (pv * inv_p, bs)
        })
        .collect();
    for (i, (pv, bs)) in per_obs.into_iter().enumerate() {
        p_hat[i] = pv;
        for (j, b) in bs.into_iter().enumerate() {
            b_hat[j][i] = b;
        }
    }

    // observations too close to the pole get exact solves instead
    let mut exact = vec![false; n];
    let redo: Vec<usize> = (0..n)
        .filter(|&i| p_hat[i] > 1.0 - cfg.fallback_threshold)
        .collect();
    if !redo.is_empty() {
        let zs: Vec<DVector<f64>> = redo
            .par_iter()
            .map(|&i| solver.solve_sparse(&design.rows[i]))
            .collect::<Result<_>>()?;
        for (&i, z) in redo.iter().zip(&zs) {
            p_hat[i] = design.rows[i].dot(z.as_slice());
            for (j, form) in forms.iter().enumerate() {
                b_hat[j][i] = form.quad(z);
            }
            exact[i] = true;
        }
    }

    Ok(LeverageSet {
        p: p_hat,
        b: b_hat,
        mode: LeverageMode::Sketched { projections: p },
        exact,
    })
}

/// Error variance estimates under sketched leverages. The extra factor
/// 1 - (3 P^3 + P^2) / (p (1 - P)) undoes the nonlinearity bias that the
/// random P_hat induces through the 1/(1 - P_hat) rescaling; exact rows
/// skip it.
pub fn jla_sigma2(
    y: &DVector<f64>,
    residuals: &[f64],
    lev: &LeverageSet,
) -> Result<Vec<f64>> {
    let p_count = match lev.mode {
        LeverageMode::Sketched { projections } => projections as f64,
        LeverageMode::Exact => f64::INFINITY,
    };
    let mut out = Vec::with_capacity(lev.n());
    for i in 0..lev.n() {
        let ph = lev.p[i];
        if ph >= 1.0 - 1e-8 {
            return Err(Error::LeverageOne { index: i, value: ph });
        }
        let naive = y[i] * residuals[i] / (1.0 - ph);
        let adjust = if lev.exact[i] {
            1.0
        } else {
            1.0 - (3.0 * ph.powi(3) + ph * ph) / (p_count * (1.0 - ph))
        };
        out.push(naive * adjust);
    }
    Ok(out)
}

/// Upper bound on the absolute sketching bias of the corrected estimate:
/// (1/p) sum_i P_hat_ii^2 |B_hat_ii| sigma2_i. Zero for exact leverages.
pub fn jla_bias_bound(lev: &LeverageSet, form_idx: usize, sigma2: &[f64]) -> f64 {
    let p_count = match lev.mode {
        LeverageMode::Sketched { projections } => projections as f64,
        LeverageMode::Exact => return 0.0,
    };
    let b = &lev.b[form_idx];
    let total: f64 = (0..lev.n())
        .map(|i| lev.p[i] * lev.p[i] * b[i].abs() * sigma2[i].abs())
        .sum();
    total / p_count
}
