//! Report schema. One JSON document per run, versioned, with field order
//! fixed by the struct declarations so identical runs produce identical
//! bytes apart from the timestamp.

use std::path::Path;

use leaveout_core::PruneStage;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::Result;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct Report {
    pub schema_version: u32,
    /// Seconds since the epoch; the one field allowed to differ between
    /// identical runs.
    pub generated_at_unix: u64,
    pub command: String,
    pub config: RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pruning: Option<PruningBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample: Option<SampleBlock>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub estimates: Vec<EstimateRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jla: Option<JlaBlock>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub inference: Vec<InferenceBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Diagnostics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub monte_carlo: Option<McBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchBlock>,
}

impl Report {
    pub fn new(command: &str, config: &RunConfig) -> Report {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Report {
            schema_version: SCHEMA_VERSION,
            generated_at_unix: now,
            command: command.to_string(),
            config: config.clone(),
            pruning: None,
            sample: None,
            estimates: Vec::new(),
            jla: None,
            inference: Vec::new(),
            diagnostics: None,
            monte_carlo: None,
            bench: None,
        }
    }

    /// Serialize to the configured destination; empty path means stdout.
    pub fn emit(&self, output: &str) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serialization");
        if output.is_empty() {
            println!("{text}");
        } else {
            std::fs::write(output, text + "\n")?;
        }
        Ok(())
    }
}

/// Stage counts plus the stage-to-stage deltas; `reconciles` asserts that
/// every drop is accounted for (retained + dropped = previous stage).
#[derive(Debug, Serialize)]
pub struct PruningBlock {
    pub stages: Vec<PruneStage>,
    pub deltas: Vec<StageDelta>,
    pub reconciles: bool,
}

#[derive(Debug, Serialize)]
pub struct StageDelta {
    pub from: String,
    pub to: String,
    pub dropped_firms: usize,
    pub dropped_workers: usize,
    pub dropped_movers: usize,
    pub dropped_person_years: usize,
}

pub fn pruning_block(stages: Vec<PruneStage>) -> PruningBlock {
    let mut deltas = Vec::new();
    let mut reconciles = true;
    for pair in stages.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        for (prev, next) in [
            (a.firms, b.firms),
            (a.workers, b.workers),
            (a.movers, b.movers),
            (a.person_years, b.person_years),
        ] {
            if next > prev {
                reconciles = false;
            }
        }
        deltas.push(StageDelta {
            from: a.label.clone(),
            to: b.label.clone(),
            dropped_firms: a.firms.saturating_sub(b.firms),
            dropped_workers: a.workers.saturating_sub(b.workers),
            dropped_movers: a.movers.saturating_sub(b.movers),
            dropped_person_years: a.person_years.saturating_sub(b.person_years),
        });
    }
    PruningBlock { stages, deltas, reconciles }
}

#[derive(Debug, Serialize)]
pub struct SampleBlock {
    pub observations: usize,
    pub parameters: usize,
    pub dof: i64,
    pub workers: usize,
    pub firms: usize,
    pub dense_solver: bool,
}

#[derive(Debug, Serialize)]
pub struct EstimateRow {
    pub estimand: String,
    /// plug_in, homoscedastic, leave_out, leave_cluster_out or sketched.
    pub method: String,
    pub theta: f64,
    pub plug_in: f64,
    pub bias_correction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se: Option<f64>,
    pub negative_sigma2: usize,
}

#[derive(Debug, Serialize)]
pub struct JlaBlock {
    pub projections: usize,
    pub seed: u64,
    /// Sketched observations recomputed exactly near the leverage pole.
    pub exact_fallbacks: usize,
    /// Absolute bias bound per estimand, added to interval endpoints when
    /// n / p^2 is non-negligible.
    pub bias_bounds: Vec<NamedValue>,
    pub widen_applied: bool,
}

#[derive(Debug, Serialize)]
pub struct NamedValue {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Serialize)]
pub struct IntervalRow {
    /// "selected", "q_minus_1" or "q_plus_1".
    pub role: String,
    pub q: usize,
    pub lower: f64,
    pub upper: f64,
    pub kappa: f64,
    pub critical_value: f64,
}

#[derive(Debug, Serialize)]
pub struct InferenceBlock {
    pub estimand: String,
    pub theta: f64,
    pub vhat: f64,
    pub se: f64,
    pub q_selected: usize,
    pub eigen_shares: Vec<f64>,
    pub intervals: Vec<IntervalRow>,
    /// Hull of the reported intervals, per the two-consecutive-q guidance.
    pub union_lower: f64,
    pub union_upper: f64,
    /// Share of observations whose second prediction sample is missing.
    pub q_share: f64,
    /// Share of ordered pairs handled by the conservative product branch.
    pub fallback_pair_share: f64,
    pub conservative: bool,
}

#[derive(Debug, Serialize)]
pub struct EigenDiag {
    pub estimand: String,
    pub shares: Vec<f64>,
    /// max_i w_il^2 per eigenvector; small values support the normal
    /// approximation for that coordinate.
    pub lindeberg: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct Diagnostics {
    pub max_p: f64,
    pub negative_sigma2: usize,
    pub eigen: Vec<EigenDiag>,
}

#[derive(Debug, Serialize)]
pub struct StatRow {
    pub name: String,
    pub mean: f64,
    pub var: f64,
    pub se_mean: f64,
}

#[derive(Debug, Serialize)]
pub struct McBlock {
    pub reps: usize,
    pub theta_true: f64,
    pub statistics: Vec<StatRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_coverage: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct BenchRow {
    pub projections: usize,
    pub max_abs_p_error: f64,
    pub mean_abs_p_error: f64,
    pub max_abs_b_error: f64,
    pub theta_exact: f64,
    pub theta_sketched: f64,
    pub bias_bound: f64,
    pub exact_fallbacks: usize,
    pub elapsed_ms: f64,
}

#[derive(Debug, Serialize)]
pub struct BenchBlock {
    pub observations: usize,
    pub parameters: usize,
    pub exact_elapsed_ms: f64,
    pub rows: Vec<BenchRow>,
}

/// Fixed per-observation schema: row, worker_id, p_ii, one b_ii column per
/// estimand, sigma2_hat (leave-one-out).
pub fn write_per_obs(
    path: &Path,
    workers: &[String],
    p: &[f64],
    b_named: &[(String, &[f64])],
    sigma2: &[f64],
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["row".to_string(), "worker_id".into(), "p_ii".into()];
    for (name, _) in b_named {
        header.push(format!("b_ii_{name}"));
    }
    header.push("sigma2_hat".into());
    writer.write_record(&header)?;
    for i in 0..p.len() {
        let mut rec = vec![i.to_string(), workers[i].clone(), format!("{:.17e}", p[i])];
        for (_, b) in b_named {
            rec.push(format!("{:.17e}", b[i]));
        }
        rec.push(format!("{:.17e}", sigma2[i]));
        writer.write_record(&rec)?;
    }
    writer.flush()?;
    Ok(())
}
