//! Run configuration: a TOML file with a default for every key, overridden
//! field by field from command-line flags.

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Worker-firm layout of the main regression.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelCfg {
    /// "levels" (person and firm dummies) or "first_difference" (one row
    /// per mover).
    pub mode: String,
    pub use_covariates: bool,
    /// Firm normalized to zero; empty picks the largest firm.
    pub reference_firm: String,
    /// Subtract period means from outcomes before estimation.
    pub adjust_period_effects: bool,
}

impl Default for ModelCfg {
    fn default() -> Self {
        ModelCfg {
            mode: "first_difference".into(),
            use_covariates: true,
            reference_firm: String::new(),
            adjust_period_effects: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimandCfg {
    /// Any of: var_firm, var_person, cov_person_firm, r2.
    pub components: Vec<String>,
    /// "person_year" or "match".
    pub weighting: String,
}

impl Default for EstimandCfg {
    fn default() -> Self {
        EstimandCfg { components: vec!["var_firm".into()], weighting: "person_year".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LeaveOutCfg {
    /// "observation", "match" or "worker". Worker level demeans within
    /// worker first, then refits dropping one worker at a time.
    pub level: String,
}

impl Default for LeaveOutCfg {
    fn default() -> Self {
        LeaveOutCfg { level: "observation".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneCfg {
    /// "none", "component", "leave_one_out" or "leave_two_out".
    pub level: String,
}

impl Default for PruneCfg {
    fn default() -> Self {
        PruneCfg { level: "leave_two_out".into() }
    }
}

/// Randomized leverage approximation. Absent from the config file means
/// exact leverages.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JlaCfg {
    pub projections: usize,
    pub seed: u64,
    /// Observations with approximate P_ii above 1 - threshold are redone
    /// exactly.
    pub fallback_threshold: f64,
}

impl Default for JlaCfg {
    fn default() -> Self {
        JlaCfg { projections: 500, seed: 0, fallback_threshold: 1e-3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceCfg {
    pub alpha: f64,
    /// "auto" selects q from eigenvalue shares; an integer fixes it.
    pub q: String,
    /// Share cutoff for the automatic q rule.
    pub threshold: f64,
    /// Draws for the simulated critical value.
    pub draws: usize,
    pub seed: u64,
    /// Support-size cap for the split-sample plan.
    pub plan_cap: usize,
    /// The interval at q+1 is also reported when the (q+1)-th share is
    /// within this factor of the threshold.
    pub near_factor: f64,
}

impl Default for InferenceCfg {
    fn default() -> Self {
        InferenceCfg {
            alpha: 0.05,
            q: "auto".into(),
            threshold: 0.10,
            draws: 200_000,
            seed: 7,
            plan_cap: 100,
            near_factor: 2.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateCfg {
    pub blocks: usize,
    pub firms_per_block: usize,
    pub movers: usize,
    pub stayers_per_firm: usize,
    pub p_between: f64,
    pub reps: usize,
    /// Variance of the independent normal firm effects.
    pub psi_var: f64,
    /// log sigma2 = h0 + h1 B_ii + h2 P_ii + h3 ln L2 + h4 ln L1, with L
    /// the firm sizes at the two ends of the move.
    pub hetero: [f64; 5],
    /// Also compute the split-sample variance and interval per draw.
    pub with_ci: bool,
}

impl Default for SimulateCfg {
    fn default() -> Self {
        SimulateCfg {
            blocks: 2,
            firms_per_block: 15,
            movers: 300,
            stayers_per_firm: 0,
            p_between: 0.08,
            reps: 200,
            psi_var: 0.25,
            hetero: [-3.3441, 1.3951, -0.0037, -0.0012, -0.0086],
            with_ci: false,
        }
    }
}

/// Everything a run needs. Serialized back into the report so results can
/// be reproduced from the report alone.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: String,
    /// Report path; empty writes to stdout.
    pub output: String,
    /// Per-observation CSV path; empty skips it.
    pub per_obs: String,
    /// 0 uses every available core.
    pub threads: usize,
    pub seed: u64,
    pub model: ModelCfg,
    pub estimands: EstimandCfg,
    pub leave_out: LeaveOutCfg,
    pub pruning: PruneCfg,
    pub jla: Option<JlaCfg>,
    pub inference: InferenceCfg,
    pub simulate: SimulateCfg,
}

impl RunConfig {
    pub fn from_file(path: &str) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {path}: {e}")))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{path}: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        match self.model.mode.as_str() {
            "levels" | "first_difference" => {}
            other => return Err(CliError::Config(format!("unknown model.mode '{other}'"))),
        }
        for c in &self.estimands.components {
            match c.as_str() {
                "var_firm" | "var_person" | "cov_person_firm" | "r2" => {}
                other => return Err(CliError::Config(format!("unknown estimand '{other}'"))),
            }
        }
        match self.estimands.weighting.as_str() {
            "person_year" | "match" => {}
            other => return Err(CliError::Config(format!("unknown weighting '{other}'"))),
        }
        match self.leave_out.level.as_str() {
            "observation" | "match" | "worker" => {}
            other => return Err(CliError::Config(format!("unknown leave_out.level '{other}'"))),
        }
        match self.pruning.level.as_str() {
            "none" | "component" | "leave_one_out" | "leave_two_out" => {}
            other => return Err(CliError::Config(format!("unknown pruning.level '{other}'"))),
        }
        if !(self.inference.alpha > 0.0 && self.inference.alpha < 1.0) {
            return Err(CliError::Config(format!(
                "inference.alpha {} outside (0, 1)",
                self.inference.alpha
            )));
        }
        if self.inference.q != "auto" && self.inference.q.parse::<usize>().is_err() {
            return Err(CliError::Config(format!(
                "inference.q must be 'auto' or an integer, got '{}'",
                self.inference.q
            )));
        }
        if let Some(jla) = &self.jla {
            if jla.projections == 0 {
                return Err(CliError::Config("jla.projections must be positive".into()));
            }
        }
        Ok(())
    }

    /// Effective thread count: flag/config value, else the environment
    /// override, else every available core.
    pub fn effective_threads(&self) -> usize {
        if self.threads > 0 {
            return self.threads;
        }
        if let Ok(v) = std::env::var("LEAVEOUT_THREADS") {
            if let Ok(n) = v.parse::<usize>() {
                if n > 0 {
                    return n;
                }
            }
        }
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    }
}

/// `p=500,seed=3` style argument of the --jla flag.
pub fn parse_jla_flag(text: &str) -> Result<JlaCfg> {
    let mut cfg = JlaCfg::default();
    for part in text.split([',', ' ']).filter(|p| !p.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--jla expects key=value pairs, got '{part}'")))?;
        match key {
            "p" | "projections" => {
                cfg.projections = value
                    .parse()
                    .map_err(|_| CliError::Config(format!("--jla p: bad integer '{value}'")))?;
            }
            "seed" => {
                cfg.seed = value
                    .parse()
                    .map_err(|_| CliError::Config(format!("--jla seed: bad integer '{value}'")))?;
            }
            "fallback" => {
                cfg.fallback_threshold = value
                    .parse()
                    .map_err(|_| CliError::Config(format!("--jla fallback: bad number '{value}'")))?;
            }
            other => return Err(CliError::Config(format!("--jla: unknown key '{other}'"))),
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_defaults_parse_and_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.model.mode, "first_difference");
        assert_eq!(cfg.pruning.level, "leave_two_out");
        assert!(cfg.jla.is_none());
    }

    #[test]
    fn test_toml_round_trip_keeps_every_key() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.model.mode, cfg.model.mode);
        assert_eq!(back.inference.threshold, cfg.inference.threshold);
        assert_eq!(back.simulate.hetero, cfg.simulate.hetero);
    }

    #[test]
    fn test_partial_toml_fills_defaults() {
        let cfg: RunConfig = toml::from_str("input = \"x.csv\"\n[model]\nmode = \"levels\"\n").unwrap();
        assert_eq!(cfg.input, "x.csv");
        assert_eq!(cfg.model.mode, "levels");
        assert!(cfg.model.use_covariates);
        assert_eq!(cfg.inference.alpha, 0.05);
    }

    #[test]
    fn test_unknown_key_rejected() {
        let err = toml::from_str::<RunConfig>("frobnicate = 1\n");
        assert!(err.is_err());
    }

    #[test]
    fn test_bad_enumerations_rejected() {
        let mut cfg = RunConfig::default();
        cfg.model.mode = "cubic".into();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.inference.q = "many".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn test_jla_flag_parses() {
        let cfg = parse_jla_flag("p=128,seed=9").unwrap();
        assert_eq!(cfg.projections, 128);
        assert_eq!(cfg.seed, 9);
        assert!(parse_jla_flag("p=128,volume=11").is_err());
    }
}
