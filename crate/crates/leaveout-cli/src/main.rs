//! Batch front end for leave-out variance component estimation on linked
//! worker-firm panels. Subcommands cover pruning, point estimation, full
//! inference, Monte Carlo simulation and a sketching benchmark; every run
//! emits one versioned JSON report.

mod config;
mod error;
mod ingest;
mod jla_bench;
mod pipeline;
mod report;
mod simulate;

use clap::{Args, Parser, Subcommand};

use config::{parse_jla_flag, RunConfig};
use error::{CliError, Result};
use report::Report;

#[derive(Parser)]
#[command(name = "leaveout", version, about = "Leave-out variance components for worker-firm panels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct CommonOpts {
    /// TOML configuration; flags below override its values
    #[arg(long)]
    config: Option<String>,
    /// Input panel CSV: worker_id,firm_id,period,outcome[,covariate_*]
    #[arg(long)]
    input: Option<String>,
    /// Report JSON path (stdout when omitted)
    #[arg(long)]
    output: Option<String>,
    /// Per-observation CSV: row,worker_id,p_ii,b_ii_*,sigma2_hat
    #[arg(long)]
    per_obs: Option<String>,
    /// Worker threads; 0 or unset defers to LEAVEOUT_THREADS, then cores
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Model layout: levels or first_difference
    #[arg(long)]
    mode: Option<String>,
    /// Estimand, repeatable: var_firm, var_person, cov_person_firm, r2
    #[arg(long = "estimand")]
    estimands: Vec<String>,
    /// person_year or match
    #[arg(long)]
    weighting: Option<String>,
    /// Leave-out level: observation, match or worker
    #[arg(long)]
    level: Option<String>,
    /// Pruning level: component, leave_one_out or leave_two_out
    #[arg(long)]
    prune: Option<String>,
    /// Skip pruning entirely
    #[arg(long)]
    no_prune: bool,
    /// Sketched leverages, e.g. --jla p=500,seed=3
    #[arg(long)]
    jla: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    /// q rule: auto or an explicit integer
    #[arg(long)]
    q: Option<String>,
    /// Eigenvalue-share threshold for automatic q selection
    #[arg(long)]
    q_threshold: Option<f64>,
    /// Subtract period means from outcomes first
    #[arg(long)]
    adjust_period_effects: bool,
    /// Firm whose effect is normalized to zero
    #[arg(long)]
    reference_firm: Option<String>,
    /// Ignore covariate columns
    #[arg(long)]
    no_covariates: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Prune a panel to the requested connectivity level
    Prune {
        #[command(flatten)]
        common: CommonOpts,
        /// Also write the surviving panel as CSV
        #[arg(long)]
        emit_panel: Option<String>,
    },
    /// Point estimates for the configured estimands
    Estimate {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Estimates plus split-sample variance and robust intervals
    Infer {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Monte Carlo on a simulated block mobility design
    Simulate {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        blocks: Option<usize>,
        #[arg(long)]
        firms_per_block: Option<usize>,
        #[arg(long)]
        movers: Option<usize>,
        #[arg(long)]
        stayers_per_firm: Option<usize>,
        #[arg(long)]
        p_between: Option<f64>,
        #[arg(long)]
        psi_var: Option<f64>,
        /// Also estimate variance and interval coverage per draw
        #[arg(long)]
        with_ci: bool,
    },
    /// Exact versus sketched leverages across projection counts
    JlaBench {
        #[command(flatten)]
        common: CommonOpts,
        /// Comma-separated projection counts
        #[arg(long, default_value = "64,256,1024")]
        grid: String,
    },
}

fn load_config(common: &CommonOpts) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &common.input {
        cfg.input = v.clone();
    }
    if let Some(v) = &common.output {
        cfg.output = v.clone();
    }
    if let Some(v) = &common.per_obs {
        cfg.per_obs = v.clone();
    }
    if let Some(v) = common.threads {
        cfg.threads = v;
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = &common.mode {
        cfg.model.mode = v.clone();
    }
    if !common.estimands.is_empty() {
        cfg.estimands.components = common.estimands.clone();
    }
    if let Some(v) = &common.weighting {
        cfg.estimands.weighting = v.clone();
    }
    if let Some(v) = &common.level {
        cfg.leave_out.level = v.clone();
    }
    if let Some(v) = &common.prune {
        cfg.pruning.level = v.clone();
    }
    if common.no_prune {
        cfg.pruning.level = "none".into();
    }
    if let Some(text) = &common.jla {
        cfg.jla = Some(parse_jla_flag(text)?);
    }
    if let Some(v) = common.alpha {
        cfg.inference.alpha = v;
    }
    if let Some(v) = &common.q {
        cfg.inference.q = v.clone();
    }
    if let Some(v) = common.q_threshold {
        cfg.inference.threshold = v;
    }
    if common.adjust_period_effects {
        cfg.model.adjust_period_effects = true;
    }
    if let Some(v) = &common.reference_firm {
        cfg.model.reference_firm = v.clone();
    }
    if common.no_covariates {
        cfg.model.use_covariates = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads(cfg: &RunConfig) {
    let n = cfg.effective_threads();
    // a second init in tests is fine; the pool keeps its first size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Prune { common, emit_panel } => {
            let cfg = load_config(&common)?;
            init_threads(&cfg);
            if cfg.input.is_empty() {
                return Err(CliError::Config("prune requires --input".into()));
            }
            let mut report = Report::new("prune", &cfg);
            let panel = ingest::read_panel(std::path::Path::new(&cfg.input))?;
            let level = pipeline::prune_level(&cfg.pruning.level).ok_or_else(|| {
                CliError::Config("prune needs pruning.level other than 'none'".into())
            })?;
            let (pruned, stages) = leaveout_core::prune_panel(&panel, level)?;
            report.pruning = Some(report::pruning_block(stages.stages));
            if let Some(path) = emit_panel {
                ingest::write_panel(&pruned, std::path::Path::new(&path))?;
            }
            report.emit(&cfg.output)
        }
        Command::Estimate { common } => {
            let cfg = load_config(&common)?;
            init_threads(&cfg);
            if cfg.input.is_empty() {
                return Err(CliError::Config("estimate requires --input".into()));
            }
            let mut report = Report::new("estimate", &cfg);
            let prep = pipeline::prepare(&cfg, &mut report)?;
            pipeline::run_estimates(&cfg, &prep, &mut report)?;
            report.emit(&cfg.output)
        }
        Command::Infer { common } => {
            let cfg = load_config(&common)?;
            init_threads(&cfg);
            if cfg.input.is_empty() {
                return Err(CliError::Config("infer requires --input".into()));
            }
            let mut report = Report::new("infer", &cfg);
            let prep = pipeline::prepare(&cfg, &mut report)?;
            pipeline::run_estimates(&cfg, &prep, &mut report)?;
            pipeline::run_inference(&cfg, &prep, &mut report)?;
            report.emit(&cfg.output)
        }
        Command::Simulate {
            common,
            reps,
            blocks,
            firms_per_block,
            movers,
            stayers_per_firm,
            p_between,
            psi_var,
            with_ci,
        } => {
            simulate::require_explicit_seed(common.seed, common.config.as_deref())?;
            let mut cfg = load_config(&common)?;
            if let Some(v) = reps {
                cfg.simulate.reps = v;
            }
            if let Some(v) = blocks {
                cfg.simulate.blocks = v;
            }
            if let Some(v) = firms_per_block {
                cfg.simulate.firms_per_block = v;
            }
            if let Some(v) = movers {
                cfg.simulate.movers = v;
            }
            if let Some(v) = stayers_per_firm {
                cfg.simulate.stayers_per_firm = v;
            }
            if let Some(v) = p_between {
                cfg.simulate.p_between = v;
            }
            if let Some(v) = psi_var {
                cfg.simulate.psi_var = v;
            }
            if with_ci {
                cfg.simulate.with_ci = true;
            }
            init_threads(&cfg);
            let mut report = Report::new("simulate", &cfg);
            simulate::run_simulate(&cfg, &mut report)?;
            report.emit(&cfg.output)
        }
        Command::JlaBench { common, grid } => {
            let cfg = load_config(&common)?;
            init_threads(&cfg);
            let grid: Vec<usize> = grid
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| CliError::Config(format!("bad projection count '{s}'")))
                })
                .collect::<Result<_>>()?;
            if grid.is_empty() {
                return Err(CliError::Config("empty projection grid".into()));
            }
            let mut report = Report::new("jla-bench", &cfg);
            jla_bench::run_jla_bench(&cfg, &grid, &mut report)?;
            report.emit(&cfg.output)
        }
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
