//! Leave-out estimation of quadratic forms in high-dimensional linear models.
//!
//! The centerpiece is an unbiased estimator of theta = beta' A beta that
//! replaces each error variance with a leave-one-out product
//! sigma2_i = y_i (y_i - x_i' beta_hat_{-i}), valid under unrestricted
//! heteroscedasticity as long as no observation has leverage one.
//! Around it sit the supporting pieces: design construction for worker-firm
//! panels, connectivity pruning of the mobility network, exact and sketched
//! leverage computation, split-sample variance estimation, and
//! weak-identification robust confidence intervals.

pub mod design;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod network;
pub mod simulation;
pub mod sketch;
pub mod solver;
pub mod sparse;
pub mod util;

pub use design::{
    build_demeaned_design, build_design, build_quadratic_form, project_outcome, ColumnRole,
    DesignMatrix, DesignMode, EstimandSpec, ModelSpec, Obs, Panel, PersonYear, QuadraticForm,
    Weighting,
};
pub use error::{Error, Result};
pub use estimators::{
    build_pairwise, decompose_akm, lincom_se, sigma2_hc2, sigma2_leave_out, theta_cluster,
    theta_from_sigma2, theta_homosc, theta_jackknife_family, theta_leave_out, theta_plug_in,
    theta_via_pairwise, vcov_beta, AkmDecomposition, JackknifeEstimates, JackknifeVariant, Method,
    PairwiseCtx, VarianceComponentEstimate,
};
pub use inference::{
    closed_form_extrema, confidence_interval, critical_value, curvature, ellipsoid_extrema,
    prepare_variance, restriction_form, select_q, sigma_q_hat, test_linear_restrictions, top_eigen,
    vhat_theta, CiInputs, ConfidenceInterval, CriticalValue, EigenInfo, RestrictionMode, TestReport,
    VariancePlan, VhatOptions, VhatResult, WeakIdVariance,
};
pub use network::{
    build_split_plan, build_split_plan_grouped, edge_disjoint_paths, prune_panel, MobilityGraph,
    MoverEdge, PruneLevel, PruneReport, PruneStage, SplitSamplePlan, StayerNode,
};
pub use simulation::{
    firm_effect_beta, gen_sbm, gen_wages, monte_carlo, sigma2_profile, HeteroModel, McReport,
    McScenario, SbmConfig,
};
pub use sketch::{jla_bias_bound, jla_sigma2, sketched_leverages, SketchConfig};
pub use solver::{
    exact_leverages, exact_leverages_with_z, fit, leave_out_residual, FitResult, LeverageMode,
    LeverageSet, Solver, SolverConfig,
};
pub use sparse::{CenteredFactor, SparseRow};
