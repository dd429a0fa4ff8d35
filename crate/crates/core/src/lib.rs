//! Inverse-probability-weighted estimation of the balanced estimand in
//! randomised trials with rescue-medication switching: the effect of
//! treatment had active-arm patients switched exactly when they would have
//! on control.
//!
//! The pipeline fits the treated-arm switching model, solves the estimating
//! equations for the control-arm switching model under a dilution factor
//! `ρ`, and forms self-normalised weighted arm means. Treatment-policy and
//! hypothetical comparators, influence-function and bootstrap standard
//! errors, and a simulation harness are included.

pub mod cli;
pub mod data;
pub mod error;
pub mod estimators;
pub mod logistic;
pub mod numeric;
pub mod rng;
pub mod simulate;
pub mod study;
pub mod tilt;
pub mod variance;

pub use data::{load_dataset, write_dataset, ColumnSelect, CsvSchema, TrialDataset, TrialRecord};
pub use error::{Error, Result};
pub use estimators::{
    estimate_balanced, estimate_hypothetical, estimate_treatment_policy, fit_balanced, BalancedFit,
    BalancedOptions, Estimand, EstimateResult,
};
pub use logistic::{expit, fit_logistic, fit_propensity, LogisticFit, PropensityModel};
pub use simulate::{
    generate_scenario, toy_estimands, true_values, PotentialOutcomeTable, ScenarioConfig,
    TruthValues,
};
pub use study::{run_mc_study, sensitivity_sweep, StudyOptions, StudyResult};
pub use tilt::{lambda_residual, q_terms, solve_lambda, LambdaStart, SwitchModels, Variant};
pub use variance::{
    bootstrap, influence_components, influence_se_balanced, EstimatorSpec, IFComponents,
};
