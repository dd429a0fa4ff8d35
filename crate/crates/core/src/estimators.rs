//! Point estimators: the balanced estimand via tilted weights, plus the
//! treatment-policy and hypothetical comparators. All means are
//! self-normalised weighted averages.

use std::borrow::Cow;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{TrialDataset, TrialRecord};
use crate::error::{Error, Result};
use crate::logistic::{fit_logistic, fit_propensity, LogisticFit, PropensityModel, PROB_FLOOR};
use crate::numeric::{mean, nearest_rank};
use crate::tilt::{solve_lambda, LambdaStart, SolverDiagnostics, SwitchModels, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimand {
    /// `E(Y^{1S⁰} − Y⁰)`.
    Balanced,
    /// `E(Y¹ − Y^{0S¹})`, the balanced target with the arms interchanged.
    BalancedFlipped,
    TreatmentPolicy,
    Hypothetical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeMethod {
    Influence,
    Bootstrap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardErrors {
    pub method: SeMethod,
    pub mu: f64,
    pub mu1: Option<f64>,
    pub mu0: Option<f64>,
    /// Bootstrap only: replicates requested and dropped.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replicates: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failed: Option<usize>,
}

/// Options echoed into every result.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OptionsEcho {
    pub rho: Option<f64>,
    pub variant: Option<Variant>,
    pub truncation: Option<(f64, f64)>,
    pub propensity_covariates: Vec<String>,
    pub flip: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub estimand: Estimand,
    pub mu1: f64,
    pub mu0: f64,
    pub mu: f64,
    pub se: Option<StandardErrors>,
    pub ci: Option<(f64, f64)>,
    /// 5th and 95th percentiles of the treated weights over their mean.
    pub weight_p5: Option<f64>,
    pub weight_p95: Option<f64>,
    pub options: OptionsEcho,
    pub warnings: Vec<String>,
}

impl EstimateResult {
    fn new(estimand: Estimand, mu1: f64, mu0: f64, options: OptionsEcho) -> Self {
        EstimateResult {
            estimand,
            mu1,
            mu0,
            mu: mu1 - mu0,
            se: None,
            ci: None,
            weight_p5: None,
            weight_p95: None,
            options,
            warnings: Vec::new(),
        }
    }
}

/// Tilted weight of a treated record: `P(S = s | R = 0, L, C) / P(S = s | R = 1, L, C)`.
pub fn compute_weight(record: &TrialRecord, models: &SwitchModels) -> Result<f64> {
    let l = record.l.as_deref().ok_or(Error::MissingL {
        index: 0,
        arm: record.arm(),
    })?;
    if l.len() != models.l_dim || record.c.len() != models.c_dim {
        return Err(Error::DimensionMismatch(format!(
            "record has (c, l) dimensions ({}, {}), models expect ({}, {})",
            record.c.len(),
            l.len(),
            models.c_dim,
            models.l_dim
        )));
    }
    Ok(models.weight(record.switched, l, &record.c))
}

/// The same weight in its tilt form `exp(S q) / (p (eᵠ − 1) + 1)` with
/// `q = q₀ + q₁` and `p` the treated switching probability.
pub fn tilt_weight(switched: bool, p: f64, q: f64) -> f64 {
    let denom = p * q.exp_m1() + 1.0;
    if switched {
        q.exp() / denom
    } else {
        1.0 / denom
    }
}

/// Clamp each weight into the `[lower_pct, upper_pct]` nearest-rank
/// percentile range of `weights`.
pub fn truncate_weights(weights: &[f64], lower_pct: f64, upper_pct: f64) -> Result<Vec<f64>> {
    if !(0.0..=100.0).contains(&lower_pct)
        || !(0.0..=100.0).contains(&upper_pct)
        || lower_pct >= upper_pct
    {
        return Err(Error::InvalidArgument(format!(
            "truncation percentiles ({lower_pct}, {upper_pct}) must satisfy 0 <= lo < hi <= 100"
        )));
    }
    if weights.is_empty() {
        return Ok(Vec::new());
    }
    let lo = nearest_rank(weights, lower_pct);
    let hi = nearest_rank(weights, upper_pct);
    Ok(weights.iter().map(|w| w.clamp(lo, hi)).collect())
}

/// Options for [`estimate_balanced`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BalancedOptions {
    pub variant: Variant,
    /// Percentile pair `(lo, hi)` at which treated weights are clamped.
    pub truncation: Option<(f64, f64)>,
    pub propensity_covariates: Vec<String>,
    /// Interchange the arms first and target `E(Y¹ − Y^{0S¹})`.
    pub flip: bool,
    pub start: LambdaStart,
}

/// Everything a balanced fit produces, for variance calculations.
#[derive(Debug, Clone)]
pub struct BalancedFit<'a> {
    pub result: EstimateResult,
    /// The dataset actually analysed (arms interchanged when flipped).
    pub data: Cow<'a, TrialDataset>,
    pub models: SwitchModels,
    pub propensity: PropensityModel,
    /// Per-record weight: tilted (possibly truncated) on treated rows, 1 on controls.
    pub weights: Vec<f64>,
    pub truncated: bool,
}

/// Hájek mean `Σ wᵢ yᵢ / Σ wᵢ`.
fn hajek(pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (num, den) = pairs.fold((0.0, 0.0), |(n, d), (w, y)| (n + w * y, d + w));
    num / den
}

/// Control-arm mean weighted by `1 / (1 − π)`.
fn control_mean(data: &TrialDataset, prop: &PropensityModel) -> f64 {
    hajek(
        data.records()
            .iter()
            .filter(|r| !r.treated)
            .map(|r| (1.0 / (1.0 - prop.pi(&r.c)), r.y)),
    )
}

fn switch_design(records: &[&TrialRecord], c_dim: usize, l_dim: usize) -> DMatrix<f64> {
    DMatrix::from_fn(records.len(), c_dim + l_dim, |i, j| {
        let r = records[i];
        if j < c_dim {
            r.c[j]
        } else {
            r.l.as_ref().expect("l checked")[j - c_dim]
        }
    })
}

fn switch_labels(data: &TrialDataset) -> Vec<String> {
    data.c_names()
        .iter()
        .cloned()
        .chain(data.l_names().iter().cloned())
        .collect()
}

/// Fit `P(S = 1 | R = 1, L, C)` on the treated arm.
pub fn fit_treated_switching(data: &TrialDataset) -> Result<LogisticFit> {
    data.require_l(1)?;
    let treated: Vec<&TrialRecord> = data.records().iter().filter(|r| r.treated).collect();
    let outcome: Vec<bool> = treated.iter().map(|r| r.switched).collect();
    let design = switch_design(&treated, data.c_dim(), data.l_dim());
    fit_logistic(&outcome, &design, &switch_labels(data))
}

fn trivial_models(
    data: &TrialDataset,
    omega: Option<LogisticFit>,
    rho: f64,
    variant: Variant,
) -> SwitchModels {
    SwitchModels {
        omega,
        lambda: None,
        rho,
        variant,
        c_dim: data.c_dim(),
        l_dim: data.l_dim(),
        diagnostics: SolverDiagnostics {
            iterations: 0,
            residual_norm: 0.0,
            converged: true,
        },
    }
}

/// Steps 1 and 2: the treated switching law and the solved control law.
fn fit_switch_models(
    data: &TrialDataset,
    rho: f64,
    options: &BalancedOptions,
    propensity: &PropensityModel,
    warnings: &mut Vec<String>,
) -> Result<SwitchModels> {
    let n1 = data.arm_size(1);
    let s1 = data.switchers(1);
    let s0 = data.switchers(0);
    match (s1, s0) {
        (0, 0) => {
            warnings.push("no switchers on either arm: all weights are 1".into());
            Ok(trivial_models(data, None, rho, options.variant))
        }
        (0, _) => {
            let msg = format!(
                "treated arm has no switchers while {s0} control patients switched; \
                 the control switching law cannot be tilted from the treated one; \
                 consider the flipped target E(Y1 - Y0S1) (flip)"
            );
            warnings.push(msg.clone());
            Err(Error::DegenerateArm(msg))
        }
        (_, _) if s1 == n1 && options.variant == Variant::NonSwitcherEq => Err(Error::DegenerateArm(
            "every treated patient switched, so the non-switcher equations are empty; use the switcher variant".into(),
        )),
        (_, 0) => {
            warnings.push(
                "control arm has no switchers: control switching probability fixed at 0, \
                 so treated switchers get weight 0"
                    .into(),
            );
            let omega = fit_treated_switching(data)?;
            Ok(trivial_models(data, Some(omega), rho, options.variant))
        }
        _ => {
            let omega = fit_treated_switching(data)?;
            solve_lambda(data, &omega, rho, propensity, options.variant, &options.start)
        }
    }
}

/// Weighted treated mean `Σ Y W/π / Σ W/π` for given per-record weights.
fn treated_mean(data: &TrialDataset, prop: &PropensityModel, weights: &[f64]) -> f64 {
    hajek(
        data.records()
            .iter()
            .zip(weights)
            .filter(|(r, _)| r.treated)
            .map(|(r, &w)| (w / prop.pi(&r.c), r.y)),
    )
}

fn weight_percentiles(data: &TrialDataset, weights: &[f64]) -> (f64, f64) {
    let treated: Vec<f64> = data
        .records()
        .iter()
        .zip(weights)
        .filter(|(r, _)| r.treated)
        .map(|(_, &w)| w)
        .collect();
    let m = mean(&treated);
    let normalised: Vec<f64> = treated.iter().map(|w| w / m).collect();
    (
        nearest_rank(&normalised, 5.0),
        nearest_rank(&normalised, 95.0),
    )
}

/// Assemble the balanced estimate from already fitted switching models.
/// `estimate_balanced` calls this after steps 1-2; tests use it to inject
/// chosen models.
pub fn estimate_with_switch_models<'a>(
    data: Cow<'a, TrialDataset>,
    models: SwitchModels,
    propensity: PropensityModel,
    options: &BalancedOptions,
    mut warnings: Vec<String>,
) -> Result<BalancedFit<'a>> {
    let mut weights = Vec::with_capacity(data.len());
    for (index, rec) in data.records().iter().enumerate() {
        if rec.treated {
            let w = compute_weight(rec, &models).map_err(|e| match e {
                Error::MissingL { arm, .. } => Error::MissingL { index, arm },
                other => other,
            })?;
            weights.push(w);
        } else {
            weights.push(1.0);
        }
    }
    let (p5, p95) = weight_percentiles(&data, &weights);

    let truncated = options.truncation.is_some();
    if let Some((lo, hi)) = options.truncation {
        let idx: Vec<usize> = (0..data.len())
            .filter(|&i| data.records()[i].treated)
            .collect();
        let tw: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
        for (&i, w) in idx.iter().zip(truncate_weights(&tw, lo, hi)?) {
            weights[i] = w;
        }
        warnings.push(format!(
            "treated weights truncated at the ({lo}, {hi}) percentiles; influence-function SEs unavailable"
        ));
    }

    let mu1 = treated_mean(&data, &propensity, &weights);
    let mu0 = control_mean(&data, &propensity);
    let estimand = if options.flip {
        Estimand::BalancedFlipped
    } else {
        Estimand::Balanced
    };
    let mut result = EstimateResult::new(
        estimand,
        mu1,
        mu0,
        OptionsEcho {
            rho: Some(models.rho),
            variant: Some(models.variant),
            truncation: options.truncation,
            propensity_covariates: options.propensity_covariates.clone(),
            flip: options.flip,
        },
    );
    result.weight_p5 = Some(p5);
    result.weight_p95 = Some(p95);
    result.warnings = warnings;
    Ok(BalancedFit {
        result,
        data,
        models,
        propensity,
        weights,
        truncated,
    })
}

/// Run the full balanced pipeline and keep the fitted pieces.
pub fn fit_balanced<'a>(
    dataset: &'a TrialDataset,
    rho: f64,
    options: &BalancedOptions,
) -> Result<BalancedFit<'a>> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "rho = {rho} outside (0, 1]"
        )));
    }
    let data: Cow<'a, TrialDataset> = if options.flip {
        Cow::Owned(dataset.flipped())
    } else {
        Cow::Borrowed(dataset)
    };
    data.require_l(1)?;
    let mut warnings = Vec::new();
    if options.flip && dataset.switchers(1) == 0 && dataset.switchers(0) > 0 {
        warnings.push(
            "original treated arm has no switchers; estimating the flipped target E(Y1 - Y0S1)"
                .into(),
        );
    }
    let canonical = data.canonical_order();
    let propensity = fit_propensity(&canonical, &options.propensity_covariates)?;
    let models = fit_switch_models(&canonical, rho, options, &propensity, &mut warnings)?;
    estimate_with_switch_models(data, models, propensity, options, warnings)
}

/// The balanced estimate `E(Y^{1S⁰} − Y⁰)` (or its flipped counterpart).
pub fn estimate_balanced(
    dataset: &TrialDataset,
    rho: f64,
    options: &BalancedOptions,
) -> Result<EstimateResult> {
    fit_balanced(dataset, rho, options).map(|f| f.result)
}

/// `E(Y¹ − Y⁰)`: propensity-weighted arm means, ignoring switching.
pub fn estimate_treatment_policy(
    dataset: &TrialDataset,
    propensity_covariates: &[String],
) -> Result<EstimateResult> {
    for arm in [1u8, 0u8] {
        if dataset.arm_size(arm) == 0 {
            return Err(Error::EmptyArm { arm });
        }
    }
    let prop = fit_propensity(dataset, propensity_covariates)?;
    let ones = vec![1.0; dataset.len()];
    let mu1 = treated_mean(dataset, &prop, &ones);
    let mu0 = control_mean(dataset, &prop);
    Ok(EstimateResult::new(
        Estimand::TreatmentPolicy,
        mu1,
        mu0,
        OptionsEcho {
            propensity_covariates: propensity_covariates.to_vec(),
            ..OptionsEcho::default()
        },
    ))
}

/// Per-record `P(S = 0 | R = arm, L, C)` for the arm's records, or all ones
/// when nobody on the arm switched.
fn stay_probabilities(data: &TrialDataset, arm: u8) -> Result<Vec<f64>> {
    let recs: Vec<&TrialRecord> = data.records().iter().filter(|r| r.arm() == arm).collect();
    let switchers = recs.iter().filter(|r| r.switched).count();
    if switchers == 0 {
        return Ok(vec![1.0; recs.len()]);
    }
    if switchers == recs.len() {
        return Err(Error::AllSwitchers { arm });
    }
    let outcome: Vec<bool> = recs.iter().map(|r| !r.switched).collect();
    let design = switch_design(&recs, data.c_dim(), data.l_dim());
    let fit = fit_logistic(&outcome, &design, &switch_labels(data))?;
    Ok(recs
        .iter()
        .map(|r| {
            let mut x = r.c.clone();
            x.extend_from_slice(r.l.as_ref().expect("l checked"));
            fit.predict(&x)
        })
        .collect())
}

/// `E(Y¹⁰ − Y⁰⁰)`: non-switchers on each arm weighted by
/// `1 / (π_a(C) P(S = 0 | R = a, L, C))`.
pub fn estimate_hypothetical(
    dataset: &TrialDataset,
    propensity_covariates: &[String],
) -> Result<EstimateResult> {
    dataset.require_l(1)?;
    dataset.require_l(0)?;
    let prop = fit_propensity(dataset, propensity_covariates)?;
    let mut means = [0.0; 2];
    for arm in [1u8, 0u8] {
        let stay = stay_probabilities(dataset, arm)?;
        let recs = dataset.records().iter().filter(|r| r.arm() == arm);
        means[arm as usize] = hajek(recs.zip(stay).filter(|(r, _)| !r.switched).map(|(r, st)| {
            let pa = if arm == 1 {
                prop.pi(&r.c)
            } else {
                1.0 - prop.pi(&r.c)
            };
            (1.0 / (pa * st.max(PROB_FLOOR)), r.y)
        }));
    }
    Ok(EstimateResult::new(
        Estimand::Hypothetical,
        means[1],
        means[0],
        OptionsEcho {
            propensity_covariates: propensity_covariates.to_vec(),
            ..OptionsEcho::default()
        },
    ))
}
