//! Standard errors: the sandwich influence function of the balanced
//! estimator, and a stratified nonparametric bootstrap for any estimator.
//!
//! Every population expectation in the influence function is replaced by a
//! full-sample mean at the fitted parameters.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{TrialDataset, TrialRecord};
use crate::error::{Error, Result};
use crate::estimators::{
    estimate_balanced, estimate_hypothetical, estimate_treatment_policy, BalancedFit,
    BalancedOptions, EstimateResult, SeMethod, StandardErrors,
};
use crate::logistic::{clamp_prob, expit};
use crate::numeric::{invert, mean, nearest_rank_sorted, sample_sd};
use crate::rng::{par_map_indexed, substream};

/// Parameters entering `W/π` for one treated record.
#[derive(Debug, Clone, Copy)]
pub struct WeightParams<'a> {
    /// `(λ₁, λ₂)`, or `None` when the control switching probability is 0.
    pub lambda: Option<&'a [f64]>,
    /// `(ω₁, ω₂, ω₃)` laid out as intercept, baseline, post-treatment.
    pub omega: &'a [f64],
    /// Propensity coefficients, intercept first.
    pub theta: &'a [f64],
    /// Baseline covariates used by the propensity model.
    pub propensity_columns: &'a [usize],
    pub rho: f64,
}

/// `W/π` and its gradients with respect to `λ`, `ω` and `θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDerivatives {
    pub value: f64,
    pub d_lambda: Vec<f64>,
    pub d_omega: Vec<f64>,
    pub d_theta: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct RecordTerms {
    z: Vec<f64>,
    x: Vec<f64>,
    p: f64,
    p_lambda: f64,
    pi: f64,
    l_offset: Vec<f64>,
}

fn record_terms(rec: &TrialRecord, params: &WeightParams) -> RecordTerms {
    let l = rec.l.as_deref().expect("treated record carries l");
    let c_dim = rec.c.len();
    let mut z = Vec::with_capacity(1 + c_dim + l.len());
    z.push(1.0);
    z.extend_from_slice(&rec.c);
    z.extend_from_slice(l);
    let mut x = vec![1.0];
    x.extend(params.propensity_columns.iter().map(|&j| rec.c[j]));
    let omega_l = &params.omega[1 + c_dim..];
    let p = expit(dot(params.omega, &z));
    let p_lambda = params.lambda.map_or(0.0, |lam| {
        expit(lam[0] + dot(&lam[1..], &rec.c) + params.rho * dot(omega_l, l))
    });
    let pi = expit(dot(params.theta, &x));
    let mut l_offset = vec![0.0; 1 + c_dim];
    l_offset.extend(l.iter().map(|v| params.rho * v));
    RecordTerms {
        z,
        x,
        p,
        p_lambda,
        pi,
        l_offset,
    }
}

/// `W/π` for a treated record, with the same probability clipping as the
/// estimator.
pub fn weight_over_propensity(rec: &TrialRecord, params: &WeightParams) -> f64 {
    let t = record_terms(rec, params);
    let p = clamp_prob(t.p);
    let w = if rec.switched {
        t.p_lambda / p
    } else {
        (1.0 - t.p_lambda) / (1.0 - p)
    };
    w / clamp_prob(t.pi)
}

/// Analytic gradients of [`weight_over_propensity`].
pub fn weight_over_propensity_gradient(
    rec: &TrialRecord,
    params: &WeightParams,
) -> WeightDerivatives {
    let t = record_terms(rec, params);
    let value = weight_over_propensity(rec, params);
    let s = rec.s();
    let a = s - t.p_lambda;
    let d_lambda = match params.lambda {
        Some(lam) => {
            let mut psi = vec![1.0];
            psi.extend_from_slice(&rec.c);
            debug_assert_eq!(psi.len(), lam.len());
            psi.iter().map(|v| value * a * v).collect()
        }
        None => Vec::new(),
    };
    let d_omega =
        t.z.iter()
            .zip(&t.l_offset)
            .map(|(z, off)| {
                let from_lambda = if params.lambda.is_some() {
                    a * off
                } else {
                    0.0
                };
                value * (from_lambda + (t.p - s) * z)
            })
            .collect();
    let d_theta = t.x.iter().map(|x| -value * (1.0 - t.pi) * x).collect();
    WeightDerivatives {
        value,
        d_lambda,
        d_omega,
        d_theta,
    }
}

/// Per-record influence values and the intermediate blocks behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IFComponents {
    pub phi_mu1: Vec<f64>,
    pub phi_mu0: Vec<f64>,
    pub phi_mu: Vec<f64>,
    /// Influence of λ per record (empty rows when λ is not estimated).
    pub phi_lambda: Vec<Vec<f64>>,
    /// Sample mean of `S_ω S_ω'` (empty when ω is not estimated).
    pub score_outer_omega: Vec<Vec<f64>>,
    pub score_outer_theta: Vec<Vec<f64>>,
    /// Per-record gradients of `W/π` (empty rows for control records).
    pub dv_dlambda: Vec<Vec<f64>>,
    pub dv_domega: Vec<Vec<f64>>,
    pub dv_dtheta: Vec<Vec<f64>>,
    pub se_mu1: f64,
    pub se_mu0: f64,
    pub se_mu: f64,
}

fn outer_mean(rows: &[Vec<f64>], n: usize) -> DMatrix<f64> {
    let k = rows.first().map_or(0, |r| r.len());
    let mut m = DMatrix::zeros(k, k);
    for r in rows {
        for a in 0..k {
            for b in 0..k {
                m[(a, b)] += r[a] * r[b];
            }
        }
    }
    m / n as f64
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// `sqrt(mean((φ − φ̄)²) / n)`.
fn if_se(phi: &[f64]) -> f64 {
    let n = phi.len() as f64;
    let m = mean(phi);
    (phi.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n / n).sqrt()
}

fn mat_vec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (m * DVector::from_column_slice(v))
        .iter()
        .copied()
        .collect()
}

/// Influence functions of `(μ̂₁, μ̂₀, μ̂)` for an untruncated balanced fit.
pub fn influence_components(fit: &BalancedFit) -> Result<IFComponents> {
    if fit.truncated {
        return Err(Error::TruncationUnsupported);
    }
    let data: &TrialDataset = &fit.data;
    let models = &fit.models;
    let recs = data.records();
    let n = recs.len();
    let nf = n as f64;
    let mu1 = fit.result.mu1;
    let mu0 = fit.result.mu0;
    let theta = &fit.propensity.fit.coefficients;
    let cols = &fit.propensity.columns;
    let k_theta = theta.len();

    // Propensity score block.
    let xs: Vec<Vec<f64>> = recs
        .iter()
        .map(|r| {
            std::iter::once(1.0)
                .chain(cols.iter().map(|&j| r.c[j]))
                .collect()
        })
        .collect();
    let pis: Vec<f64> = xs.iter().map(|x| expit(dot(theta, x))).collect();
    let mut h_theta = DMatrix::zeros(k_theta, k_theta);
    for (x, &pi) in xs.iter().zip(&pis) {
        let w = pi * (1.0 - pi);
        for a in 0..k_theta {
            for b in 0..k_theta {
                h_theta[(a, b)] += w * x[a] * x[b] / nf;
            }
        }
    }
    let h_theta_inv = invert(&h_theta, "propensity information")?;
    let score_theta: Vec<Vec<f64>> = recs
        .iter()
        .zip(&xs)
        .zip(&pis)
        .map(|((r, x), pi)| x.iter().map(|v| v * (r.r() - pi)).collect())
        .collect();
    let phi_theta: Vec<Vec<f64>> = score_theta
        .iter()
        .map(|s| mat_vec(&h_theta_inv, s))
        .collect();

    // The propensity entering the estimator (clipped) and its derivative terms.
    let pi_est: Vec<f64> = recs.iter().map(|r| fit.propensity.pi(&r.c)).collect();
    let control_w: Vec<f64> = pi_est.iter().map(|pi| 1.0 / (1.0 - pi)).collect();

    let omega = models.omega.as_ref().map(|o| o.coefficients.as_slice());
    let lambda = models.lambda.as_deref();
    let k_omega = omega.map_or(0, |o| o.len());
    let k_lambda = lambda.map_or(0, |l| l.len());

    // Per-record W/π and its gradients on the treated arm.
    let mut v = vec![0.0; n];
    let mut dv_dlambda = vec![Vec::new(); n];
    let mut dv_domega = vec![Vec::new(); n];
    let mut dv_dtheta = vec![Vec::new(); n];
    for (i, r) in recs.iter().enumerate() {
        if !r.treated {
            continue;
        }
        match omega {
            Some(om) => {
                let params = WeightParams {
                    lambda,
                    omega: om,
                    theta,
                    propensity_columns: cols,
                    rho: models.rho,
                };
                let d = weight_over_propensity_gradient(r, &params);
                v[i] = d.value;
                dv_dlambda[i] = d.d_lambda;
                dv_domega[i] = d.d_omega;
                dv_dtheta[i] = d.d_theta;
            }
            None => {
                v[i] = 1.0 / pi_est[i];
                dv_dtheta[i] = xs[i].iter().map(|x| -v[i] * (1.0 - pis[i]) * x).collect();
            }
        }
    }

    // Treated switching model block.
    let mut score_outer_omega = Vec::new();
    let mut phi_omega = vec![vec![0.0; k_omega]; n];
    if let Some(om) = omega {
        let mut h = DMatrix::zeros(k_omega, k_omega);
        let mut scores = vec![vec![0.0; k_omega]; n];
        for (i, r) in recs.iter().enumerate() {
            if !r.treated {
                continue;
            }
            let mut z = vec![1.0];
            z.extend_from_slice(&r.c);
            z.extend_from_slice(r.l.as_deref().expect("treated l"));
            let p = expit(dot(om, &z));
            let w = p * (1.0 - p);
            for a in 0..k_omega {
                for b in 0..k_omega {
                    h[(a, b)] += w * z[a] * z[b] / nf;
                }
            }
            scores[i] = z.iter().map(|v| v * (r.s() - p)).collect();
        }
        let h_inv = invert(&h, "switching-model information")?;
        score_outer_omega = to_rows(&outer_mean(&scores, n));
        phi_omega = scores.iter().map(|s| mat_vec(&h_inv, s)).collect();
    }

    // λ block.
    let mut phi_lambda = vec![Vec::new(); n];
    if lambda.is_some() {
        let s_star = models.variant.target_s();
        let mut a_mat = DMatrix::zeros(k_lambda, k_lambda);
        let mut b_omega = DMatrix::zeros(k_lambda, k_omega);
        let mut b_theta = DMatrix::zeros(k_lambda, k_theta);
        let mut u = vec![vec![0.0; k_lambda]; n];
        for (i, r) in recs.iter().enumerate() {
            if r.switched != s_star {
                continue;
            }
            let psi: Vec<f64> = std::iter::once(1.0).chain(r.c.iter().copied()).collect();
            if r.treated {
                for a in 0..k_lambda {
                    u[i][a] = -psi[a] * v[i];
                    for b in 0..k_lambda {
                        a_mat[(a, b)] -= psi[a] * dv_dlambda[i][b] / nf;
                    }
                    for b in 0..k_omega {
                        b_omega[(a, b)] -= psi[a] * dv_domega[i][b] / nf;
                    }
                    for b in 0..k_theta {
                        b_theta[(a, b)] -= psi[a] * dv_dtheta[i][b] / nf;
                    }
                }
            } else {
                let pi = pi_est[i];
                for a in 0..k_lambda {
                    u[i][a] = psi[a] * control_w[i];
                    for b in 0..k_theta {
                        b_theta[(a, b)] += psi[a] * (pi / (1.0 - pi)) * xs[i][b] / nf;
                    }
                }
            }
        }
        let a_inv = invert(&a_mat, "lambda equation Jacobian")?;
        for i in 0..n {
            let bo = mat_vec(&b_omega, &phi_omega[i]);
            let bt = mat_vec(&b_theta, &phi_theta[i]);
            let total: Vec<f64> = (0..k_lambda).map(|a| u[i][a] + bo[a] + bt[a]).collect();
            phi_lambda[i] = mat_vec(&a_inv, &total).into_iter().map(|x| -x).collect();
        }
    }

    // μ₁.
    let mut d_lambda = vec![0.0; k_lambda];
    let mut d_omega = vec![0.0; k_omega];
    let mut d_theta = vec![0.0; k_theta];
    let mut denom1 = 0.0;
    for (i, r) in recs.iter().enumerate() {
        if !r.treated {
            continue;
        }
        let e = r.y - mu1;
        denom1 += v[i] / nf;
        for (acc, d) in d_lambda.iter_mut().zip(&dv_dlambda[i]) {
            *acc += e * d / nf;
        }
        for (acc, d) in d_omega.iter_mut().zip(&dv_domega[i]) {
            *acc += e * d / nf;
        }
        for (acc, d) in d_theta.iter_mut().zip(&dv_dtheta[i]) {
            *acc += e * d / nf;
        }
    }
    let phi_mu1: Vec<f64> = (0..n)
        .map(|i| {
            let r = &recs[i];
            let own = if r.treated { v[i] * (r.y - mu1) } else { 0.0 };
            let corr = if k_lambda > 0 {
                dot(&d_lambda, &phi_lambda[i])
            } else {
                0.0
            } + dot(&d_omega, &phi_omega[i])
                + dot(&d_theta, &phi_theta[i]);
            (own + corr) / denom1
        })
        .collect();

    // μ₀.
    let mut e_theta = vec![0.0; k_theta];
    let mut denom0 = 0.0;
    for (i, r) in recs.iter().enumerate() {
        if r.treated {
            continue;
        }
        let pi = pi_est[i];
        denom0 += control_w[i] / nf;
        for (acc, x) in e_theta.iter_mut().zip(&xs[i]) {
            *acc += (r.y - mu0) * pi / (1.0 - pi) * x / nf;
        }
    }
    let phi_mu0: Vec<f64> = (0..n)
        .map(|i| {
            let r = &recs[i];
            let own = if r.treated {
                0.0
            } else {
                control_w[i] * (r.y - mu0)
            };
            (own + dot(&e_theta, &phi_theta[i])) / denom0
        })
        .collect();

    let phi_mu: Vec<f64> = phi_mu1.iter().zip(&phi_mu0).map(|(a, b)| a - b).collect();
    Ok(IFComponents {
        se_mu1: if_se(&phi_mu1),
        se_mu0: if_se(&phi_mu0),
        se_mu: if_se(&phi_mu),
        phi_mu1,
        phi_mu0,
        phi_mu,
        phi_lambda,
        score_outer_omega,
        score_outer_theta: to_rows(&outer_mean(&score_theta, n)),
        dv_dlambda,
        dv_domega,
        dv_dtheta,
    })
}

/// Influence-function standard errors of `(μ̂₁, μ̂₀, μ̂)`.
pub fn influence_se_balanced(fit: &BalancedFit) -> Result<StandardErrors> {
    let c = influence_components(fit)?;
    Ok(StandardErrors {
        method: SeMethod::Influence,
        mu: c.se_mu,
        mu1: Some(c.se_mu1),
        mu0: Some(c.se_mu0),
        replicates: None,
        failed: None,
    })
}

/// Which estimator a bootstrap replicate re-runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EstimatorSpec {
    Balanced { rho: f64, options: BalancedOptions },
    TreatmentPolicy { propensity_covariates: Vec<String> },
    Hypothetical { propensity_covariates: Vec<String> },
}

impl EstimatorSpec {
    pub fn estimate(&self, dataset: &TrialDataset) -> Result<EstimateResult> {
        match self {
            EstimatorSpec::Balanced { rho, options } => estimate_balanced(dataset, *rho, options),
            EstimatorSpec::TreatmentPolicy {
                propensity_covariates,
            } => estimate_treatment_policy(dataset, propensity_covariates),
            EstimatorSpec::Hypothetical {
                propensity_covariates,
            } => estimate_hypothetical(dataset, propensity_covariates),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// Sample SD of the replicate `μ̂`.
    pub se: f64,
    pub se_mu1: f64,
    pub se_mu0: f64,
    /// Nearest-rank 2.5% and 97.5% percentiles of the replicate `μ̂`.
    pub ci: (f64, f64),
    /// Completed replicate `μ̂` in replicate order.
    pub replicates: Vec<f64>,
    pub requested: usize,
    pub failed: usize,
}

impl BootstrapResult {
    pub fn standard_errors(&self) -> StandardErrors {
        StandardErrors {
            method: SeMethod::Bootstrap,
            mu: self.se,
            mu1: Some(self.se_mu1),
            mu0: Some(self.se_mu0),
            replicates: Some(self.requested),
            failed: Some(self.failed),
        }
    }
}

/// Record indices grouped by stratum label, groups in order of first
/// appearance. No labels means a single group.
pub fn strata_groups(n: usize, strata: Option<&[String]>) -> Result<Vec<Vec<usize>>> {
    let Some(labels) = strata else {
        return Ok(vec![(0..n).collect()]);
    };
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} stratum labels for {n} records",
            labels.len()
        )));
    }
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, s) in labels.iter().enumerate() {
        if s.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "record {i} has an empty stratum label"
            )));
        }
        let g = *index.entry(s.as_str()).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    Ok(groups)
}

/// Draw with replacement within each group, keeping group sizes.
pub fn resample_indices(groups: &[Vec<usize>], rng: &mut impl Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(groups.iter().map(Vec::len).sum());
    for g in groups {
        for _ in 0..g.len() {
            out.push(g[rng.random_range(0..g.len())]);
        }
    }
    out
}

/// Stratified nonparametric bootstrap of `spec` on `dataset`.
///
/// Replicate `b` uses random stream `b` under `seed`, so the output does not
/// depend on `jobs`. Replicates whose fit fails are dropped and counted; more
/// than 10% failures is an error.
pub fn bootstrap(
    dataset: &TrialDataset,
    spec: &EstimatorSpec,
    b: usize,
    seed: u64,
    strata: Option<&[String]>,
    jobs: usize,
) -> Result<BootstrapResult> {
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "bootstrap needs at least 2 replicates, got {b}"
        )));
    }
    let groups = strata_groups(dataset.len(), strata)?;
    let outcomes = par_map_indexed(jobs, b, |k| {
        let mut rng = substream(seed, k as u64);
        let idx = resample_indices(&groups, &mut rng);
        dataset.select(&idx).and_then(|d| spec.estimate(&d))
    });
    let mut mu = Vec::with_capacity(b);
    let mut mu1 = Vec::with_capacity(b);
    let mut mu0 = Vec::with_capacity(b);
    let mut failed = 0;
    for o in outcomes {
        match o {
            Ok(r) => {
                mu.push(r.mu);
                mu1.push(r.mu1);
                mu0.push(r.mu0);
            }
            Err(e) if e.is_estimation_failure() => failed += 1,
            Err(e) => return Err(e),
        }
    }
    if failed * 10 > b || mu.len() < 2 {
        return Err(Error::TooManyFailures {
            failed,
            requested: b,
        });
    }
    let mut sorted = mu.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(BootstrapResult {
        se: sample_sd(&mu).expect("two replicates"),
        se_mu1: sample_sd(&mu1).expect("two replicates"),
        se_mu0: sample_sd(&mu0).expect("two replicates"),
        ci: (
            nearest_rank_sorted(&sorted, 2.5),
            nearest_rank_sorted(&sorted, 97.5),
        ),
        replicates: mu,
        requested: b,
        failed,
    })
}
