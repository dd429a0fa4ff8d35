//! Monte-Carlo replication of the balanced estimator on simulated trials,
//! and the sensitivity sweep over the dilution factor.

use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::TrialDataset;
use crate::error::{Error, Result};
use crate::estimators::{estimate_treatment_policy, fit_balanced, BalancedOptions, EstimateResult};
use crate::numeric::{format_g17, mean, sample_sd};
use crate::rng::{par_map_indexed, substream};
use crate::simulate::{
    generate_with_rng, true_values_with_jobs, ScenarioConfig, TruthCache, TruthValues,
};
use crate::tilt::{LambdaStart, Variant};

/// Default Monte-Carlo size for the truth oracle.
pub const DEFAULT_TRUTH_MC: usize = 10_000_000;
/// Default seed for the truth oracle, kept apart from replicate seeds.
pub const DEFAULT_TRUTH_SEED: u64 = 20_240_101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOptions {
    pub variant: Variant,
    pub truncation: Option<(f64, f64)>,
    /// Worker threads (0 = one per core). Never changes results.
    pub jobs: usize,
    /// Known truth; computed (or read from `truth_cache`) when absent.
    pub truth: Option<TruthValues>,
    pub truth_mc: usize,
    pub truth_seed: u64,
    pub truth_cache: Option<PathBuf>,
    /// Preset number echoed into outputs, if the config is a preset.
    pub scenario: Option<u8>,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            variant: Variant::NonSwitcherEq,
            truncation: None,
            jobs: 0,
            truth: None,
            truth_mc: DEFAULT_TRUTH_MC,
            truth_seed: DEFAULT_TRUTH_SEED,
            truth_cache: None,
            scenario: None,
        }
    }
}

/// Bias and spread of one estimated quantity across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub param: String,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    /// Empirical SE (SD of estimates); `None` with fewer than two replicates.
    pub se: Option<f64>,
}

/// One replicate's estimates; `None` fields mark a failed fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub mu1: Option<f64>,
    pub mu0: Option<f64>,
    pub mu: Option<f64>,
    pub weight_p5: Option<f64>,
    pub weight_p95: Option<f64>,
    pub policy_mu: Option<f64>,
    pub policy_mu1: Option<f64>,
    pub policy_mu0: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyEcho {
    pub scenario: Option<u8>,
    pub config: ScenarioConfig,
    pub n: usize,
    pub reps: usize,
    pub rho_assumed: f64,
    pub variant: Variant,
    pub truncation: Option<(f64, f64)>,
    pub seed: u64,
    pub truth: TruthValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    /// Balanced `mu`, `mu1`, `mu0`, then treatment-policy `policy_mu`,
    /// `policy_mu1`, `policy_mu0`.
    pub params: Vec<ParamSummary>,
    /// Mean over replicates of the per-replicate normalised-weight percentiles.
    pub weight_p5: Option<f64>,
    pub weight_p95: Option<f64>,
    pub reps_completed: usize,
    pub reps_failed: usize,
    pub echo: StudyEcho,
    pub replicates: Vec<ReplicateRecord>,
}

impl StudyResult {
    pub fn param(&self, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.param == name)
    }

    /// Summary CSV: `scenario,n,reps,rho,param,bias,se,w_p5,w_p95,failed`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,n,reps,rho,param,bias,se,w_p5,w_p95,failed\n");
        let scenario = self
            .echo
            .scenario
            .map_or("custom".to_string(), |s| s.to_string());
        let opt = |v: Option<f64>| v.map(format_g17).unwrap_or_default();
        for p in &self.params {
            let weights = !p.param.starts_with("policy");
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                scenario,
                self.echo.n,
                self.echo.reps,
                format_g17(self.echo.rho_assumed),
                p.param,
                format_g17(p.bias),
                opt(p.se),
                if weights {
                    opt(self.weight_p5)
                } else {
                    String::new()
                },
                if weights {
                    opt(self.weight_p95)
                } else {
                    String::new()
                },
                self.reps_failed
            ));
        }
        out
    }

    /// Per-replicate estimates for plotting.
    pub fn plot_csv(&self) -> String {
        let mut out = Vec::new();
        writeln!(out, "replicate,mu1,mu0,mu,w_p5,w_p95,policy_mu,status").unwrap();
        let opt = |v: Option<f64>| v.map(format_g17).unwrap_or_default();
        for r in &self.replicates {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.replicate,
                opt(r.mu1),
                opt(r.mu0),
                opt(r.mu),
                opt(r.weight_p5),
                opt(r.weight_p95),
                opt(r.policy_mu),
                if r.error.is_some() { "failed" } else { "ok" }
            )
            .unwrap();
        }
        String::from_utf8(out).expect("utf-8")
    }
}

fn resolve_truth(config: &ScenarioConfig, options: &StudyOptions) -> Result<TruthValues> {
    if let Some(t) = &options.truth {
        return Ok(t.clone());
    }
    match &options.truth_cache {
        Some(dir) => TruthCache::new(dir).get_or_compute(
            config,
            options.truth_mc,
            options.truth_seed,
            options.jobs,
        ),
        None => true_values_with_jobs(config, options.truth_mc, options.truth_seed, options.jobs),
    }
}

fn summarize(param: &str, truth: f64, values: &[f64]) -> ParamSummary {
    let m = mean(values);
    ParamSummary {
        param: param.to_string(),
        truth,
        mean: m,
        bias: m - truth,
        se: sample_sd(values),
    }
}

/// Replicate `reps` simulated trials of size `n` and estimate the balanced
/// effect assuming `rho_assumed`. Replicate `r` draws from random stream `r`
/// under `seed`.
pub fn run_mc_study(
    config: &ScenarioConfig,
    n: usize,
    reps: usize,
    rho_assumed: f64,
    options: &StudyOptions,
    seed: u64,
) -> Result<StudyResult> {
    config.validate()?;
    if reps == 0 {
        return Err(Error::InvalidArgument("reps must be at least 1".into()));
    }
    if !(rho_assumed > 0.0 && rho_assumed <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "rho = {rho_assumed} outside (0, 1]"
        )));
    }
    let truth = resolve_truth(config, options)?;
    let balanced = BalancedOptions {
        variant: options.variant,
        truncation: options.truncation,
        ..BalancedOptions::default()
    };
    let outcomes = par_map_indexed(options.jobs, reps, |r| -> Result<ReplicateRecord> {
        let mut rng = substream(seed, r as u64);
        let attempt = generate_with_rng(config, n, &mut rng, false).and_then(|data| {
            let fit = fit_balanced(&data, rho_assumed, &balanced)?;
            let policy = estimate_treatment_policy(&data, &[])?;
            Ok((fit.result, policy))
        });
        match attempt {
            Ok((b, p)) => Ok(ReplicateRecord {
                replicate: r,
                mu1: Some(b.mu1),
                mu0: Some(b.mu0),
                mu: Some(b.mu),
                weight_p5: b.weight_p5,
                weight_p95: b.weight_p95,
                policy_mu: Some(p.mu),
                policy_mu1: Some(p.mu1),
                policy_mu0: Some(p.mu0),
                error: None,
            }),
            Err(e) if e.is_estimation_failure() => Ok(ReplicateRecord {
                replicate: r,
                mu1: None,
                mu0: None,
                mu: None,
                weight_p5: None,
                weight_p95: None,
                policy_mu: None,
                policy_mu1: None,
                policy_mu0: None,
                error: Some(e.to_string()),
            }),
            Err(e) => Err(e),
        }
    });
    let replicates = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let ok: Vec<&ReplicateRecord> = replicates.iter().filter(|r| r.error.is_none()).collect();
    let failed = reps - ok.len();
    if failed * 10 > reps || ok.is_empty() {
        return Err(Error::TooManyFailures {
            failed,
            requested: reps,
        });
    }
    let col = |f: fn(&ReplicateRecord) -> Option<f64>| -> Vec<f64> {
        ok.iter().filter_map(|r| f(r)).collect()
    };
    let mu = col(|r| r.mu);
    let mu1 = col(|r| r.mu1);
    let mu0 = col(|r| r.mu0);
    let pol = col(|r| r.policy_mu);
    let pol1 = col(|r| r.policy_mu1);
    let pol0 = col(|r| r.policy_mu0);
    let p5 = col(|r| r.weight_p5);
    let p95 = col(|r| r.weight_p95);
    let params = vec![
        summarize("mu", truth.mu, &mu),
        summarize("mu1", truth.mu1, &mu1),
        summarize("mu0", truth.mu0, &mu0),
        summarize("policy_mu", truth.policy_mu, &pol),
        summarize("policy_mu1", truth.policy_mu1, &pol1),
        summarize("policy_mu0", truth.policy_mu0, &pol0),
    ];
    Ok(StudyResult {
        params,
        weight_p5: (!p5.is_empty()).then(|| mean(&p5)),
        weight_p95: (!p95.is_empty()).then(|| mean(&p95)),
        reps_completed: ok.len(),
        reps_failed: failed,
        echo: StudyEcho {
            scenario: options.scenario,
            config: config.clone(),
            n,
            reps,
            rho_assumed,
            variant: options.variant,
            truncation: options.truncation,
            seed,
            truth,
        },
        replicates,
    })
}

/// Balanced estimates at each `ρ` in `rho_grid`, in grid order. Each solve
/// starts from the previous grid point's `λ`.
pub fn sensitivity_sweep(
    dataset: &TrialDataset,
    rho_grid: &[f64],
    options: &BalancedOptions,
) -> Result<Vec<EstimateResult>> {
    if rho_grid.is_empty() {
        return Err(Error::InvalidArgument("empty rho grid".into()));
    }
    if let Some(bad) = rho_grid.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Error::InvalidArgument(format!(
            "rho = {bad} outside (0, 1]"
        )));
    }
    let mut start = options.start.clone();
    let mut out = Vec::with_capacity(rho_grid.len());
    for &rho in rho_grid {
        let opts = BalancedOptions {
            start: start.clone(),
            ..options.clone()
        };
        let fit = fit_balanced(dataset, rho, &opts)?;
        if let Some(lam) = &fit.models.lambda {
            start = LambdaStart::Given(lam.clone());
        }
        out.push(fit.result);
    }
    Ok(out)
}
