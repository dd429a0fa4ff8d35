use std::time::Instant;

use serde::Serialize;

use crate::data::TrialDataset;
use crate::estimators::EstimateResult;
use crate::simulate::ToyEstimands;
use crate::study::StudyResult;

/// Row count, arm sizes and switch rates of an input dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputDigest {
    pub rows: usize,
    pub treated: usize,
    pub control: usize,
    pub switch_rate_treated: f64,
    pub switch_rate_control: f64,
}

impl InputDigest {
    pub fn of(data: &TrialDataset) -> Self {
        let (n1, n0) = (data.arm_size(1), data.arm_size(0));
        InputDigest {
            rows: data.len(),
            treated: n1,
            control: n0,
            switch_rate_treated: data.switchers(1) as f64 / n1 as f64,
            switch_rate_control: data.switchers(0) as f64 / n0 as f64,
        }
    }

    pub fn table(&self) -> String {
        format!(
            "{:<8} {:>8} {:>12}\n{:<8} {:>8} {:>12.4}\n{:<8} {:>8} {:>12.4}\n",
            "arm",
            "n",
            "switch rate",
            "treated",
            self.treated,
            self.switch_rate_treated,
            "control",
            self.control,
            self.switch_rate_control
        )
    }
}

/// The JSON document every command prints on stdout.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema: u32,
    pub command: String,
    pub arguments: String,
    pub digest: Option<InputDigest>,
    pub estimates: Vec<EstimateResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub study: Option<StudyResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub toy: Option<ToyEstimands>,
    pub warnings: Vec<String>,
    pub wall_time_seconds: f64,
}

impl RunReport {
    pub fn new(command: &str, arguments: String, started: Instant) -> Self {
        RunReport {
            schema: 1,
            command: command.to_string(),
            arguments,
            digest: None,
            estimates: Vec::new(),
            study: None,
            toy: None,
            warnings: Vec::new(),
            wall_time_seconds: started.elapsed().as_secs_f64(),
        }
    }

    pub fn finish(&mut self, started: Instant) {
        self.wall_time_seconds = started.elapsed().as_secs_f64();
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |x| format!("{x:.4}"))
}

pub fn estimate_table(results: &[EstimateResult]) -> String {
    let mut out = format!(
        "{:<16} {:>6} {:>10} {:>10} {:>10} {:>10} {:>21} {:>8} {:>8}\n",
        "estimand", "rho", "mu1", "mu0", "mu", "se", "95% CI", "w_p5", "w_p95"
    );
    for r in results {
        let ci =
            r.ci.map_or("-".to_string(), |(a, b)| format!("({a:.4}, {b:.4})"));
        out.push_str(&format!(
            "{:<16} {:>6} {:>10.4} {:>10.4} {:>10.4} {:>10} {:>21} {:>8} {:>8}\n",
            format!("{:?}", r.estimand),
            r.options.rho.map_or("-".to_string(), |v| format!("{v:.3}")),
            r.mu1,
            r.mu0,
            r.mu,
            opt(r.se.as_ref().map(|s| s.mu)),
            ci,
            opt(r.weight_p5),
            opt(r.weight_p95)
        ));
    }
    out
}

pub fn study_table(r: &StudyResult) -> String {
    let mut out = format!(
        "n = {}, reps = {} ({} failed), rho = {}\n{:<12} {:>10} {:>10} {:>10}\n",
        r.echo.n, r.echo.reps, r.reps_failed, r.echo.rho_assumed, "param", "truth", "bias", "se"
    );
    for p in &r.params {
        out.push_str(&format!(
            "{:<12} {:>10.4} {:>10.4} {:>10}\n",
            p.param,
            p.truth,
            p.bias,
            opt(p.se)
        ));
    }
    out.push_str(&format!(
        "weights p5 / p95: {} / {}\n",
        opt(r.weight_p5),
        opt(r.weight_p95)
    ));
    out
}
