//! Simulated trials with rescue switching, Monte-Carlo ground truth for the
//! simulated estimands, and exact estimands for small potential-outcome
//! tables.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{TrialDataset, TrialRecord};
use crate::error::{Error, Result};
use crate::logistic::expit;
use crate::numeric::to_json_g17;
use crate::rng::{par_map_indexed, substream};

/// Parameters of the data-generating mechanism:
///
/// ```text
/// R ~ Ber(1/2),  C ~ N(0, 1),  L | C ~ N(δ₁ + δ₂C, σ_L²)
/// S | R=1 ~ Ber(expit(ω₁ + ω₂C + ω₃L))
/// S | R=0 ~ Ber(expit(λ₁ + λ₂C + ρ ω₃L))
/// Y ~ N(α₁ + α₂S + α₃L + α₄C + α₅(1 − R), σ_Y²)
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub delta1: f64,
    pub delta2: f64,
    pub sigma_l: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub omega3: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
    pub alpha5: f64,
    pub sigma_y: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub rho_true: f64,
}

impl ScenarioConfig {
    /// Built-in scenarios 1, 2 and 3.
    pub fn preset(scenario: u8) -> Result<ScenarioConfig> {
        let base = ScenarioConfig {
            delta1: -0.5,
            delta2: 0.1,
            sigma_l: 0.3,
            omega1: -7.0,
            omega2: -0.01,
            omega3: -7.0,
            alpha1: 0.0,
            alpha2: 0.5,
            alpha3: 2.0,
            alpha4: 0.1,
            alpha5: -0.5,
            sigma_y: 0.3,
            lambda1: -5.0,
            lambda2: -0.02,
            rho_true: 0.9,
        };
        match scenario {
            1 => Ok(base),
            2 => Ok(ScenarioConfig {
                omega1: -9.0,
                omega3: -12.0,
                alpha5: -0.4,
                ..base
            }),
            3 => Ok(ScenarioConfig {
                delta2: 0.2,
                omega3: -11.0,
                alpha2: 0.7,
                alpha5: -0.7,
                lambda1: -2.0,
                ..base
            }),
            other => Err(Error::InvalidArgument(format!(
                "unknown scenario {other} (expected 1, 2 or 3)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.delta1,
            self.delta2,
            self.sigma_l,
            self.omega1,
            self.omega2,
            self.omega3,
            self.alpha1,
            self.alpha2,
            self.alpha3,
            self.alpha4,
            self.alpha5,
            self.sigma_y,
            self.lambda1,
            self.lambda2,
            self.rho_true,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "scenario parameters must be finite".into(),
            ));
        }
        if self.sigma_l <= 0.0 || self.sigma_y <= 0.0 {
            return Err(Error::InvalidArgument(
                "sigma_l and sigma_y must be positive".into(),
            ));
        }
        if !(self.rho_true > 0.0 && self.rho_true <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "rho_true = {} outside (0, 1]",
                self.rho_true
            )));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ScenarioConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ScenarioConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn treated_switch_prob(&self, c: f64, l: f64) -> f64 {
        expit(self.omega1 + self.omega2 * c + self.omega3 * l)
    }

    fn control_switch_prob(&self, c: f64, l: f64) -> f64 {
        expit(self.lambda1 + self.lambda2 * c + self.rho_true * self.omega3 * l)
    }

    /// `E(Y | S, L, C, R)` without the noise term.
    fn outcome_mean(&self, treated: bool, switched: bool, l: f64, c: f64) -> f64 {
        self.alpha1
            + self.alpha2 * (switched as u8 as f64)
            + self.alpha3 * l
            + self.alpha4 * c
            + self.alpha5 * (!treated as u8 as f64)
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Simulate `n` patients from `rng`. Controls carry `L` only when `retain_l`.
pub fn generate_with_rng(
    config: &ScenarioConfig,
    n: usize,
    rng: &mut impl Rng,
    retain_l: bool,
) -> Result<TrialDataset> {
    config.validate()?;
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 patients, got {n}"
        )));
    }
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let treated = rng.random::<f64>() < 0.5;
        let c = normal(rng);
        let l = config.delta1 + config.delta2 * c + config.sigma_l * normal(rng);
        let p = if treated {
            config.treated_switch_prob(c, l)
        } else {
            config.control_switch_prob(c, l)
        };
        let switched = rng.random::<f64>() < p;
        let y = config.outcome_mean(treated, switched, l, c) + config.sigma_y * normal(rng);
        records.push(TrialRecord {
            treated,
            switched,
            y,
            l: (treated || retain_l).then(|| vec![l]),
            c: vec![c],
        });
    }
    TrialDataset::new(records, vec!["c1".into()], vec!["l1".into()], None)
}

/// Simulate one trial of `n` patients from seed `seed`.
pub fn generate_scenario(config: &ScenarioConfig, n: usize, seed: u64) -> Result<TrialDataset> {
    generate_with_rng(config, n, &mut substream(seed, 0), false)
}

/// Population values of the estimands under a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthValues {
    /// `E(Y^{1S⁰})`.
    pub mu1: f64,
    /// `E(Y⁰)`.
    pub mu0: f64,
    pub mu: f64,
    pub policy_mu1: f64,
    pub policy_mu0: f64,
    pub policy_mu: f64,
    pub hyp_mu1: f64,
    pub hyp_mu0: f64,
    pub hyp_mu: f64,
    pub n_mc: usize,
    pub seed: u64,
}

const TRUTH_CHUNK: usize = 1 << 16;

/// Monte-Carlo truth from `n_mc` simulated patients with common draws of
/// `(C, L)` and of both potential switch indicators. Outcome noise has mean
/// zero and is integrated out analytically.
pub fn true_values(config: &ScenarioConfig, n_mc: usize, seed: u64) -> Result<TruthValues> {
    true_values_with_jobs(config, n_mc, seed, 0)
}

pub fn true_values_with_jobs(
    config: &ScenarioConfig,
    n_mc: usize,
    seed: u64,
    jobs: usize,
) -> Result<TruthValues> {
    config.validate()?;
    if n_mc == 0 {
        return Err(Error::InvalidArgument("n_mc must be positive".into()));
    }
    let chunks = n_mc.div_ceil(TRUTH_CHUNK);
    // Per chunk: sums of E(Y^{1S⁰}), E(Y^{1S¹}) and E(Y^{10}).
    let sums = par_map_indexed(jobs, chunks, |k| {
        let mut rng = substream(seed, k as u64);
        let size = TRUTH_CHUNK.min(n_mc - k * TRUTH_CHUNK);
        let mut acc = [0.0f64; 3];
        for _ in 0..size {
            let c = normal(&mut rng);
            let l = config.delta1 + config.delta2 * c + config.sigma_l * normal(&mut rng);
            let s0 = rng.random::<f64>() < config.control_switch_prob(c, l);
            let s1 = rng.random::<f64>() < config.treated_switch_prob(c, l);
            acc[0] += config.outcome_mean(true, s0, l, c);
            acc[1] += config.outcome_mean(true, s1, l, c);
            acc[2] += config.outcome_mean(true, false, l, c);
        }
        acc
    });
    let total = sums
        .iter()
        .fold([0.0; 3], |a, s| [a[0] + s[0], a[1] + s[1], a[2] + s[2]]);
    let nf = n_mc as f64;
    let mu1 = total[0] / nf;
    let mu0 = mu1 + config.alpha5;
    let policy_mu1 = total[1] / nf;
    let hyp_mu1 = total[2] / nf;
    let hyp_mu0 = hyp_mu1 + config.alpha5;
    Ok(TruthValues {
        mu1,
        mu0,
        mu: mu1 - mu0,
        policy_mu1,
        policy_mu0: mu0,
        policy_mu: policy_mu1 - mu0,
        hyp_mu1,
        hyp_mu0,
        hyp_mu: hyp_mu1 - hyp_mu0,
        n_mc,
        seed,
    })
}

/// On-disk cache of [`true_values`], one JSON file per
/// `(config, n_mc, seed)` keyed by a SHA-256 digest.
#[derive(Debug, Clone)]
pub struct TruthCache {
    dir: PathBuf,
}

impl TruthCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        TruthCache { dir: dir.into() }
    }

    pub fn key(config: &ScenarioConfig, n_mc: usize, seed: u64) -> String {
        let text = serde_json::to_string(&(config, n_mc, seed)).expect("config serialises");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn path(&self, config: &ScenarioConfig, n_mc: usize, seed: u64) -> PathBuf {
        self.dir
            .join(format!("truth-{}.json", Self::key(config, n_mc, seed)))
    }

    /// Cached value if present, else compute and store it.
    pub fn get_or_compute(
        &self,
        config: &ScenarioConfig,
        n_mc: usize,
        seed: u64,
        jobs: usize,
    ) -> Result<TruthValues> {
        let path = self.path(config, n_mc, seed);
        if let Ok(text) = std::fs::read_to_string(&path) {
            if let Ok(t) = serde_json::from_str::<TruthValues>(&text) {
                return Ok(t);
            }
        }
        let t = true_values_with_jobs(config, n_mc, seed, jobs)?;
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, to_json_g17(&t)?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(t)
    }
}

/// One patient's potential switch indicators and outcomes `Y^{rs}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialOutcomes {
    pub s0: bool,
    pub s1: bool,
    pub y00: f64,
    pub y01: f64,
    pub y10: f64,
    pub y11: f64,
}

impl PotentialOutcomes {
    fn y(&self, r: bool, s: bool) -> f64 {
        match (r, s) {
            (false, false) => self.y00,
            (false, true) => self.y01,
            (true, false) => self.y10,
            (true, true) => self.y11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialOutcomeTable {
    pub patients: Vec<PotentialOutcomes>,
}

impl PotentialOutcomeTable {
    /// The five-patient binary example. Cells never revealed by any estimand
    /// (`Y⁰¹` for patients who would not switch on control, `Y¹¹` for patients
    /// 1-2) are copied from their non-switching counterparts.
    pub fn toy() -> Self {
        let s0 = [false, false, true, true, true];
        let s1 = [false, false, false, false, true];
        let y00 = [1.0, 0.0, 0.0, 1.0, 0.0];
        let y01 = [1.0, 0.0, 1.0, 1.0, 0.0];
        let y10 = [1.0, 1.0, 0.0, 1.0, 0.0];
        let y11 = [1.0, 1.0, 1.0, 1.0, 0.0];
        PotentialOutcomeTable {
            patients: (0..5)
                .map(|i| PotentialOutcomes {
                    s0: s0[i],
                    s1: s1[i],
                    y00: y00[i],
                    y01: y01[i],
                    y10: y10[i],
                    y11: y11[i],
                })
                .collect(),
        }
    }

    /// Read a table with header `S0,S1,Y00,Y01,Y10,Y11`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path)?;
        let header = rdr.headers()?.clone();
        let cols = ["S0", "S1", "Y00", "Y01", "Y10", "Y11"];
        let idx: Vec<usize> = cols
            .iter()
            .map(|c| {
                header
                    .iter()
                    .position(|h| h == *c)
                    .ok_or_else(|| Error::MissingColumn(c.to_string()))
            })
            .collect::<Result<_>>()?;
        let mut patients = Vec::new();
        for (k, row) in rdr.records().enumerate() {
            let row = row?;
            let mut v = [0.0; 6];
            for (j, &i) in idx.iter().enumerate() {
                let raw = row.get(i).unwrap_or("").trim();
                v[j] = raw
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::BadValue {
                        line: k + 2,
                        column: cols[j].into(),
                        value: raw.into(),
                        reason: "expected a finite number".into(),
                    })?;
                if j < 2 && v[j] != 0.0 && v[j] != 1.0 {
                    return Err(Error::BadValue {
                        line: k + 2,
                        column: cols[j].into(),
                        value: raw.into(),
                        reason: "expected 0 or 1".into(),
                    });
                }
            }
            patients.push(PotentialOutcomes {
                s0: v[0] == 1.0,
                s1: v[1] == 1.0,
                y00: v[2],
                y01: v[3],
                y10: v[4],
                y11: v[5],
            });
        }
        if patients.is_empty() {
            return Err(Error::InvalidArgument(
                "potential-outcome table is empty".into(),
            ));
        }
        Ok(PotentialOutcomeTable { patients })
    }
}

/// Exact estimands of a complete potential-outcome table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEstimands {
    pub policy: f64,
    pub hypothetical: f64,
    /// `Err(EmptyStratum)` is reported as `None`.
    pub principal: Option<f64>,
    pub balanced: f64,
}

fn avg(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Principal-stratum effect among patients with `S⁰ = S¹ = 0`.
pub fn principal_effect(table: &PotentialOutcomeTable) -> Result<f64> {
    let never: Vec<&PotentialOutcomes> = table.patients.iter().filter(|p| !p.s0 && !p.s1).collect();
    if never.is_empty() {
        return Err(Error::EmptyStratum);
    }
    Ok(avg(never.iter().map(|p| p.y10 - p.y00)))
}

/// Policy, hypothetical, principal-stratum and balanced effects by enumeration.
pub fn toy_estimands(table: &PotentialOutcomeTable) -> ToyEstimands {
    // Means of per-patient contrasts keep small rational answers exact.
    let p = &table.patients;
    ToyEstimands {
        policy: avg(p.iter().map(|x| x.y(true, x.s1) - x.y(false, x.s0))),
        hypothetical: avg(p.iter().map(|x| x.y10 - x.y00)),
        principal: principal_effect(table).ok(),
        balanced: avg(p.iter().map(|x| x.y(true, x.s0) - x.y(false, x.s0))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_table_estimands() {
        let e = toy_estimands(&PotentialOutcomeTable::toy());
        assert_eq!(e.policy, 0.0);
        assert_eq!(e.hypothetical, 0.2);
        assert_eq!(e.principal, Some(0.5));
        assert_eq!(e.balanced, 0.2);
    }

    #[test]
    fn all_ones_table_has_no_effects() {
        let mut t = PotentialOutcomeTable::toy();
        for p in &mut t.patients {
            p.y00 = 1.0;
            p.y01 = 1.0;
            p.y10 = 1.0;
            p.y11 = 1.0;
        }
        let e = toy_estimands(&t);
        assert_eq!(
            (e.policy, e.hypothetical, e.principal, e.balanced),
            (0.0, 0.0, Some(0.0), 0.0)
        );
    }

    #[test]
    fn empty_principal_stratum() {
        let mut t = PotentialOutcomeTable::toy();
        for p in &mut t.patients {
            p.s0 = true;
        }
        assert!(matches!(principal_effect(&t), Err(Error::EmptyStratum)));
        assert_eq!(toy_estimands(&t).principal, None);
    }

    #[test]
    fn presets_match_table() {
        let s2 = ScenarioConfig::preset(2).unwrap();
        assert_eq!((s2.omega1, s2.omega3, s2.alpha5), (-9.0, -12.0, -0.4));
        let s3 = ScenarioConfig::preset(3).unwrap();
        assert_eq!(
            (s3.delta2, s3.omega3, s3.alpha2, s3.alpha5, s3.lambda1),
            (0.2, -11.0, 0.7, -0.7, -2.0)
        );
        assert!(ScenarioConfig::preset(9).is_err());
    }

    #[test]
    fn config_json_uses_field_names() {
        let cfg = ScenarioConfig::preset(1).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        for f in [
            "delta1", "sigma_l", "omega3", "alpha5", "sigma_y", "lambda2", "rho_true",
        ] {
            assert!(text.contains(&format!("\"{f}\"")), "{f}");
        }
        let back: ScenarioConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = ScenarioConfig::preset(1).unwrap();
        let a = generate_scenario(&cfg, 200, 4).unwrap();
        assert_eq!(a, generate_scenario(&cfg, 200, 4).unwrap());
        assert_ne!(a, generate_scenario(&cfg, 200, 5).unwrap());
        assert!(a.records().iter().all(|r| r.l.is_some() == r.treated));
        let mut rng = substream(4, 0);
        let kept = generate_with_rng(&cfg, 200, &mut rng, true).unwrap();
        assert!(kept.records().iter().all(|r| r.l.is_some()));
    }

    #[test]
    fn truth_is_independent_of_jobs() {
        let cfg = ScenarioConfig::preset(1).unwrap();
        let a = true_values_with_jobs(&cfg, 200_000, 3, 1).unwrap();
        let b = true_values_with_jobs(&cfg, 200_000, 3, 4).unwrap();
        assert_eq!(a, b);
        assert!((a.mu + cfg.alpha5).abs() < 1e-12);
    }

    #[test]
    fn truth_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = TruthCache::new(dir.path());
        let cfg = ScenarioConfig::preset(2).unwrap();
        let a = cache.get_or_compute(&cfg, 10_000, 1, 1).unwrap();
        assert!(cache.path(&cfg, 10_000, 1).exists());
        assert_eq!(a, cache.get_or_compute(&cfg, 10_000, 1, 1).unwrap());
        assert_ne!(
            TruthCache::key(&cfg, 10_000, 1),
            TruthCache::key(&cfg, 10_000, 2)
        );
    }
}
