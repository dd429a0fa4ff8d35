//! The control-arm switching model given the treated-arm covariates, and the
//! estimating equations that pin down its intercept and baseline slopes.
//!
//! Treated switching follows `p = expit(ω₁ + ω₂'C + ω₃'L)`. Control
//! switching, had the patient's covariates been those under treatment,
//! follows `pλ = expit(λ₁ + λ₂'C + ρ ω₃'L)`; only `λ` is unknown.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{TrialDataset, TrialRecord};
use crate::error::{Error, Result};
use crate::logistic::{clamp_prob, expit, softplus, LogisticFit, PropensityModel};
use crate::numeric::solve;

pub const RESIDUAL_TOLERANCE: f64 = 1e-8;
const MAX_ITERATIONS: usize = 200;
const MAX_HALVINGS: usize = 60;
const POLISH_STEPS: usize = 3;

/// Which observed subgroup balances the two arms in the λ equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Variant {
    /// Match the non-switchers (terms in `1 − S`).
    #[default]
    NonSwitcherEq,
    /// Match the switchers (terms in `S`).
    SwitcherEq,
}

impl Variant {
    /// The switch status whose records enter the equations.
    pub fn target_s(self) -> bool {
        matches!(self, Variant::SwitcherEq)
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "non-switcher" | "nonswitcher" | "NonSwitcherEq" => Ok(Variant::NonSwitcherEq),
            "switcher" | "SwitcherEq" => Ok(Variant::SwitcherEq),
            other => Err(format!(
                "unknown variant `{other}` (expected non-switcher or switcher)"
            )),
        }
    }
}

/// Starting point for the λ Newton iteration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub enum LambdaStart {
    #[default]
    Zeros,
    /// ω's intercept and baseline slopes.
    FromOmega,
    Given(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    /// Max-norm of the λ residual at the returned point.
    pub residual_norm: f64,
    pub converged: bool,
}

/// The fitted treated and control switching laws.
///
/// `omega == None` means nobody on the treated arm switched and the treated
/// switching probability is fixed at 0; `lambda == None` does the same for
/// the control arm. Both are absent only when nobody switched at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchModels {
    pub omega: Option<LogisticFit>,
    pub lambda: Option<Vec<f64>>,
    pub rho: f64,
    pub variant: Variant,
    pub c_dim: usize,
    pub l_dim: usize,
    pub diagnostics: SolverDiagnostics,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

impl SwitchModels {
    /// Models in which the control law equals the treated law (`λ` set to ω's
    /// matching components), so every weight is 1 when `rho == 1`.
    pub fn matching_omega(
        omega: LogisticFit,
        c_dim: usize,
        l_dim: usize,
        rho: f64,
        variant: Variant,
    ) -> Self {
        let lambda = omega.coefficients[..1 + c_dim].to_vec();
        SwitchModels {
            omega: Some(omega),
            lambda: Some(lambda),
            rho,
            variant,
            c_dim,
            l_dim,
            diagnostics: SolverDiagnostics {
                iterations: 0,
                residual_norm: f64::NAN,
                converged: false,
            },
        }
    }

    /// Slopes of the treated law on `L`.
    pub fn omega_l(&self) -> Option<&[f64]> {
        self.omega
            .as_ref()
            .map(|o| &o.coefficients[1 + self.c_dim..])
    }

    fn check_dims(&self, l: &[f64], c: &[f64]) -> Result<()> {
        if c.len() != self.c_dim || l.len() != self.l_dim {
            return Err(Error::DimensionMismatch(format!(
                "record has (c, l) dimensions ({}, {}), models expect ({}, {})",
                c.len(),
                l.len(),
                self.c_dim,
                self.l_dim
            )));
        }
        Ok(())
    }

    /// `ω'(1, C, L)`.
    pub fn omega_eta(&self, l: &[f64], c: &[f64]) -> Option<f64> {
        self.omega.as_ref().map(|o| {
            let b = &o.coefficients;
            b[0] + dot(&b[1..1 + self.c_dim], c) + dot(&b[1 + self.c_dim..], l)
        })
    }

    /// `λ₁ + λ₂'C + ρ ω₃'L`.
    pub fn lambda_eta(&self, l: &[f64], c: &[f64]) -> Option<f64> {
        let lam = self.lambda.as_ref()?;
        let l_part = self.omega_l().map_or(0.0, |w| self.rho * dot(w, l));
        Some(lam[0] + dot(&lam[1..], c) + l_part)
    }

    /// Treated switching probability (0 when no treated patient switched).
    pub fn treated_prob(&self, l: &[f64], c: &[f64]) -> f64 {
        self.omega_eta(l, c).map_or(0.0, expit)
    }

    /// Control switching probability given treated-arm covariates.
    pub fn control_prob(&self, l: &[f64], c: &[f64]) -> f64 {
        self.lambda_eta(l, c).map_or(0.0, expit)
    }

    /// Ratio `P(S = s | R = 0, L, C) / P(S = s | R = 1, L, C)` for a treated
    /// record; the treated probability is clipped in the denominator.
    pub fn weight(&self, switched: bool, l: &[f64], c: &[f64]) -> f64 {
        if self.omega.is_none() {
            return 1.0;
        }
        let p = clamp_prob(self.treated_prob(l, c));
        if switched {
            self.control_prob(l, c) / p
        } else {
            // expit(-η) rather than 1 - expit(η), which rounds to 0 for large η.
            let stay = self.lambda_eta(l, c).map_or(1.0, |e| expit(-e));
            stay / (1.0 - p)
        }
    }
}

/// The two tilt exponents `(q₀(C), q₁(L, C))`; `exp(q₀ + q₁)` is the
/// control-versus-treated switching odds ratio at `(l, c)`.
pub fn q_terms(l: &[f64], c: &[f64], models: &SwitchModels) -> Result<(f64, f64)> {
    models.check_dims(l, c)?;
    let (Some(omega), Some(lambda)) = (&models.omega, &models.lambda) else {
        return Err(Error::InvalidArgument(
            "tilt is undefined when an arm has no switching model".into(),
        ));
    };
    let w = &omega.coefficients;
    let q0 = lambda[0] - w[0]
        + lambda[1..]
            .iter()
            .zip(&w[1..1 + models.c_dim])
            .zip(c)
            .map(|((a, b), x)| (a - b) * x)
            .sum::<f64>();
    let q1 = (models.rho - 1.0) * dot(&w[1 + models.c_dim..], l);
    Ok((q0, q1))
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "rho = {rho} outside (0, 1]"
        )))
    }
}

struct TreatedTerm {
    psi: Vec<f64>,
    /// Clipped treated switching probability.
    p: f64,
    /// `ρ ω₃'L`.
    offset: f64,
    inv_pi: f64,
}

/// The λ equations with everything not depending on λ precomputed.
struct LambdaProblem {
    variant: Variant,
    control_sum: Vec<f64>,
    treated: Vec<TreatedTerm>,
}

fn psi(record: &TrialRecord) -> Vec<f64> {
    let mut v = Vec::with_capacity(1 + record.c.len());
    v.push(1.0);
    v.extend_from_slice(&record.c);
    v
}

impl LambdaProblem {
    fn new(
        dataset: &TrialDataset,
        omega: &LogisticFit,
        rho: f64,
        propensity: &PropensityModel,
        variant: Variant,
    ) -> Result<Self> {
        dataset.require_l(1)?;
        let c_dim = dataset.c_dim();
        if omega.dim() != 1 + c_dim + dataset.l_dim() {
            return Err(Error::DimensionMismatch(format!(
                "switching model has {} coefficients, data imply {}",
                omega.dim(),
                1 + c_dim + dataset.l_dim()
            )));
        }
        let w = &omega.coefficients;
        let s_star = variant.target_s();
        let mut control_sum = vec![0.0; 1 + c_dim];
        let mut treated = Vec::new();
        for rec in dataset.records() {
            if rec.switched != s_star {
                continue;
            }
            let pi = propensity.pi(&rec.c);
            let ps = psi(rec);
            if rec.treated {
                let l = rec.l.as_deref().expect("checked by require_l");
                let eta = w[0] + dot(&w[1..1 + c_dim], &rec.c) + dot(&w[1 + c_dim..], l);
                treated.push(TreatedTerm {
                    psi: ps,
                    p: clamp_prob(expit(eta)),
                    offset: rho * dot(&w[1 + c_dim..], l),
                    inv_pi: 1.0 / pi,
                });
            } else {
                let f = 1.0 / (1.0 - pi);
                for (acc, v) in control_sum.iter_mut().zip(&ps) {
                    *acc += v * f;
                }
            }
        }
        Ok(LambdaProblem {
            variant,
            control_sum,
            treated,
        })
    }

    fn residual(&self, lambda: &[f64]) -> Vec<f64> {
        let mut r = self.control_sum.clone();
        for t in &self.treated {
            let eta = lambda[0] + dot(&lambda[1..], &t.psi[1..]) + t.offset;
            let w = match self.variant {
                Variant::NonSwitcherEq => expit(-eta) / (1.0 - t.p),
                Variant::SwitcherEq => expit(eta) / t.p,
            };
            let f = w * t.inv_pi;
            for (acc, v) in r.iter_mut().zip(&t.psi) {
                *acc -= v * f;
            }
        }
        r
    }

    /// A strictly convex function whose gradient is `±residual`, so its
    /// minimiser is the unique root.
    fn objective(&self, lambda: &[f64]) -> f64 {
        let linear = dot(&self.control_sum, lambda);
        let mut total = 0.0;
        for t in &self.treated {
            let eta = lambda[0] + dot(&lambda[1..], &t.psi[1..]) + t.offset;
            total += match self.variant {
                Variant::NonSwitcherEq => t.inv_pi / (1.0 - t.p) * softplus(-eta),
                Variant::SwitcherEq => t.inv_pi / t.p * softplus(eta),
            };
        }
        match self.variant {
            Variant::NonSwitcherEq => linear + total,
            Variant::SwitcherEq => total - linear,
        }
    }
}

/// `Σᵢ ψ(Cᵢ) [control term − tilted treated term]` with `ψ(C) = (1, C)`.
pub fn lambda_residual(
    lambda: &[f64],
    dataset: &TrialDataset,
    omega: &LogisticFit,
    rho: f64,
    propensity: &PropensityModel,
    variant: Variant,
) -> Result<Vec<f64>> {
    if lambda.len() != 1 + dataset.c_dim() {
        return Err(Error::DimensionMismatch(format!(
            "lambda has {} components, expected {}",
            lambda.len(),
            1 + dataset.c_dim()
        )));
    }
    Ok(LambdaProblem::new(dataset, omega, rho, propensity, variant)?.residual(lambda))
}

/// Solve the λ equations by Newton's method with a forward-difference
/// Jacobian and step halving.
pub fn solve_lambda(
    dataset: &TrialDataset,
    omega: &LogisticFit,
    rho: f64,
    propensity: &PropensityModel,
    variant: Variant,
    start: &LambdaStart,
) -> Result<SwitchModels> {
    check_rho(rho)?;
    let c_dim = dataset.c_dim();
    let k = 1 + c_dim;
    let s_star = variant.target_s();
    for arm in [1u8, 0u8] {
        let hits = dataset
            .records()
            .iter()
            .filter(|r| r.arm() == arm && r.switched == s_star)
            .count();
        if hits == 0 {
            let who = if s_star { "switchers" } else { "non-switchers" };
            let name = if arm == 1 { "treated" } else { "control" };
            return Err(Error::DegenerateArm(format!(
                "the {name} arm has no {who}, which {variant:?} needs"
            )));
        }
    }
    let problem = LambdaProblem::new(dataset, omega, rho, propensity, variant)?;
    let lambda = match start {
        LambdaStart::Zeros => vec![0.0; k],
        LambdaStart::FromOmega => omega.coefficients[..k].to_vec(),
        LambdaStart::Given(v) if v.len() == k => v.clone(),
        LambdaStart::Given(v) => {
            return Err(Error::DimensionMismatch(format!(
                "start has {} components, expected {k}",
                v.len()
            )))
        }
    };
    // Line-search merit with each equation divided by the RMS of its ψ
    // column, so rescaling a baseline covariate leaves the search unchanged.
    let n = dataset.len() as f64;
    let psi_scale: Vec<f64> = std::iter::once(1.0)
        .chain((0..c_dim).map(|j| {
            let rms = (dataset
                .records()
                .iter()
                .map(|r| r.c[j] * r.c[j])
                .sum::<f64>()
                / n)
                .sqrt();
            if rms > 0.0 {
                rms
            } else {
                1.0
            }
        }))
        .collect();
    let merit = |r: &[f64]| {
        r.iter()
            .zip(&psi_scale)
            .map(|(v, s)| (v / s).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let newton_step = |lambda: &[f64], r: &[f64]| {
        let mut jac = DMatrix::zeros(k, k);
        for j in 0..k {
            let h = 1e-6 * (1.0 + lambda[j].abs());
            let mut shifted = lambda.to_vec();
            shifted[j] += h;
            let rj = problem.residual(&shifted);
            for i in 0..k {
                jac[(i, j)] = (rj[i] - r[i]) / h;
            }
        }
        let neg_r = DVector::from_iterator(k, r.iter().map(|v| -v));
        solve(&jac, &neg_r, "lambda Newton step")
            .ok()
            .map(|d| d.iter().copied().collect::<Vec<f64>>())
    };
    let spent = std::cell::Cell::new(0usize);
    // Damped Newton from `lambda`. Steps are halved until the residual merit
    // falls or, with `convex`, until the convex objective falls.
    let run = |mut lambda: Vec<f64>, convex: bool| -> NewtonOutcome {
        let mut r = problem.residual(&lambda);
        for iteration in 0..=MAX_ITERATIONS {
            if max_abs(&r) < RESIDUAL_TOLERANCE {
                // Polish to the rounding floor so that fits on equivalent data
                // (reordered, duplicated) agree far below the tolerance.
                for _ in 0..POLISH_STEPS {
                    let Some(step) = newton_step(&lambda, &r) else {
                        break;
                    };
                    let cand: Vec<f64> = lambda.iter().zip(&step).map(|(a, d)| a + d).collect();
                    let rc = problem.residual(&cand);
                    if !(rc.iter().all(|v| v.is_finite()) && merit(&rc) < merit(&r)) {
                        break;
                    }
                    lambda = cand;
                    r = rc;
                }
                spent.set(spent.get() + iteration);
                return Ok((lambda, r, spent.get()));
            }
            let step = if iteration == MAX_ITERATIONS || !r.iter().all(|v| v.is_finite()) {
                None
            } else {
                newton_step(&lambda, &r)
            };
            let Some(step) = step else {
                spent.set(spent.get() + iteration);
                return Err((lambda, r));
            };
            let base = if convex {
                problem.objective(&lambda)
            } else {
                merit(&r)
            };
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..MAX_HALVINGS {
                let cand: Vec<f64> = lambda.iter().zip(&step).map(|(a, d)| a + t * d).collect();
                let rc = problem.residual(&cand);
                let value = if convex {
                    problem.objective(&cand)
                } else {
                    merit(&rc)
                };
                if rc.iter().all(|v| v.is_finite()) && value < base {
                    lambda = cand;
                    r = rc;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                spent.set(spent.get() + iteration + 1);
                return Err((lambda, r));
            }
        }
        unreachable!("the final iteration always returns")
    };
    let finish = |lambda: Vec<f64>, r: &[f64], iterations: usize| SwitchModels {
        omega: Some(omega.clone()),
        lambda: Some(lambda),
        rho,
        variant,
        c_dim,
        l_dim: dataset.l_dim(),
        diagnostics: SolverDiagnostics {
            iterations,
            residual_norm: max_abs(r),
            converged: true,
        },
    };
    // The residual-norm search can wander off on flat, saturated stretches;
    // descending the convex objective cannot, but it stalls at that
    // objective's rounding floor, from where the residual search finishes.
    let attempt = run(lambda.clone(), false)
        .or_else(|_| run(lambda, true))
        .or_else(|(near, _)| run(near, false));
    let (lambda, r) = match attempt {
        Ok((l, r, it)) => return Ok(finish(l, &r, it)),
        Err(best) => best,
    };
    Err(Error::NonConvergence {
        what: "lambda equations",
        iterations: spent.get(),
        residual: max_abs(&r),
        best: Some(lambda),
    })
}

/// `Ok((λ, residual, iterations))` at a root, `Err((λ, residual))` at the
/// last iterate otherwise.
type NewtonOutcome = std::result::Result<(Vec<f64>, Vec<f64>, usize), (Vec<f64>, Vec<f64>)>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logistic::fit_propensity;

    fn fit(coefficients: Vec<f64>) -> LogisticFit {
        LogisticFit {
            design_labels: (0..coefficients.len()).map(|j| format!("x{j}")).collect(),
            coefficients,
            converged: true,
            iterations: 0,
            log_likelihood: 0.0,
        }
    }

    fn models(omega: Vec<f64>, lambda: Vec<f64>, rho: f64) -> SwitchModels {
        SwitchModels {
            omega: Some(fit(omega)),
            lambda: Some(lambda),
            rho,
            variant: Variant::NonSwitcherEq,
            c_dim: 1,
            l_dim: 1,
            diagnostics: SolverDiagnostics {
                iterations: 0,
                residual_norm: 0.0,
                converged: true,
            },
        }
    }

    #[test]
    fn q_terms_for_identical_models_vanish() {
        let m = models(vec![-1.0, 0.3, 2.0], vec![-1.0, 0.3], 1.0);
        assert_eq!(q_terms(&[0.7], &[-1.2], &m).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn q_terms_scenario_one_arithmetic() {
        let m = models(vec![-7.0, -0.01, -7.0], vec![-5.0, -0.02], 0.9);
        let (q0, q1) = q_terms(&[-0.5], &[0.0], &m).unwrap();
        assert!((q0 - 2.0).abs() < 1e-15);
        assert!((q1 + 0.35).abs() < 1e-14, "{q1}");
    }

    #[test]
    fn q1_vanishes_at_rho_one() {
        let m = models(vec![-7.0, -0.01, -7.0], vec![-5.0, -0.02], 1.0);
        for l in [-3.0, 0.0, 12.5] {
            assert_eq!(q_terms(&[l], &[0.4], &m).unwrap().1, 0.0);
        }
    }

    #[test]
    fn q_terms_dimension_mismatch() {
        let m = models(vec![-7.0, -0.01, -7.0], vec![-5.0, -0.02], 1.0);
        assert!(matches!(
            q_terms(&[1.0, 2.0], &[0.0], &m),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn single_control_nonswitcher_residual() {
        let rec = |treated: bool| TrialRecord {
            treated,
            switched: false,
            y: 0.0,
            l: treated.then(|| vec![0.0]),
            c: vec![1.5],
        };
        // The treated record switches, so only the control term remains.
        let mut t = rec(true);
        t.switched = true;
        let ds = TrialDataset::new(
            vec![t, rec(false)],
            vec!["c".into()],
            vec!["l".into()],
            None,
        )
        .unwrap();
        let prop = fit_propensity(&ds, &[]).unwrap();
        let r = lambda_residual(
            &[0.0, 0.0],
            &ds,
            &fit(vec![0.0, 0.0, 0.0]),
            1.0,
            &prop,
            Variant::NonSwitcherEq,
        )
        .unwrap();
        let pi = prop.pi(&[1.5]);
        assert_eq!(r, vec![1.0 / (1.0 - pi), 1.5 / (1.0 - pi)]);
    }

    #[test]
    fn objective_gradient_is_residual() {
        let recs: Vec<TrialRecord> = (0..40)
            .map(|i| {
                let treated = i % 2 == 0;
                TrialRecord {
                    treated,
                    switched: i % 3 == 0,
                    y: 0.0,
                    l: treated.then(|| vec![(i as f64 * 0.37).sin()]),
                    c: vec![(i as f64 * 0.61).cos()],
                }
            })
            .collect();
        let ds = TrialDataset::new(recs, vec!["c".into()], vec!["l".into()], None).unwrap();
        let prop = fit_propensity(&ds, &[]).unwrap();
        let omega = fit(vec![-0.5, 0.4, 1.1]);
        for (variant, sign) in [(Variant::NonSwitcherEq, 1.0), (Variant::SwitcherEq, -1.0)] {
            let problem = LambdaProblem::new(&ds, &omega, 0.9, &prop, variant).unwrap();
            let lam = [-0.3, 0.8];
            let r = problem.residual(&lam);
            for j in 0..2 {
                let h = 1e-6;
                let (mut up, mut down) = (lam, lam);
                up[j] += h;
                down[j] -= h;
                let g = (problem.objective(&up) - problem.objective(&down)) / (2.0 * h);
                assert!(
                    (g - sign * r[j]).abs() < 1e-6,
                    "{variant:?} {j}: {g} vs {}",
                    sign * r[j]
                );
            }
        }
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("switcher".parse::<Variant>().unwrap(), Variant::SwitcherEq);
        assert_eq!(
            "non-switcher".parse::<Variant>().unwrap(),
            Variant::NonSwitcherEq
        );
        assert!("x".parse::<Variant>().is_err());
    }
}
