//! Expit-linear probability models fitted by maximum likelihood.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::TrialDataset;
use crate::error::{Error, Result};
use crate::numeric::solve;

/// Score max-norm at which Newton stops.
pub const SCORE_TOLERANCE: f64 = 1e-10;
/// Coefficients beyond this magnitude are taken as evidence of separation.
pub const SEPARATION_BOUND: f64 = 30.0;
const MAX_ITERATIONS: usize = 100;
const MAX_HALVINGS: usize = 50;
const POLISH_STEPS: usize = 3;

/// Probabilities are clipped to `[PROB_FLOOR, 1 - PROB_FLOOR]` wherever they
/// appear in a denominator.
pub const PROB_FLOOR: f64 = 1e-12;

/// Logistic function, saturating cleanly at both ends.
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    /// Intercept first, then one slope per design column.
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
    pub design_labels: Vec<String>,
}

impl LogisticFit {
    /// `β'(1, x)`.
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len() + 1, self.coefficients.len());
        self.coefficients[0]
            + self.coefficients[1..]
                .iter()
                .zip(x)
                .map(|(b, v)| b * v)
                .sum::<f64>()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        expit(self.linear_predictor(x))
    }

    pub fn dim(&self) -> usize {
        self.coefficients.len()
    }
}

fn eta(beta: &[f64], design: &DMatrix<f64>, i: usize) -> f64 {
    beta[0]
        + (0..design.ncols())
            .map(|j| beta[j + 1] * design[(i, j)])
            .sum::<f64>()
}

/// Bernoulli log-likelihood of `beta` (intercept first).
pub fn log_likelihood(beta: &[f64], outcome: &[bool], design: &DMatrix<f64>) -> f64 {
    outcome
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let e = eta(beta, design, i);
            if y {
                -softplus(-e)
            } else {
                -softplus(e)
            }
        })
        .sum()
}

/// Score vector `Σ xᵢ (yᵢ − expit(xᵢ'β))` with `xᵢ = (1, designᵢ)`.
pub fn score(beta: &[f64], outcome: &[bool], design: &DMatrix<f64>) -> Vec<f64> {
    let k = design.ncols() + 1;
    let mut g = vec![0.0; k];
    for (i, &y) in outcome.iter().enumerate() {
        let r = y as u8 as f64 - expit(eta(beta, design, i));
        g[0] += r;
        for j in 1..k {
            g[j] += r * design[(i, j - 1)];
        }
    }
    g
}

fn information(beta: &[f64], design: &DMatrix<f64>) -> DMatrix<f64> {
    let k = design.ncols() + 1;
    let mut h = DMatrix::zeros(k, k);
    let mut x = vec![0.0; k];
    x[0] = 1.0;
    for i in 0..design.nrows() {
        for j in 1..k {
            x[j] = design[(i, j - 1)];
        }
        let p = expit(eta(beta, design, i));
        let w = p * (1.0 - p);
        for a in 0..k {
            for b in a..k {
                h[(a, b)] += w * x[a] * x[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            h[(a, b)] = h[(b, a)];
        }
    }
    h
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn check_rank(design: &DMatrix<f64>) -> Result<()> {
    let n = design.nrows();
    let k = design.ncols() + 1;
    let mut x = DMatrix::from_element(n, k, 1.0);
    x.view_mut((0, 1), (n, k - 1)).copy_from(design);
    let gram = x.transpose() * &x;
    let scale = gram
        .diagonal()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1.0);
    let svd = gram.svd(false, false);
    let smallest = svd
        .singular_values
        .iter()
        .fold(f64::INFINITY, |m, v| m.min(*v));
    if smallest <= scale * 1e-12 {
        return Err(Error::RankDeficientDesign(format!(
            "{k}-column design (with intercept) is singular"
        )));
    }
    Ok(())
}

/// Maximum-likelihood logistic regression of `outcome` on `(1, design)`.
///
/// Damped Newton from zero. Returns `NonConvergence` on separation (a
/// coefficient leaving `±SEPARATION_BOUND`) or when the iteration cap is
/// reached, and `RankDeficientDesign` for collinear columns.
pub fn fit_logistic(
    outcome: &[bool],
    design: &DMatrix<f64>,
    labels: &[String],
) -> Result<LogisticFit> {
    let n = outcome.len();
    let k = design.ncols() + 1;
    if design.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} outcomes for {} design rows",
            n,
            design.nrows()
        )));
    }
    if labels.len() != design.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} design columns",
            labels.len(),
            design.ncols()
        )));
    }
    if n < k + 1 && k > 1 {
        return Err(Error::RankDeficientDesign(format!(
            "{n} observations for {k} coefficients"
        )));
    }
    if n == 0 {
        return Err(Error::RankDeficientDesign("no observations".into()));
    }
    if k > 1 {
        check_rank(design)?;
    }

    let mut beta = vec![0.0; k];
    let mut ll = log_likelihood(&beta, outcome, design);
    let mut g = score(&beta, outcome, design);
    let mut design_labels = vec!["(intercept)".to_string()];
    design_labels.extend(labels.iter().cloned());

    for iteration in 0..=MAX_ITERATIONS {
        let g_norm = max_abs(&g);
        if g_norm < SCORE_TOLERANCE {
            for _ in 0..POLISH_STEPS {
                let Ok(step) = solve(
                    &information(&beta, design),
                    &DVector::from_vec(g.clone()),
                    "logistic Newton step",
                ) else {
                    break;
                };
                let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, d)| b + d).collect();
                let cand_g = score(&cand, outcome, design);
                let better = max_abs(&cand_g) < max_abs(&g);
                if !better {
                    break;
                }
                ll = log_likelihood(&cand, outcome, design);
                beta = cand;
                g = cand_g;
            }
            return Ok(LogisticFit {
                coefficients: beta,
                converged: true,
                iterations: iteration,
                log_likelihood: ll,
                design_labels,
            });
        }
        if iteration == MAX_ITERATIONS {
            break;
        }
        let h = information(&beta, design);
        let step = solve(&h, &DVector::from_vec(g.clone()), "logistic Newton step")?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let cand: Vec<f64> = beta
                .iter()
                .zip(step.iter())
                .map(|(b, d)| b + t * d)
                .collect();
            let cand_ll = log_likelihood(&cand, outcome, design);
            // Near the optimum the likelihood is flat to rounding, so a step
            // that loses only rounding noise is taken if it shrinks the score.
            let slack = 1e-9 * (1.0 + ll.abs());
            if cand_ll.is_finite() && cand_ll >= ll - slack {
                let cand_g = score(&cand, outcome, design);
                if cand_ll > ll || max_abs(&cand_g) < g_norm {
                    beta = cand;
                    ll = cand_ll;
                    g = cand_g;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if max_abs(&beta) > SEPARATION_BOUND {
            return Err(Error::NonConvergence {
                what: "logistic fit (separation)",
                iterations: iteration + 1,
                residual: max_abs(&g),
                best: Some(beta),
            });
        }
        if !accepted {
            // Stalled at the floating-point floor of the likelihood.
            break;
        }
    }
    Err(Error::NonConvergence {
        what: "logistic fit",
        iterations: MAX_ITERATIONS,
        residual: max_abs(&g),
        best: Some(beta),
    })
}

/// Propensity model `P(R = 1 | C)` on a chosen subset of baseline covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub fit: LogisticFit,
    /// Indices into the dataset's baseline covariates.
    pub columns: Vec<usize>,
}

impl PropensityModel {
    /// Covariate row `C[columns]` for one record.
    pub fn design_row(&self, c: &[f64]) -> Vec<f64> {
        self.columns.iter().map(|&j| c[j]).collect()
    }

    /// Unclamped fitted `π(C)`.
    pub fn predict(&self, c: &[f64]) -> f64 {
        if self.columns.is_empty() {
            self.fit.predict(&[])
        } else {
            self.fit.predict(&self.design_row(c))
        }
    }

    /// `π(C)` clipped for use in denominators.
    pub fn pi(&self, c: &[f64]) -> f64 {
        clamp_prob(self.predict(c))
    }
}

/// Fit `P(R = 1 | C)`. An empty covariate list gives the intercept-only model,
/// whose prediction is the sample share of treated records.
pub fn fit_propensity(dataset: &TrialDataset, covariates: &[String]) -> Result<PropensityModel> {
    let columns = dataset.c_indices(covariates)?;
    let outcome: Vec<bool> = dataset.records().iter().map(|r| r.treated).collect();
    if columns.is_empty() {
        let n1 = outcome.iter().filter(|&&t| t).count() as f64;
        let n = outcome.len() as f64;
        let share = n1 / n;
        let beta = (share / (1.0 - share)).ln();
        let fit = LogisticFit {
            coefficients: vec![beta],
            converged: true,
            iterations: 0,
            log_likelihood: n1 * share.ln() + (n - n1) * (1.0 - share).ln(),
            design_labels: vec!["(intercept)".into()],
        };
        return Ok(PropensityModel { fit, columns });
    }
    // Rows in a content-determined order, so every estimator gets the same
    // fit whatever the input row order.
    let mut rows: Vec<(bool, Vec<f64>)> = dataset
        .records()
        .iter()
        .map(|r| (r.treated, columns.iter().map(|&j| r.c[j]).collect()))
        .collect();
    rows.sort_by(|a, b| {
        a.0.cmp(&b.0).then_with(|| {
            a.1.iter()
                .zip(&b.1)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let outcome: Vec<bool> = rows.iter().map(|r| r.0).collect();
    let design = DMatrix::from_fn(rows.len(), columns.len(), |i, j| rows[i].1[j]);
    let fit = fit_logistic(&outcome, &design, covariates)?;
    Ok(PropensityModel { fit, columns })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TrialRecord;
    use proptest::prelude::*;
    use rand::Rng;

    fn labels(k: usize) -> Vec<String> {
        (0..k).map(|j| format!("x{j}")).collect()
    }

    #[test]
    fn expit_values() {
        assert_eq!(expit(0.0), 0.5);
        assert!((expit(3f64.ln()) - 0.75).abs() < 1e-15);
        assert_eq!(expit(-800.0), 0.0);
        assert_eq!(expit(800.0), 1.0);
        assert_eq!(expit(f64::NEG_INFINITY), 0.0);
        assert_eq!(expit(f64::INFINITY), 1.0);
    }

    #[test]
    fn intercept_only_is_logit_of_share() {
        let y: Vec<bool> = (0..100).map(|i| i % 4 == 0).collect();
        let fit = fit_logistic(&y, &DMatrix::zeros(100, 0), &[]).unwrap();
        assert!(fit.converged);
        assert!((fit.coefficients[0] - (0.25f64 / 0.75).ln()).abs() < 1e-10);
        assert!((fit.coefficients[0] + 1.0986122886681098).abs() < 1e-10);
    }

    /// Independent maximiser: coordinate-wise golden-section refinement of
    /// the likelihood on a shrinking grid.
    fn grid_maximiser(y: &[bool], x: &[f64]) -> (f64, f64) {
        let ll = |a: f64, b: f64| -> f64 {
            y.iter()
                .zip(x)
                .map(|(&yi, &xi)| {
                    let p = 1.0 / (1.0 + (-(a + b * xi)).exp());
                    if yi {
                        p.ln()
                    } else {
                        (1.0 - p).ln()
                    }
                })
                .sum()
        };
        let (mut a, mut b) = (0.0f64, 0.0f64);
        let mut width = 8.0;
        while width > 1e-10 {
            for _ in 0..3 {
                let mut best = (ll(a, b), a, b);
                for i in -20..=20 {
                    for j in -20..=20 {
                        let (ca, cb) = (a + width * i as f64 / 20.0, b + width * j as f64 / 20.0);
                        let v = ll(ca, cb);
                        if v > best.0 {
                            best = (v, ca, cb);
                        }
                    }
                }
                a = best.1;
                b = best.2;
            }
            width /= 4.0;
        }
        (a, b)
    }

    #[test]
    fn matches_grid_oracle_on_twenty_rows() {
        let x: Vec<f64> = (0..20).map(|i| (i as f64 - 9.5) / 4.0).collect();
        let y: Vec<bool> = [0, 0, 1, 0, 0, 0, 1, 0, 1, 0, 1, 0, 1, 1, 0, 1, 1, 1, 0, 1]
            .iter()
            .map(|&v| v == 1)
            .collect();
        let fit = fit_logistic(&y, &DMatrix::from_column_slice(20, 1, &x), &labels(1)).unwrap();
        let (a, b) = grid_maximiser(&y, &x);
        assert!(
            (fit.coefficients[0] - a).abs() < 1e-6,
            "{:?} vs {a}",
            fit.coefficients
        );
        assert!(
            (fit.coefficients[1] - b).abs() < 1e-6,
            "{:?} vs {b}",
            fit.coefficients
        );
    }

    #[test]
    fn separation_is_nonconvergence() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<bool> = (0..10).map(|i| i >= 5).collect();
        let err = fit_logistic(&y, &DMatrix::from_column_slice(10, 1, &x), &labels(1)).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { .. }), "{err}");
    }

    #[test]
    fn collinear_design_is_rank_deficient() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let mut d = DMatrix::zeros(10, 2);
        for i in 0..10 {
            d[(i, 0)] = x[i];
            d[(i, 1)] = 2.0 * x[i];
        }
        let y: Vec<bool> = (0..10).map(|i| i % 3 == 0).collect();
        assert!(matches!(
            fit_logistic(&y, &d, &labels(2)),
            Err(Error::RankDeficientDesign(_))
        ));
    }

    fn dataset(treated: &[bool], c: &[f64]) -> TrialDataset {
        let records = treated
            .iter()
            .zip(c)
            .map(|(&t, &cv)| TrialRecord {
                treated: t,
                switched: false,
                y: 0.0,
                l: None,
                c: vec![cv],
            })
            .collect();
        TrialDataset::new(records, vec!["age".into()], vec![], None).unwrap()
    }

    #[test]
    fn intercept_only_propensity_is_sample_share() {
        let t: Vec<bool> = (0..1000).map(|i| i % 2 == 0).collect();
        let c = vec![0.0; 1000];
        let m = fit_propensity(&dataset(&t, &c), &[]).unwrap();
        assert_eq!(m.predict(&[0.0]), 0.5);
        let t: Vec<bool> = (0..100).map(|i| i % 4 == 0).collect();
        let m = fit_propensity(&dataset(&t, &vec![0.0; 100]), &[]).unwrap();
        assert!((m.predict(&[3.0]) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn independent_propensity_slope_near_zero() {
        let mut rng = crate::rng::substream(11, 0);
        let n = 100_000;
        let t: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.5).collect();
        let c: Vec<f64> = (0..n)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let m = fit_propensity(&dataset(&t, &c), &["age".to_string()]).unwrap();
        // SE of the slope ≈ 1 / sqrt(n p (1 - p) var(C)) = 2 / sqrt(n).
        let se = 2.0 / (n as f64).sqrt();
        assert!(
            m.fit.coefficients[1].abs() < 3.0 * se,
            "{:?}",
            m.fit.coefficients
        );
        assert!(matches!(
            fit_propensity(&dataset(&t, &c), &["nope".to_string()]),
            Err(Error::MissingColumn(_))
        ));
    }

    fn arb_problem() -> impl Strategy<Value = (Vec<bool>, Vec<f64>, Vec<f64>)> {
        (15usize..60).prop_flat_map(|n| {
            (
                proptest::collection::vec(any::<bool>(), n),
                proptest::collection::vec(-2.0f64..2.0, n),
                proptest::collection::vec(-2.0f64..2.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn expit_is_symmetric(x in -700.0f64..700.0) {
            prop_assert!((expit(x) + expit(-x) - 1.0).abs() <= 2.0 * f64::EPSILON);
        }

        #[test]
        fn fitted_score_vanishes_and_likelihood_improves((y, x1, x2) in arb_problem()) {
            let n = y.len();
            let mut d = DMatrix::zeros(n, 2);
            for i in 0..n { d[(i, 0)] = x1[i]; d[(i, 1)] = x2[i]; }
            match fit_logistic(&y, &d, &labels(2)) {
                Ok(fit) => {
                    prop_assert!(fit.converged);
                    let g = score(&fit.coefficients, &y, &d);
                    prop_assert!(max_abs(&g) < 1e-8, "{:?}", g);
                    prop_assert!(fit.log_likelihood >= log_likelihood(&[0.0; 3], &y, &d));
                }
                // Random small samples can be separable.
                Err(Error::NonConvergence { .. }) => {}
                Err(e) => prop_assert!(false, "{}", e),
            }
        }

        #[test]
        fn score_is_likelihood_gradient(
            (y, x1, _) in arb_problem(),
            b0 in -2.0f64..2.0,
            b1 in -2.0f64..2.0,
        ) {
            let d = DMatrix::from_column_slice(y.len(), 1, &x1);
            let beta = [b0, b1];
            let g = score(&beta, &y, &d);
            for j in 0..2 {
                let h = 1e-5 * (1.0 + beta[j].abs());
                let mut up = beta; up[j] += h;
                let mut dn = beta; dn[j] -= h;
                let fd = (log_likelihood(&up, &y, &d) - log_likelihood(&dn, &y, &d)) / (2.0 * h);
                prop_assert!((fd - g[j]).abs() <= 1e-6 * g[j].abs().max(1.0), "{} vs {}", fd, g[j]);
            }
        }
    }
}
