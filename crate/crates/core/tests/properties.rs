use proptest::prelude::*;
use rand::seq::SliceRandom;

use rescue_ipw::data::read_dataset;
use rescue_ipw::estimators::truncate_weights;
use rescue_ipw::rng::substream;
use rescue_ipw::simulate::{generate_with_rng, PotentialOutcomes};
use rescue_ipw::variance::{resample_indices, strata_groups};
use rescue_ipw::*;

fn dataset(scenario: u8, n: usize, seed: u64, retain_l: bool) -> TrialDataset {
    generate_with_rng(
        &ScenarioConfig::preset(scenario).unwrap(),
        n,
        &mut substream(seed, 0),
        retain_l,
    )
    .unwrap()
}

fn rebuild(d: &TrialDataset, records: Vec<TrialRecord>) -> TrialDataset {
    TrialDataset::new(records, d.c_names().to_vec(), d.l_names().to_vec(), None).unwrap()
}

fn variant_of(switcher: bool) -> Variant {
    if switcher {
        Variant::SwitcherEq
    } else {
        Variant::NonSwitcherEq
    }
}

fn hajek_treated(fit: &BalancedFit, scale: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (r, w) in fit.data.records().iter().zip(&fit.weights) {
        if r.treated {
            let v = scale * w / fit.propensity.pi(&r.c);
            num += v * r.y;
            den += v;
        }
    }
    num / den
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn weights_positive_and_mu_is_difference(scenario in 1u8..=3, n in 300usize..900, seed in any::<u64>(), rho in 0.8f64..=1.0) {
        let d = dataset(scenario, n, seed, false);
        let fit = fit_balanced(&d, rho, &BalancedOptions::default());
        prop_assume!(fit.is_ok());
        let fit = fit.unwrap();
        prop_assert!(fit.weights.iter().all(|w| w.is_finite() && *w > 0.0));
        prop_assert_eq!(fit.result.mu, fit.result.mu1 - fit.result.mu0);
        prop_assert!(fit.result.weight_p5.is_some() && fit.result.weight_p95.is_some());
        let policy = estimate_treatment_policy(&d, &[]).unwrap();
        prop_assert_eq!(policy.mu, policy.mu1 - policy.mu0);
        prop_assert!(policy.weight_p5.is_none() && policy.weight_p95.is_none());
    }

    #[test]
    fn treated_mean_is_self_normalised(n in 300usize..900, seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let d = dataset(1, n, seed, false);
        let fit = fit_balanced(&d, 0.9, &BalancedOptions::default());
        prop_assume!(fit.is_ok());
        let fit = fit.unwrap();
        let base = hajek_treated(&fit, 1.0);
        prop_assert!((base - fit.result.mu1).abs() <= 1e-12 * (1.0 + base.abs()));
        prop_assert!((hajek_treated(&fit, scale) - base).abs() <= 1e-12 * (1.0 + base.abs()));
    }

    #[test]
    fn flip_equals_relabel(n in 300usize..900, seed in any::<u64>(), rho in 0.8f64..=1.0, switcher in any::<bool>()) {
        let d = dataset(2, n, seed, true);
        let opts = BalancedOptions { variant: variant_of(switcher), ..BalancedOptions::default() };
        let flipped = estimate_balanced(&d, rho, &BalancedOptions { flip: true, ..opts.clone() });
        let relabelled = estimate_balanced(&d.flipped(), rho, &opts);
        match (flipped, relabelled) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.estimand, Estimand::BalancedFlipped);
                prop_assert_eq!((a.mu1, a.mu0, a.mu), (b.mu1, b.mu0, b.mu));
                prop_assert_eq!((a.weight_p5, a.weight_p95), (b.weight_p5, b.weight_p95));
            }
            (Err(a), Err(b)) => prop_assert_eq!(a.to_string(), b.to_string()),
            (a, b) => prop_assert!(false, "flip {:?} vs relabel {:?}", a.map(|r| r.mu), b.map(|r| r.mu)),
        }
    }

    #[test]
    fn truncation_contracts(weights in prop::collection::vec(1e-3f64..50.0, 2..200), lo in 0.0f64..20.0, width in 1.0f64..80.0) {
        let hi = (lo + width).min(100.0);
        prop_assert_eq!(truncate_weights(&weights, 0.0, 100.0).unwrap(), weights.clone());
        let t = truncate_weights(&weights, lo, hi).unwrap();
        let max = |v: &[f64]| v.iter().cloned().fold(f64::MIN, f64::max);
        let min = |v: &[f64]| v.iter().cloned().fold(f64::MAX, f64::min);
        prop_assert!(max(&t) <= max(&weights));
        prop_assert!(min(&t) >= min(&weights));
        for i in 0..weights.len() {
            for j in 0..weights.len() {
                if weights[i] <= weights[j] {
                    prop_assert!(t[i] <= t[j]);
                }
            }
        }
    }

    #[test]
    fn full_range_truncation_changes_nothing(n in 300usize..900, seed in any::<u64>()) {
        let d = dataset(3, n, seed, false);
        let plain = estimate_balanced(&d, 0.9, &BalancedOptions::default());
        prop_assume!(plain.is_ok());
        let plain = plain.unwrap();
        let full = estimate_balanced(&d, 0.9, &BalancedOptions { truncation: Some((0.0, 100.0)), ..BalancedOptions::default() }).unwrap();
        prop_assert_eq!((plain.mu1, plain.mu0), (full.mu1, full.mu0));
        let t = fit_balanced(&d, 0.9, &BalancedOptions { truncation: Some((1.0, 99.0)), ..BalancedOptions::default() }).unwrap();
        let u = fit_balanced(&d, 0.9, &BalancedOptions::default()).unwrap();
        let tmax = t.weights.iter().cloned().fold(0.0, f64::max);
        let umax = u.weights.iter().cloned().fold(0.0, f64::max);
        prop_assert!(tmax <= umax);
    }

    #[test]
    fn no_switching_makes_estimands_coincide(scenario in 1u8..=3, n in 50usize..600, seed in any::<u64>()) {
        let d = dataset(scenario, n, seed, true);
        let records = d.records().iter().map(|r| TrialRecord { switched: false, ..r.clone() }).collect();
        let d = rebuild(&d, records);
        let b = estimate_balanced(&d, 0.9, &BalancedOptions::default()).unwrap();
        let p = estimate_treatment_policy(&d, &[]).unwrap();
        let h = estimate_hypothetical(&d, &[]).unwrap();
        prop_assert_eq!((b.mu1, b.mu0, b.mu), (p.mu1, p.mu0, p.mu));
        prop_assert_eq!((h.mu1, h.mu0, h.mu), (p.mu1, p.mu0, p.mu));
    }

    #[test]
    fn row_order_is_irrelevant(n in 300usize..900, seed in any::<u64>(), switcher in any::<bool>()) {
        let d = dataset(1, n, seed, false);
        let opts = BalancedOptions { variant: variant_of(switcher), ..BalancedOptions::default() };
        let fit = fit_balanced(&d, 0.9, &opts);
        prop_assume!(fit.is_ok());
        let fit = fit.unwrap();
        let mut records = d.records().to_vec();
        records.shuffle(&mut substream(seed, 1));
        let shuffled = rebuild(&d, records);
        let lam = fit.models.lambda.clone().unwrap();
        let omega = fit.models.omega.clone().unwrap();
        let r1 = lambda_residual(&lam, &d, &omega, 0.9, &fit.propensity, opts.variant).unwrap();
        let r2 = lambda_residual(&lam, &shuffled, &omega, 0.9, &fit.propensity, opts.variant).unwrap();
        let scale = d.len() as f64;
        for (a, b) in r1.iter().zip(&r2) {
            prop_assert!((a - b).abs() <= 1e-12 * scale, "{} vs {}", a, b);
        }
        let refit = fit_balanced(&shuffled, 0.9, &opts).unwrap();
        for (a, b) in lam.iter().zip(refit.models.lambda.as_ref().unwrap()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{} vs {}", a, b);
        }
    }

    #[test]
    fn rescaling_baseline_covariate(n in 300usize..900, seed in any::<u64>(), k in 0.1f64..10.0) {
        let d = dataset(1, n, seed, false);
        let fit = fit_balanced(&d, 0.9, &BalancedOptions::default());
        prop_assume!(fit.is_ok());
        let fit = fit.unwrap();
        let records = d.records().iter().map(|r| TrialRecord { c: vec![r.c[0] * k], ..r.clone() }).collect();
        let scaled = rebuild(&d, records);
        let sfit = fit_balanced(&scaled, 0.9, &BalancedOptions::default()).unwrap();
        let (lam, slam) = (fit.models.lambda.as_ref().unwrap(), sfit.models.lambda.as_ref().unwrap());
        prop_assert!((slam[1] - lam[1] / k).abs() <= 1e-6 * (1.0 + lam[1].abs()), "{} vs {}", slam[1], lam[1] / k);
        for (r, s) in d.records().iter().zip(scaled.records()).filter(|(r, _)| r.treated) {
            let l = r.l.as_ref().unwrap();
            let (p, q) = (fit.models.control_prob(l, &r.c), sfit.models.control_prob(l, &s.c));
            prop_assert!((p - q).abs() <= 1e-7, "{} vs {}", p, q);
            let (p, q) = (fit.models.treated_prob(l, &r.c), sfit.models.treated_prob(l, &s.c));
            prop_assert!((p - q).abs() <= 1e-7, "{} vs {}", p, q);
        }
    }

    #[test]
    fn influence_function_is_centred_and_scales_with_duplication(scenario in 1u8..=3, n in 300usize..900, seed in any::<u64>()) {
        let d = dataset(scenario, n, seed, false);
        let fit = fit_balanced(&d, 0.9, &BalancedOptions::default());
        prop_assume!(fit.is_ok());
        let fit = fit.unwrap();
        let ic = influence_components(&fit).unwrap();
        let centre = ic.phi_mu.iter().sum::<f64>() / ic.phi_mu.len() as f64;
        prop_assert!(centre.abs() <= 1e-8 * (1.0 + fit.result.mu.abs()), "{}", centre);
        let mut twice = d.records().to_vec();
        twice.extend_from_slice(d.records());
        let dd = rebuild(&d, twice);
        let fit2 = fit_balanced(&dd, 0.9, &BalancedOptions::default()).unwrap();
        let (a, b) = (influence_se_balanced(&fit).unwrap(), influence_se_balanced(&fit2).unwrap());
        for (x, y) in [(a.mu, b.mu), (a.mu1.unwrap(), b.mu1.unwrap()), (a.mu0.unwrap(), b.mu0.unwrap())] {
            prop_assert!((y * 2f64.sqrt() - x).abs() <= 1e-10 * x, "{} vs {}", y * 2f64.sqrt(), x);
        }
    }

    #[test]
    fn odds_ratio_from_tilt_terms(n in 300usize..900, seed in any::<u64>(), rho in 0.8f64..=1.0) {
        let d = dataset(1, n, seed, false);
        let fit = fit_balanced(&d, rho, &BalancedOptions::default());
        prop_assume!(fit.is_ok());
        let m = fit.unwrap().models;
        for r in d.records().iter().filter(|r| r.treated).take(50) {
            let l = r.l.as_ref().unwrap();
            let (q0, q1) = q_terms(l, &r.c, &m).unwrap();
            let odds = |p: f64| p / (1.0 - p);
            let (pc, pt) = (m.control_prob(l, &r.c), m.treated_prob(l, &r.c));
            let ratio = odds(pc) / odds(pt);
            // p / (1 - p) loses about eps / (1 - p) relative accuracy near 1.
            let tol = 1e-8 + 4.0 * f64::EPSILON * (1.0 / (1.0 - pc) + 1.0 / (1.0 - pt));
            prop_assert!(((q0 + q1).exp() - ratio).abs() <= tol * ratio, "{} vs {}", (q0 + q1).exp(), ratio);
        }
        let mut unit = m.clone();
        unit.rho = 1.0;
        let r = &d.records().iter().find(|r| r.treated).unwrap();
        prop_assert_eq!(q_terms(r.l.as_ref().unwrap(), &r.c, &unit).unwrap().1, 0.0);
    }

    #[test]
    fn csv_round_trip(scenario in 1u8..=3, n in 20usize..200, seed in any::<u64>(), retain in any::<bool>(), strata in any::<bool>()) {
        let d = dataset(scenario, n, seed, retain);
        prop_assume!(d.arm_size(0) > 0 && d.arm_size(1) > 0);
        let d = if strata {
            let labels = (0..d.len()).map(|i| format!("site{}", i % 3)).collect();
            d.with_strata(Some(labels)).unwrap()
        } else {
            d
        };
        let text = rescue_ipw::data::dataset_to_csv(&d);
        let schema = CsvSchema {
            col_stratum: strata.then(|| rescue_ipw::data::STRATUM_COLUMN.to_string()),
            ..CsvSchema::default()
        };
        let back = read_dataset(text.as_bytes(), &schema).unwrap();
        prop_assert_eq!(back, d);
    }

    #[test]
    fn toy_estimands_ignore_patient_order(cells in prop::collection::vec((any::<[bool; 2]>(), any::<[bool; 4]>()), 1..12), seed in any::<u64>()) {
        let patients: Vec<PotentialOutcomes> = cells
            .iter()
            .map(|([s0, s1], y)| PotentialOutcomes {
                s0: *s0,
                s1: *s1,
                y00: y[0] as u8 as f64,
                y01: y[1] as u8 as f64,
                y10: y[2] as u8 as f64,
                y11: y[3] as u8 as f64,
            })
            .collect();
        let mut shuffled = patients.clone();
        shuffled.shuffle(&mut substream(seed, 0));
        let a = toy_estimands(&PotentialOutcomeTable { patients });
        let b = toy_estimands(&PotentialOutcomeTable { patients: shuffled });
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-12;
        prop_assert!(close(a.policy, b.policy) && close(a.hypothetical, b.hypothetical) && close(a.balanced, b.balanced));
        prop_assert_eq!(a.principal.is_some(), b.principal.is_some());
        if let (Some(x), Some(y)) = (a.principal, b.principal) {
            prop_assert!(close(x, y));
        }
    }

    #[test]
    fn stratified_resampling_keeps_counts(sizes in prop::collection::vec(1usize..30, 1..5), seed in any::<u64>()) {
        let labels: Vec<String> = sizes.iter().enumerate().flat_map(|(k, n)| std::iter::repeat_n(format!("s{k}"), *n)).collect();
        let groups = strata_groups(labels.len(), Some(&labels)).unwrap();
        let idx = resample_indices(&groups, &mut substream(seed, 0));
        prop_assert_eq!(idx.len(), labels.len());
        for (k, n) in sizes.iter().enumerate() {
            let got = idx.iter().filter(|&&i| labels[i] == format!("s{k}")).count();
            prop_assert_eq!(got, *n);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn bootstrap_is_pure(seed in any::<u64>(), jobs in 1usize..6) {
        let d = dataset(1, 400, seed, false);
        let spec = EstimatorSpec::TreatmentPolicy { propensity_covariates: vec![] };
        let a = bootstrap(&d, &spec, 30, seed, None, 1).unwrap();
        let b = bootstrap(&d, &spec, 30, seed, None, jobs).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn study_accounts_for_every_replicate(seed in any::<u64>(), reps in 1usize..12) {
        let cfg = ScenarioConfig::preset(2).unwrap();
        let opts = StudyOptions { truth_mc: 20_000, jobs: 2, ..StudyOptions::default() };
        if let Ok(r) = run_mc_study(&cfg, 300, reps, 0.9, &opts, seed) {
            prop_assert_eq!(r.reps_completed + r.reps_failed, reps);
            prop_assert_eq!(r.param("mu").unwrap().se.is_none(), r.reps_completed < 2);
            let again = run_mc_study(&cfg, 300, reps, 0.9, &StudyOptions { jobs: 1, ..opts }, seed).unwrap();
            prop_assert_eq!(r.to_csv(), again.to_csv());
        }
    }

    #[test]
    fn sweep_order_does_not_matter(seed in any::<u64>()) {
        let d = dataset(1, 800, seed, false);
        let grid = [0.8, 0.85, 0.9, 0.95, 1.0];
        let fwd = sensitivity_sweep(&d, &grid, &BalancedOptions::default());
        prop_assume!(fwd.is_ok());
        let mut rev_grid = grid;
        rev_grid.reverse();
        let rev = sensitivity_sweep(&d, &rev_grid, &BalancedOptions::default()).unwrap();
        for (a, b) in fwd.unwrap().iter().zip(rev.iter().rev()) {
            prop_assert!((a.mu - b.mu).abs() <= 1e-10, "{} vs {}", a.mu, b.mu);
        }
    }
}
