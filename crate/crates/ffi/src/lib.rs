//! C ABI over `rescue_ipw`.
//!
//! Datasets live behind an opaque [`RipwDataset`] handle. Every function
//! returns a [`RipwStatus`]; on failure the message is kept per thread and
//! read with [`ripw_last_error_message`]. Unavailable numbers are NaN.
//!
//! The header `include/rescue_ipw.h` is regenerated by the build script.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use rescue_ipw::error::Error;
use rescue_ipw::estimators::{Estimand, EstimateResult};
use rescue_ipw::simulate::generate_with_rng;
use rescue_ipw::{
    bootstrap, estimate_hypothetical, estimate_treatment_policy, fit_balanced,
    influence_se_balanced, load_dataset, toy_estimands, true_values, BalancedOptions, CsvSchema,
    EstimatorSpec, PotentialOutcomeTable, ScenarioConfig, TrialDataset, TrialRecord, Variant,
};

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RipwStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    EmptyArm = 5,
    DimensionMismatch = 6,
    NonConvergence = 7,
    RankDeficient = 8,
    DegenerateArm = 9,
    MissingL = 10,
    AllSwitchers = 11,
    TruncationUnsupported = 12,
    InfluenceUnavailable = 13,
    TooManyFailures = 14,
    EmptyStratum = 15,
    Panic = 99,
}

impl From<&Error> for RipwStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::MissingColumn(_) | Error::BadValue { .. } | Error::Csv(_) | Error::Json(_) => {
                RipwStatus::Parse
            }
            Error::EmptyArm { .. } => RipwStatus::EmptyArm,
            Error::DimensionMismatch(_) => RipwStatus::DimensionMismatch,
            Error::NonConvergence { .. } => RipwStatus::NonConvergence,
            Error::RankDeficientDesign(_) => RipwStatus::RankDeficient,
            Error::DegenerateArm(_) => RipwStatus::DegenerateArm,
            Error::MissingL { .. } => RipwStatus::MissingL,
            Error::AllSwitchers { .. } => RipwStatus::AllSwitchers,
            Error::TruncationUnsupported => RipwStatus::TruncationUnsupported,
            Error::InfluenceUnavailable(_) => RipwStatus::InfluenceUnavailable,
            Error::TooManyFailures { .. } => RipwStatus::TooManyFailures,
            Error::EmptyStratum => RipwStatus::EmptyStratum,
            Error::InvalidArgument(_) => RipwStatus::InvalidArgument,
            Error::Io { .. } => RipwStatus::Io,
        }
    }
}

/// Opaque dataset handle.
pub struct RipwDataset(TrialDataset);

/// Which standard error to compute.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RipwSeMethod {
    None = 0,
    Influence = 1,
    Bootstrap = 2,
}

/// Options for the balanced estimator. Start from [`ripw_balanced_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RipwBalancedOptions {
    pub rho: f64,
    /// Solve the switcher equations instead of the non-switcher ones.
    pub switcher_equations: bool,
    /// Interchange the arms and target E(Y1 - Y0S1).
    pub flip: bool,
    pub truncate: bool,
    pub truncate_lower_pct: f64,
    pub truncate_upper_pct: f64,
}

/// Standard-error request.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RipwSeRequest {
    pub method: RipwSeMethod,
    pub bootstrap_replicates: usize,
    pub seed: u64,
    /// Worker threads for the bootstrap; 0 uses every core. Never changes results.
    pub jobs: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RipwEstimand {
    Balanced = 0,
    BalancedFlipped = 1,
    TreatmentPolicy = 2,
    Hypothetical = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RipwEstimate {
    pub estimand: RipwEstimand,
    pub mu1: f64,
    pub mu0: f64,
    pub mu: f64,
    pub se_mu: f64,
    pub se_mu1: f64,
    pub se_mu0: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub weight_p5: f64,
    pub weight_p95: f64,
    /// Bootstrap replicates dropped after estimation failures.
    pub bootstrap_failed: usize,
    pub warning_count: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RipwTruth {
    pub mu1: f64,
    pub mu0: f64,
    pub mu: f64,
    pub policy_mu1: f64,
    pub policy_mu0: f64,
    pub policy_mu: f64,
    pub hyp_mu1: f64,
    pub hyp_mu0: f64,
    pub hyp_mu: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RipwToy {
    pub policy: f64,
    pub hypothetical: f64,
    /// NaN when no patient is a never-switcher.
    pub principal: f64,
    pub balanced: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(e: Error) -> RipwStatus {
    let status = RipwStatus::from(&e);
    set_last_error(e.to_string());
    status
}

fn invalid(msg: &str) -> RipwStatus {
    set_last_error(msg.to_string());
    RipwStatus::InvalidArgument
}

fn null(what: &str) -> RipwStatus {
    set_last_error(format!("null pointer: {what}"));
    RipwStatus::NullPointer
}

/// Run `body`, turning panics into `Panic`.
fn guard(body: impl FnOnce() -> RipwStatus) -> RipwStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("internal error: {msg}"));
            RipwStatus::Panic
        }
    }
}

fn deliver(ds: TrialDataset, out: *mut *mut RipwDataset) -> RipwStatus {
    // SAFETY: caller checked `out` for null.
    unsafe { *out = Box::into_raw(Box::new(RipwDataset(ds))) };
    RipwStatus::Ok
}

/// Length in bytes of the last error message on this thread, excluding the
/// terminating NUL; 0 when the last call succeeded.
#[no_mangle]
pub extern "C" fn ripw_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |c| c.as_bytes().len()))
}

/// Copy the last error message into `buf` (NUL-terminated, truncated to
/// `len`). Returns the full message length.
///
/// # Safety
/// `buf` must be valid for `len` bytes or null.
#[no_mangle]
pub unsafe extern "C" fn ripw_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_ref().map_or(&[][..], |c| c.as_bytes());
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ripw_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Read a CSV dataset in the default layout (`R`, `S`, `Y`, `L_*`, `C_*`).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ripw_dataset_load_csv(
    path: *const c_char,
    out: *mut *mut RipwDataset,
) -> RipwStatus {
    guard(|| {
        if path.is_null() {
            return null("path");
        }
        if out.is_null() {
            return null("out");
        }
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            return invalid("path is not valid UTF-8");
        };
        match load_dataset(path, &CsvSchema::default()) {
            Ok(ds) => deliver(ds, out),
            Err(e) => fail(e),
        }
    })
}

/// Build a dataset from column arrays of length `n`.
///
/// `c` is row-major `n * c_dim`; `l` is row-major `n * l_dim` with a row of
/// NaN meaning "not measured" (typically controls). `l` may be null when
/// `l_dim` is 0, and `c` when `c_dim` is 0.
///
/// # Safety
/// Each non-null pointer must be valid for the stated number of elements.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ripw_dataset_from_arrays(
    n: usize,
    treated: *const u8,
    switched: *const u8,
    y: *const f64,
    c: *const f64,
    c_dim: usize,
    l: *const f64,
    l_dim: usize,
    out: *mut *mut RipwDataset,
) -> RipwStatus {
    guard(|| {
        if treated.is_null() || switched.is_null() || y.is_null() || out.is_null() {
            return null("treated, switched, y and out are required");
        }
        if (c_dim > 0 && c.is_null()) || (l_dim > 0 && l.is_null()) {
            return null("covariate array");
        }
        let (r, s, y) = (
            std::slice::from_raw_parts(treated, n),
            std::slice::from_raw_parts(switched, n),
            std::slice::from_raw_parts(y, n),
        );
        let c = if c_dim > 0 {
            std::slice::from_raw_parts(c, n * c_dim)
        } else {
            &[]
        };
        let l = if l_dim > 0 {
            std::slice::from_raw_parts(l, n * l_dim)
        } else {
            &[]
        };
        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            if r[i] > 1 || s[i] > 1 {
                return invalid(&format!("row {i}: treated and switched must be 0 or 1"));
            }
            let l_row = &l[i * l_dim..(i + 1) * l_dim];
            let l_val = if l_dim > 0 && l_row.iter().all(|v| v.is_nan()) {
                None
            } else {
                Some(l_row.to_vec())
            };
            records.push(TrialRecord {
                treated: r[i] == 1,
                switched: s[i] == 1,
                y: y[i],
                l: l_val,
                c: c[i * c_dim..(i + 1) * c_dim].to_vec(),
            });
        }
        let names = |p: &str, k: usize| (1..=k).map(|j| format!("{p}{j}")).collect();
        match TrialDataset::new(records, names("c", c_dim), names("l", l_dim), None) {
            Ok(ds) => deliver(ds, out),
            Err(e) => fail(e),
        }
    })
}

/// Simulate `n` patients from built-in scenario 1, 2 or 3. Controls carry
/// `L` only when `retain_l` is set.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ripw_dataset_simulate(
    scenario: u8,
    n: usize,
    seed: u64,
    retain_l: bool,
    out: *mut *mut RipwDataset,
) -> RipwStatus {
    guard(|| {
        if out.is_null() {
            return null("out");
        }
        let result = ScenarioConfig::preset(scenario).and_then(|cfg| {
            generate_with_rng(&cfg, n, &mut rescue_ipw::rng::substream(seed, 0), retain_l)
        });
        match result {
            Ok(ds) => deliver(ds, out),
            Err(e) => fail(e),
        }
    })
}

/// Number of records; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ripw_dataset_len(ds: *const RipwDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// Release a dataset. Null is ignored.
///
/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ripw_dataset_free(ds: *mut RipwDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Defaults: rho 1, non-switcher equations, no flip, no truncation.
#[no_mangle]
pub extern "C" fn ripw_balanced_options_default() -> RipwBalancedOptions {
    RipwBalancedOptions {
        rho: 1.0,
        switcher_equations: false,
        flip: false,
        truncate: false,
        truncate_lower_pct: 1.0,
        truncate_upper_pct: 99.0,
    }
}

fn balanced_options(o: &RipwBalancedOptions) -> BalancedOptions {
    BalancedOptions {
        variant: if o.switcher_equations {
            Variant::SwitcherEq
        } else {
            Variant::NonSwitcherEq
        },
        truncation: o
            .truncate
            .then_some((o.truncate_lower_pct, o.truncate_upper_pct)),
        flip: o.flip,
        ..BalancedOptions::default()
    }
}

fn to_c(r: &EstimateResult, bootstrap_failed: usize) -> RipwEstimate {
    let se = r.se.as_ref();
    RipwEstimate {
        estimand: match r.estimand {
            Estimand::Balanced => RipwEstimand::Balanced,
            Estimand::BalancedFlipped => RipwEstimand::BalancedFlipped,
            Estimand::TreatmentPolicy => RipwEstimand::TreatmentPolicy,
            Estimand::Hypothetical => RipwEstimand::Hypothetical,
        },
        mu1: r.mu1,
        mu0: r.mu0,
        mu: r.mu,
        se_mu: se.map_or(f64::NAN, |s| s.mu),
        se_mu1: se.and_then(|s| s.mu1).unwrap_or(f64::NAN),
        se_mu0: se.and_then(|s| s.mu0).unwrap_or(f64::NAN),
        ci_lower: r.ci.map_or(f64::NAN, |c| c.0),
        ci_upper: r.ci.map_or(f64::NAN, |c| c.1),
        weight_p5: r.weight_p5.unwrap_or(f64::NAN),
        weight_p95: r.weight_p95.unwrap_or(f64::NAN),
        bootstrap_failed,
        warning_count: r.warnings.len(),
    }
}

fn with_bootstrap(
    ds: &TrialDataset,
    spec: EstimatorSpec,
    se: &RipwSeRequest,
    mut r: EstimateResult,
) -> Result<RipwEstimate, Error> {
    let boot = bootstrap(
        ds,
        &spec,
        se.bootstrap_replicates,
        se.seed,
        ds.strata(),
        se.jobs,
    )?;
    r.se = Some(boot.standard_errors());
    r.ci = Some(boot.ci);
    Ok(to_c(&r, boot.failed))
}

unsafe fn inputs<'a>(
    ds: *const RipwDataset,
    se: *const RipwSeRequest,
    out: *mut RipwEstimate,
) -> Result<(&'a TrialDataset, RipwSeRequest), RipwStatus> {
    if ds.is_null() || out.is_null() {
        return Err(null("dataset and out are required"));
    }
    let se = se.as_ref().copied().unwrap_or(RipwSeRequest {
        method: RipwSeMethod::None,
        bootstrap_replicates: 0,
        seed: 0,
        jobs: 0,
    });
    Ok((&(*ds).0, se))
}

/// Balanced estimate. `se` may be null for no standard error.
///
/// # Safety
/// `ds` must be a live handle, `options` and `se` null or valid, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ripw_estimate_balanced(
    ds: *const RipwDataset,
    options: *const RipwBalancedOptions,
    se: *const RipwSeRequest,
    out: *mut RipwEstimate,
) -> RipwStatus {
    guard(|| {
        let (data, se) = match inputs(ds, se, out) {
            Ok(v) => v,
            Err(s) => return s,
        };
        let raw = options
            .as_ref()
            .copied()
            .unwrap_or_else(|| ripw_balanced_options_default());
        let opts = balanced_options(&raw);
        let result = (|| -> Result<RipwEstimate, Error> {
            let fit = fit_balanced(data, raw.rho, &opts)?;
            match se.method {
                RipwSeMethod::None => Ok(to_c(&fit.result, 0)),
                RipwSeMethod::Influence => {
                    let mut r = fit.result.clone();
                    r.se = Some(influence_se_balanced(&fit)?);
                    Ok(to_c(&r, 0))
                }
                RipwSeMethod::Bootstrap => {
                    let r = fit.result.clone();
                    let spec = EstimatorSpec::Balanced {
                        rho: raw.rho,
                        options: opts.clone(),
                    };
                    with_bootstrap(data, spec, &se, r)
                }
            }
        })();
        match result {
            Ok(v) => {
                *out = v;
                RipwStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

unsafe fn comparator(
    ds: *const RipwDataset,
    se: *const RipwSeRequest,
    out: *mut RipwEstimate,
    estimate: fn(&TrialDataset, &[String]) -> rescue_ipw::Result<EstimateResult>,
    spec: EstimatorSpec,
) -> RipwStatus {
    guard(|| {
        let (data, se) = match inputs(ds, se, out) {
            Ok(v) => v,
            Err(s) => return s,
        };
        let result = estimate(data, &[]).and_then(|r| match se.method {
            RipwSeMethod::None => Ok(to_c(&r, 0)),
            RipwSeMethod::Influence => Err(Error::InfluenceUnavailable(
                "influence-function standard errors exist for the balanced estimand only".into(),
            )),
            RipwSeMethod::Bootstrap => with_bootstrap(data, spec, &se, r),
        });
        match result {
            Ok(v) => {
                *out = v;
                RipwStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Treatment-policy estimate with an intercept-only propensity.
///
/// # Safety
/// As [`ripw_estimate_balanced`].
#[no_mangle]
pub unsafe extern "C" fn ripw_estimate_policy(
    ds: *const RipwDataset,
    se: *const RipwSeRequest,
    out: *mut RipwEstimate,
) -> RipwStatus {
    let spec = EstimatorSpec::TreatmentPolicy {
        propensity_covariates: vec![],
    };
    comparator(ds, se, out, estimate_treatment_policy, spec)
}

/// Hypothetical (no-switching) estimate; needs `L` on both arms.
///
/// # Safety
/// As [`ripw_estimate_balanced`].
#[no_mangle]
pub unsafe extern "C" fn ripw_estimate_hypothetical(
    ds: *const RipwDataset,
    se: *const RipwSeRequest,
    out: *mut RipwEstimate,
) -> RipwStatus {
    let spec = EstimatorSpec::Hypothetical {
        propensity_covariates: vec![],
    };
    comparator(ds, se, out, estimate_hypothetical, spec)
}

/// Monte-Carlo population values for a built-in scenario.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ripw_true_values(
    scenario: u8,
    n_mc: usize,
    seed: u64,
    out: *mut RipwTruth,
) -> RipwStatus {
    guard(|| {
        if out.is_null() {
            return null("out");
        }
        match ScenarioConfig::preset(scenario).and_then(|cfg| true_values(&cfg, n_mc, seed)) {
            Ok(t) => {
                *out = RipwTruth {
                    mu1: t.mu1,
                    mu0: t.mu0,
                    mu: t.mu,
                    policy_mu1: t.policy_mu1,
                    policy_mu0: t.policy_mu0,
                    policy_mu: t.policy_mu,
                    hyp_mu1: t.hyp_mu1,
                    hyp_mu0: t.hyp_mu0,
                    hyp_mu: t.hyp_mu,
                };
                RipwStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// The four estimands of the built-in five-patient example.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ripw_toy(out: *mut RipwToy) -> RipwStatus {
    guard(|| {
        if out.is_null() {
            return null("out");
        }
        let e = toy_estimands(&PotentialOutcomeTable::toy());
        *out = RipwToy {
            policy: e.policy,
            hypothetical: e.hypothetical,
            principal: e.principal.unwrap_or(f64::NAN),
            balanced: e.balanced,
        };
        RipwStatus::Ok
    })
}
