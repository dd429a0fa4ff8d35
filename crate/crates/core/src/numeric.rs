//! Small numeric helpers shared across modules: order statistics, moments,
//! dense solves and the 17-significant-digit float format used for every
//! file the tool writes.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Nearest-rank percentile of `values` (0 ≤ `pct` ≤ 100).
///
/// `pct == 0` returns the minimum; otherwise the element at rank
/// `ceil(pct / 100 * n)` of the sorted sample.
pub fn nearest_rank(values: &[f64], pct: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    nearest_rank_sorted(&sorted, pct)
}

/// As [`nearest_rank`], for an already ascending slice.
pub fn nearest_rank_sorted(sorted: &[f64], pct: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let n = sorted.len();
    if pct <= 0.0 {
        return sorted[0];
    }
    let rank = ((pct / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n − 1 denominator); `None` below two values.
pub fn sample_sd(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    Some((ss / (values.len() - 1) as f64).sqrt())
}

/// Solve `a x = b` for a small dense system by LU with partial pivoting.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    a.clone()
        .lu()
        .solve(b)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::RankDeficientDesign(format!("singular system in {what}")))
}

/// Inverse of a small dense matrix.
pub fn invert(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    a.clone()
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::RankDeficientDesign(format!("singular matrix in {what}")))
}

/// Render a float with 17 significant digits in the shortest of fixed or
/// exponent notation (the C `%.17g` conversion). Round-trips exactly.
pub fn format_g17(x: f64) -> String {
    if x.is_nan() {
        return "NaN".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0" } else { "0" }.to_string();
    }
    let sci = format!("{:.16e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..17).contains(&exp) {
        let decimals = (16 - exp).max(0) as usize;
        trim_fraction(format!("{:.*}", decimals, x))
    } else {
        let mantissa = trim_fraction(mantissa.to_string());
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    }
}

fn trim_fraction(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    let trimmed = s.trim_end_matches('0').trim_end_matches('.');
    trimmed.to_string()
}

/// `serde_json` formatter writing every float through [`format_g17`].
#[derive(Default)]
pub struct G17Formatter {
    inner: serde_json::ser::PrettyFormatter<'static>,
}

impl serde_json::ser::Formatter for G17Formatter {
    fn write_f64<W: ?Sized + std::io::Write>(
        &mut self,
        w: &mut W,
        value: f64,
    ) -> std::io::Result<()> {
        if value.is_finite() {
            w.write_all(format_g17(value).as_bytes())
        } else {
            w.write_all(b"null")
        }
    }

    fn write_f32<W: ?Sized + std::io::Write>(
        &mut self,
        w: &mut W,
        value: f32,
    ) -> std::io::Result<()> {
        self.write_f64(w, value as f64)
    }

    fn begin_array<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.begin_array(w)
    }
    fn end_array<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_array(w)
    }
    fn begin_array_value<W: ?Sized + std::io::Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> std::io::Result<()> {
        self.inner.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_array_value(w)
    }
    fn begin_object<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.begin_object(w)
    }
    fn end_object<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_object(w)
    }
    fn begin_object_key<W: ?Sized + std::io::Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> std::io::Result<()> {
        self.inner.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.inner.end_object_value(w)
    }
}

/// Pretty JSON with 17-significant-digit floats.
pub fn to_json_g17<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, G17Formatter::default());
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json emits utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_definition() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 0.0), 1.0);
        assert_eq!(nearest_rank(&v, 1.0), 1.0);
        assert_eq!(nearest_rank(&v, 2.5), 3.0);
        assert_eq!(nearest_rank(&v, 99.0), 99.0);
        assert_eq!(nearest_rank(&v, 100.0), 100.0);
        assert_eq!(nearest_rank(&[7.0], 50.0), 7.0);
    }

    #[test]
    fn g17_round_trips() {
        for x in [
            0.1,
            -1.0986122886681098,
            1e-7,
            123456789.0,
            2.0f64.sqrt(),
            1e300,
            -3.5e-320,
        ] {
            let s = format_g17(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
        }
        assert_eq!(format_g17(0.5), "0.5");
        assert_eq!(format_g17(3.0), "3");
        assert_eq!(format_g17(0.1), "0.10000000000000001");
        assert_eq!(format_g17(1e-7), "9.9999999999999995e-08");
    }

    #[test]
    fn json_uses_g17() {
        let s = to_json_g17(&serde_json::json!({"x": 0.1, "n": 3})).unwrap();
        assert!(s.contains("0.10000000000000001"), "{s}");
        assert!(s.contains("\"n\": 3"));
    }

    #[test]
    fn sd_needs_two_values() {
        assert_eq!(sample_sd(&[1.0]), None);
        assert!((sample_sd(&[1.0, 3.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }
}
