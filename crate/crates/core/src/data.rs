//! Trial observations: one row per patient holding the randomised arm, the
//! rescue-switch indicator, the outcome, post-treatment covariates (which may
//! be absent for a record) and baseline covariates.
//!
//! CSV is the only on-disk format. Absent post-treatment covariates are
//! written as empty fields and read back as absent, never as a sentinel.

use std::cmp::Ordering;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::format_g17;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    /// Randomised to the active arm (`R = 1`).
    pub treated: bool,
    /// Initiated rescue medication (`S = 1`).
    pub switched: bool,
    pub y: f64,
    /// Post-treatment covariates; `None` when not recorded for this patient.
    pub l: Option<Vec<f64>>,
    /// Baseline covariates.
    pub c: Vec<f64>,
}

impl TrialRecord {
    pub fn r(&self) -> f64 {
        if self.treated {
            1.0
        } else {
            0.0
        }
    }

    pub fn s(&self) -> f64 {
        if self.switched {
            1.0
        } else {
            0.0
        }
    }

    pub fn arm(&self) -> u8 {
        self.treated as u8
    }
}

/// An immutable, validated collection of trial records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDataset {
    records: Vec<TrialRecord>,
    c_names: Vec<String>,
    l_names: Vec<String>,
    strata: Option<Vec<String>>,
}

impl TrialDataset {
    /// Validate and build a dataset.
    pub fn new(
        records: Vec<TrialRecord>,
        c_names: Vec<String>,
        l_names: Vec<String>,
        strata: Option<Vec<String>>,
    ) -> Result<Self> {
        for (i, rec) in records.iter().enumerate() {
            let line = i + 2;
            if !rec.y.is_finite() {
                return Err(bad_value(line, "Y", rec.y, "outcome must be finite"));
            }
            if rec.c.len() != c_names.len() {
                return Err(Error::DimensionMismatch(format!(
                    "record {i} has {} baseline covariates, expected {}",
                    rec.c.len(),
                    c_names.len()
                )));
            }
            if let Some((j, v)) = rec.c.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(bad_value(line, &c_names[j], *v, "covariate must be finite"));
            }
            if let Some(l) = &rec.l {
                if l.len() != l_names.len() {
                    return Err(Error::DimensionMismatch(format!(
                        "record {i} has {} post-treatment covariates, expected {}",
                        l.len(),
                        l_names.len()
                    )));
                }
                if let Some((j, v)) = l.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                    return Err(bad_value(line, &l_names[j], *v, "covariate must be finite"));
                }
            }
        }
        if let Some(s) = &strata {
            if s.len() != records.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} stratum labels for {} records",
                    s.len(),
                    records.len()
                )));
            }
        }
        for arm in [1u8, 0u8] {
            if !records.iter().any(|r| r.arm() == arm) {
                return Err(Error::EmptyArm { arm });
            }
        }
        Ok(TrialDataset {
            records,
            c_names,
            l_names,
            strata,
        })
    }

    pub fn records(&self) -> &[TrialRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn c_names(&self) -> &[String] {
        &self.c_names
    }

    pub fn l_names(&self) -> &[String] {
        &self.l_names
    }

    pub fn c_dim(&self) -> usize {
        self.c_names.len()
    }

    pub fn l_dim(&self) -> usize {
        self.l_names.len()
    }

    pub fn strata(&self) -> Option<&[String]> {
        self.strata.as_deref()
    }

    pub fn with_strata(mut self, strata: Option<Vec<String>>) -> Result<Self> {
        if let Some(s) = &strata {
            if s.len() != self.records.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} stratum labels for {} records",
                    s.len(),
                    self.records.len()
                )));
            }
        }
        self.strata = strata;
        Ok(self)
    }

    pub fn arm_size(&self, arm: u8) -> usize {
        self.records.iter().filter(|r| r.arm() == arm).count()
    }

    pub fn switchers(&self, arm: u8) -> usize {
        self.records
            .iter()
            .filter(|r| r.arm() == arm && r.switched)
            .count()
    }

    /// Errors with `MissingL` unless every record on `arm` carries `l`.
    pub fn require_l(&self, arm: u8) -> Result<()> {
        match self
            .records
            .iter()
            .position(|r| r.arm() == arm && r.l.is_none())
        {
            Some(index) => Err(Error::MissingL { index, arm }),
            None => Ok(()),
        }
    }

    /// The same patients with the meaning of the two arms interchanged.
    pub fn flipped(&self) -> TrialDataset {
        let records = self
            .records
            .iter()
            .map(|r| TrialRecord {
                treated: !r.treated,
                ..r.clone()
            })
            .collect();
        TrialDataset {
            records,
            c_names: self.c_names.clone(),
            l_names: self.l_names.clone(),
            strata: self.strata.clone(),
        }
    }

    /// The same rows in a fixed order that depends only on their contents.
    /// Fitting on this copy makes floating-point sums independent of the
    /// input row order.
    pub fn canonical_order(&self) -> TrialDataset {
        fn cmp_vec(a: &[f64], b: &[f64]) -> Ordering {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(a.len().cmp(&b.len()))
        }
        let mut idx: Vec<usize> = (0..self.records.len()).collect();
        idx.sort_by(|&i, &j| {
            let (a, b) = (&self.records[i], &self.records[j]);
            a.treated
                .cmp(&b.treated)
                .then(a.switched.cmp(&b.switched))
                .then(a.y.total_cmp(&b.y))
                .then_with(|| cmp_vec(&a.c, &b.c))
                .then_with(|| match (&a.l, &b.l) {
                    (Some(x), Some(y)) => cmp_vec(x, y),
                    (x, y) => x.is_some().cmp(&y.is_some()),
                })
        });
        let strata = self
            .strata
            .as_ref()
            .map(|s| idx.iter().map(|&i| s[i].clone()).collect());
        TrialDataset {
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            c_names: self.c_names.clone(),
            l_names: self.l_names.clone(),
            strata,
        }
    }

    /// Build a dataset from selected rows (with repetition); labels and
    /// strata follow the rows. Fails if an arm ends up empty.
    pub fn select(&self, indices: &[usize]) -> Result<TrialDataset> {
        let records = indices.iter().map(|&i| self.records[i].clone()).collect();
        let strata = self
            .strata
            .as_ref()
            .map(|s| indices.iter().map(|&i| s[i].clone()).collect());
        for arm in [1u8, 0u8] {
            if !indices.iter().any(|&i| self.records[i].arm() == arm) {
                return Err(Error::EmptyArm { arm });
            }
        }
        Ok(TrialDataset {
            records,
            c_names: self.c_names.clone(),
            l_names: self.l_names.clone(),
            strata,
        })
    }

    /// Indices of the baseline covariates named in `names`.
    pub fn c_indices(&self, names: &[String]) -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| {
                self.c_names
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| Error::MissingColumn(n.clone()))
            })
            .collect()
    }
}

fn bad_value(line: usize, column: &str, value: f64, reason: &str) -> Error {
    Error::BadValue {
        line,
        column: column.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

/// How covariate columns are picked out of a CSV header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColumnSelect {
    /// Every column starting with this prefix; the remainder is the name.
    Prefix(String),
    /// Exactly these columns, in this order.
    Names(Vec<String>),
}

/// Column mapping for [`load_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub col_r: String,
    pub col_s: String,
    pub col_y: String,
    pub cols_l: ColumnSelect,
    pub cols_c: ColumnSelect,
    pub col_stratum: Option<String>,
}

impl Default for CsvSchema {
    /// The layout written by [`write_dataset`].
    fn default() -> Self {
        CsvSchema {
            col_r: "R".into(),
            col_s: "S".into(),
            col_y: "Y".into(),
            cols_l: ColumnSelect::Prefix("L_".into()),
            cols_c: ColumnSelect::Prefix("C_".into()),
            col_stratum: None,
        }
    }
}

/// Column name used for stratum labels by [`write_dataset`].
pub const STRATUM_COLUMN: &str = "STRATUM";

fn resolve(header: &csv::StringRecord, name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

fn resolve_select(
    header: &csv::StringRecord,
    select: &ColumnSelect,
) -> Result<(Vec<usize>, Vec<String>)> {
    match select {
        ColumnSelect::Prefix(prefix) => Ok(header
            .iter()
            .enumerate()
            .filter_map(|(i, h)| h.strip_prefix(prefix.as_str()).map(|n| (i, n.to_string())))
            .unzip()),
        ColumnSelect::Names(names) => {
            let idx = names
                .iter()
                .map(|n| resolve(header, n))
                .collect::<Result<Vec<_>>>()?;
            Ok((idx, names.clone()))
        }
    }
}

fn parse_binary(field: &str, line: usize, column: &str) -> Result<bool> {
    match field.trim() {
        "1" => Ok(true),
        "0" => Ok(false),
        other => match other.parse::<f64>() {
            Ok(1.0) => Ok(true),
            Ok(0.0) => Ok(false),
            _ => Err(Error::BadValue {
                line,
                column: column.to_string(),
                value: other.to_string(),
                reason: "expected 0 or 1".into(),
            }),
        },
    }
}

fn parse_real(field: &str, line: usize, column: &str) -> Result<f64> {
    let trimmed = field.trim();
    match trimmed.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::BadValue {
            line,
            column: column.to_string(),
            value: trimmed.to_string(),
            reason: if trimmed.is_empty() {
                "empty field".into()
            } else {
                "expected a finite number".into()
            },
        }),
    }
}

/// Read a trial dataset from CSV.
pub fn load_dataset(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<TrialDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(file, schema)
}

/// As [`load_dataset`], from any reader.
pub fn read_dataset(reader: impl std::io::Read, schema: &CsvSchema) -> Result<TrialDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::None)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let ir = resolve(&header, &schema.col_r)?;
    let is = resolve(&header, &schema.col_s)?;
    let iy = resolve(&header, &schema.col_y)?;
    let (il, l_names) = resolve_select(&header, &schema.cols_l)?;
    let (ic, c_names) = resolve_select(&header, &schema.cols_c)?;
    let istratum = schema
        .col_stratum
        .as_deref()
        .map(|c| resolve(&header, c))
        .transpose()?;

    let mut records = Vec::new();
    let mut strata = istratum.map(|_| Vec::new());
    for (k, row) in rdr.records().enumerate() {
        let row = row?;
        let line = k + 2;
        let field = |i: usize| row.get(i).unwrap_or("");
        let treated = parse_binary(field(ir), line, &schema.col_r)?;
        let switched = parse_binary(field(is), line, &schema.col_s)?;
        let y = parse_real(field(iy), line, &schema.col_y)?;
        let c = ic
            .iter()
            .zip(&c_names)
            .map(|(&i, name)| parse_real(field(i), line, name))
            .collect::<Result<Vec<_>>>()?;
        let l_empty = il.iter().filter(|&&i| field(i).trim().is_empty()).count();
        let l = if !il.is_empty() && l_empty == il.len() {
            None
        } else {
            Some(
                il.iter()
                    .zip(&l_names)
                    .map(|(&i, name)| parse_real(field(i), line, name))
                    .collect::<Result<Vec<_>>>()?,
            )
        };
        if let (Some(s), Some(i)) = (strata.as_mut(), istratum) {
            let label = field(i).to_string();
            if label.is_empty() {
                return Err(Error::BadValue {
                    line,
                    column: schema.col_stratum.clone().unwrap_or_default(),
                    value: label,
                    reason: "empty stratum label".into(),
                });
            }
            s.push(label);
        }
        records.push(TrialRecord {
            treated,
            switched,
            y,
            l,
            c,
        });
    }
    TrialDataset::new(records, c_names, l_names, strata)
}

/// Write `dataset` as CSV with header `R,S,Y,L_<name>...,C_<name>...`
/// (plus a trailing `STRATUM` column when strata are attached).
pub fn write_dataset(dataset: &TrialDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    emit_dataset(dataset, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// CSV text of `dataset` as written by [`write_dataset`].
pub fn dataset_to_csv(dataset: &TrialDataset) -> String {
    let mut buf = Vec::new();
    emit_dataset(dataset, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("utf-8")
}

fn emit_dataset(dataset: &TrialDataset, w: &mut impl Write) -> std::io::Result<()> {
    let mut header = vec!["R".to_string(), "S".to_string(), "Y".to_string()];
    header.extend(dataset.l_names.iter().map(|n| format!("L_{n}")));
    header.extend(dataset.c_names.iter().map(|n| format!("C_{n}")));
    if dataset.strata.is_some() {
        header.push(STRATUM_COLUMN.to_string());
    }
    writeln!(w, "{}", header.join(","))?;
    for (i, rec) in dataset.records.iter().enumerate() {
        let mut fields = vec![
            (rec.treated as u8).to_string(),
            (rec.switched as u8).to_string(),
            format_g17(rec.y),
        ];
        match &rec.l {
            Some(l) => fields.extend(l.iter().map(|v| format_g17(*v))),
            None => fields.extend(std::iter::repeat_n(String::new(), dataset.l_dim())),
        }
        fields.extend(rec.c.iter().map(|v| format_g17(*v)));
        if let Some(s) = &dataset.strata {
            fields.push(s[i].clone());
        }
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(treated: bool, switched: bool, y: f64, l: Option<f64>, c: f64) -> TrialRecord {
        TrialRecord {
            treated,
            switched,
            y,
            l: l.map(|v| vec![v]),
            c: vec![c],
        }
    }

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn control_rows_with_empty_l_are_absent() {
        let csv = "R,S,Y,L_sev,C_age\n1,0,0.5,-0.2,1.0\n0,1,-1.5,,0.3\n";
        let d = read_dataset(csv.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(d.records()[0].l, Some(vec![-0.2]));
        assert_eq!(d.records()[1].l, None);
        assert!(d.require_l(1).is_ok());
        assert!(matches!(
            d.require_l(0),
            Err(Error::MissingL { index: 1, arm: 0 })
        ));
    }

    #[test]
    fn empty_outcome_is_bad_value() {
        let csv = "R,S,Y,C_age\n1,0,,1.0\n0,0,1.0,2.0\n";
        let err = read_dataset(csv.as_bytes(), &CsvSchema::default()).unwrap_err();
        assert!(matches!(err, Error::BadValue { line: 2, .. }), "{err}");
    }

    #[test]
    fn non_binary_arm_rejected() {
        let csv = "R,S,Y\n2,0,1.0\n0,0,1.0\n";
        assert!(matches!(
            read_dataset(csv.as_bytes(), &CsvSchema::default()),
            Err(Error::BadValue { .. })
        ));
        let csv = "R,S,Y\n1,0.5,1.0\n0,0,1.0\n";
        assert!(matches!(
            read_dataset(csv.as_bytes(), &CsvSchema::default()),
            Err(Error::BadValue { .. })
        ));
    }

    #[test]
    fn missing_column_and_empty_arm() {
        let csv = "R,S\n1,0\n";
        assert!(matches!(
            read_dataset(csv.as_bytes(), &CsvSchema::default()),
            Err(Error::MissingColumn(c)) if c == "Y"
        ));
        let csv = "R,S,Y\n1,0,1.0\n1,1,2.0\n";
        assert!(matches!(
            read_dataset(csv.as_bytes(), &CsvSchema::default()),
            Err(Error::EmptyArm { arm: 0 })
        ));
    }

    #[test]
    fn partially_empty_l_is_bad_value() {
        let csv = "R,S,Y,L_a,L_b\n1,0,1.0,0.1,\n0,0,1.0,,\n";
        assert!(matches!(
            read_dataset(csv.as_bytes(), &CsvSchema::default()),
            Err(Error::BadValue { .. })
        ));
    }

    #[test]
    fn non_finite_values_rejected() {
        let csv = "R,S,Y\n1,0,inf\n0,0,1.0\n";
        assert!(read_dataset(csv.as_bytes(), &CsvSchema::default()).is_err());
        let err = TrialDataset::new(
            vec![
                rec(true, false, 0.0, Some(f64::NAN), 0.0),
                rec(false, false, 0.0, None, 0.0),
            ],
            names(&["c"]),
            names(&["l"]),
            None,
        );
        assert!(matches!(err, Err(Error::BadValue { .. })));
    }

    #[test]
    fn explicit_schema_columns() {
        let csv = "arm,rescue,outcome,fpg,age,site\n1,0,0.5,7.1,50,a\n0,1,-1.0,,61,b\n";
        let schema = CsvSchema {
            col_r: "arm".into(),
            col_s: "rescue".into(),
            col_y: "outcome".into(),
            cols_l: ColumnSelect::Names(names(&["fpg"])),
            cols_c: ColumnSelect::Names(names(&["age"])),
            col_stratum: Some("site".into()),
        };
        let d = read_dataset(csv.as_bytes(), &schema).unwrap();
        assert_eq!(d.c_names(), &names(&["age"])[..]);
        assert_eq!(d.strata().unwrap(), &names(&["a", "b"])[..]);
        assert_eq!(d.records()[0].c, vec![50.0]);
    }

    #[test]
    fn one_record_per_arm_writes_header_plus_rows() {
        let d = TrialDataset::new(
            vec![
                rec(true, false, 0.25, Some(-0.5), 1.0),
                rec(false, true, 0.1, None, 0.0),
            ],
            names(&["sev"]),
            names(&["age"]),
            None,
        )
        .unwrap();
        let text = dataset_to_csv(&d);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "R,S,Y,L_age,C_sev");
        assert_eq!(lines[1], "1,0,0.25,-0.5,1");
        assert_eq!(lines[2], "0,1,0.10000000000000001,,0");
        assert!(!text.contains("NA"));
    }

    #[test]
    fn round_trip_with_strata() {
        let d = TrialDataset::new(
            vec![
                rec(true, false, 0.1 + 0.2, Some(1.0 / 3.0), -2.5e-9),
                rec(false, true, -7.0, None, 1e20),
            ],
            names(&["c1"]),
            names(&["l1"]),
            Some(names(&["x", "y"])),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_dataset(&d, &path).unwrap();
        let schema = CsvSchema {
            col_stratum: Some(STRATUM_COLUMN.into()),
            ..CsvSchema::default()
        };
        assert_eq!(load_dataset(&path, &schema).unwrap(), d);
    }

    #[test]
    fn flip_swaps_arms_only() {
        let d = TrialDataset::new(
            vec![
                rec(true, false, 1.0, Some(0.0), 0.0),
                rec(false, true, 2.0, None, 0.0),
            ],
            names(&["c"]),
            names(&["l"]),
            None,
        )
        .unwrap();
        let f = d.flipped();
        assert!(!f.records()[0].treated && f.records()[1].treated);
        assert_eq!(f.flipped(), d);
    }
}
