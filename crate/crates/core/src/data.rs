//! Observed-data records, dataset validation, and the CSV/descriptor format.
//!
//! A record carries the missingness indicator `r`, the shadow variable `z`, the
//! covariate block that may be missing (`x_miss`), always-observed covariates
//! (`x_obs`), the binary treatment, `K` causally ordered mediator clusters and the
//! outcome. The covariate block is missing as a whole: `x_miss` is `Some` exactly
//! when `r == 1`.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{PseError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ObservedRecord {
    pub r: u8,
    pub z: Vec<f64>,
    pub x_miss: Option<Vec<f64>>,
    pub x_obs: Vec<f64>,
    pub a: u8,
    pub m: Vec<Vec<f64>>,
    pub y: f64,
}

impl ObservedRecord {
    pub fn is_complete(&self) -> bool {
        self.r == 1
    }
}

/// Column groupings of a dataset. Serialized as the sidecar JSON descriptor that
/// accompanies a CSV file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Descriptor {
    pub k: usize,
    pub z: Vec<String>,
    pub x_miss: Vec<String>,
    #[serde(default)]
    pub x_obs: Vec<String>,
    pub mediators: Vec<Vec<String>>,
    #[serde(default = "default_y")]
    pub y: String,
}

fn default_y() -> String {
    "y".to_string()
}

impl Descriptor {
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let desc: Descriptor = serde_json::from_reader(BufReader::new(file))?;
        desc.check()?;
        Ok(desc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn check(&self) -> Result<()> {
        if self.k == 0 {
            return Err(PseError::Config("descriptor k must be at least 1".into()));
        }
        if self.mediators.len() != self.k {
            return Err(PseError::Config(format!(
                "descriptor declares k = {} but lists {} mediator clusters",
                self.k,
                self.mediators.len()
            )));
        }
        if self.z.is_empty() || self.x_miss.is_empty() {
            return Err(PseError::Config(
                "descriptor needs at least one shadow column and one missing-covariate column".into(),
            ));
        }
        if self.mediators.iter().any(|g| g.is_empty()) {
            return Err(PseError::Config("empty mediator cluster in descriptor".into()));
        }
        let cols = self.columns();
        for (i, c) in cols.iter().enumerate() {
            if cols[..i].contains(c) {
                return Err(PseError::Config(format!("duplicate column name '{c}'")));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        Dims {
            z: self.z.len(),
            x_miss: self.x_miss.len(),
            x_obs: self.x_obs.len(),
            m: self.mediators.iter().map(Vec::len).collect(),
        }
    }

    /// Canonical column order: `r, z.., x_miss.., x_obs.., a, m1.., .., mK.., y`.
    pub fn columns(&self) -> Vec<String> {
        let mut cols = vec!["r".to_string()];
        cols.extend(self.z.iter().cloned());
        cols.extend(self.x_miss.iter().cloned());
        cols.extend(self.x_obs.iter().cloned());
        cols.push("a".to_string());
        for g in &self.mediators {
            cols.extend(g.iter().cloned());
        }
        cols.push(self.y.clone());
        cols
    }

    /// Generic names (`z1`, `x_miss1`, `m1_1`, ...) for the given dimensions.
    pub fn generic(dims: &Dims) -> Self {
        let names = |prefix: &str, n: usize| -> Vec<String> {
            if n == 1 {
                vec![prefix.to_string()]
            } else {
                (1..=n).map(|i| format!("{prefix}_{i}")).collect()
            }
        };
        Descriptor {
            k: dims.m.len(),
            z: names("z", dims.z),
            x_miss: names("xm", dims.x_miss),
            x_obs: (1..=dims.x_obs).map(|i| format!("xo{i}")).collect(),
            mediators: dims
                .m
                .iter()
                .enumerate()
                .map(|(k, &d)| names(&format!("m{}", k + 1), d))
                .collect(),
            y: "y".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub z: usize,
    pub x_miss: usize,
    pub x_obs: usize,
    pub m: Vec<usize>,
}

impl Dims {
    pub fn x(&self) -> usize {
        self.x_miss + self.x_obs
    }

    /// Total dimension of the first `j` mediator clusters.
    pub fn m_prefix(&self, j: usize) -> usize {
        self.m[..j].iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<ObservedRecord>,
    pub descriptor: Descriptor,
}

impl Dataset {
    /// Builds a dataset and runs [`validate`] on it.
    pub fn new(records: Vec<ObservedRecord>, descriptor: Descriptor) -> Result<Self> {
        descriptor.check()?;
        let ds = Dataset { records, descriptor };
        validate(&ds)?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn k(&self) -> usize {
        self.descriptor.k
    }

    pub fn dims(&self) -> Dims {
        self.descriptor.dims()
    }

    pub fn complete_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.records[i].r == 1).collect()
    }

    pub fn n_complete(&self) -> usize {
        self.records.iter().filter(|r| r.r == 1).count()
    }

    pub fn r(&self) -> Vec<f64> {
        self.records.iter().map(|r| f64::from(r.r)).collect()
    }

    pub fn a(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.a).collect()
    }

    pub fn y(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.y).collect()
    }

    /// Rows `(x, m_1, .., m_j)` for the given record indices; every listed record
    /// must be a complete case.
    pub fn covariate_mediator_rows(&self, rows: &[usize], j: usize) -> Result<DMatrix<f64>> {
        let dims = self.dims();
        let width = dims.x() + dims.m_prefix(j);
        let mut out = DMatrix::zeros(rows.len(), width);
        for (o, &i) in rows.iter().enumerate() {
            let rec = &self.records[i];
            let x = covariate_vector(rec).map_err(|_| PseError::MissingCovariate(i))?;
            let mut c = 0;
            for v in x.iter().chain(rec.m[..j].iter().flatten()) {
                out[(o, c)] = *v;
                c += 1;
            }
        }
        Ok(out)
    }

    /// Rows `(x, a, m_1, .., m_K, y)`: the arguments of the odds function.
    pub fn odds_rows(&self, rows: &[usize]) -> Result<DMatrix<f64>> {
        let dims = self.dims();
        let width = dims.x() + 1 + dims.m_prefix(self.k()) + 1;
        let mut out = DMatrix::zeros(rows.len(), width);
        for (o, &i) in rows.iter().enumerate() {
            let rec = &self.records[i];
            let x = covariate_vector(rec).map_err(|_| PseError::MissingCovariate(i))?;
            let vals = x
                .iter()
                .copied()
                .chain(std::iter::once(f64::from(rec.a)))
                .chain(rec.m.iter().flatten().copied())
                .chain(std::iter::once(rec.y));
            for (c, v) in vals.enumerate() {
                out[(o, c)] = v;
            }
        }
        Ok(out)
    }

    /// Rows `(z, x_obs, a, m_1, .., m_K, y)` for every record: the always-observed
    /// conditioning variables of the odds equation.
    pub fn shadow_rows(&self) -> DMatrix<f64> {
        let dims = self.dims();
        let width = dims.z + dims.x_obs + 1 + dims.m_prefix(self.k()) + 1;
        let mut out = DMatrix::zeros(self.n(), width);
        for (o, rec) in self.records.iter().enumerate() {
            let vals = rec
                .z
                .iter()
                .chain(rec.x_obs.iter())
                .copied()
                .chain(std::iter::once(f64::from(rec.a)))
                .chain(rec.m.iter().flatten().copied())
                .chain(std::iter::once(rec.y));
            for (c, v) in vals.enumerate() {
                out[(o, c)] = v;
            }
        }
        out
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            records: rows.iter().map(|&i| self.records[i].clone()).collect(),
            descriptor: self.descriptor.clone(),
        }
    }

    pub fn read_csv(path: &Path, descriptor: Descriptor) -> Result<Self> {
        let file = File::open(path)?;
        Self::from_csv_reader(BufReader::new(file), descriptor)
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R, descriptor: Descriptor) -> Result<Self> {
        descriptor.check()?;
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers()?.clone();
        let position = |name: &str| -> Result<usize> {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| PseError::Data(format!("column '{name}' missing from CSV header")))
        };
        let idx_r = position("r")?;
        let idx_a = position("a")?;
        let idx_y = position(&descriptor.y)?;
        let idx = |names: &[String]| -> Result<Vec<usize>> { names.iter().map(|n| position(n)).collect() };
        let idx_z = idx(&descriptor.z)?;
        let idx_xm = idx(&descriptor.x_miss)?;
        let idx_xo = idx(&descriptor.x_obs)?;
        let idx_m: Vec<Vec<usize>> = descriptor.mediators.iter().map(|g| idx(g)).collect::<Result<_>>()?;

        let mut records = Vec::new();
        for (line, row) in rdr.records().enumerate() {
            let row = row?;
            let row_no = line + 2;
            let cell = |i: usize| row.get(i).unwrap_or("");
            let num = |i: usize| -> Result<f64> {
                let s = cell(i);
                f64::from_str(s).map_err(|_| {
                    PseError::Data(format!("row {row_no}: cannot parse '{s}' in column '{}'", &header[i]))
                })
            };
            let binary = |i: usize| -> Result<u8> {
                match num(i)? {
                    v if v == 0.0 => Ok(0),
                    v if v == 1.0 => Ok(1),
                    v => Err(PseError::Data(format!("row {row_no}: column '{}' must be 0 or 1, got {v}", &header[i]))),
                }
            };
            let r = binary(idx_r)?;
            let missing: Vec<bool> = idx_xm.iter().map(|&i| is_na(cell(i))).collect();
            let x_miss = if missing.iter().all(|&m| m) {
                None
            } else if missing.iter().any(|&m| m) {
                return Err(PseError::Data(format!(
                    "row {row_no}: partially missing covariate block (missingness must cover all x_miss columns)"
                )));
            } else {
                Some(idx_xm.iter().map(|&i| num(i)).collect::<Result<Vec<_>>>()?)
            };
            records.push(ObservedRecord {
                r,
                z: idx_z.iter().map(|&i| num(i)).collect::<Result<_>>()?,
                x_miss,
                x_obs: idx_xo.iter().map(|&i| num(i)).collect::<Result<_>>()?,
                a: binary(idx_a)?,
                m: idx_m
                    .iter()
                    .map(|g| g.iter().map(|&i| num(i)).collect::<Result<Vec<_>>>())
                    .collect::<Result<_>>()?,
                y: num(idx_y)?,
            });
        }
        Dataset::new(records, descriptor)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        self.to_csv_writer(BufWriter::new(file))
    }

    /// Writes the canonical column order; floats carry 17 significant digits and
    /// missing covariates are written as `NA`.
    pub fn to_csv_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(self.descriptor.columns())?;
        let dims = self.dims();
        for rec in &self.records {
            let mut row: Vec<String> = Vec::with_capacity(self.descriptor.columns().len());
            row.push(rec.r.to_string());
            row.extend(rec.z.iter().map(|v| fmt_f64(*v)));
            match &rec.x_miss {
                Some(x) => row.extend(x.iter().map(|v| fmt_f64(*v))),
                None => row.extend(std::iter::repeat_n("NA".to_string(), dims.x_miss)),
            }
            row.extend(rec.x_obs.iter().map(|v| fmt_f64(*v)));
            row.push(rec.a.to_string());
            row.extend(rec.m.iter().flatten().map(|v| fmt_f64(*v)));
            row.push(fmt_f64(rec.y));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn is_na(s: &str) -> bool {
    s.is_empty() || s == "NA"
}

/// 17 significant digits, enough for an exact f64 round trip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub n: usize,
    pub n_missing: usize,
    pub miss_frac: f64,
    pub n_treated: usize,
    pub n_control: usize,
    pub complete_treated: usize,
    pub complete_control: usize,
    pub k: usize,
    pub dims: Dims,
    /// Human-readable warnings: empty treatment arms, all-missing or all-observed samples.
    pub flags: Vec<String>,
}

/// Checks every record against the declared dimensions and the missingness
/// invariants, and summarizes the sample. Never mutates the dataset.
pub fn validate(dataset: &Dataset) -> Result<ValidationReport> {
    let n = dataset.n();
    if n == 0 {
        return Err(PseError::EmptyDataset);
    }
    let dims = dataset.dims();
    let mut n_missing = 0;
    let (mut n_treated, mut complete_treated, mut complete_control) = (0, 0, 0);
    for (i, rec) in dataset.records.iter().enumerate() {
        let bad = |what: String| PseError::DimensionMismatch(format!("record {i}: {what}"));
        if rec.r > 1 || rec.a > 1 {
            return Err(bad(format!("r = {} and a = {} must both be 0 or 1", rec.r, rec.a)));
        }
        match (&rec.x_miss, rec.r) {
            (Some(x), 1) if x.len() != dims.x_miss => {
                return Err(bad(format!("x_miss has {} entries, expected {}", x.len(), dims.x_miss)))
            }
            (Some(_), 0) => return Err(bad("r = 0 but the covariate block is present".into())),
            (None, 1) => return Err(bad("r = 1 but the covariate block is absent".into())),
            _ => {}
        }
        if rec.z.len() != dims.z || rec.x_obs.len() != dims.x_obs {
            return Err(bad(format!(
                "z/x_obs have {}/{} entries, expected {}/{}",
                rec.z.len(),
                rec.x_obs.len(),
                dims.z,
                dims.x_obs
            )));
        }
        if rec.m.len() != dims.m.len() || rec.m.iter().zip(&dims.m).any(|(v, &d)| v.len() != d) {
            return Err(bad("mediator clusters do not match declared dimensions".into()));
        }
        let finite = rec.z.iter().chain(rec.x_obs.iter()).chain(rec.m.iter().flatten()).all(|v| v.is_finite())
            && rec.y.is_finite()
            && rec.x_miss.as_ref().is_none_or(|x| x.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(PseError::NonFiniteInput(format!("record {i}")));
        }
        if rec.r == 0 {
            n_missing += 1;
        }
        if rec.a == 1 {
            n_treated += 1;
            complete_treated += usize::from(rec.r);
        } else {
            complete_control += usize::from(rec.r);
        }
    }
    let n_control = n - n_treated;
    let mut flags = Vec::new();
    if n_treated == 0 {
        flags.push("treatment arm a=1 is empty".to_string());
    }
    if n_control == 0 {
        flags.push("treatment arm a=0 is empty".to_string());
    }
    if n_missing == n {
        flags.push("every record is missing the covariate block".to_string());
    }
    if n_missing == 0 {
        flags.push("no missing covariates; the odds function is identically zero".to_string());
    }
    if complete_treated == 0 || complete_control == 0 {
        flags.push("a treatment arm has no complete cases".to_string());
    }
    Ok(ValidationReport {
        n,
        n_missing,
        miss_frac: n_missing as f64 / n as f64,
        n_treated,
        n_control,
        complete_treated,
        complete_control,
        k: dataset.k(),
        dims,
        flags,
    })
}

/// Sub-dataset of the records with `r = 1`, order preserved.
pub fn complete_cases(dataset: &Dataset) -> Result<Dataset> {
    let rows = dataset.complete_indices();
    if rows.is_empty() {
        return Err(PseError::EmptyResult);
    }
    Ok(dataset.subset(&rows))
}

/// `[x_miss, x_obs]`, the covariate vector fed to every basis that involves X.
pub fn covariate_vector(record: &ObservedRecord) -> Result<Vec<f64>> {
    match (&record.x_miss, record.r) {
        (Some(x), 1) => Ok(x.iter().chain(record.x_obs.iter()).copied().collect()),
        _ => Err(PseError::MissingCovariate(0)),
    }
}

/// Treatment levels `(a_1, .., a_{K+1})`: mediator `k` is generated under `a_k`
/// and the outcome under `a_{K+1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TreatmentProfile(Vec<u8>);

impl TreatmentProfile {
    pub fn new(levels: Vec<u8>, k: usize) -> Result<Self> {
        if levels.len() != k + 1 {
            return Err(PseError::Config(format!(
                "treatment profile has {} entries, expected K + 1 = {}",
                levels.len(),
                k + 1
            )));
        }
        if levels.iter().any(|&a| a > 1) {
            return Err(PseError::Config("treatment profile entries must be 0 or 1".into()));
        }
        Ok(TreatmentProfile(levels))
    }

    pub fn constant(level: u8, k: usize) -> Self {
        TreatmentProfile(vec![level.min(1); k + 1])
    }

    pub fn levels(&self) -> &[u8] {
        &self.0
    }

    pub fn k(&self) -> usize {
        self.0.len() - 1
    }

    /// `a_k` with 1-based `k` in `1..=K+1`.
    pub fn level(&self, k: usize) -> u8 {
        self.0[k - 1]
    }

    /// Parses `"1,0,1"`, `"(1,0,1)"` or `"101"`.
    pub fn parse(s: &str, k: usize) -> Result<Self> {
        let t = s.trim().trim_start_matches('(').trim_end_matches(')');
        let levels: Vec<u8> = if t.contains(',') {
            t.split(',')
                .map(|p| p.trim().parse::<u8>().map_err(|_| PseError::Config(format!("bad profile '{s}'"))))
                .collect::<Result<_>>()?
        } else {
            t.chars()
                .map(|c| c.to_digit(10).map(|d| d as u8).ok_or_else(|| PseError::Config(format!("bad profile '{s}'"))))
                .collect::<Result<_>>()?
        };
        Self::new(levels, k)
    }
}

impl fmt::Display for TreatmentProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u8::to_string).collect();
        write!(f, "({})", parts.join(","))
    }
}
