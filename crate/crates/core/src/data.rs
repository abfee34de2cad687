//! Country-level panel: CSV loading, kNN imputation and min-max scaling.
//!
//! The canonical input is a UTF-8 CSV with a header row. Empty covariate
//! cells are read as missing and must be imputed before the dataset is used
//! for training. Aid volumes are in USD millions, outcomes are fractions
//! (0.0326 is a 3.26% relative reduction) and the infection rate column is
//! new infections per 1,000 people, converted to per-person on load.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CgctError, Result};

/// Number of country characteristics.
pub const NUM_COVARIATES: usize = 14;

/// Covariate column names, in model order.
pub const COVARIATE_COLUMNS: [&str; NUM_COVARIATES] = [
    "gdp_per_capita_ppp",
    "gdp_growth",
    "fdi",
    "inflation",
    "unemployment",
    "population_millions",
    "fertility",
    "maternal_mortality",
    "infant_mortality",
    "life_expectancy",
    "school_enrollment",
    "undernourishment",
    "electricity_access",
    "tb_incidence",
];

pub const COL_COUNTRY: &str = "country";
pub const COL_YEAR: &str = "year";
pub const COL_OUTCOME: &str = "outcome";
pub const COL_AID: &str = "aid_usd_millions";
pub const COL_RATE: &str = "hiv_incidence_per_1000";
pub const COL_POPULATION: &str = "population";

/// Default neighbour count for [`impute_knn`].
pub const DEFAULT_KNN_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryRecord {
    pub country_id: String,
    pub year: i32,
    /// Relative reduction in the infection rate, as a fraction.
    pub outcome_y: f64,
    /// Aid volume in USD millions.
    pub treatment_a: f64,
    /// `None` marks a missing cell.
    pub covariates: Vec<Option<f64>>,
    /// New infections per person per year.
    pub infection_rate_r: f64,
    pub population_p: f64,
}

impl CountryRecord {
    pub fn has_missing(&self) -> bool {
        self.covariates.iter().any(Option::is_none)
    }

    /// Covariates as plain values; fails if any cell is still missing.
    pub fn covariate_values(&self) -> Result<Vec<f64>> {
        self.covariates
            .iter()
            .enumerate()
            .map(|(j, v)| {
                v.ok_or_else(|| {
                    CgctError::InvalidData(format!(
                        "{} ({}) has a missing `{}`; impute first",
                        self.country_id, self.year, COVARIATE_COLUMNS[j]
                    ))
                })
            })
            .collect()
    }
}

/// An ordered set of country records.
///
/// Usually a single year. Pooled multi-year datasets are allowed; uniqueness
/// is enforced on `(country_id, year)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<CountryRecord>,
    pub feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(records: Vec<CountryRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if r.covariates.len() != NUM_COVARIATES {
                return Err(CgctError::DimensionMismatch {
                    expected: NUM_COVARIATES,
                    got: r.covariates.len(),
                });
            }
            if !(r.treatment_a >= 0.0) {
                return Err(CgctError::InvalidData(format!(
                    "{}: negative aid {}",
                    r.country_id, r.treatment_a
                )));
            }
            if !(r.population_p > 0.0) {
                return Err(CgctError::InvalidData(format!(
                    "{}: population must be positive",
                    r.country_id
                )));
            }
            if !(r.infection_rate_r >= 0.0) {
                return Err(CgctError::InvalidData(format!(
                    "{}: negative infection rate",
                    r.country_id
                )));
            }
            if !seen.insert((r.country_id.clone(), r.year)) {
                return Err(CgctError::InvalidData(format!(
                    "duplicate country {} in {}",
                    r.country_id, r.year
                )));
            }
        }
        Ok(Self {
            records,
            feature_names: COVARIATE_COLUMNS.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn years(&self) -> Vec<i32> {
        self.records
            .iter()
            .map(|r| r.year)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn has_missing(&self) -> bool {
        self.records.iter().any(CountryRecord::has_missing)
    }

    pub fn position(&self, country_id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.country_id == country_id)
    }

    pub fn get(&self, country_id: &str) -> Option<&CountryRecord> {
        self.records.iter().find(|r| r.country_id == country_id)
    }

    pub fn outcomes(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.records.iter().map(|r| r.outcome_y))
    }

    pub fn treatments(&self) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.records.iter().map(|r| r.treatment_a))
    }

    /// n x p covariate matrix in raw units.
    pub fn covariate_matrix(&self) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(self.n(), NUM_COVARIATES);
        for (i, r) in self.records.iter().enumerate() {
            for (j, v) in r.covariate_values()?.into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }

    /// Copy with the outcome column replaced.
    pub fn with_outcomes(&self, y: &[f64]) -> Result<Dataset> {
        if y.len() != self.n() {
            return Err(CgctError::DimensionMismatch {
                expected: self.n(),
                got: y.len(),
            });
        }
        let mut out = self.clone();
        for (r, &v) in out.records.iter_mut().zip(y) {
            r.outcome_y = v;
        }
        Ok(out)
    }

    /// Rows at `indices`, in that order. Repeated indices get `~k` suffixes
    /// so country ids stay unique (bootstrap resamples).
    pub fn resample(&self, indices: &[usize]) -> Result<Dataset> {
        let mut counts = std::collections::HashMap::new();
        let mut records = Vec::with_capacity(indices.len());
        for &i in indices {
            let r = self.records.get(i).ok_or_else(|| {
                CgctError::InvalidArgument(format!("row {i} out of range"))
            })?;
            let c = counts.entry(i).or_insert(0usize);
            let mut rec = r.clone();
            if *c > 0 {
                rec.country_id = format!("{}~{}", r.country_id, c);
            }
            *c += 1;
            records.push(rec);
        }
        Dataset::new(records)
    }

    /// Records of one year, in file order.
    pub fn for_year(&self, year: i32) -> Result<Dataset> {
        let records: Vec<_> = self
            .records
            .iter()
            .filter(|r| r.year == year)
            .cloned()
            .collect();
        if records.is_empty() {
            return Err(CgctError::EmptyYear(year));
        }
        Dataset::new(records)
    }

    /// Records of several years concatenated (pooled training).
    pub fn for_years(&self, years: &[i32]) -> Result<Dataset> {
        let mut records = Vec::new();
        for &y in years {
            records.extend(self.for_year(y)?.records);
        }
        Dataset::new(records)
    }

    /// SHA-256 over a canonical rendering of every value, used to prove
    /// identical inputs across runs and ablation cells.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.records {
            h.update(r.country_id.as_bytes());
            h.update(r.year.to_le_bytes());
            h.update(r.outcome_y.to_bits().to_le_bytes());
            h.update(r.treatment_a.to_bits().to_le_bytes());
            for c in &r.covariates {
                match c {
                    Some(v) => h.update(v.to_bits().to_le_bytes()),
                    None => h.update([0xffu8; 8]),
                }
            }
            h.update(r.infection_rate_r.to_bits().to_le_bytes());
            h.update(r.population_p.to_bits().to_le_bytes());
        }
        h.finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect::<String>()
    }
}

/// Reads every year in the file.
pub fn load_panel(csv_path: impl AsRef<Path>) -> Result<Dataset> {
    let path = csv_path.as_ref();
    let file = File::open(path).map_err(|source| CgctError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_panel(file)
}

/// Reads the rows of `year`, keeping missing-value markers.
pub fn load_dataset(csv_path: impl AsRef<Path>, year: i32) -> Result<Dataset> {
    load_panel(csv_path)?.for_year(year)
}

pub fn read_panel<R: std::io::Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CgctError::MissingColumn(name.to_string()))
    };
    let i_country = col(COL_COUNTRY)?;
    let i_year = col(COL_YEAR)?;
    let i_outcome = col(COL_OUTCOME)?;
    let i_aid = col(COL_AID)?;
    let i_rate = col(COL_RATE)?;
    let i_pop = col(COL_POPULATION)?;
    let i_cov: Vec<usize> = COVARIATE_COLUMNS
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let cell = |i: usize| rec.get(i).unwrap_or("");
        let number = |i: usize| -> Result<f64> {
            let raw = cell(i);
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CgctError::NonNumeric {
                    row: row + 1,
                    column: headers[i].to_string(),
                    value: raw.to_string(),
                })
        };
        let year_raw = cell(i_year);
        let year = year_raw
            .parse::<i32>()
            .map_err(|_| CgctError::NonNumeric {
                row: row + 1,
                column: COL_YEAR.into(),
                value: year_raw.into(),
            })?;
        let covariates = i_cov
            .iter()
            .map(|&i| {
                if cell(i).is_empty() {
                    Ok(None)
                } else {
                    number(i).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(CountryRecord {
            country_id: cell(i_country).to_string(),
            year,
            outcome_y: number(i_outcome)?,
            treatment_a: number(i_aid)?,
            covariates,
            infection_rate_r: number(i_rate)? / 1000.0,
            population_p: number(i_pop)?,
        });
    }
    Dataset::new(records)
}

/// Writes a dataset in the canonical CSV layout.
pub fn write_panel<W: std::io::Write>(d: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![COL_COUNTRY, COL_YEAR, COL_OUTCOME, COL_AID];
    header.extend(COVARIATE_COLUMNS);
    header.extend([COL_RATE, COL_POPULATION]);
    w.write_record(&header)?;
    for r in &d.records {
        let mut row = vec![
            r.country_id.clone(),
            r.year.to_string(),
            r.outcome_y.to_string(),
            r.treatment_a.to_string(),
        ];
        row.extend(
            r.covariates
                .iter()
                .map(|c| c.map(|v| v.to_string()).unwrap_or_default()),
        );
        row.push((r.infection_rate_r * 1000.0).to_string());
        row.push(r.population_p.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| CgctError::Io {
        path: "<writer>".into(),
        source,
    })?;
    Ok(())
}

/// Fills every missing covariate with the mean of that covariate over the
/// `k` nearest rows that observe it.
///
/// Distances use min-max scaled covariates and only the dimensions observed
/// in both rows, normalized by the number of shared dimensions. Ties are
/// broken by row order. Observed values are never changed.
pub fn impute_knn(d: &Dataset, k: usize) -> Result<Dataset> {
    let n = d.n();
    if k == 0 || k >= n {
        return Err(CgctError::InvalidArgument(format!(
            "k must satisfy 0 < k < n (k={k}, n={n})"
        )));
    }
    let p = NUM_COVARIATES;
    let mut lo = vec![f64::INFINITY; p];
    let mut hi = vec![f64::NEG_INFINITY; p];
    let mut observed = vec![0usize; p];
    for r in &d.records {
        for (j, v) in r.covariates.iter().enumerate() {
            if let Some(v) = v {
                lo[j] = lo[j].min(*v);
                hi[j] = hi[j].max(*v);
                observed[j] += 1;
            }
        }
    }
    for j in 0..p {
        if observed[j] == 0 {
            return Err(CgctError::InvalidData(format!(
                "column `{}` is entirely missing",
                COVARIATE_COLUMNS[j]
            )));
        }
        if observed[j] < k && observed[j] < n {
            return Err(CgctError::InvalidData(format!(
                "column `{}` has {} observed values, fewer than k={k}",
                COVARIATE_COLUMNS[j], observed[j]
            )));
        }
    }
    let scaled: Vec<Vec<Option<f64>>> = d
        .records
        .iter()
        .map(|r| {
            r.covariates
                .iter()
                .enumerate()
                .map(|(j, v)| {
                    v.map(|v| {
                        let range = hi[j] - lo[j];
                        if range > 0.0 {
                            (v - lo[j]) / range
                        } else {
                            0.0
                        }
                    })
                })
                .collect()
        })
        .collect();

    let distance = |a: usize, b: usize| -> f64 {
        let mut sum = 0.0;
        let mut shared = 0usize;
        for (x, y) in scaled[a].iter().zip(&scaled[b]) {
            if let (Some(x), Some(y)) = (x, y) {
                sum += (x - y) * (x - y);
                shared += 1;
            }
        }
        if shared == 0 {
            f64::INFINITY
        } else {
            (sum / shared as f64).sqrt()
        }
    };

    let mut out = d.clone();
    for i in 0..n {
        let missing: Vec<usize> = (0..p)
            .filter(|&j| d.records[i].covariates[j].is_none())
            .collect();
        if missing.is_empty() {
            continue;
        }
        let mut by_distance: Vec<(f64, usize)> = (0..n)
            .filter(|&r| r != i)
            .map(|r| (distance(i, r), r))
            .collect();
        by_distance.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for j in missing {
            let donors: Vec<f64> = by_distance
                .iter()
                .filter_map(|&(_, r)| d.records[r].covariates[j])
                .take(k)
                .collect();
            let mean = donors.iter().sum::<f64>() / donors.len() as f64;
            out.records[i].covariates[j] = Some(mean);
        }
    }
    Ok(out)
}

/// Per-dimension min-max scaler. Constant dimensions map to 0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    /// An unfitted scaler; every transform fails until [`fit`](Self::fit).
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fit_matrix(columns: &DMatrix<f64>) -> Result<Self> {
        let mut s = Self::new();
        s.fit(columns)?;
        Ok(s)
    }

    pub fn fit_values(values: &[f64]) -> Result<Self> {
        Self::fit_matrix(&DMatrix::from_column_slice(values.len(), 1, values))
    }

    pub fn fit(&mut self, columns: &DMatrix<f64>) -> Result<()> {
        if columns.nrows() < 2 {
            return Err(CgctError::InvalidArgument(
                "min-max scaler needs at least 2 rows".into(),
            ));
        }
        if columns.iter().any(|v| !v.is_finite()) {
            return Err(CgctError::NonFinite("scaler input".into()));
        }
        self.min = columns.column_iter().map(|c| c.min()).collect();
        self.max = columns.column_iter().map(|c| c.max()).collect();
        Ok(())
    }

    pub fn is_fitted(&self) -> bool {
        !self.min.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.min.len()
    }

    fn check(&self, got: usize) -> Result<()> {
        if !self.is_fitted() {
            return Err(CgctError::NotFitted);
        }
        if got != self.dims() {
            return Err(CgctError::DimensionMismatch {
                expected: self.dims(),
                got,
            });
        }
        Ok(())
    }

    #[inline]
    fn scale_one(&self, j: usize, v: f64) -> f64 {
        let range = self.max[j] - self.min[j];
        if range > 0.0 {
            (v - self.min[j]) / range
        } else {
            0.0
        }
    }

    #[inline]
    fn unscale_one(&self, j: usize, v: f64) -> f64 {
        self.min[j] + v * (self.max[j] - self.min[j])
    }

    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x.len())?;
        Ok(x.iter().enumerate().map(|(j, &v)| self.scale_one(j, v)).collect())
    }

    pub fn inverse(&self, x_scaled: &[f64]) -> Result<Vec<f64>> {
        self.check(x_scaled.len())?;
        Ok(x_scaled
            .iter()
            .enumerate()
            .map(|(j, &v)| self.unscale_one(j, v))
            .collect())
    }

    pub fn transform_matrix(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(x.ncols())?;
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            self.scale_one(j, x[(i, j)])
        }))
    }

    /// Scales a single value of a one-dimensional scaler.
    pub fn transform_scalar(&self, v: f64) -> Result<f64> {
        self.check(1)?;
        Ok(self.scale_one(0, v))
    }

    pub fn inverse_scalar(&self, v: f64) -> Result<f64> {
        self.check(1)?;
        Ok(self.unscale_one(0, v))
    }

    /// d(scaled)/d(raw) of a one-dimensional scaler.
    pub fn slope_scalar(&self) -> Result<f64> {
        self.check(1)?;
        let range = self.max[0] - self.min[0];
        Ok(if range > 0.0 { 1.0 / range } else { 0.0 })
    }
}

/// Covariate and treatment scalers fitted on one training dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scalers {
    pub covariates: MinMaxScaler,
    pub treatment: MinMaxScaler,
}

impl Scalers {
    pub fn fit(d: &Dataset) -> Result<Self> {
        let x = d.covariate_matrix()?;
        let a: Vec<f64> = d.records.iter().map(|r| r.treatment_a).collect();
        Ok(Self {
            covariates: MinMaxScaler::fit_matrix(&x)?,
            treatment: MinMaxScaler::fit_values(&a)?,
        })
    }

    pub fn scale_covariates(&self, d: &Dataset) -> Result<DMatrix<f64>> {
        self.covariates.transform_matrix(&d.covariate_matrix()?)
    }

    pub fn scale_treatments(&self, d: &Dataset) -> Result<DVector<f64>> {
        let a = d
            .records
            .iter()
            .map(|r| self.treatment.transform_scalar(r.treatment_a))
            .collect::<Result<Vec<_>>>()?;
        Ok(DVector::from_vec(a))
    }
}

/// Summary statistics of one column (sample standard deviation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub count: usize,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl ColumnStats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Some(Self {
            count: n,
            mean,
            sd,
            median,
            min: sorted[0],
            max: sorted[n - 1],
        })
    }
}

/// Per-column statistics over observed (non-missing) values.
pub fn summarize(d: &Dataset) -> Vec<(String, Option<ColumnStats>)> {
    let mut out = vec![
        (
            COL_OUTCOME.to_string(),
            ColumnStats::of(&d.records.iter().map(|r| r.outcome_y).collect::<Vec<_>>()),
        ),
        (
            COL_AID.to_string(),
            ColumnStats::of(&d.records.iter().map(|r| r.treatment_a).collect::<Vec<_>>()),
        ),
    ];
    for (j, name) in COVARIATE_COLUMNS.iter().enumerate() {
        let vals: Vec<f64> = d.records.iter().filter_map(|r| r.covariates[j]).collect();
        out.push((name.to_string(), ColumnStats::of(&vals)));
    }
    out
}
