use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::HydroError;

pub const WEEKS_PER_YEAR: usize = 52;

/// Weekly inflow record: one row per (year, week), one column per site.
/// Missing entries hold `NaN` and are flagged invalid.
#[derive(Debug, Clone)]
pub struct InflowDataset {
    pub series: DMatrix<f64>,
    pub week_of_year: Vec<usize>,
    pub year: Vec<i32>,
    /// Row-major validity flags, `rows × sites`.
    pub validity: Vec<bool>,
}

impl PartialEq for InflowDataset {
    fn eq(&self, other: &Self) -> bool {
        self.series.shape() == other.series.shape()
            && self.week_of_year == other.week_of_year
            && self.year == other.year
            && self.validity == other.validity
            && (0..self.n_rows())
                .all(|i| (0..self.n_sites()).all(|j| self.get(i, j) == other.get(i, j)))
    }
}

impl InflowDataset {
    /// Builds a dataset from rows of optional values, sorting rows by
    /// (year, week).
    pub fn from_rows(rows: Vec<(i32, usize, Vec<Option<f64>>)>) -> Result<Self, HydroError> {
        let p = rows.first().map_or(0, |r| r.2.len());
        if p == 0 {
            return Err(HydroError::Data("inflow record has no sites".into()));
        }
        let mut rows = rows;
        for (i, (_, week, vals)) in rows.iter().enumerate() {
            if *week >= WEEKS_PER_YEAR {
                return Err(HydroError::Data(format!("row {i}: week {week} outside 0..52")));
            }
            if vals.len() != p {
                return Err(HydroError::Data(format!(
                    "row {i}: expected {p} sites, got {}",
                    vals.len()
                )));
            }
        }
        rows.sort_by_key(|r| (r.0, r.1));
        let n = rows.len();
        let mut series = DMatrix::from_element(n, p, f64::NAN);
        let mut validity = vec![false; n * p];
        for (i, (_, _, vals)) in rows.iter().enumerate() {
            for (j, v) in vals.iter().enumerate() {
                if let Some(v) = v {
                    series[(i, j)] = *v;
                    validity[i * p + j] = true;
                }
            }
        }
        Ok(Self {
            series,
            week_of_year: rows.iter().map(|r| r.1).collect(),
            year: rows.iter().map(|r| r.0).collect(),
            validity,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.series.nrows()
    }

    pub fn n_sites(&self) -> usize {
        self.series.ncols()
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.validity[i * self.n_sites() + j]
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.is_valid(i, j).then(|| self.series[(i, j)])
    }

    pub fn row_complete(&self, i: usize) -> bool {
        (0..self.n_sites()).all(|j| self.is_valid(i, j))
    }

    pub fn row_values(&self, i: usize) -> Vec<f64> {
        self.series.row(i).iter().copied().collect()
    }

    /// Whether row `i + 1` is the week right after row `i`.
    pub fn consecutive(&self, i: usize) -> bool {
        let (y0, w0) = (self.year[i], self.week_of_year[i]);
        let (y1, w1) = (self.year[i + 1], self.week_of_year[i + 1]);
        (y1 == y0 && w1 == w0 + 1) || (y1 == y0 + 1 && w0 == WEEKS_PER_YEAR - 1 && w1 == 0)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), HydroError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| HydroError::io(path, e))?;
        let mut header = vec!["year".to_string(), "week".to_string()];
        header.extend((1..=self.n_sites()).map(|j| format!("site_{j}")));
        w.write_record(&header).map_err(|e| HydroError::io(path, e))?;
        for i in 0..self.n_rows() {
            let mut rec = vec![self.year[i].to_string(), self.week_of_year[i].to_string()];
            rec.extend((0..self.n_sites()).map(|j| match self.get(i, j) {
                Some(v) => format!("{v}"),
                None => String::new(),
            }));
            w.write_record(&rec).map_err(|e| HydroError::io(path, e))?;
        }
        w.flush().map_err(|e| HydroError::io(path, e))
    }
}

/// Reads `year,week,site_1..site_p`. Weeks are 0-based; empty cells are NA.
/// Gaps in the week sequence are logged, not rejected.
pub fn load_inflow_csv(path: &Path) -> Result<InflowDataset, HydroError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| HydroError::io(path, e))?;
    let header = reader.headers().map_err(|e| HydroError::io(path, e))?.clone();
    if header.len() < 3
        || !header[0].eq_ignore_ascii_case("year")
        || !header[1].eq_ignore_ascii_case("week")
    {
        return Err(HydroError::Data(format!(
            "{}: header must be year,week,site_1,...",
            path.display()
        )));
    }
    let p = header.len() - 2;
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| HydroError::io(path, e))?;
        let at = || format!("{} line {}", path.display(), line + 2);
        if rec.len() != p + 2 {
            return Err(HydroError::Data(format!(
                "{}: expected {} fields, got {}",
                at(),
                p + 2,
                rec.len()
            )));
        }
        let year: i32 = rec[0]
            .parse()
            .map_err(|_| HydroError::Data(format!("{}: bad year {:?}", at(), &rec[0])))?;
        let week: usize = rec[1]
            .parse()
            .map_err(|_| HydroError::Data(format!("{}: bad week {:?}", at(), &rec[1])))?;
        let mut vals = Vec::with_capacity(p);
        for j in 0..p {
            let cell = &rec[j + 2];
            if cell.is_empty() || cell.eq_ignore_ascii_case("na") {
                vals.push(None);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| HydroError::Data(format!("{}: bad value {cell:?}", at())))?;
                vals.push(Some(v));
            }
        }
        rows.push((year, week, vals));
    }
    let ds = InflowDataset::from_rows(rows)?;
    let gaps = (0..ds.n_rows().saturating_sub(1))
        .filter(|&i| !ds.consecutive(i))
        .count();
    if gaps > 0 {
        log::warn!("{}: {gaps} gaps in the weekly sequence", path.display());
    }
    Ok(ds)
}

/// Marks every negative entry NA and returns how many were changed.
pub fn clean_negatives(ds: &InflowDataset) -> (InflowDataset, usize) {
    let mut out = ds.clone();
    let p = ds.n_sites();
    let mut changed = 0;
    for i in 0..ds.n_rows() {
        for j in 0..p {
            if ds.is_valid(i, j) && ds.series[(i, j)] < 0.0 {
                out.series[(i, j)] = f64::NAN;
                out.validity[i * p + j] = false;
                changed += 1;
            }
        }
    }
    (out, changed)
}

/// Median of the valid values of each (week, site); the midpoint of the
/// two central values for even counts.
pub fn weekly_medians(ds: &InflowDataset) -> Result<DMatrix<f64>, HydroError> {
    let p = ds.n_sites();
    let mut buckets = vec![Vec::new(); WEEKS_PER_YEAR * p];
    for i in 0..ds.n_rows() {
        for j in 0..p {
            if let Some(v) = ds.get(i, j) {
                buckets[ds.week_of_year[i] * p + j].push(v);
            }
        }
    }
    let mut med = DMatrix::zeros(WEEKS_PER_YEAR, p);
    for week in 0..WEEKS_PER_YEAR {
        for site in 0..p {
            let b = &mut buckets[week * p + site];
            if b.is_empty() {
                return Err(HydroError::NoData { week, site });
            }
            let m = median(b);
            if !(m > 0.0) {
                return Err(HydroError::ZeroMedian { week, site });
            }
            med[(week, site)] = m;
        }
    }
    Ok(med)
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Log inflows relative to their weekly median.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedSeries {
    /// `ln(inflow / median)`; `NaN` where the input is NA.
    #[serde(with = "crate::linalg::rows")]
    pub values: DMatrix<f64>,
    #[serde(with = "crate::linalg::rows")]
    pub medians: DMatrix<f64>,
    /// Zero-replacement value per (week, site).
    #[serde(with = "crate::linalg::rows")]
    pub epsilon: DMatrix<f64>,
    /// Row-major flags for entries that were zero and got `epsilon`.
    pub zero_replaced: Vec<bool>,
}

impl NormalizedSeries {
    pub fn n_sites(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.values[(i, j)].is_finite()
    }

    pub fn row_has_replacement(&self, i: usize) -> bool {
        let p = self.n_sites();
        self.zero_replaced[i * p..(i + 1) * p].iter().any(|&z| z)
    }

    /// Rows usable for fitting clusters: all sites valid, no replaced zeros.
    pub fn fit_rows(&self) -> Vec<usize> {
        (0..self.values.nrows())
            .filter(|&i| (0..self.n_sites()).all(|j| self.is_valid(i, j)) && !self.row_has_replacement(i))
            .collect()
    }

    /// Inverse transform of one entry back to hm³/week.
    pub fn denormalize(&self, week: usize, site: usize, value: f64) -> f64 {
        self.medians[(week, site)] * value.exp()
    }
}

/// Smallest positive valid value per (week, site), scaled by 0.01; sites
/// with no positive value in a week fall back to the site-wide minimum.
pub fn zero_epsilon(ds: &InflowDataset) -> DMatrix<f64> {
    let p = ds.n_sites();
    let mut eps = DMatrix::from_element(WEEKS_PER_YEAR, p, f64::INFINITY);
    let mut site_min = vec![f64::INFINITY; p];
    for i in 0..ds.n_rows() {
        for j in 0..p {
            if let Some(v) = ds.get(i, j) {
                if v > 0.0 {
                    let w = ds.week_of_year[i];
                    eps[(w, j)] = eps[(w, j)].min(v);
                    site_min[j] = site_min[j].min(v);
                }
            }
        }
    }
    for w in 0..WEEKS_PER_YEAR {
        for j in 0..p {
            if !eps[(w, j)].is_finite() {
                eps[(w, j)] = if site_min[j].is_finite() { site_min[j] } else { 1.0 };
            }
            eps[(w, j)] *= 0.01;
        }
    }
    eps
}

pub fn normalize(ds: &InflowDataset, medians: &DMatrix<f64>) -> NormalizedSeries {
    normalize_with_epsilon(ds, medians, zero_epsilon(ds))
}

pub fn normalize_with_epsilon(
    ds: &InflowDataset,
    medians: &DMatrix<f64>,
    epsilon: DMatrix<f64>,
) -> NormalizedSeries {
    let p = ds.n_sites();
    let mut values = DMatrix::from_element(ds.n_rows(), p, f64::NAN);
    let mut zero_replaced = vec![false; ds.n_rows() * p];
    for i in 0..ds.n_rows() {
        let w = ds.week_of_year[i];
        for j in 0..p {
            if let Some(mut v) = ds.get(i, j) {
                if v <= 0.0 {
                    v = epsilon[(w, j)];
                    zero_replaced[i * p + j] = true;
                }
                values[(i, j)] = (v / medians[(w, j)]).ln();
            }
        }
    }
    NormalizedSeries {
        values,
        medians: medians.clone(),
        epsilon,
        zero_replaced,
    }
}
