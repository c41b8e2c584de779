use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cluster::{kmeans_cluster, pca_cluster, Clustering};
use super::data::{normalize, weekly_medians, InflowDataset, NormalizedSeries};
use super::HydroError;

/// `p̂_ij = n_ij / Σ_j n_ij`, counting pairs of consecutive valid labels.
/// A `None` breaks the chain: no pair straddles it.
pub fn estimate_transition_matrix(
    labels: &[Option<usize>],
    e: usize,
) -> Result<DMatrix<f64>, HydroError> {
    let counts = transition_counts(labels, e)?;
    for i in 0..e {
        if counts.row(i).sum() == 0.0 {
            return Err(HydroError::NoDepartures { state: i });
        }
    }
    Ok(normalize_rows(counts))
}

/// Same estimator with `alpha` added to every count, so states that never
/// depart get a uniform row instead of an error.
pub fn estimate_transition_matrix_with_prior(
    labels: &[Option<usize>],
    e: usize,
    alpha: f64,
) -> Result<DMatrix<f64>, HydroError> {
    let counts = transition_counts(labels, e)?.add_scalar(alpha.max(0.0));
    if let Some(i) = (0..e).find(|&i| counts.row(i).sum() == 0.0) {
        return Err(HydroError::NoDepartures { state: i });
    }
    Ok(normalize_rows(counts))
}

fn transition_counts(labels: &[Option<usize>], e: usize) -> Result<DMatrix<f64>, HydroError> {
    let mut counts = DMatrix::zeros(e, e);
    if let Some(bad) = labels.iter().flatten().find(|&&l| l >= e) {
        return Err(HydroError::Cluster(format!("label {bad} outside 0..{e}")));
    }
    for pair in labels.windows(2) {
        if let (Some(i), Some(j)) = (pair[0], pair[1]) {
            counts[(i, j)] += 1.0;
        }
    }
    Ok(counts)
}

fn normalize_rows(mut m: DMatrix<f64>) -> DMatrix<f64> {
    for mut row in m.row_iter_mut() {
        let s = row.sum();
        row /= s;
        // push the roundoff into the largest entry so the row sums exactly
        let err = 1.0 - row.sum();
        let k = row.iter().enumerate().fold(0, |b, (k, v)| if *v > row[b] { k } else { b });
        row[k] += err;
    }
    m
}

/// Checks that `m` is square, nonnegative and row-stochastic to `tol`.
pub fn check_stochastic(m: &DMatrix<f64>, tol: f64) -> Result<(), HydroError> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(HydroError::Transition("transition matrix must be square and nonempty".into()));
    }
    for (i, row) in m.row_iter().enumerate() {
        if row.iter().any(|&v| !(v >= 0.0)) {
            return Err(HydroError::Transition(format!("row {i} has a negative entry")));
        }
        if (row.sum() - 1.0).abs() > tol {
            return Err(HydroError::Transition(format!("row {i} sums to {}", row.sum())));
        }
    }
    Ok(())
}

/// Draws the successor of `state`. Uses exactly one uniform from `rng`.
pub fn next_state<R: Rng + ?Sized>(transition: &DMatrix<f64>, state: usize, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let row = transition.row(state);
    let mut acc = 0.0;
    let last = (0..row.len()).rev().find(|&j| row[j] > 0.0).unwrap_or(row.len() - 1);
    for j in 0..last {
        acc += row[j];
        if u < acc {
            return j;
        }
    }
    last
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMethod {
    Kmeans,
    Pca,
    /// Transition matrix and labels supplied from outside.
    External,
}

impl std::str::FromStr for ClusterMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "kmeans" | "k-means" => Ok(Self::Kmeans),
            "pca" => Ok(Self::Pca),
            "external" => Ok(Self::External),
            other => Err(format!("unknown clustering method {other:?}")),
        }
    }
}

/// One historical week: raw inflows per site and its hydrologic label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InflowRecord {
    pub year: i32,
    pub week: usize,
    pub label: Option<usize>,
    /// Raw site inflows, `None` where NA.
    pub inflow: Vec<Option<f64>>,
}

/// Homogeneous hydrologic Markov chain fitted to an inflow record, with
/// everything needed to resample inflows conditioned on (week, state).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HydroMarkovModel {
    pub format: String,
    pub method: ClusterMethod,
    pub n_states: usize,
    #[serde(with = "crate::linalg::rows")]
    pub transition: DMatrix<f64>,
    /// `None` for NA-labelled rows and for the external method.
    pub clustering: Option<Clustering>,
    #[serde(with = "crate::linalg::rows")]
    pub medians: DMatrix<f64>,
    #[serde(with = "crate::linalg::rows")]
    pub epsilon: DMatrix<f64>,
    /// Chronological, one per dataset row.
    pub records: Vec<InflowRecord>,
}

pub const MODEL_FORMAT: &str = "qadp-hydro-model/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationDiagnostics {
    pub rows: usize,
    pub fit_rows: usize,
    pub residual_rows_labelled: usize,
    pub na_rows: usize,
    pub cluster_sizes: Vec<usize>,
    pub kmeans_objective: Option<Vec<f64>>,
}

impl HydroMarkovModel {
    pub fn labels(&self) -> Vec<Option<usize>> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Label sequence with a `None` inserted wherever consecutive records
    /// are not consecutive weeks, so no transition is counted across gaps.
    pub fn chain_labels(&self) -> Vec<Option<usize>> {
        let mut out = Vec::with_capacity(self.records.len());
        for (i, r) in self.records.iter().enumerate() {
            if i > 0 {
                let prev = &self.records[i - 1];
                let next_week = (prev.year == r.year && r.week == prev.week + 1)
                    || (r.year == prev.year + 1 && prev.week == 51 && r.week == 0);
                if !next_week {
                    out.push(None);
                }
            }
            out.push(r.label);
        }
        out
    }

    /// Replaces the transition matrix, for instance with one estimated by a
    /// different model of the same states.
    pub fn with_transition(mut self, transition: DMatrix<f64>) -> Result<Self, HydroError> {
        check_stochastic(&transition, 1e-9)?;
        if transition.nrows() != self.n_states {
            return Err(HydroError::Transition(format!(
                "expected {} states, got {}",
                self.n_states,
                transition.nrows()
            )));
        }
        self.transition = transition;
        Ok(self)
    }

    /// Builds a model from an externally supplied transition matrix and
    /// per-row labels over `ds`.
    pub fn from_external(
        ds: &InflowDataset,
        transition: DMatrix<f64>,
        labels: Vec<Option<usize>>,
    ) -> Result<Self, HydroError> {
        check_stochastic(&transition, 1e-9)?;
        if labels.len() != ds.n_rows() {
            return Err(HydroError::Data(format!(
                "{} labels for {} rows",
                labels.len(),
                ds.n_rows()
            )));
        }
        let e = transition.nrows();
        if let Some(bad) = labels.iter().flatten().find(|&&l| l >= e) {
            return Err(HydroError::Cluster(format!("label {bad} outside 0..{e}")));
        }
        let medians = weekly_medians(ds)?;
        let norm = normalize(ds, &medians);
        Ok(Self {
            format: MODEL_FORMAT.into(),
            method: ClusterMethod::External,
            n_states: e,
            transition,
            clustering: None,
            medians,
            epsilon: norm.epsilon,
            records: records(ds, &labels),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, HydroError> {
        let m: Self = serde_json::from_str(s).map_err(|e| HydroError::Data(e.to_string()))?;
        if m.format != MODEL_FORMAT {
            return Err(HydroError::Data(format!("unsupported model format {:?}", m.format)));
        }
        check_stochastic(&m.transition, 1e-9)?;
        Ok(m)
    }
}

fn records(ds: &InflowDataset, labels: &[Option<usize>]) -> Vec<InflowRecord> {
    (0..ds.n_rows())
        .map(|i| InflowRecord {
            year: ds.year[i],
            week: ds.week_of_year[i],
            label: labels[i],
            inflow: (0..ds.n_sites()).map(|j| ds.get(i, j)).collect(),
        })
        .collect()
}

/// Labels the rows left out of the fit (those with replaced zeros) with the
/// fitted clusters; rows with NA stay unlabelled.
pub fn label_residual_rows(norm: &NormalizedSeries, clustering: &Clustering, labels: &mut [Option<usize>]) -> usize {
    let p = norm.n_sites();
    let mut count = 0;
    for (i, label) in labels.iter_mut().enumerate() {
        if label.is_some() {
            continue;
        }
        if (0..p).all(|j| norm.is_valid(i, j)) {
            let row: Vec<f64> = norm.values.row(i).iter().copied().collect();
            *label = Some(clustering.label(&row));
            count += 1;
        }
    }
    count
}

/// Full pipeline on a cleaned dataset: medians, log normalization,
/// clustering of complete rows, residual labelling and transition counts.
pub fn estimate_model(
    ds: &InflowDataset,
    method: ClusterMethod,
    e: usize,
    seed: u64,
) -> Result<(HydroMarkovModel, EstimationDiagnostics), HydroError> {
    let medians = weekly_medians(ds)?;
    let norm = normalize(ds, &medians);
    let fit_rows = norm.fit_rows();
    let p = ds.n_sites();
    let points = DMatrix::from_fn(fit_rows.len(), p, |i, j| norm.values[(fit_rows[i], j)]);

    let mut labels: Vec<Option<usize>> = vec![None; ds.n_rows()];
    let (clustering, fit_labels, kmeans_objective) = match method {
        ClusterMethod::Kmeans => {
            let res = kmeans_cluster(&points, e, seed)?;
            (
                Clustering::Kmeans {
                    centroids: res.centroids,
                },
                res.labels,
                Some(res.objective),
            )
        }
        ClusterMethod::Pca => {
            let res = pca_cluster(&points, e)?;
            (
                Clustering::Pca {
                    weights: res.weights,
                    thresholds: res.thresholds,
                },
                res.labels,
                None,
            )
        }
        ClusterMethod::External => {
            return Err(HydroError::Cluster(
                "external models are imported, not estimated".into(),
            ))
        }
    };
    for (&row, &l) in fit_rows.iter().zip(&fit_labels) {
        labels[row] = Some(l);
    }
    let residual = label_residual_rows(&norm, &clustering, &mut labels);

    let mut model = HydroMarkovModel {
        format: MODEL_FORMAT.into(),
        method,
        n_states: e,
        transition: DMatrix::identity(e, e),
        clustering: Some(clustering),
        medians,
        epsilon: norm.epsilon.clone(),
        records: records(ds, &labels),
    };
    model.transition = estimate_transition_matrix(&model.chain_labels(), e)?;
    let diagnostics = EstimationDiagnostics {
        rows: ds.n_rows(),
        fit_rows: fit_rows.len(),
        residual_rows_labelled: residual,
        na_rows: labels.iter().filter(|l| l.is_none()).count(),
        cluster_sizes: (0..e)
            .map(|c| labels.iter().filter(|&&l| l == Some(c)).count())
            .collect(),
        kmeans_objective,
    };
    Ok((model, diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hydrology::data::{clean_negatives, WEEKS_PER_YEAR};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_counted_transitions() {
        let m = estimate_transition_matrix(&[Some(0), Some(0), Some(1), Some(0)], 2).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 1.0, 0.0]));
    }

    #[test]
    fn constant_chain_is_identity_row() {
        let m = estimate_transition_matrix(&[Some(0); 6], 1).unwrap();
        assert_eq!(m, DMatrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn missing_departures_name_the_state() {
        let err = estimate_transition_matrix(&[Some(0), Some(0), Some(2)], 3).unwrap_err();
        assert!(matches!(err, HydroError::NoDepartures { state: 1 }));
        let m = estimate_transition_matrix_with_prior(&[Some(0), Some(0), Some(2)], 3, 1.0).unwrap();
        assert!((m.row(1).sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gaps_break_transitions() {
        let m = estimate_transition_matrix(&[Some(0), Some(1), None, Some(0), Some(1), Some(1), Some(0)], 2)
            .unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.5, 0.5]));
    }

    fn simulate(p: &DMatrix<f64>, steps: usize, seed: u64) -> Vec<Option<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = 0;
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            out.push(Some(s));
            s = next_state(p, s, &mut rng);
        }
        out
    }

    #[test]
    fn next_state_follows_the_row() {
        let p = DMatrix::from_row_slice(2, 2, &[0.25, 0.75, 1.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hits = (0..40_000).filter(|_| next_state(&p, 0, &mut rng) == 1).count();
        assert!((hits as f64 / 40_000.0 - 0.75).abs() < 0.01);
        assert!((0..100).all(|_| next_state(&p, 1, &mut rng) == 0));
    }

    fn synthetic_dataset(years: i32, scale: f64, seed: u64) -> InflowDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for y in 0..years {
            let mut wet: f64 = 1.0;
            for w in 0..WEEKS_PER_YEAR {
                wet = 0.8 * wet + 0.4 * rng.random::<f64>();
                let season = 2.0 + (w as f64 / 8.0).sin();
                let vals = (0..3)
                    .map(|j| Some(scale * season * wet * (1.0 + j as f64) * (0.5 + rng.random::<f64>())))
                    .collect();
                rows.push((1900 + y, w, vals));
            }
        }
        InflowDataset::from_rows(rows).unwrap()
    }

    #[test]
    fn pca_pipeline_gives_even_clusters_and_a_stochastic_matrix() {
        let ds = synthetic_dataset(20, 1.0, 4);
        let (model, diag) = estimate_model(&ds, ClusterMethod::Pca, 5, 0).unwrap();
        let (lo, hi) = (
            *diag.cluster_sizes.iter().min().unwrap(),
            *diag.cluster_sizes.iter().max().unwrap(),
        );
        assert!(hi - lo <= 1);
        check_stochastic(&model.transition, 1e-12).unwrap();
        let back = HydroMarkovModel::from_json(&model.to_json()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn kmeans_single_state_has_unit_matrix() {
        let ds = synthetic_dataset(3, 1.0, 1);
        let (model, _) = estimate_model(&ds, ClusterMethod::Kmeans, 1, 0).unwrap();
        assert_eq!(model.transition, DMatrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn pca_labels_ignore_a_common_unit_change() {
        let a = estimate_model(&synthetic_dataset(10, 1.0, 8), ClusterMethod::Pca, 5, 0).unwrap().0;
        let b = estimate_model(&synthetic_dataset(10, 3.7, 8), ClusterMethod::Pca, 5, 0).unwrap().0;
        assert_eq!(a.labels(), b.labels());
    }

    #[test]
    fn residual_rows_are_labelled_and_na_rows_are_not() {
        let mut ds = synthetic_dataset(6, 1.0, 2);
        let p = ds.n_sites();
        // an all-zero week, a week with one missing site, a negative entry
        for j in 0..p {
            ds.series[(10, j)] = 0.0;
        }
        ds.series[(20, 1)] = f64::NAN;
        ds.validity[20 * p + 1] = false;
        ds.series[(30, 2)] = -1.0;
        let (ds, cleaned) = clean_negatives(&ds);
        assert_eq!(cleaned, 1);
        let (model, diag) = estimate_model(&ds, ClusterMethod::Pca, 5, 0).unwrap();
        let labels = model.labels();
        assert_eq!(labels[10], Some(0));
        assert_eq!(labels[20], None);
        assert_eq!(labels[30], None);
        assert_eq!(diag.residual_rows_labelled, 1);
        assert_eq!(diag.na_rows, 2);
        // a fitted row relabelled through the stored clustering keeps its label
        let medians = weekly_medians(&ds).unwrap();
        let norm = normalize(&ds, &medians);
        let row: Vec<f64> = norm.values.row(5).iter().copied().collect();
        assert_eq!(Some(model.clustering.as_ref().unwrap().label(&row)), labels[5]);
    }

    #[test]
    fn external_matrix_can_be_plugged_in() {
        let ds = synthetic_dataset(2, 1.0, 3);
        let labels: Vec<Option<usize>> = (0..ds.n_rows()).map(|i| Some(i % 2)).collect();
        let t = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8]);
        let m = HydroMarkovModel::from_external(&ds, t.clone(), labels).unwrap();
        assert_eq!(m.transition, t);
        assert!(m.clone().with_transition(DMatrix::from_element(2, 2, 0.7)).is_err());
        assert!(m.with_transition(DMatrix::from_element(2, 2, 0.5)).is_ok());
    }

    #[test]
    fn long_chain_recovers_known_matrix() {
        let p = DMatrix::from_row_slice(
            3,
            3,
            &[0.7, 0.2, 0.1, 0.3, 0.4, 0.3, 0.05, 0.15, 0.8],
        );
        let est = estimate_transition_matrix(&simulate(&p, 10_000, 17), 3).unwrap();
        assert!((est - p).amax() <= 0.05);
    }

    proptest! {
        #[test]
        fn rows_are_stochastic(labels in prop::collection::vec(prop::option::weighted(0.9, 0usize..4), 2..300)) {
            if let Ok(m) = estimate_transition_matrix(&labels, 4) {
                for row in m.row_iter() {
                    prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                }
            }
        }
    }
}
