use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HydroError;

const LLOYD_CAP: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: DMatrix<f64>,
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

/// How new rows get a label once clusters are fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Clustering {
    Kmeans {
        #[serde(with = "crate::linalg::rows")]
        centroids: DMatrix<f64>,
    },
    Pca {
        #[serde(with = "crate::linalg::vector")]
        weights: DVector<f64>,
        /// Upper edges of buckets `0..E-1`; the last bucket is open.
        thresholds: Vec<f64>,
    },
}

impl Clustering {
    pub fn n_states(&self) -> usize {
        match self {
            Clustering::Kmeans { centroids } => centroids.nrows(),
            Clustering::Pca { thresholds, .. } => thresholds.len() + 1,
        }
    }

    pub fn label(&self, point: &[f64]) -> usize {
        match self {
            Clustering::Kmeans { centroids } => nearest(centroids, point).0,
            Clustering::Pca { weights, thresholds } => {
                let v: f64 = point.iter().zip(weights.iter()).map(|(a, b)| a * b).sum();
                thresholds.iter().take_while(|&&t| v > t).count()
            }
        }
    }
}

fn sq_dist(a: &[f64], b: impl Iterator<Item = f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &DMatrix<f64>, point: &[f64]) -> (usize, f64) {
    (0..centroids.nrows())
        .map(|c| (c, sq_dist(point, centroids.row(c).iter().copied())))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn count_distinct(points: &DMatrix<f64>) -> usize {
    let mut rows: Vec<Vec<u64>> = (0..points.nrows())
        .map(|i| points.row(i).iter().map(|v| v.to_bits()).collect())
        .collect();
    rows.sort();
    rows.dedup();
    rows.len()
}

/// Lloyd's algorithm from a seeded k-means++ start. A cluster left empty
/// is reseeded with the point farthest from its centroid.
pub fn kmeans_cluster(points: &DMatrix<f64>, e: usize, seed: u64) -> Result<KMeansResult, HydroError> {
    let (n, p) = points.shape();
    if e == 0 {
        return Err(HydroError::Cluster("number of clusters must be positive".into()));
    }
    let distinct = count_distinct(points);
    if distinct < e {
        return Err(HydroError::Cluster(format!(
            "{distinct} distinct points cannot form {e} clusters"
        )));
    }
    let row = |i: usize| -> Vec<f64> { points.row(i).iter().copied().collect() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = DMatrix::zeros(e, p);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from(&points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(&row(i), points.row(first).iter().copied())).collect();
    for c in 1..e {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            if d2[chosen] == 0.0 {
                chosen = (0..n).rev().find(|&i| d2[i] > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from(&points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(&row(i), points.row(pick).iter().copied()));
        }
    }

    let mut labels = vec![usize::MAX; n];
    let mut objective = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut changed = false;
        let mut dist = vec![0.0; n];
        for i in 0..n {
            let (c, d) = nearest(&centroids, &row(i));
            dist[i] = d;
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        // reseed empty clusters before recomputing means
        let mut counts = vec![0usize; e];
        for &l in &labels {
            counts[l] += 1;
        }
        for c in 0..e {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[labels[i]] > 1)
                    .fold((usize::MAX, -1.0), |b, i| if dist[i] > b.1 { (i, dist[i]) } else { b })
                    .0;
                counts[labels[far]] -= 1;
                labels[far] = c;
                counts[c] = 1;
                dist[far] = 0.0;
                centroids.row_mut(c).copy_from(&points.row(far));
                changed = true;
            }
        }
        objective.push(dist.iter().sum());
        let mut sums = DMatrix::zeros(e, p);
        for i in 0..n {
            let mut r = sums.row_mut(labels[i]);
            r += points.row(i);
        }
        for c in 0..e {
            let mean = sums.row(c) / counts[c] as f64;
            centroids.row_mut(c).copy_from(&mean);
        }
        if !changed || iterations >= LLOYD_CAP {
            break;
        }
    }
    let final_obj: f64 = (0..n)
        .map(|i| sq_dist(&row(i), centroids.row(labels[i]).iter().copied()))
        .sum();
    objective.push(final_obj);
    Ok(KMeansResult {
        labels,
        centroids,
        objective,
        iterations,
    })
}

/// Leading eigenvector of the sample covariance, signed to have a positive
/// sum and rescaled so its components sum to one.
pub fn pca_direction(points: &DMatrix<f64>) -> Result<DVector<f64>, HydroError> {
    let (n, p) = points.shape();
    if n < 2 {
        return Err(HydroError::Cluster("principal direction needs at least two points".into()));
    }
    let mean = points.row_mean();
    let mut centered = points.clone();
    for mut r in centered.row_iter_mut() {
        r -= &mean;
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    if cov.amax() == 0.0 {
        return Err(HydroError::Cluster("inflow covariance is zero".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let lead = eig.eigenvalues.imax();
    let mut v: DVector<f64> = eig.eigenvectors.column(lead).into_owned();
    let sum = v.sum();
    if sum.abs() <= 1e-12 * v.amax() {
        return Err(HydroError::Cluster(
            "principal direction is orthogonal to the all-ones vector".into(),
        ));
    }
    if sum < 0.0 {
        v.neg_mut();
    }
    let total = v.sum();
    v /= total;
    debug_assert_eq!(v.len(), p);
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    pub weights: DVector<f64>,
    pub labels: Vec<usize>,
    pub thresholds: Vec<f64>,
}

/// Splits the projections on the principal direction into `E` buckets of
/// equal count (remainders go to the wetter buckets), label 0 driest.
pub fn pca_cluster(points: &DMatrix<f64>, e: usize) -> Result<PcaResult, HydroError> {
    let weights = pca_direction(points)?;
    let proj: Vec<f64> = (points * &weights).iter().copied().collect();
    let (labels, thresholds) = quantile_buckets(&proj, e)?;
    Ok(PcaResult {
        weights,
        labels,
        thresholds,
    })
}

pub(crate) fn quantile_buckets(proj: &[f64], e: usize) -> Result<(Vec<usize>, Vec<f64>), HydroError> {
    let n = proj.len();
    if e == 0 || n < e {
        return Err(HydroError::Cluster(format!("{n} points cannot fill {e} buckets")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| proj[a].total_cmp(&proj[b]).then(a.cmp(&b)));
    let mut labels = vec![0; n];
    // bucket c holds ranks [start(c), start(c+1))
    let start = |c: usize| c * (n / e) + c.saturating_sub(e - n % e);
    for c in 0..e {
        for &i in &order[start(c)..start(c + 1)] {
            labels[i] = c;
        }
    }
    let thresholds = (1..e)
        .map(|c| 0.5 * (proj[order[start(c) - 1]] + proj[order[start(c)]]))
        .collect();
    Ok((labels, thresholds))
}
