//! Cluster-quality and positive-mining diagnostics.

use ndarray::{Array1, ArrayView1};

use crate::linalg::sq_dist;
use crate::{Error, Result};

/// Davies-Bouldin index of `points` grouped by `labels ∈ [0, clusters)`.
///
/// `Sᵢ` is the mean euclidean distance of cluster `i`'s members to their
/// centroid and `dᵢⱼ` the euclidean distance between centroids; the index is
/// `mean_i max_{j≠i} (Sᵢ + Sⱼ) / dᵢⱼ`. Lower is better.
pub fn davies_bouldin(points: &[&[f64]], labels: &[usize], clusters: usize) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} points but {} labels",
            points.len(),
            labels.len()
        )));
    }
    if clusters < 2 {
        return Err(Error::MetricUndefined(format!("DBI needs >= 2 clusters, got {clusters}")));
    }
    let dim = points.first().map(|p| p.len()).unwrap_or(0);
    let mut centroids = vec![Array1::<f64>::zeros(dim); clusters];
    let mut counts = vec![0usize; clusters];
    for (p, &l) in points.iter().zip(labels) {
        if l >= clusters {
            return Err(Error::InvalidArgument(format!("label {l} outside [0, {clusters})")));
        }
        centroids[l] += &ArrayView1::from(*p);
        counts[l] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::MetricUndefined(format!("cluster {empty} is empty")));
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        *c /= n as f64;
    }

    let mut spread = vec![0.0; clusters];
    for (p, &l) in points.iter().zip(labels) {
        spread[l] += sq_dist(ArrayView1::from(*p), centroids[l].view()).sqrt();
    }
    for (s, &n) in spread.iter_mut().zip(&counts) {
        *s /= n as f64;
    }

    let mut total = 0.0;
    for i in 0..clusters {
        let mut worst = f64::NEG_INFINITY;
        for j in (0..clusters).filter(|&j| j != i) {
            let d = sq_dist(centroids[i].view(), centroids[j].view()).sqrt();
            if d == 0.0 {
                return Err(Error::MetricUndefined(format!("clusters {i} and {j} share a centroid")));
            }
            worst = worst.max((spread[i] + spread[j]) / d);
        }
        total += worst;
    }
    Ok(total / clusters as f64)
}
