//! Seeded k-means++ initialisation followed by Lloyd iterations.

use std::collections::HashSet;

use ndarray::{Array2, ArrayView1};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::{argmin, sq_dist};
use crate::{Error, Result};

pub const MAX_ITERATIONS: usize = 100;
pub const RELATIVE_SHIFT_STOP: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

/// Number of distinct rows, compared bit-for-bit.
pub fn distinct_rows(points: &[&[f64]]) -> usize {
    points
        .iter()
        .map(|p| p.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len()
}

pub fn nearest(point: ArrayView1<f64>, centroids: &Array2<f64>) -> usize {
    argmin(centroids.rows().into_iter().map(|c| sq_dist(point, c))).expect("at least one centroid")
}

pub fn fit(points: &[&[f64]], k: usize, seed: u64) -> Result<KMeansFit> {
    if k == 0 {
        return Err(Error::InvalidArgument("k-means needs k >= 1".into()));
    }
    let distinct = distinct_rows(points);
    if k > distinct {
        return Err(Error::DegenerateClustering(format!(
            "{k} clusters requested but only {distinct} distinct points"
        )));
    }
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus(points, k, dim, &mut rng)?;

    let mut assignments = vec![0usize; points.len()];
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        assign(points, &centroids, &mut assignments);

        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        let mut shift = 0.0;
        let mut scale = 0.0;
        for j in 0..k {
            // empty clusters keep their previous centroid
            if counts[j] == 0 {
                continue;
            }
            for (c, s) in centroids.row_mut(j).iter_mut().zip(sums.row(j).iter()) {
                let updated = s / counts[j] as f64;
                shift += (updated - *c) * (updated - *c);
                scale += *c * *c;
                *c = updated;
            }
        }
        if shift == 0.0 || shift.sqrt() <= RELATIVE_SHIFT_STOP * scale.sqrt().max(1e-12) {
            break;
        }
    }
    assign(points, &centroids, &mut assignments);
    Ok(KMeansFit { centroids, assignments, iterations })
}

fn assign(points: &[&[f64]], centroids: &Array2<f64>, out: &mut [usize]) {
    for (p, a) in points.iter().zip(out.iter_mut()) {
        *a = nearest(ArrayView1::from(*p), centroids);
    }
}

fn plus_plus<R: Rng>(points: &[&[f64]], k: usize, dim: usize, rng: &mut R) -> Result<Array2<f64>> {
    let mut centroids = Array2::<f64>::zeros((k, dim));
    let first = rng.random_range(0..points.len());
    centroids.row_mut(0).assign(&ArrayView1::from(points[first]));
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(ArrayView1::from(*p), centroids.row(0)))
        .collect();
    for j in 1..k {
        let pick = WeightedIndex::new(&d2)
            .map_err(|e| Error::DegenerateClustering(format!("k-means++ seeding: {e}")))?
            .sample(rng);
        centroids.row_mut(j).assign(&ArrayView1::from(points[pick]));
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(ArrayView1::from(*p), centroids.row(j)));
        }
    }
    Ok(centroids)
}
