//! Small dense helpers shared across modules.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::{Embeddings, Error, Result};

#[inline]
pub fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub fn norm(a: ArrayView1<f64>) -> f64 {
    dot(a, a).sqrt()
}

/// Numerically stable `log Σ exp(xᵢ)`. Returns `-inf` when every term is `-inf`.
pub fn log_sum_exp<I: IntoIterator<Item = f64> + Clone>(xs: I) -> f64 {
    let max = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.into_iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Copy of `m` with every row scaled to unit L2 norm.
pub fn l2_normalize_rows(m: &Embeddings) -> Result<Embeddings> {
    let mut out = m.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let n = norm(row.view());
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Normalization(format!("row {i} has norm {n}")));
        }
        row.mapv_inplace(|x| x / n);
    }
    Ok(out)
}

pub fn row_norms(m: &Embeddings) -> Array1<f64> {
    m.axis_iter(Axis(0)).map(norm).collect()
}

/// Mean of the selected rows of `m`.
pub fn mean_of_rows(m: &Embeddings, rows: &[usize]) -> Option<Array1<f64>> {
    if rows.is_empty() {
        return None;
    }
    let mut acc = Array1::<f64>::zeros(m.ncols());
    for &r in rows {
        acc += &m.row(r);
    }
    Some(acc / rows.len() as f64)
}

pub fn check_finite(m: &Array2<f64>, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} contains non-finite values")))
    }
}

/// Index of the smallest value; ties resolve to the lowest index.
pub fn argmin(values: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match best {
            Some((_, b)) if !(v < b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> Option<usize> {
    argmin(values.into_iter().map(|v| -v))
}
