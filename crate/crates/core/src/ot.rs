//! Entropically regularised optimal transport.
//!
//! [`sinkhorn`] solves
//!
//! ```text
//! min_{π ∈ Π(r, c)}  ⟨π, D⟩_F − ε H(π)
//! ```
//!
//! with Sinkhorn-Knopp iterations carried out on dual potentials in the log
//! domain, so that small ε (down to 1e-3 on unit-range costs) never
//! underflows the scaling vectors. Costs are min-max normalised to `[0, 1]`
//! before scaling; the affine map is reported back on the plan.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::linalg::{dot, log_sum_exp, norm, sq_dist};
use crate::{Embeddings, Error, Result};

/// Tolerance on `Σr = 1` and `Σc = 1`.
pub const MARGINAL_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    #[default]
    SquaredEuclidean,
    Euclidean,
    NegativeCosine,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::SquaredEuclidean => "squared-euclidean",
            Metric::Euclidean => "euclidean",
            Metric::NegativeCosine => "negative-cosine",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared-euclidean" | "sqeuclidean" => Ok(Metric::SquaredEuclidean),
            "euclidean" => Ok(Metric::Euclidean),
            "negative-cosine" | "cosine" => Ok(Metric::NegativeCosine),
            other => Err(Error::InvalidArgument(format!("unknown metric `{other}`"))),
        }
    }
}

/// Pairwise cost between two point sets.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    values: Array2<f64>,
    metric: Option<Metric>,
}

impl CostMatrix {
    /// Wraps an explicit cost matrix (e.g. read from a file).
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Shape("cost matrix must be at least 1x1".into()));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("cost matrix has non-finite entries".into()));
        }
        Ok(Self { values, metric: None })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn metric(&self) -> Option<Metric> {
        self.metric
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Cost between every row of `a` and every row of `b`.
pub fn pairwise_cost(a: &Embeddings, b: &Embeddings, metric: Metric) -> Result<CostMatrix> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "pairwise_cost: dimension {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Shape("pairwise_cost: empty point set".into()));
    }
    let mut values = Array2::<f64>::zeros((a.nrows(), b.nrows()));
    match metric {
        Metric::SquaredEuclidean | Metric::Euclidean => {
            for (i, ai) in a.axis_iter(Axis(0)).enumerate() {
                for (j, bj) in b.axis_iter(Axis(0)).enumerate() {
                    let d = sq_dist(ai, bj);
                    values[[i, j]] = if metric == Metric::Euclidean { d.sqrt() } else { d };
                }
            }
        }
        Metric::NegativeCosine => {
            let na = unit_norms(a, "a")?;
            let nb = unit_norms(b, "b")?;
            for (i, ai) in a.axis_iter(Axis(0)).enumerate() {
                for (j, bj) in b.axis_iter(Axis(0)).enumerate() {
                    values[[i, j]] = -dot(ai, bj) / (na[i] * nb[j]);
                }
            }
        }
    }
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("pairwise_cost: non-finite cost".into()));
    }
    Ok(CostMatrix { values, metric: Some(metric) })
}

fn unit_norms(m: &Embeddings, name: &str) -> Result<Vec<f64>> {
    m.axis_iter(Axis(0))
        .enumerate()
        .map(|(i, row)| {
            let n = norm(row);
            if n > 0.0 {
                Ok(n)
            } else {
                Err(Error::Normalization(format!("row {i} of {name} has zero norm")))
            }
        })
        .collect()
}

/// Source (`r`) and target (`c`) probability vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Marginals {
    r: Array1<f64>,
    c: Array1<f64>,
}

impl Marginals {
    pub fn new(r: Array1<f64>, c: Array1<f64>) -> Result<Self> {
        for (name, v) in [("r", &r), ("c", &c)] {
            if v.is_empty() {
                return Err(Error::InvalidArgument(format!("marginal {name} is empty")));
            }
            if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::InvalidArgument(format!(
                    "marginal {name} has negative or non-finite mass"
                )));
            }
            let s = v.sum();
            if (s - 1.0).abs() > MARGINAL_SUM_TOLERANCE {
                return Err(Error::InvalidArgument(format!("marginal {name} sums to {s}, not 1")));
            }
        }
        Ok(Self { r, c })
    }

    pub fn uniform(n: usize, m: usize) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::InvalidArgument("uniform marginals need n, m >= 1".into()));
        }
        Ok(Self {
            r: Array1::from_elem(n, 1.0 / n as f64),
            c: Array1::from_elem(m, 1.0 / m as f64),
        })
    }

    pub fn r(&self) -> &Array1<f64> {
        &self.r
    }

    pub fn c(&self) -> &Array1<f64> {
        &self.c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iterations: usize,
    /// Largest allowed L∞ marginal violation.
    pub tolerance: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self { epsilon: 0.05, max_iterations: 1000, tolerance: 1e-6 }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be >= 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tolerance must be > 0, got {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

/// Solver output: the plan plus convergence diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransportPlan {
    pub values: Array2<f64>,
    pub iterations_used: usize,
    pub max_marginal_violation: f64,
    /// Minimum of the raw cost, subtracted before scaling.
    pub cost_offset: f64,
    /// Range of the raw cost the solver divided by (1 for constant costs).
    pub cost_scale: f64,
}

impl TransportPlan {
    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Log-domain Sinkhorn-Knopp.
///
/// Iterates `a ← log r − LSE_j(b_j − K_ij)` and `b ← log c − LSE_i(a_i − K_ij)`
/// with `K = D̃ / ε`, `D̃` the min-max normalised cost, and
/// `log π_ij = a_i + b_j − K_ij`. Column marginals are exact after every
/// `b` update, so the stopping rule watches the row violation.
pub fn sinkhorn(cost: &CostMatrix, marginals: &Marginals, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    let (plan, run) = solve(cost, marginals, cfg)?;
    match run {
        Run::Converged => Ok(plan),
        Run::Exhausted { best_violation, best_iteration } => Err(Error::Convergence {
            iterations: plan.iterations_used,
            best_violation,
            best_iteration,
            tolerance: cfg.tolerance,
        }),
    }
}

/// How far past `tolerance` [`sinkhorn_relaxed`] still accepts a plan.
pub const RELAXED_FACTOR: f64 = 100.0;

/// Like [`sinkhorn`], but a plan that misses the tolerance within the
/// iteration budget is still returned when its violation is at most
/// `RELAXED_FACTOR · tolerance`. Columns are exact either way. Used where
/// the plan only drives an assignment or an average.
pub fn sinkhorn_relaxed(cost: &CostMatrix, marginals: &Marginals, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    let (plan, run) = solve(cost, marginals, cfg)?;
    match run {
        Run::Exhausted { best_violation, best_iteration }
            if plan.max_marginal_violation > RELAXED_FACTOR * cfg.tolerance =>
        {
            Err(Error::Convergence {
                iterations: plan.iterations_used,
                best_violation,
                best_iteration,
                tolerance: cfg.tolerance,
            })
        }
        _ => Ok(plan),
    }
}

enum Run {
    Converged,
    Exhausted { best_violation: f64, best_iteration: usize },
}

fn solve(cost: &CostMatrix, marginals: &Marginals, cfg: &SinkhornConfig) -> Result<(TransportPlan, Run)> {
    cfg.validate()?;
    let (n, m) = cost.shape();
    if marginals.r.len() != n || marginals.c.len() != m {
        return Err(Error::Shape(format!(
            "cost is {n}x{m} but marginals have lengths {} and {}",
            marginals.r.len(),
            marginals.c.len()
        )));
    }

    let raw = &cost.values;
    let lo = raw.fold(f64::INFINITY, |acc, &v| acc.min(v));
    let hi = raw.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
    let range = hi - lo;
    let scale = if range > 0.0 { range } else { 1.0 };
    let eps = cfg.epsilon;

    // kernel in row-major and column-major layouts
    let k: Array2<f64> = raw.mapv(|v| (v - lo) / scale / eps);
    let kt: Array2<f64> = k.t().as_standard_layout().into_owned();

    let log_r: Vec<f64> = marginals.r.iter().map(|x| x.ln()).collect();
    let log_c: Vec<f64> = marginals.c.iter().map(|x| x.ln()).collect();

    let row_lse = |b: &[f64], out: &mut [f64]| {
        for (i, slot) in out.iter_mut().enumerate() {
            let row = k.row(i);
            let row = row.as_slice().expect("standard layout");
            *slot = log_sum_exp(b.iter().zip(row).map(|(bj, kij)| bj - kij));
        }
    };
    let col_lse = |a: &[f64], out: &mut [f64]| {
        for (j, slot) in out.iter_mut().enumerate() {
            let col = kt.row(j);
            let col = col.as_slice().expect("standard layout");
            *slot = log_sum_exp(a.iter().zip(col).map(|(ai, kij)| ai - kij));
        }
    };

    let mut a = vec![0.0; n];
    let mut b = vec![0.0; m];
    let mut lse_rows = vec![0.0; n];
    let mut lse_cols = vec![0.0; m];

    row_lse(&b, &mut lse_rows);
    update_potential(&mut a, &log_r, &lse_rows);

    let mut best_violation = f64::INFINITY;
    let mut best_iteration = 0;
    let mut iterations = 0;
    let run = loop {
        iterations += 1;
        col_lse(&a, &mut lse_cols);
        update_potential(&mut b, &log_c, &lse_cols);
        row_lse(&b, &mut lse_rows);

        check_potential(&a, &log_r, "row")?;
        check_potential(&b, &log_c, "column")?;

        let violation = a
            .iter()
            .zip(&lse_rows)
            .zip(marginals.r.iter())
            .map(|((ai, li), ri)| {
                let mass = if *ai == f64::NEG_INFINITY { 0.0 } else { (ai + li).exp() };
                (mass - ri).abs()
            })
            .fold(0.0, f64::max);
        if !violation.is_finite() {
            return Err(Error::Instability(format!(
                "marginal violation became {violation} at iteration {iterations}"
            )));
        }
        if violation < best_violation {
            best_violation = violation;
            best_iteration = iterations;
        }
        if violation <= cfg.tolerance {
            break Run::Converged;
        }
        if iterations >= cfg.max_iterations {
            break Run::Exhausted { best_violation, best_iteration };
        }
        update_potential(&mut a, &log_r, &lse_rows);
    };

    let mut values = Array2::<f64>::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let lp = a[i] + b[j] - k[[i, j]];
            values[[i, j]] = if lp == f64::NEG_INFINITY { 0.0 } else { lp.exp() };
        }
    }
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::Instability("transport plan has non-finite entries".into()));
    }
    let max_marginal_violation = marginal_violation(values.view(), marginals);

    let plan = TransportPlan {
        values,
        iterations_used: iterations,
        max_marginal_violation,
        cost_offset: lo,
        cost_scale: scale,
    };
    Ok((plan, run))
}

fn update_potential(pot: &mut [f64], log_mass: &[f64], lse: &[f64]) {
    for ((p, lm), l) in pot.iter_mut().zip(log_mass).zip(lse) {
        *p = if *lm == f64::NEG_INFINITY { f64::NEG_INFINITY } else { lm - l };
    }
}

fn check_potential(pot: &[f64], log_mass: &[f64], side: &str) -> Result<()> {
    for (idx, (p, lm)) in pot.iter().zip(log_mass).enumerate() {
        if *lm > f64::NEG_INFINITY && !p.is_finite() {
            return Err(Error::Instability(format!("{side} scaling {idx} became {p}")));
        }
    }
    Ok(())
}

/// `max(‖π1 − r‖∞, ‖πᵀ1 − c‖∞)`.
pub fn marginal_violation(plan: ArrayView2<f64>, marginals: &Marginals) -> f64 {
    let rows = plan.sum_axis(Axis(1));
    let cols = plan.sum_axis(Axis(0));
    let rv = rows.iter().zip(marginals.r.iter()).map(|(s, r)| (s - r).abs());
    let cv = cols.iter().zip(marginals.c.iter()).map(|(s, c)| (s - c).abs());
    rv.chain(cv).fold(0.0, f64::max)
}

/// Frobenius product `Σᵢⱼ πᵢⱼ Dᵢⱼ` against the raw (unnormalised) cost.
pub fn transport_cost(plan: &TransportPlan, cost: &CostMatrix) -> Result<f64> {
    frobenius(plan.values.view(), cost.values.view())
}

pub fn frobenius(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("plan is {:?} but cost is {:?}", a.dim(), b.dim())));
    }
    Ok(a.iter().zip(b.iter()).map(|(x, y)| x * y).sum())
}

/// Scales every row to sum to one.
pub fn row_normalize(plan: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut out = plan.to_owned();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let s = row.sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::DegeneratePlan(format!("row {i} sums to {s}")));
        }
        row.mapv_inplace(|v| v / s);
    }
    Ok(out)
}
