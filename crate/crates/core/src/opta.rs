//! Inference-time alignment of support prototypes with the query set.
//!
//! Each pass solves a uniform-marginal transport problem between the query
//! embeddings and the current prototypes and moves every prototype to the
//! plan-weighted barycenter of the queries it receives. The aligned
//! prototypes then train a small multinomial logistic regression that labels
//! the queries.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::linalg::{argmax, argmin, check_finite, sq_dist};
use crate::ot::{pairwise_cost, row_normalize, sinkhorn_relaxed, Marginals, Metric, SinkhornConfig};
use crate::{Embeddings, Error, Result};

pub const MAX_PASSES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrototypeSet {
    pub values: Embeddings,
    /// Class id of every row, ascending.
    pub class_order: Vec<u32>,
}

impl PrototypeSet {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptaConfig {
    pub passes: usize,
    pub sinkhorn: SinkhornConfig,
    pub metric: Metric,
    /// Divide each transported prototype by its received plan mass so that it
    /// is a true barycenter of the queries. When false the row-normalised plan
    /// is applied as is, which scales prototypes by `NQ / N`.
    pub barycentric: bool,
}

impl Default for OptaConfig {
    fn default() -> Self {
        Self {
            passes: 1,
            sinkhorn: SinkhornConfig::default(),
            metric: Metric::SquaredEuclidean,
            barycentric: true,
        }
    }
}

impl OptaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes > MAX_PASSES {
            return Err(Error::InvalidArgument(format!(
                "{} alignment passes requested, at most {MAX_PASSES} allowed",
                self.passes
            )));
        }
        self.sinkhorn.validate()
    }
}

/// Per-class means of the support set, rows in ascending label order.
pub fn class_prototypes(support: &Embeddings, labels: &[u32]) -> Result<PrototypeSet> {
    if support.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} support rows but {} labels",
            support.nrows(),
            labels.len()
        )));
    }
    if support.nrows() == 0 {
        return Err(Error::InvalidArgument("empty support set".into()));
    }
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    let mut values = Array2::<f64>::zeros((groups.len(), support.ncols()));
    for (row, idx) in groups.values().enumerate() {
        let mut acc = Array1::<f64>::zeros(support.ncols());
        for &i in idx {
            acc += &support.row(i);
        }
        values.row_mut(row).assign(&(acc / idx.len() as f64));
    }
    Ok(PrototypeSet { values, class_order: groups.into_keys().collect() })
}

/// Alignment needs more queries than labelled supports.
pub fn check_query_budget(n_support: usize, n_query: usize) -> Result<()> {
    if n_query <= n_support {
        return Err(Error::SampleBias(format!(
            "{n_query} queries do not exceed {n_support} supports"
        )));
    }
    Ok(())
}

/// Barycentric weights (`N × NQ`, rows summing to one) that express every
/// transported prototype as a convex combination of the queries.
pub fn transport_weights(protos: &PrototypeSet, queries: &Embeddings, cfg: &OptaConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let n = protos.len();
    let nq = queries.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("alignment needs >= 2 classes, got {n}")));
    }
    if nq <= n {
        return Err(Error::SampleBias(format!("{nq} queries for {n} prototypes")));
    }
    if protos.values.ncols() != queries.ncols() {
        return Err(Error::Shape(format!(
            "prototype dim {} but query dim {}",
            protos.values.ncols(),
            queries.ncols()
        )));
    }
    check_finite(queries, "queries")?;
    let first = queries.row(0);
    if queries.axis_iter(Axis(0)).all(|q| q == first) {
        return Err(Error::DegeneratePlan("all queries are identical".into()));
    }

    let cost = pairwise_cost(queries, &protos.values, cfg.metric)?;
    let plan = sinkhorn_relaxed(&cost, &Marginals::uniform(nq, n)?, &cfg.sinkhorn)?;
    let normalized = row_normalize(plan.values.view())?;
    let mut weights = normalized.t().to_owned();
    for (j, mut row) in weights.axis_iter_mut(Axis(0)).enumerate() {
        let mass = row.sum();
        if !(mass > 0.0) {
            return Err(Error::DegeneratePlan(format!("prototype {j} receives no mass")));
        }
        row.mapv_inplace(|w| w / mass);
    }
    Ok(weights)
}

/// One alignment pass.
pub fn opta_pass(protos: &PrototypeSet, queries: &Embeddings, cfg: &OptaConfig) -> Result<PrototypeSet> {
    let weights = transport_weights(protos, queries, cfg)?;
    let values = if cfg.barycentric {
        weights.dot(queries)
    } else {
        // plain π̂ᵀ Z with π̂ row-normalised over classes
        let nq = queries.nrows() as f64;
        let n = protos.len() as f64;
        weights.dot(queries) * (nq / n)
    };
    Ok(PrototypeSet { values, class_order: protos.class_order.clone() })
}

/// `passes` consecutive alignment passes; zero passes returns the input.
pub fn opta_iterate(protos: &PrototypeSet, queries: &Embeddings, cfg: &OptaConfig) -> Result<PrototypeSet> {
    cfg.validate()?;
    let mut current = protos.clone();
    for _ in 0..cfg.passes {
        current = opta_pass(&current, queries, cfg)?;
    }
    Ok(current)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub reg: f64,
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self { reg: 1e-3, iterations: 500, learning_rate: 0.1 }
    }
}

/// Multinomial logistic regression with one weight row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticRegression {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub classes: Vec<u32>,
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

/// Full-batch gradient descent from zero on the prototype rows (one sample per class).
pub fn fit_logistic(protos: &PrototypeSet, cfg: &LogisticConfig) -> Result<LogisticRegression> {
    let n = protos.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("logistic regression needs >= 2 classes, got {n}")));
    }
    check_finite(&protos.values, "prototypes")?;
    if !(cfg.reg.is_finite() && cfg.learning_rate.is_finite()) {
        return Err(Error::InvalidArgument("non-finite logistic hyperparameters".into()));
    }
    let x = &protos.values;
    let d = x.ncols();
    let mut w = Array2::<f64>::zeros((n, d));
    let mut b = Array1::<f64>::zeros(n);
    for _ in 0..cfg.iterations {
        let mut p = x.dot(&w.t()) + &b;
        softmax_rows(&mut p);
        // sample i belongs to class i
        for i in 0..n {
            p[[i, i]] -= 1.0;
        }
        p /= n as f64;
        let grad_w = p.t().dot(x) + &(&w * cfg.reg);
        let grad_b = p.sum_axis(Axis(0));
        w.scaled_add(-cfg.learning_rate, &grad_w);
        b.scaled_add(-cfg.learning_rate, &grad_b);
    }
    if !w.iter().chain(b.iter()).all(|v| v.is_finite()) {
        return Err(Error::Instability("logistic regression diverged".into()));
    }
    Ok(LogisticRegression { weights: w, bias: b, classes: protos.class_order.clone() })
}

impl LogisticRegression {
    pub fn logits(&self, queries: &Embeddings) -> Result<Array2<f64>> {
        if queries.ncols() != self.weights.ncols() {
            return Err(Error::Shape(format!(
                "query dim {} but classifier dim {}",
                queries.ncols(),
                self.weights.ncols()
            )));
        }
        Ok(queries.dot(&self.weights.t()) + &self.bias)
    }

    /// Highest-logit class per query; ties go to the lowest class index.
    pub fn predict(&self, queries: &Embeddings) -> Result<Vec<u32>> {
        let logits = self.logits(queries)?;
        Ok(logits
            .axis_iter(Axis(0))
            .map(|r| self.classes[argmax(r.iter().copied()).expect("at least two classes")])
            .collect())
    }
}

/// Label of the nearest prototype (squared euclidean), ties to the lowest index.
pub fn predict_nearest(protos: &PrototypeSet, queries: &Embeddings) -> Result<Vec<u32>> {
    if queries.ncols() != protos.values.ncols() {
        return Err(Error::Shape(format!(
            "query dim {} but prototype dim {}",
            queries.ncols(),
            protos.values.ncols()
        )));
    }
    Ok(queries
        .axis_iter(Axis(0))
        .map(|q| {
            let j = argmin(protos.values.axis_iter(Axis(0)).map(|p| sq_dist(q, p))).expect("prototypes");
            protos.class_order[j]
        })
        .collect())
}
