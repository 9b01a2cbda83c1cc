//! Symmetric contrastive loss over enhanced student/teacher batches.
//!
//! With `d[a, b] = −cos(a, b)`, pair map `p` and `L` rows:
//!
//! ```text
//! loss = 1/(2L) Σᵢ ( d[sᵢ, t_p(i)] + d[s_p(i), tᵢ] )
//!        − λ log( 1/L Σᵢ Σ_{j ∉ {i, p(i)}} exp(d[sᵢ, sⱼ] / τ) )
//! ```
//!
//! When `p` is an involution the positive term reduces to the usual sum over
//! `L/2` pairs. Neighbour rows map onto an original, so they enter both
//! directions of the positive term. Teacher rows are constants.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::linalg::{dot, l2_normalize_rows, row_norms};
use crate::{Embeddings, Error, Result};

/// Which rows take part in the positive term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositiveScope {
    #[default]
    AllRows,
    /// Only the `2B` original rows; neighbours act purely as negatives.
    OriginalsOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the negative (uniformity) term.
    pub lambda: f64,
    /// Temperature.
    pub tau: f64,
    pub positive_scope: PositiveScope,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.1, tau: 2.0, positive_scope: PositiveScope::AllRows }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Positive counterpart of every row of an enhanced batch.
///
/// Layout: view-a originals `0..B`, view-b originals `B..2B`, then `k`
/// neighbour rows per original in source order. Originals pair across
/// views; a neighbour pairs with the other-view original of its source.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositivePairMap {
    pair: Vec<usize>,
    originals: usize,
}

impl PositivePairMap {
    pub fn pair(&self, i: usize) -> usize {
        self.pair[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.pair
    }

    pub fn len(&self) -> usize {
        self.pair.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair.is_empty()
    }

    /// Number of original (non-neighbour) rows, `2B`.
    pub fn originals(&self) -> usize {
        self.originals
    }
}

pub fn build_pair_map(batch_size: usize, neighbors: usize) -> Result<PositivePairMap> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let n0 = 2 * batch_size;
    let counterpart = |i: usize| (i + batch_size) % n0;
    let mut pair: Vec<usize> = (0..n0).map(counterpart).collect();
    for source in 0..n0 {
        pair.extend(std::iter::repeat_n(counterpart(source), neighbors));
    }
    Ok(PositivePairMap { pair, originals: n0 })
}

struct Prepared {
    u: Embeddings,
    t: Embeddings,
    norms: Vec<f64>,
}

fn prepare(z_s: &Embeddings, z_t: &Embeddings, pairs: &PositivePairMap, cfg: &LossConfig) -> Result<Prepared> {
    cfg.validate()?;
    if z_s.dim() != z_t.dim() {
        return Err(Error::Shape(format!("student {:?} vs teacher {:?}", z_s.dim(), z_t.dim())));
    }
    if z_s.nrows() != pairs.len() {
        return Err(Error::Shape(format!("{} rows but pair map of {}", z_s.nrows(), pairs.len())));
    }
    if cfg.lambda > 0.0 && z_s.nrows() < 4 {
        return Err(Error::InvalidArgument(format!(
            "negative term is empty for L = {} < 4",
            z_s.nrows()
        )));
    }
    Ok(Prepared {
        u: l2_normalize_rows(z_s)?,
        t: l2_normalize_rows(z_t)?,
        norms: row_norms(z_s).to_vec(),
    })
}

fn positive_rows(pairs: &PositivePairMap, cfg: &LossConfig) -> usize {
    match cfg.positive_scope {
        PositiveScope::AllRows => pairs.len(),
        PositiveScope::OriginalsOnly => pairs.originals(),
    }
}

/// Negative-term kernel `Wᵢⱼ = exp(−cos(sᵢ, sⱼ)/τ)` on admissible pairs, and its mean `S`.
fn negatives(u: &Embeddings, pairs: &PositivePairMap, tau: f64) -> (Array2<f64>, f64) {
    let l = u.nrows();
    let gram = u.dot(&u.t());
    let mut w = Array2::<f64>::zeros((l, l));
    let mut total = 0.0;
    for i in 0..l {
        let p = pairs.pair(i);
        for j in 0..l {
            if j != i && j != p {
                let e = (-gram[[i, j]] / tau).exp();
                w[[i, j]] = e;
                total += e;
            }
        }
    }
    (w, total / l as f64)
}

pub fn loss_value(z_s: &Embeddings, z_t: &Embeddings, pairs: &PositivePairMap, cfg: &LossConfig) -> Result<f64> {
    let prep = prepare(z_s, z_t, pairs, cfg)?;
    let positive = positive_term(&prep, pairs, cfg);
    if cfg.lambda == 0.0 {
        return Ok(positive);
    }
    let (_, s) = negatives(&prep.u, pairs, cfg.tau);
    Ok(positive - cfg.lambda * s.ln())
}

fn positive_term(prep: &Prepared, pairs: &PositivePairMap, cfg: &LossConfig) -> f64 {
    let rows = positive_rows(pairs, cfg);
    let mut positive = 0.0;
    for i in 0..rows {
        let p = pairs.pair(i);
        positive -= dot(prep.u.row(i), prep.t.row(p)) + dot(prep.u.row(p), prep.t.row(i));
    }
    positive / (2.0 * rows as f64)
}

/// Exact gradient of [`loss_value`] with respect to every student row.
pub fn loss_grad_student(
    z_s: &Embeddings,
    z_t: &Embeddings,
    pairs: &PositivePairMap,
    cfg: &LossConfig,
) -> Result<Embeddings> {
    loss_and_grad(z_s, z_t, pairs, cfg).map(|(_, g)| g)
}

/// [`loss_value`] and [`loss_grad_student`] sharing one negative kernel.
pub fn loss_and_grad(
    z_s: &Embeddings,
    z_t: &Embeddings,
    pairs: &PositivePairMap,
    cfg: &LossConfig,
) -> Result<(f64, Embeddings)> {
    let prep = prepare(z_s, z_t, pairs, cfg)?;
    let l = z_s.nrows();
    let rows = positive_rows(pairs, cfg);
    let mut loss = positive_term(&prep, pairs, cfg);

    // gradient with respect to the unit rows uᵢ
    let mut g = Array2::<f64>::zeros(z_s.dim());
    let scale = -1.0 / (2.0 * rows as f64);
    for i in 0..rows {
        let p = pairs.pair(i);
        g.row_mut(i).scaled_add(scale, &prep.t.row(p));
        g.row_mut(p).scaled_add(scale, &prep.t.row(i));
    }
    if cfg.lambda > 0.0 {
        let (w, s) = negatives(&prep.u, pairs, cfg.tau);
        loss -= cfg.lambda * s.ln();
        let sym = &w + &w.t();
        let coef = cfg.lambda / (s * l as f64 * cfg.tau);
        g.scaled_add(coef, &sym.dot(&prep.u));
    }

    // back through uᵢ = sᵢ / ‖sᵢ‖
    for (i, mut row) in g.axis_iter_mut(Axis(0)).enumerate() {
        let u = prep.u.row(i);
        let radial = dot(row.view(), u);
        row.scaled_add(-radial, &u);
        row.mapv_inplace(|v| v / prep.norms[i]);
    }
    Ok((loss, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(l: usize, d: usize, rng: &mut ChaCha8Rng) -> Embeddings {
        Array2::from_shape_fn((l, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn pair_map_layouts() {
        assert_eq!(build_pair_map(1, 0).unwrap().as_slice(), &[1, 0]);
        assert_eq!(build_pair_map(2, 0).unwrap().as_slice(), &[2, 3, 0, 1]);
        let p = build_pair_map(1, 1).unwrap();
        assert_eq!(p.as_slice(), &[1, 0, 1, 0]);
        assert_eq!(p.pair(2), 1);
        let p = build_pair_map(2, 3).unwrap();
        assert_eq!(p.len(), 16);
        for i in 0..p.originals() {
            assert_eq!(p.pair(p.pair(i)), i);
            assert_ne!(p.pair(i), i);
        }
        assert!(p.as_slice()[4..].iter().all(|&q| q < 4));
    }

    #[test]
    fn identical_rows_without_negatives() {
        let z = Array2::from_elem((4, 3), 1.0 / 3f64.sqrt());
        let pairs = build_pair_map(2, 0).unwrap();
        let cfg = LossConfig { lambda: 0.0, ..Default::default() };
        assert!((loss_value(&z, &z, &pairs, &cfg).unwrap() + 1.0).abs() < 1e-12);
        let g = loss_grad_student(&z, &z, &pairs, &cfg).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn identical_rows_with_negatives() {
        // -1 - 0.1 * ln(2 e^{-1/2}) evaluated independently
        let expected = -1.0 - 0.1 * (2.0 * (-0.5f64).exp()).ln();
        assert!((expected - (-1.0 - 0.1 * 2f64.ln() + 0.05)).abs() < 1e-15);
        let z = Array2::from_elem((4, 2), 1.0);
        let pairs = build_pair_map(2, 0).unwrap();
        let v = loss_value(&z, &z, &pairs, &LossConfig::default()).unwrap();
        assert!((v - expected).abs() < 1e-12, "{v}");
        assert!((v - (-1.01931)).abs() < 1e-5);
    }

    #[test]
    fn orthogonal_positives_give_zero() {
        let z_s = array![[1.0, 0.0], [1.0, 0.0]];
        let z_t = array![[0.0, 2.0], [0.0, -3.0]];
        let pairs = build_pair_map(1, 0).unwrap();
        let cfg = LossConfig { lambda: 0.0, ..Default::default() };
        assert_eq!(loss_value(&z_s, &z_t, &pairs, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn error_paths() {
        let pairs = build_pair_map(1, 0).unwrap();
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(loss_value(&z, &z, &pairs, &LossConfig::default()).is_err());
        let zero = array![[0.0, 0.0], [0.0, 1.0]];
        let cfg = LossConfig { lambda: 0.0, ..Default::default() };
        assert!(matches!(loss_value(&zero, &z, &pairs, &cfg), Err(Error::Normalization(_))));
        assert!(matches!(loss_value(&z, &array![[1.0, 0.0]], &pairs, &cfg), Err(Error::Shape(_))));
        let bad = LossConfig { tau: 0.0, ..Default::default() };
        assert!(loss_value(&z, &z, &pairs, &bad).is_err());
    }

    fn fd_check(z_s: &Embeddings, z_t: &Embeddings, pairs: &PositivePairMap, cfg: &LossConfig) -> f64 {
        let analytic = loss_grad_student(z_s, z_t, pairs, cfg).unwrap();
        let h = 1e-5;
        let mut numeric = Array2::<f64>::zeros(z_s.dim());
        for idx in ndarray::indices(z_s.dim()) {
            let mut plus = z_s.clone();
            plus[idx] += h;
            let mut minus = z_s.clone();
            minus[idx] -= h;
            numeric[idx] = (loss_value(&plus, z_t, pairs, cfg).unwrap()
                - loss_value(&minus, z_t, pairs, cfg).unwrap())
                / (2.0 * h);
        }
        let diff = (&analytic - &numeric).mapv(|v| v * v).sum().sqrt();
        diff / numeric.mapv(|v| v * v).sum().sqrt().max(1e-12)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (b, k) in [(2, 0), (1, 1), (2, 1)] {
            let pairs = build_pair_map(b, k).unwrap();
            let l = pairs.len();
            let z_s = random(l, 8, &mut rng);
            let z_t = random(l, 8, &mut rng);
            for scope in [PositiveScope::AllRows, PositiveScope::OriginalsOnly] {
                let cfg = LossConfig { positive_scope: scope, ..Default::default() };
                let err = fd_check(&z_s, &z_t, &pairs, &cfg);
                assert!(err < 1e-4, "B={b} k={k} {scope:?}: {err}");
            }
        }
    }

    #[test]
    fn gradient_rows_are_tangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs = build_pair_map(2, 1).unwrap();
        let z_s = random(8, 5, &mut rng);
        let z_t = random(8, 5, &mut rng);
        let g = loss_grad_student(&z_s, &z_t, &pairs, &LossConfig::default()).unwrap();
        for i in 0..8 {
            assert!(dot(g.row(i), z_s.row(i)).abs() < 1e-9);
        }
    }

    #[test]
    fn fused_value_matches_separate_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pairs = build_pair_map(3, 2).unwrap();
        let z_s = random(18, 6, &mut rng);
        let z_t = random(18, 6, &mut rng);
        for lambda in [0.0, 0.1] {
            let cfg = LossConfig { lambda, ..Default::default() };
            let (v, g) = loss_and_grad(&z_s, &z_t, &pairs, &cfg).unwrap();
            assert_eq!(v, loss_value(&z_s, &z_t, &pairs, &cfg).unwrap());
            assert_eq!(g, loss_grad_student(&z_s, &z_t, &pairs, &cfg).unwrap());
        }
    }

    #[test]
    fn swapping_views_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = 3;
        let pairs = build_pair_map(b, 0).unwrap();
        let z_s = random(2 * b, 4, &mut rng);
        let z_t = random(2 * b, 4, &mut rng);
        let swap: Vec<usize> = (0..2 * b).map(|i| pairs.pair(i)).collect();
        let s2 = z_s.select(Axis(0), &swap);
        let t2 = z_t.select(Axis(0), &swap);
        let cfg = LossConfig::default();
        let a = loss_value(&z_s, &z_t, &pairs, &cfg).unwrap();
        let c = loss_value(&s2, &t2, &pairs, &cfg).unwrap();
        assert!((a - c).abs() < 1e-12);
    }

    #[test]
    fn better_aligned_positive_never_raises_positive_term() {
        let pairs = build_pair_map(1, 0).unwrap();
        let cfg = LossConfig { lambda: 0.0, ..Default::default() };
        let z_t = array![[1.0, 0.0], [1.0, 0.0]];
        let loose = array![[1.0, 1.0], [1.0, 0.5]];
        let tight = array![[1.0, 0.2], [1.0, 0.5]];
        assert!(loss_value(&tight, &z_t, &pairs, &cfg).unwrap() <= loss_value(&loose, &z_t, &pairs, &cfg).unwrap());
    }

    proptest! {
        #[test]
        fn positive_only_loss_is_bounded(seed in 0u64..10_000, b in 1usize..4, k in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pairs = build_pair_map(b, k).unwrap();
            let z_s = random(pairs.len(), 3, &mut rng);
            let z_t = random(pairs.len(), 3, &mut rng);
            let cfg = LossConfig { lambda: 0.0, ..Default::default() };
            let v = loss_value(&z_s, &z_t, &pairs, &cfg).unwrap();
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));
        }
    }
}
