//! Episodic few-shot evaluation: synthetic data, episode sampling, metrics.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{check_finite, l2_normalize_rows};
use crate::opta::{
    check_query_budget, class_prototypes, fit_logistic, opta_iterate, predict_nearest, LogisticConfig,
    OptaConfig, PrototypeSet,
};
use crate::{Embeddings, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledEmbeddingSet {
    pub embeddings: Embeddings,
    pub labels: Vec<u32>,
    /// Rows flagged `true` form the support subpopulation. When present,
    /// supports are drawn only from flagged rows and queries only from the rest.
    pub support_pool: Option<Vec<bool>>,
}

impl LabeledEmbeddingSet {
    pub fn new(embeddings: Embeddings, labels: Vec<u32>) -> Result<Self> {
        let set = Self { embeddings, labels, support_pool: None };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embeddings.nrows() != self.labels.len() {
            return Err(Error::Shape(format!(
                "{} rows but {} labels",
                self.embeddings.nrows(),
                self.labels.len()
            )));
        }
        if let Some(p) = &self.support_pool {
            if p.len() != self.labels.len() {
                return Err(Error::Shape(format!("support pool of {} for {} rows", p.len(), self.labels.len())));
            }
        }
        check_finite(&self.embeddings, "embeddings")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    /// Row indices per class, ascending by class id.
    pub fn class_index(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            out.entry(l).or_default().push(i);
        }
        out
    }

    /// Same rows with the labels permuted uniformly at random.
    pub fn shuffled_labels(&self, seed: u64) -> Self {
        let mut labels = self.labels.clone();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self { labels, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    /// Standard deviation of every class-center coordinate.
    pub center_scale: f64,
    pub within_std: f64,
    /// Offset of the support subpopulation in units of `within_std`.
    pub bias_shift: f64,
    pub samples_per_class: usize,
    /// Extra rows per class that make up the support subpopulation.
    pub support_pool_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 16,
            center_scale: 1.0,
            within_std: 1.0,
            bias_shift: 0.0,
            samples_per_class: 100,
            support_pool_per_class: 0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Picks `center_scale` so that the RMS distance between two centers is
    /// `separation` within-class standard deviations.
    pub fn with_separation(mut self, separation: f64) -> Self {
        self.center_scale = separation * self.within_std / (2.0 * self.dim as f64).sqrt();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.dim == 0 || self.samples_per_class == 0 {
            return Err(Error::InvalidArgument("classes, dim and samples_per_class must be positive".into()));
        }
        if !(self.center_scale > 0.0 && self.center_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("center_scale must be > 0, got {}", self.center_scale)));
        }
        if !(self.within_std > 0.0 && self.within_std.is_finite()) {
            return Err(Error::InvalidArgument(format!("within_std must be > 0, got {}", self.within_std)));
        }
        if !(self.bias_shift >= 0.0 && self.bias_shift.is_finite()) {
            return Err(Error::InvalidArgument(format!("bias_shift must be >= 0, got {}", self.bias_shift)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub set: LabeledEmbeddingSet,
    pub centers: Array2<f64>,
    /// Unit direction of the support-subpopulation shift, one row per class.
    pub shift_directions: Array2<f64>,
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Gaussian classes around centers drawn from `N(0, center_scale²·I)`.
///
/// Rows are grouped by class: `samples_per_class` ordinary rows, then
/// `support_pool_per_class` rows whose mean is moved by
/// `bias_shift·within_std` along the class's shift direction.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, d) = (spec.classes, spec.dim);
    let centers = normal_matrix(c, d, &mut rng) * spec.center_scale;
    let mut dirs = normal_matrix(c, d, &mut rng);
    for mut row in dirs.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt();
        row /= n;
    }

    let per_class = spec.samples_per_class + spec.support_pool_per_class;
    let mut embeddings = normal_matrix(c * per_class, d, &mut rng) * spec.within_std;
    let mut labels = Vec::with_capacity(c * per_class);
    let mut pool = Vec::with_capacity(c * per_class);
    let shift = spec.bias_shift * spec.within_std;
    for class in 0..c {
        for s in 0..per_class {
            let mut row = embeddings.row_mut(class * per_class + s);
            row += &centers.row(class);
            let shifted = s >= spec.samples_per_class;
            if shifted {
                row.scaled_add(shift, &dirs.row(class));
            }
            labels.push(class as u32);
            pool.push(shifted);
        }
    }
    let support_pool = (spec.support_pool_per_class > 0).then_some(pool);
    Ok(SyntheticData {
        set: LabeledEmbeddingSet { embeddings, labels, support_pool },
        centers,
        shift_directions: dirs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self { ways: 5, shots: 1, queries: 15, episodes: 2000, seed: 0 }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 {
            return Err(Error::InvalidArgument(format!("ways must be >= 2, got {}", self.ways)));
        }
        if self.shots == 0 {
            return Err(Error::InvalidArgument("shots must be >= 1".into()));
        }
        if self.queries <= self.shots {
            return Err(Error::SampleBias(format!(
                "queries per class ({}) must exceed shots ({})",
                self.queries, self.shots
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: Embeddings,
    pub support_labels: Vec<u32>,
    pub query: Embeddings,
    pub query_labels: Vec<u32>,
    pub support_index: Vec<usize>,
    pub query_index: Vec<usize>,
    /// Sampled classes, ascending.
    pub classes: Vec<u32>,
}

/// Rows eligible as supports and as queries for one class.
struct ClassRows {
    support: Vec<usize>,
    query: Vec<usize>,
    shared: bool,
}

fn class_rows(data: &LabeledEmbeddingSet) -> BTreeMap<u32, ClassRows> {
    let mut out = BTreeMap::new();
    for (class, rows) in data.class_index() {
        let entry = match &data.support_pool {
            Some(pool) => {
                let (s, q): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| pool[i]);
                ClassRows { support: s, query: q, shared: false }
            }
            None => ClassRows { support: rows.clone(), query: rows, shared: true },
        };
        out.insert(class, entry);
    }
    out
}

pub fn sample_episode(data: &LabeledEmbeddingSet, spec: &EpisodeSpec, rng: &mut impl Rng) -> Result<Episode> {
    spec.validate()?;
    data.validate()?;
    let (k, q) = (spec.shots, spec.queries);
    let rows = class_rows(data);
    let eligible: Vec<u32> = rows
        .iter()
        .filter(|(_, r)| {
            if r.shared {
                r.support.len() >= k + q
            } else {
                r.support.len() >= k && r.query.len() >= q
            }
        })
        .map(|(&c, _)| c)
        .collect();
    if eligible.len() < spec.ways {
        return Err(Error::Capacity(format!(
            "{} classes have enough rows for {}-shot {}-query episodes, {} needed",
            eligible.len(),
            k,
            q,
            spec.ways
        )));
    }
    let mut classes: Vec<u32> = eligible.choose_multiple(rng, spec.ways).copied().collect();
    classes.sort_unstable();

    let mut support_index = Vec::with_capacity(spec.ways * k);
    let mut query_index = Vec::with_capacity(spec.ways * q);
    for c in &classes {
        let r = &rows[c];
        if r.shared {
            let picked: Vec<usize> = r.support.choose_multiple(rng, k + q).copied().collect();
            support_index.extend_from_slice(&picked[..k]);
            query_index.extend_from_slice(&picked[k..]);
        } else {
            support_index.extend(r.support.choose_multiple(rng, k).copied());
            query_index.extend(r.query.choose_multiple(rng, q).copied());
        }
    }
    Ok(Episode {
        support: data.embeddings.select(Axis(0), &support_index),
        support_labels: support_index.iter().map(|&i| data.labels[i]).collect(),
        query: data.embeddings.select(Axis(0), &query_index),
        query_labels: query_index.iter().map(|&i| data.labels[i]).collect(),
        support_index,
        query_index,
        classes,
    })
}

/// Seeded shuffle of `0..n` per epoch, cut into `⌊n/B⌋` batches of `B`.
pub fn stream_batches(n: usize, batch: usize, epochs: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    if batch > n {
        return Err(Error::Capacity(format!("batch of {batch} from {n} rows")));
    }
    let mut out = Vec::with_capacity(epochs * (n / batch));
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        out.extend(order.chunks_exact(batch).map(<[usize]>::to_vec));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    #[default]
    Logreg,
    Proto,
}

impl std::str::FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logreg" => Ok(Self::Logreg),
            "proto" => Ok(Self::Proto),
            other => Err(Error::InvalidArgument(format!("unknown classifier '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// `opta.passes == 0` disables alignment.
    pub opta: OptaConfig,
    pub classifier: ClassifierKind,
    pub logistic: LogisticConfig,
    /// L2-normalise supports and queries before anything else.
    pub normalize: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            opta: OptaConfig::default(),
            classifier: ClassifierKind::Logreg,
            logistic: LogisticConfig::default(),
            normalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub accuracy: f64,
    pub prototypes: PrototypeSet,
    pub predictions: Vec<u32>,
}

pub fn run_episode(ep: &Episode, cfg: &PipelineConfig) -> Result<EpisodeOutcome> {
    let (support, query) = if cfg.normalize {
        (l2_normalize_rows(&ep.support)?, l2_normalize_rows(&ep.query)?)
    } else {
        (ep.support.clone(), ep.query.clone())
    };
    let mut protos = class_prototypes(&support, &ep.support_labels)?;
    if cfg.opta.passes > 0 {
        check_query_budget(support.nrows(), query.nrows())?;
        protos = opta_iterate(&protos, &query, &cfg.opta)?;
    }
    let predictions = match cfg.classifier {
        ClassifierKind::Logreg => fit_logistic(&protos, &cfg.logistic)?.predict(&query)?,
        ClassifierKind::Proto => predict_nearest(&protos, &query)?,
    };
    let hits = predictions.iter().zip(&ep.query_labels).filter(|(a, b)| a == b).count();
    Ok(EpisodeOutcome {
        accuracy: hits as f64 / ep.query_labels.len() as f64,
        prototypes: protos,
        predictions,
    })
}

pub const CI_METHOD: &str = "normal-1.96";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub mean_accuracy: f64,
    pub ci95_half_width: f64,
    /// Sample standard deviation of the per-episode accuracies.
    pub std: f64,
    pub episodes: usize,
    pub ci_method: &'static str,
    pub per_episode_accuracies: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dbi_trace: Option<Vec<f64>>,
}

impl MetricsRecord {
    pub fn from_accuracies(acc: Vec<f64>) -> Self {
        let n = acc.len();
        let mean = acc.iter().sum::<f64>() / n.max(1) as f64;
        let std = if n > 1 {
            (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean_accuracy: mean,
            ci95_half_width: 1.96 * std / (n.max(1) as f64).sqrt(),
            std,
            episodes: n,
            ci_method: CI_METHOD,
            per_episode_accuracies: acc,
            dbi_trace: None,
        }
    }
}

/// Per-episode rng: the master seed with the episode index as stream.
pub fn episode_rng(seed: u64, episode: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode as u64);
    rng
}

/// Runs `f` on every sampled episode in parallel; results in episode order.
pub fn map_episodes<T: Send>(
    data: &LabeledEmbeddingSet,
    spec: &EpisodeSpec,
    f: impl Fn(&Episode) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    spec.validate()?;
    data.validate()?;
    (0..spec.episodes)
        .into_par_iter()
        .map(|e| {
            let ep = sample_episode(data, spec, &mut episode_rng(spec.seed, e))?;
            f(&ep).map_err(|err| err.context(format!("episode {e}")))
        })
        .collect()
}

pub fn evaluate(data: &LabeledEmbeddingSet, spec: &EpisodeSpec, cfg: &PipelineConfig) -> Result<MetricsRecord> {
    cfg.opta.validate()?;
    let acc = map_episodes(data, spec, |ep| run_episode(ep, cfg).map(|o| o.accuracy))?;
    Ok(MetricsRecord::from_accuracies(acc))
}

/// Per-class means of the generating distribution for the classes of `ep`.
pub fn true_means(centers: &Array2<f64>, ep: &Episode) -> Array2<f64> {
    let mut out = Array2::zeros((ep.classes.len(), centers.ncols()));
    for (row, &c) in ep.classes.iter().enumerate() {
        out.row_mut(row).assign(&centers.row(c as usize));
    }
    out
}

/// Mean euclidean distance between matching rows.
pub fn mean_row_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let d: Array1<f64> = (a - b).mapv(|v| v * v).sum_axis(Axis(1)).mapv(f64::sqrt);
    d.mean().unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> SyntheticSpec {
        SyntheticSpec { classes: 3, dim: 4, samples_per_class: 10, ..Default::default() }
    }

    #[test]
    fn synthetic_shape_and_labels() {
        let d = gen_synthetic(&small()).unwrap();
        assert_eq!(d.set.embeddings.dim(), (30, 4));
        let labels: HashSet<u32> = d.set.labels.iter().copied().collect();
        assert_eq!(labels, HashSet::from([0, 1, 2]));
        assert!(d.set.support_pool.is_none());
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let a = gen_synthetic(&small()).unwrap();
        let b = gen_synthetic(&small()).unwrap();
        assert_eq!(a.set, b.set);
        let c = gen_synthetic(&SyntheticSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.set.embeddings, c.set.embeddings);
    }

    #[test]
    fn synthetic_rejects_bad_specs() {
        assert!(gen_synthetic(&SyntheticSpec { within_std: 0.0, ..small() }).is_err());
        assert!(gen_synthetic(&SyntheticSpec { bias_shift: -1.0, ..small() }).is_err());
        assert!(gen_synthetic(&SyntheticSpec { classes: 0, ..small() }).is_err());
    }

    #[test]
    fn separation_sets_rms_center_distance() {
        let s = SyntheticSpec { dim: 8, within_std: 2.0, ..Default::default() }.with_separation(4.0);
        // E‖a − b‖² = 2·d·scale²
        let rms = (2.0 * 8.0 * s.center_scale.powi(2)).sqrt();
        assert!((rms - 8.0).abs() < 1e-12);
    }

    #[test]
    fn pool_rows_are_shifted_along_direction() {
        let spec = SyntheticSpec {
            classes: 2,
            dim: 3,
            within_std: 1e-9,
            bias_shift: 2e9,
            samples_per_class: 2,
            support_pool_per_class: 2,
            ..Default::default()
        };
        let d = gen_synthetic(&spec).unwrap();
        assert_eq!(d.set.support_pool.as_ref().unwrap(), &vec![false, false, true, true, false, false, true, true]);
        let moved = &d.set.embeddings.row(2) - &d.centers.row(0);
        assert!((&moved - &(&d.shift_directions.row(0) * 2.0)).iter().all(|v| v.abs() < 1e-6));
    }

    fn dataset(classes: usize, per_class: usize) -> LabeledEmbeddingSet {
        gen_synthetic(&SyntheticSpec { classes, dim: 4, samples_per_class: per_class, ..Default::default() })
            .unwrap()
            .set
    }

    #[test]
    fn episode_shapes_and_balance() {
        let data = dataset(10, 30);
        let spec = EpisodeSpec { ways: 5, shots: 1, queries: 15, episodes: 1, seed: 0 };
        let ep = sample_episode(&data, &spec, &mut episode_rng(3, 0)).unwrap();
        assert_eq!(ep.support.nrows(), 5);
        assert_eq!(ep.query.nrows(), 75);
        for c in &ep.classes {
            assert_eq!(ep.support_labels.iter().filter(|&l| l == c).count(), 1);
            assert_eq!(ep.query_labels.iter().filter(|&l| l == c).count(), 15);
        }
        let s: HashSet<usize> = ep.support_index.iter().copied().collect();
        assert!(ep.query_index.iter().all(|i| !s.contains(i)));
        let q: HashSet<usize> = ep.query_index.iter().copied().collect();
        assert_eq!(q.len(), 75);
    }

    #[test]
    fn episode_errors() {
        let data = dataset(10, 30);
        let bad = EpisodeSpec { shots: 5, queries: 5, ..Default::default() };
        assert!(matches!(sample_episode(&data, &bad, &mut episode_rng(0, 0)), Err(Error::SampleBias(_))));
        let too_many = EpisodeSpec { ways: 11, ..Default::default() };
        assert!(matches!(sample_episode(&data, &too_many, &mut episode_rng(0, 0)), Err(Error::Capacity(_))));
        let too_deep = EpisodeSpec { queries: 30, ..Default::default() };
        assert!(matches!(sample_episode(&data, &too_deep, &mut episode_rng(0, 0)), Err(Error::Capacity(_))));
    }

    #[test]
    fn biased_episodes_draw_supports_from_pool() {
        let spec = SyntheticSpec {
            classes: 6,
            dim: 4,
            samples_per_class: 20,
            support_pool_per_class: 5,
            bias_shift: 1.0,
            ..Default::default()
        };
        let data = gen_synthetic(&spec).unwrap().set;
        let pool = data.support_pool.clone().unwrap();
        let ep = sample_episode(&data, &EpisodeSpec { shots: 5, ..Default::default() }, &mut episode_rng(0, 0))
            .unwrap();
        assert!(ep.support_index.iter().all(|&i| pool[i]));
        assert!(ep.query_index.iter().all(|&i| !pool[i]));
    }

    #[test]
    fn batch_stream_partitions_each_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = stream_batches(100, 32, 2, &mut rng).unwrap();
        assert_eq!(b.len(), 6);
        for epoch in b.chunks(3) {
            let all: Vec<usize> = epoch.concat();
            let uniq: HashSet<usize> = all.iter().copied().collect();
            assert_eq!(uniq.len(), 96);
            assert!(all.iter().all(|&i| i < 100));
        }
        let again = stream_batches(100, 32, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(b, again);
        assert!(stream_batches(10, 11, 1, &mut rng).is_err());
    }

    #[test]
    fn ci_formula() {
        let m = MetricsRecord::from_accuracies(vec![0.5, 0.7, 0.9, 0.3]);
        let mean = 0.6;
        let std = ((0.01 + 0.01 + 0.09 + 0.09) / 3.0f64).sqrt();
        assert!((m.mean_accuracy - mean).abs() < 1e-12);
        assert!((m.std - std).abs() < 1e-12);
        assert!((m.ci95_half_width - 1.96 * std / 2.0).abs() < 1e-12);
    }

    #[test]
    fn separable_classes_are_perfect() {
        let spec = SyntheticSpec { classes: 8, dim: 8, samples_per_class: 30, ..Default::default() }
            .with_separation(100.0);
        let data = gen_synthetic(&spec).unwrap().set;
        let ep = EpisodeSpec { episodes: 50, ..Default::default() };
        for classifier in [ClassifierKind::Logreg, ClassifierKind::Proto] {
            for passes in [0, 1] {
                let cfg = PipelineConfig {
                    classifier,
                    opta: OptaConfig { passes, ..Default::default() },
                    ..Default::default()
                };
                let m = evaluate(&data, &ep, &cfg).unwrap();
                assert_eq!(m.mean_accuracy, 1.0, "{classifier:?} passes={passes}");
                assert_eq!(m.ci95_half_width, 0.0);
                assert_eq!(m.per_episode_accuracies.len(), 50);
            }
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let data = dataset(8, 30);
        let ep = EpisodeSpec { episodes: 20, seed: 9, ..Default::default() };
        let a = evaluate(&data, &ep, &PipelineConfig::default()).unwrap();
        let b = evaluate(&data, &ep, &PipelineConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}
