//! Cross-checks against independent reference computations.

use ndarray::{array, Array1, Array2, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use otfs::episode::*;
use otfs::loss::{build_pair_map, loss_value, LossConfig};
use otfs::memory::{DyceConfig, MemoryState};
use otfs::opta::{class_prototypes, fit_logistic, predict_nearest, transport_weights, LogisticConfig, OptaConfig};
use otfs::ot::{sinkhorn, CostMatrix, Marginals, SinkhornConfig};

fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>())
}

/// Textbook Sinkhorn on the scaled kernel, no log domain.
fn naive_sinkhorn(cost: &Array2<f64>, r: &Array1<f64>, c: &Array1<f64>, eps: f64) -> Array2<f64> {
    let lo = cost.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = cost.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let k = cost.mapv(|v| (-(v - lo) / (hi - lo) / eps).exp());
    let mut u = Array1::<f64>::ones(r.len());
    let mut v = Array1::<f64>::ones(c.len());
    for _ in 0..20000 {
        u = r / &k.dot(&v);
        v = c / &k.t().dot(&u);
    }
    let mut p = k.clone();
    for i in 0..r.len() {
        for j in 0..c.len() {
            p[[i, j]] = u[i] * k[[i, j]] * v[j];
        }
    }
    p
}

#[test]
fn sinkhorn_agrees_with_plain_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let cost = uniform(6, 9, &mut rng);
        let r = Array1::from_shape_fn(6, |_| rng.random_range(0.5..1.5));
        let c = Array1::from_shape_fn(9, |_| rng.random_range(0.5..1.5));
        let (r, c) = (&r / r.sum(), &c / c.sum());
        let plan = sinkhorn(
            &CostMatrix::new(cost.clone()).unwrap(),
            &Marginals::new(r.clone(), c.clone()).unwrap(),
            &SinkhornConfig { epsilon: 0.1, max_iterations: 5000, tolerance: 1e-12 },
        )
        .unwrap();
        let oracle = naive_sinkhorn(&cost, &r, &c, 0.1);
        let diff = (&plan.values - &oracle).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-9, "max |Δ| = {diff}");
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 1 {
        return vec![vec![0]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn small_epsilon_approaches_assignment_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let perms = permutations(5);
    assert_eq!(perms.len(), 120);
    for _ in 0..5 {
        let cost = uniform(5, 5, &mut rng);
        let exact = perms
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum::<f64>() / 5.0)
            .fold(f64::INFINITY, f64::min);
        let cfg = SinkhornConfig { epsilon: 1e-3, max_iterations: 2_000_000, tolerance: 1e-6 };
        let plan = sinkhorn(&CostMatrix::new(cost.clone()).unwrap(), &Marginals::uniform(5, 5).unwrap(), &cfg).unwrap();
        let got = (&plan.values * &cost).sum();
        assert!((got - exact).abs() <= 0.01 * exact, "{got} vs {exact}");
    }
}

#[test]
fn synthetic_center_distances_follow_gaussian_law() {
    let spec = SyntheticSpec { classes: 5, dim: 16, center_scale: 10.0, within_std: 1.0, samples_per_class: 1, ..Default::default() };
    let d = spec.dim as f64;
    // ‖a − b‖ for a, b ~ N(0, s²I) is √2·s times a chi variable with d degrees of freedom
    let chi_mean = 2f64.sqrt() * (statrs::function::gamma::ln_gamma((d + 1.0) / 2.0) - statrs::function::gamma::ln_gamma(d / 2.0)).exp();
    let expected = 2f64.sqrt() * spec.center_scale * chi_mean;
    let mut total = 0.0;
    let mut count = 0;
    for seed in 0..1000 {
        let c = gen_synthetic(&SyntheticSpec { seed, ..spec.clone() }).unwrap().centers;
        for i in 0..5 {
            for j in i + 1..5 {
                total += (&c.row(i) - &c.row(j)).mapv(|v| v * v).sum().sqrt();
                count += 1;
            }
        }
    }
    let mean = total / count as f64;
    assert!((mean - expected).abs() < 0.2 * expected, "{mean} vs {expected}");
    // much tighter in practice
    assert!((mean - expected).abs() < 0.01 * expected, "{mean} vs {expected}");
}

#[test]
fn shuffled_labels_land_in_binomial_band() {
    let spec = SyntheticSpec { classes: 10, dim: 16, samples_per_class: 60, ..Default::default() }.with_separation(4.0);
    let data = gen_synthetic(&spec).unwrap().set.shuffled_labels(99);
    let ep = EpisodeSpec { episodes: 200, seed: 4, ..Default::default() };
    let m = evaluate(&data, &ep, &PipelineConfig::default()).unwrap();
    let n = (ep.episodes * ep.ways * ep.queries) as f64;
    let p = 1.0 / ep.ways as f64;
    let band = 2.5758 * (p * (1.0 - p) / n).sqrt();
    assert!((m.mean_accuracy - p).abs() <= band, "{} outside 0.2 ± {band}", m.mean_accuracy);
}

#[test]
fn ci_is_recomputable_from_episodes() {
    let data = gen_synthetic(&SyntheticSpec { classes: 8, samples_per_class: 40, ..Default::default() }.with_separation(3.0))
        .unwrap()
        .set;
    let m = evaluate(&data, &EpisodeSpec { episodes: 300, ..Default::default() }, &PipelineConfig::default()).unwrap();
    let acc = &m.per_episode_accuracies;
    assert_eq!(acc.len(), 300);
    let n = acc.len() as f64;
    let mean = acc.iter().sum::<f64>() / n;
    let var = acc.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0);
    assert!((m.ci95_half_width - 1.96 * var.sqrt() / n.sqrt()).abs() < 1e-12);
    assert!(acc.iter().all(|a| (0.0..=1.0).contains(a)));
}

#[test]
fn unshifted_support_pool_matches_query_distribution() {
    for per_class in [50, 5000] {
        let spec = SyntheticSpec {
            classes: 2,
            dim: 4,
            samples_per_class: per_class,
            support_pool_per_class: per_class,
            bias_shift: 0.0,
            ..Default::default()
        };
        let data = gen_synthetic(&spec).unwrap().set;
        let pool = data.support_pool.as_ref().unwrap();
        for class in 0..2u32 {
            let pick = |flag: bool| -> Vec<usize> {
                (0..data.len()).filter(|&i| data.labels[i] == class && pool[i] == flag).collect()
            };
            let mean = |idx: &[usize]| data.embeddings.select(Axis(0), idx).mean_axis(Axis(0)).unwrap();
            let diff = &mean(&pick(true)) - &mean(&pick(false));
            // four standard errors of a difference of two means
            let bound = 4.0 * (2.0 / per_class as f64).sqrt();
            assert!(diff.iter().all(|v| v.abs() < bound), "{diff}");
        }
    }
}

/// Direct transcription of the loss with explicit loops.
fn loss_oracle(zs: &Array2<f64>, zt: &Array2<f64>, pair: &[usize], lambda: f64, tau: f64) -> f64 {
    let cos = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
        a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
    };
    let l = zs.nrows();
    let mut pos = 0.0;
    for i in 0..l {
        pos += -cos(zs.row(i), zt.row(pair[i])) - cos(zs.row(pair[i]), zt.row(i));
    }
    pos /= 2.0 * l as f64;
    let mut neg = 0.0;
    for i in 0..l {
        for j in 0..l {
            if j != i && j != pair[i] {
                neg += (-cos(zs.row(i), zs.row(j)) / tau).exp();
            }
        }
    }
    pos - lambda * (neg / l as f64).ln()
}

#[test]
fn loss_matches_loop_transcription() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (b, k) in [(1, 1), (2, 0), (2, 3), (4, 1)] {
        let pairs = build_pair_map(b, k).unwrap();
        let l = pairs.len();
        let zs = uniform(l, 5, &mut rng) - 0.5;
        let zt = uniform(l, 5, &mut rng) - 0.5;
        for lambda in [0.0, 0.1, 0.5] {
            let cfg = LossConfig { lambda, tau: 2.0, ..Default::default() };
            let got = loss_value(&zs, &zt, &pairs, &cfg).unwrap();
            let want = loss_oracle(&zs, &zt, pairs.as_slice(), lambda, 2.0);
            assert!((got - want).abs() < 1e-12, "B={b} k={k} λ={lambda}: {got} vs {want}");
        }
    }
}

/// Davies-Bouldin computed from scratch on the memory's own partition labels.
fn dbi_oracle(points: &[Vec<f64>], labels: &[usize], p: usize) -> f64 {
    let d = points[0].len();
    let mut cent = vec![vec![0.0; d]; p];
    let mut cnt = vec![0.0; p];
    for (x, &l) in points.iter().zip(labels) {
        for j in 0..d {
            cent[l][j] += x[j];
        }
        cnt[l] += 1.0;
    }
    for l in 0..p {
        for j in 0..d {
            cent[l][j] /= cnt[l];
        }
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut s = vec![0.0; p];
    for (x, &l) in points.iter().zip(labels) {
        s[l] += dist(x, &cent[l]) / cnt[l];
    }
    (0..p)
        .map(|i| {
            (0..p)
                .filter(|&j| j != i)
                .map(|j| (s[i] + s[j]) / dist(&cent[i], &cent[j]))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum::<f64>()
        / p as f64
}

#[test]
fn memory_dbi_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = DyceConfig { capacity: 128, partitions: 6, neighbors: 2, ..Default::default() };
    let mut m = MemoryState::new(&cfg).unwrap();
    for _ in 0..4 {
        m.ingest_fill(&(uniform(32, 5, &mut rng) - 0.5), None).unwrap();
    }
    m.bootstrap_partitions(&cfg, 1).unwrap();
    for _ in 0..10 {
        m.update_memory(&(uniform(32, 5, &mut rng) - 0.5), None, &cfg, &SinkhornConfig::default()).unwrap();
        let points: Vec<Vec<f64>> = m.slots().iter().map(|s| s.embedding.clone()).collect();
        let labels: Vec<usize> = m.assignments().into_iter().map(|a| a.unwrap()).collect();
        match m.dbi() {
            Ok(v) => assert!((v - dbi_oracle(&points, &labels, 6)).abs() < 1e-10),
            Err(e) => assert_eq!(e.kind(), "metric-undefined"),
        }
    }
}

#[test]
fn logistic_agrees_with_nearest_prototype_when_separated() {
    let data = gen_synthetic(&SyntheticSpec { classes: 10, dim: 16, samples_per_class: 40, ..Default::default() }.with_separation(12.0))
        .unwrap()
        .set;
    let spec = EpisodeSpec { episodes: 50, shots: 5, ..Default::default() };
    let agree = map_episodes(&data, &spec, |ep| {
        let s = otfs::linalg::l2_normalize_rows(&ep.support)?;
        let q = otfs::linalg::l2_normalize_rows(&ep.query)?;
        let p = class_prototypes(&s, &ep.support_labels)?;
        let a = fit_logistic(&p, &LogisticConfig::default())?.predict(&q)?;
        let b = predict_nearest(&p, &q)?;
        Ok(a.iter().zip(&b).filter(|(x, y)| x == y).count())
    })
    .unwrap();
    let total = (spec.episodes * spec.ways * spec.queries) as f64;
    assert!(agree.iter().sum::<usize>() as f64 / total >= 0.99);
}

#[test]
fn transport_weights_reconstruct_prototypes() {
    let protos = class_prototypes(&array![[0.0, 0.0], [4.0, 1.0]], &[0, 1]).unwrap();
    let q = array![[0.1, 0.2], [0.3, -0.2], [3.8, 1.1], [4.4, 0.7], [2.0, 0.5]];
    let w = transport_weights(&protos, &q, &OptaConfig::default()).unwrap();
    let moved = otfs::opta::opta_pass(&protos, &q, &OptaConfig::default()).unwrap();
    assert!((&w.dot(&q) - &moved.values).iter().all(|v| v.abs() < 1e-12));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sinkhorn_marginals_hold(n in 1usize..8, m in 1usize..8, seed: u64, eps in 0.02f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost = uniform(n, m, &mut rng);
        let r = Array1::from_shape_fn(n, |_| rng.random_range(0.1..1.0));
        let c = Array1::from_shape_fn(m, |_| rng.random_range(0.1..1.0));
        let marg = Marginals::new(&r / r.sum(), &c / c.sum()).unwrap();
        let cfg = SinkhornConfig { epsilon: eps, max_iterations: 20000, tolerance: 1e-9 };
        let plan = sinkhorn(&CostMatrix::new(cost).unwrap(), &marg, &cfg).unwrap();
        prop_assert!(plan.values.iter().all(|&v| v >= 0.0));
        prop_assert!((plan.values.sum() - 1.0).abs() < 1e-8);
        prop_assert!(otfs::ot::marginal_violation(plan.values.view(), &marg) <= 1e-9 + 1e-15);
    }

    #[test]
    fn cost_shift_and_scale_leave_plan_unchanged(seed: u64, shift in -5.0f64..5.0, scale in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost = uniform(4, 5, &mut rng);
        let marg = Marginals::uniform(4, 5).unwrap();
        let cfg = SinkhornConfig::default();
        let a = sinkhorn(&CostMatrix::new(cost.clone()).unwrap(), &marg, &cfg).unwrap();
        let b = sinkhorn(&CostMatrix::new(cost.mapv(|v| v * scale + shift)).unwrap(), &marg, &cfg).unwrap();
        prop_assert!((&a.values - &b.values).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn transport_weights_are_convex(seed: u64, n in 2usize..6, extra in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let protos = class_prototypes(&uniform(n, 3, &mut rng), &(0..n as u32).collect::<Vec<_>>()).unwrap();
        let q = uniform(n + extra, 3, &mut rng);
        let w = transport_weights(&protos, &q, &OptaConfig::default()).unwrap();
        prop_assert!(w.iter().all(|&v| v >= 0.0));
        for row in w.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_stream_is_a_partition(n in 1usize..200, b in 1usize..64, seed: u64) {
        prop_assume!(b <= n);
        let batches = stream_batches(n, b, 1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(batches.len(), n / b);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), (n / b) * b);
    }

    #[test]
    fn pair_map_pairs_originals_across_views(b in 1usize..20, k in 0usize..6) {
        let p = build_pair_map(b, k).unwrap();
        prop_assert_eq!(p.len(), 2 * b * (k + 1));
        for i in 0..2 * b {
            prop_assert_eq!(p.pair(p.pair(i)), i);
            prop_assert_eq!(i < b, p.pair(i) >= b);
        }
        for t in 2 * b..p.len() {
            let source = (t - 2 * b) / k.max(1);
            prop_assert_eq!(p.pair(t), p.pair(source));
        }
    }

    #[test]
    fn episodes_are_balanced_and_disjoint(seed: u64, ways in 2usize..6, shots in 1usize..4, extra in 1usize..6) {
        let data = gen_synthetic(&SyntheticSpec { classes: 6, dim: 3, samples_per_class: 12, ..Default::default() }).unwrap().set;
        let spec = EpisodeSpec { ways, shots, queries: shots + extra, episodes: 1, seed };
        let ep = sample_episode(&data, &spec, &mut episode_rng(seed, 0)).unwrap();
        prop_assert_eq!(ep.support.nrows(), ways * shots);
        prop_assert_eq!(ep.query.nrows(), ways * (shots + extra));
        for i in &ep.support_index {
            prop_assert!(!ep.query_index.contains(i));
        }
        for c in &ep.classes {
            prop_assert_eq!(ep.support_labels.iter().filter(|l| *l == c).count(), shots);
        }
    }
}
