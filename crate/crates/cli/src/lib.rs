//! Command-line front end. Every metric is written as one JSON object per
//! line on standard output; each object carries the resolved config hash and
//! seed. Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::Serialize;
use serde_json::{json, Map, Value};

use otfs::ablate::{ablate, AblationAxis};
use otfs::config::{seed_from_env, RunConfig};
use otfs::episode::{evaluate, gen_synthetic, ClassifierKind, LabeledEmbeddingSet};
use otfs::io::{read_embeddings, read_matrix, read_vector, write_embeddings, EmbeddingFile};
use otfs::linalg::l2_normalize_rows;
use otfs::memory::sim::{mean_purity, simulate, SimConfig};
use otfs::opta::{check_query_budget, class_prototypes, fit_logistic, opta_iterate, predict_nearest};
use otfs::ot::{pairwise_cost, sinkhorn, transport_cost, CostMatrix, Marginals};
use otfs::pretrain::{encode_encoder, run_pretraining};
use otfs::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "otfs", version, about = "Optimal-transport few-shot experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// `key = value` config file, applied over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (default: $OTFS_SEED, else 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Extra `key=value` override; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve one entropic transport problem.
    Sinkhorn {
        /// Cost matrix (text rows, or an embedding file).
        #[arg(long, required_unless_present = "source")]
        cost: Option<PathBuf>,
        /// Build the cost between two embedding files instead.
        #[arg(long, requires = "target", conflicts_with = "cost")]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        /// Row marginal (default uniform).
        #[arg(long)]
        r: Option<PathBuf>,
        /// Column marginal (default uniform).
        #[arg(long)]
        c: Option<PathBuf>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        metric: Option<String>,
    },
    /// Write a synthetic labelled embedding file.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        samples_per_class: Option<usize>,
        #[arg(long)]
        separation: Option<f64>,
        #[arg(long)]
        within_std: Option<f64>,
    },
    /// Stream embeddings through the memory and trace its diagnostics.
    MemorySim {
        /// Labelled embedding file (default: synthetic data).
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, visible_alias = "batches")]
        steps: Option<usize>,
        /// Samples per batch; each step inserts 2B rows.
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long, visible_alias = "capacity")]
        memory_size: Option<usize>,
        #[arg(long)]
        partitions: Option<usize>,
        #[arg(long, visible_alias = "k")]
        neighbors: Option<usize>,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Few-shot evaluation over sampled episodes.
    Eval {
        /// Labelled embedding file (default: synthetic data).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ways: Option<usize>,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Alignment passes, 0 to 5.
        #[arg(long)]
        opta: Option<usize>,
        #[arg(long, value_parser = ["logreg", "proto"])]
        classifier: Option<String>,
    },
    /// Align support prototypes with a query set and label the queries.
    Align {
        /// Labelled support embeddings.
        #[arg(long)]
        support: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        passes: Option<usize>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long, value_parser = ["logreg", "proto"])]
        classifier: Option<String>,
    },
    /// Train a linear student/teacher encoder pair.
    Pretrain {
        /// Embedding file (default: synthetic data).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        mask: Option<f64>,
        #[arg(long)]
        momentum: Option<f64>,
        #[arg(long)]
        epoch_thr: Option<usize>,
        #[arg(long, value_parser = ["full", "fifo", "kmeans"])]
        dyce_variant: Option<String>,
        #[arg(long)]
        lr: Option<f64>,
        /// Where to write the final teacher encoder.
        #[arg(long, default_value = "encoder.bin")]
        out: PathBuf,
    },
    /// Pretrain and evaluate once per value of one hyperparameter.
    Ablate {
        /// mask_ratio, lambda, k, P, M or variant.
        #[arg(long)]
        axis: String,
        /// Comma-separated cell values (default: the standard grid).
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
        /// Labelled embedding file (default: synthetic data).
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

/// Output sink that stamps every record with the config hash and seed.
struct Emitter<'a> {
    out: &'a mut dyn Write,
    hash: String,
    seed: u64,
}

impl Emitter<'_> {
    fn emit(&mut self, kind: &str, record: impl Serialize) -> Result<()> {
        let mut map = Map::new();
        map.insert("kind".into(), Value::from(kind));
        match serde_json::to_value(record).map_err(|e| Error::InvalidArgument(e.to_string()))? {
            Value::Object(fields) => map.extend(fields),
            other => {
                map.insert("value".into(), other);
            }
        }
        map.insert("config_hash".into(), Value::from(self.hash.clone()));
        map.insert("seed".into(), Value::from(self.seed));
        let line = serde_json::to_string(&map).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        writeln!(self.out, "{line}")?;
        Ok(())
    }
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn set_opt<T: ToString>(cfg: &mut RunConfig, key: &str, v: &Option<T>) -> Result<()> {
    if let Some(v) = v {
        cfg.set(key, v.to_string())?;
    }
    Ok(())
}

fn resolve_config(common: &Common, env_seed: Option<&str>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(seed) = seed_from_env(env_seed)? {
        cfg.set("seed", seed.to_string())?;
    }
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)?;
        cfg.apply_file_text(&text).map_err(|e| e.context(path.display().to_string()))?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn apply_flags(cfg: &mut RunConfig, cmd: &Command, seed: Option<u64>) -> Result<()> {
    match cmd {
        Command::Sinkhorn { epsilon, max_iter, tol, metric, .. } => {
            set_opt(cfg, "epsilon", epsilon)?;
            set_opt(cfg, "max_iter", max_iter)?;
            set_opt(cfg, "tol", tol)?;
            set_opt(cfg, "metric", metric)?;
        }
        Command::GenSynth { classes, dim, samples_per_class, separation, within_std, .. } => {
            set_opt(cfg, "classes", classes)?;
            set_opt(cfg, "dim", dim)?;
            set_opt(cfg, "samples_per_class", samples_per_class)?;
            set_opt(cfg, "separation", separation)?;
            set_opt(cfg, "within_std", within_std)?;
        }
        Command::MemorySim { steps, batch, memory_size, partitions, neighbors, variant, .. } => {
            set_opt(cfg, "steps", steps)?;
            set_opt(cfg, "batch", batch)?;
            set_opt(cfg, "memory_size", memory_size)?;
            set_opt(cfg, "partitions", partitions)?;
            set_opt(cfg, "neighbors", neighbors)?;
            set_opt(cfg, "variant", variant)?;
        }
        Command::Eval { ways, shots, queries, episodes, opta, classifier, .. } => {
            set_opt(cfg, "ways", ways)?;
            set_opt(cfg, "shots", shots)?;
            set_opt(cfg, "queries", queries)?;
            set_opt(cfg, "episodes", episodes)?;
            set_opt(cfg, "opta_passes", opta)?;
            set_opt(cfg, "classifier", classifier)?;
        }
        Command::Align { passes, epsilon, classifier, .. } => {
            set_opt(cfg, "opta_passes", passes)?;
            set_opt(cfg, "epsilon", epsilon)?;
            set_opt(cfg, "classifier", classifier)?;
        }
        Command::Pretrain { epochs, batch, mask, momentum, epoch_thr, dyce_variant, lr, .. } => {
            set_opt(cfg, "epochs", epochs)?;
            set_opt(cfg, "batch", batch)?;
            set_opt(cfg, "mask_ratio", mask)?;
            set_opt(cfg, "momentum", momentum)?;
            set_opt(cfg, "epoch_threshold", epoch_thr)?;
            set_opt(cfg, "variant", dyce_variant)?;
            set_opt(cfg, "lr", lr)?;
        }
        Command::Ablate { .. } => {}
    }
    set_opt(cfg, "seed", &seed)
}

fn labeled_or_synthetic(path: &Option<PathBuf>, cfg: &RunConfig) -> Result<LabeledEmbeddingSet> {
    match path {
        Some(p) => read_labeled(p),
        None => Ok(gen_synthetic(&cfg.synthetic()?)?.set),
    }
}

fn read_labeled(p: &Path) -> Result<LabeledEmbeddingSet> {
    read_embeddings(p)
        .and_then(EmbeddingFile::into_labeled)
        .map_err(|e| e.context(p.display().to_string()))
}

fn execute(cmd: &Command, cfg: &RunConfig, em: &mut Emitter<'_>) -> Result<()> {
    match cmd {
        Command::Sinkhorn { cost, source, target, r, c, .. } => {
            let scfg = cfg.sinkhorn()?;
            let cost = match (cost, source, target) {
                (Some(p), _, _) => CostMatrix::new(read_matrix(p)?)?,
                (None, Some(s), Some(t)) => {
                    pairwise_cost(&read_embeddings(s)?.embeddings, &read_embeddings(t)?.embeddings, cfg.metric()?)?
                }
                _ => return Err(Error::InvalidArgument("need --cost or --source/--target".into())),
            };
            let (n, m) = cost.shape();
            let r = r.as_ref().map(read_vector).transpose()?.unwrap_or_else(|| ndarray::Array1::from_elem(n, 1.0 / n as f64));
            let c = c.as_ref().map(read_vector).transpose()?.unwrap_or_else(|| ndarray::Array1::from_elem(m, 1.0 / m as f64));
            let plan = sinkhorn(&cost, &Marginals::new(r, c)?, &scfg)?;
            em.emit(
                "sinkhorn",
                json!({
                    "rows": n,
                    "cols": m,
                    "iterations": plan.iterations_used,
                    "max_marginal_violation": plan.max_marginal_violation,
                    "transport_cost": transport_cost(&plan, &cost)?,
                    "plan": rows(&plan.values),
                }),
            )
        }
        Command::GenSynth { out, .. } => {
            let data = gen_synthetic(&cfg.synthetic()?)?;
            write_embeddings(&EmbeddingFile::from(&data.set), out)?;
            em.emit(
                "gen-synth",
                json!({
                    "path": out.display().to_string(),
                    "rows": data.set.len(),
                    "dim": data.set.dim(),
                    "classes": data.centers.nrows(),
                }),
            )
        }
        Command::MemorySim { labels, .. } => {
            let data = labeled_or_synthetic(labels, cfg)?;
            let sim = SimConfig {
                dyce: cfg.dyce()?,
                sinkhorn: cfg.sinkhorn()?,
                batch_rows: 2 * cfg.get::<usize>("batch")?,
                steps: cfg.get("steps")?,
                seed: cfg.seed()?,
            };
            let records = simulate(&data.embeddings, Some(&data.labels), &sim, |r| em.emit("memory-step", r))?;
            em.emit(
                "memory-summary",
                json!({
                    "steps": records.len(),
                    "variant": sim.dyce.variant.as_str(),
                    "mean_purity": mean_purity(&records),
                    "final_dbi": records.last().and_then(|r| r.dbi),
                }),
            )
        }
        Command::Eval { data, .. } => {
            let set = labeled_or_synthetic(data, cfg)?;
            let metrics = evaluate(&set, &cfg.episodes()?, &cfg.pipeline()?)?;
            em.emit("metrics", &metrics)
        }
        Command::Align { support, query, .. } => {
            let s = read_labeled(support)?;
            let q = read_embeddings(query)?.embeddings;
            let pipe = cfg.pipeline()?;
            let (sv, qv) = if pipe.normalize {
                (l2_normalize_rows(&s.embeddings)?, l2_normalize_rows(&q)?)
            } else {
                (s.embeddings.clone(), q.clone())
            };
            let mut protos = class_prototypes(&sv, &s.labels)?;
            if pipe.opta.passes > 0 {
                check_query_budget(sv.nrows(), qv.nrows())?;
                protos = opta_iterate(&protos, &qv, &pipe.opta)?;
            }
            let labels = match pipe.classifier {
                ClassifierKind::Logreg => fit_logistic(&protos, &pipe.logistic)?.predict(&qv)?,
                ClassifierKind::Proto => predict_nearest(&protos, &qv)?,
            };
            em.emit(
                "alignment",
                json!({
                    "passes": pipe.opta.passes,
                    "class_order": protos.class_order,
                    "prototypes": rows(&protos.values),
                    "labels": labels,
                }),
            )
        }
        Command::Pretrain { data, out, .. } => {
            let (x, labels) = match data {
                Some(p) => {
                    let f = read_embeddings(p).map_err(|e| e.context(p.display().to_string()))?;
                    (f.embeddings, f.labels)
                }
                None => {
                    let s = gen_synthetic(&cfg.synthetic()?)?.set;
                    (s.embeddings, Some(s.labels))
                }
            };
            let train = cfg.train()?;
            let result = run_pretraining(&train, &x, labels.as_deref(), |r| em.emit("epoch", r))?;
            std::fs::write(out, encode_encoder(&result.trainer.teacher))?;
            em.emit(
                "pretrain-summary",
                json!({
                    "bootstrap_dbi": result.trace.bootstrap_dbi,
                    "bootstrap_epoch": result.trace.bootstrap_epoch,
                    "final_dbi": result.trace.epochs.last().and_then(|e| e.dbi),
                    "encoder": out.display().to_string(),
                }),
            )
        }
        Command::Ablate { axis, values, data } => {
            let axis: AblationAxis = axis.parse()?;
            let set = labeled_or_synthetic(data, cfg)?;
            ablate(cfg, axis, values.as_deref(), &set, |r| em.emit("ablation", r))?;
            Ok(())
        }
    }
}

fn error_record(e: &Error) -> String {
    let mut v = json!({ "kind": "error", "error_kind": e.root().kind(), "message": e.to_string() });
    if let Error::Format { offset, .. } = e.root() {
        v["offset"] = json!(offset);
    }
    v.to_string()
}

/// Runs the CLI on `args` (including the program name).
pub fn run(args: &[String], env_seed: Option<&str>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    let common = &cli.common;
    let outcome = (|| -> Result<()> {
        let mut cfg = resolve_config(common, env_seed)?;
        apply_flags(&mut cfg, &cli.command, common.seed)?;
        let mut em = Emitter { out, hash: cfg.hash(), seed: cfg.seed()? };
        em.emit("config", json!({ "command": command_name(&cli.command), "config": cfg.values() }))?;
        execute(&cli.command, &cfg, &mut em)
    })();
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", error_record(&e));
            1
        }
    }
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Sinkhorn { .. } => "sinkhorn",
        Command::GenSynth { .. } => "gen-synth",
        Command::MemorySim { .. } => "memory-sim",
        Command::Eval { .. } => "eval",
        Command::Align { .. } => "align",
        Command::Pretrain { .. } => "pretrain",
        Command::Ablate { .. } => "ablate",
    }
}
