//! Flat `key = value` run configuration.
//!
//! Values are resolved from built-in defaults, then an optional config file,
//! then explicit overrides (command-line flags). Unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::episode::{ClassifierKind, EpisodeSpec, PipelineConfig, SyntheticSpec};
use crate::loss::{LossConfig, PositiveScope};
use crate::memory::{DyceConfig, PrototypeRule, Variant};
use crate::opta::{LogisticConfig, OptaConfig};
use crate::ot::{Metric, SinkhornConfig};
use crate::pretrain::TrainConfig;
use crate::{Error, Result};

pub const SEED_ENV: &str = "OTFS_SEED";

/// Every accepted key with its default value and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed"),
    // transport
    ("epsilon", "0.05", "entropic regularisation"),
    ("max_iter", "1000", "Sinkhorn iteration cap"),
    ("tol", "1e-6", "Sinkhorn marginal tolerance"),
    ("metric", "sqeuclidean", "cost metric: sqeuclidean, euclidean or cosine"),
    // memory
    ("memory_size", "512", "memory capacity M"),
    ("partitions", "16", "memory partitions P"),
    ("neighbors", "3", "mined neighbours per row k"),
    ("epoch_threshold", "0", "first epoch with neighbour mining"),
    ("variant", "full", "memory variant: full, kmeans or fifo"),
    ("prototype_rule", "ema", "prototype update: ema or mean"),
    ("prototype_ema", "0.9", "prototype EMA rate"),
    ("memory_normalize", "true", "L2-normalise memory rows"),
    // loss
    ("lambda", "0.1", "negative-term weight"),
    ("tau", "2", "temperature"),
    ("positive_scope", "all", "positive rows: all or originals"),
    // pretraining
    ("batch", "32", "samples per batch B"),
    ("epochs", "50", "pretraining epochs"),
    ("lr", "0.5", "student learning rate"),
    ("momentum", "0.99", "teacher EMA rate m"),
    ("mask_ratio", "0.3", "student input mask ratio"),
    ("noise_std", "0.3", "view noise standard deviation"),
    ("d_out", "16", "encoder output dimension"),
    ("steps", "200", "memory-sim steps"),
    // episodes
    ("ways", "5", "classes per episode N"),
    ("shots", "1", "supports per class K"),
    ("queries", "15", "queries per class Q"),
    ("episodes", "2000", "episodes E"),
    ("opta_passes", "1", "alignment passes (0 disables)"),
    ("barycentric", "true", "renormalise transported prototypes"),
    ("classifier", "logreg", "classifier: logreg or proto"),
    ("normalize", "true", "L2-normalise episode embeddings"),
    ("logreg_reg", "1e-3", "logistic L2 penalty"),
    ("logreg_iter", "500", "logistic GD iterations"),
    ("logreg_lr", "0.1", "logistic GD step"),
    // synthetic data
    ("classes", "20", "synthetic classes"),
    ("dim", "16", "synthetic dimension"),
    ("samples_per_class", "100", "synthetic rows per class"),
    ("separation", "4", "RMS center distance in within-class stds"),
    ("within_std", "1", "within-class standard deviation"),
    ("bias_shift", "0", "support subpopulation offset in stds"),
    ("support_pool", "0", "support subpopulation rows per class"),
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        let key = key.trim().replace('-', "_");
        if !known(&key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        self.values.insert(key, value.into().trim().to_string());
        Ok(())
    }

    /// Applies a `key = value` file. Blank lines and `#` comments are skipped.
    pub fn apply_file_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            self.set(k, v).map_err(|e| e.context(format!("line {}", no + 1)))?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("key `{key}` not in defaults"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse().map_err(|e| Error::Config(format!("{key} = `{raw}`: {e}")))
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// Hex SHA-256 of the sorted `key=value` lines.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn sinkhorn(&self) -> Result<SinkhornConfig> {
        let c = SinkhornConfig {
            epsilon: self.get("epsilon")?,
            max_iterations: self.get("max_iter")?,
            tolerance: self.get("tol")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn metric(&self) -> Result<Metric> {
        self.get("metric")
    }

    pub fn dyce(&self) -> Result<DyceConfig> {
        let c = DyceConfig {
            capacity: self.get("memory_size")?,
            partitions: self.get("partitions")?,
            neighbors: self.get("neighbors")?,
            epoch_threshold: self.get("epoch_threshold")?,
            prototype_ema_rate: self.get("prototype_ema")?,
            variant: self.get::<Variant>("variant")?,
            prototype_rule: self.get::<PrototypeRule>("prototype_rule")?,
            normalize: self.get("memory_normalize")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn loss(&self) -> Result<LossConfig> {
        let scope = match self.raw("positive_scope") {
            "all" => PositiveScope::AllRows,
            "originals" => PositiveScope::OriginalsOnly,
            other => return Err(Error::Config(format!("positive_scope = `{other}`"))),
        };
        let c = LossConfig { lambda: self.get("lambda")?, tau: self.get("tau")?, positive_scope: scope };
        c.validate()?;
        Ok(c)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let c = TrainConfig {
            batch: self.get("batch")?,
            epochs: self.get("epochs")?,
            learning_rate: self.get("lr")?,
            teacher_momentum: self.get("momentum")?,
            mask_ratio: self.get("mask_ratio")?,
            noise_std: self.get("noise_std")?,
            d_out: self.get("d_out")?,
            loss: self.loss()?,
            dyce: self.dyce()?,
            sinkhorn: self.sinkhorn()?,
            seed: self.seed()?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn episodes(&self) -> Result<EpisodeSpec> {
        let c = EpisodeSpec {
            ways: self.get("ways")?,
            shots: self.get("shots")?,
            queries: self.get("queries")?,
            episodes: self.get("episodes")?,
            seed: self.seed()?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn opta(&self) -> Result<OptaConfig> {
        let c = OptaConfig {
            passes: self.get("opta_passes")?,
            sinkhorn: self.sinkhorn()?,
            metric: self.metric()?,
            barycentric: self.get("barycentric")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        Ok(PipelineConfig {
            opta: self.opta()?,
            classifier: self.get::<ClassifierKind>("classifier")?,
            logistic: LogisticConfig {
                reg: self.get("logreg_reg")?,
                iterations: self.get("logreg_iter")?,
                learning_rate: self.get("logreg_lr")?,
            },
            normalize: self.get("normalize")?,
        })
    }

    pub fn synthetic(&self) -> Result<SyntheticSpec> {
        let c = SyntheticSpec {
            classes: self.get("classes")?,
            dim: self.get("dim")?,
            center_scale: 1.0,
            within_std: self.get("within_std")?,
            bias_shift: self.get("bias_shift")?,
            samples_per_class: self.get("samples_per_class")?,
            support_pool_per_class: self.get("support_pool")?,
            seed: self.seed()?,
        }
        .with_separation(self.get("separation")?);
        c.validate()?;
        Ok(c)
    }
}

/// Default seed: `OTFS_SEED` when set, else 0.
pub fn seed_from_env(value: Option<&str>) -> Result<Option<u64>> {
    value
        .map(|v| v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV} = `{v}` is not a u64"))))
        .transpose()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_every_section() {
        let c = RunConfig::default();
        assert_eq!(c.sinkhorn().unwrap(), SinkhornConfig::default());
        assert_eq!(c.dyce().unwrap(), DyceConfig::default());
        assert_eq!(c.loss().unwrap(), LossConfig::default());
        c.train().unwrap();
        c.episodes().unwrap();
        c.pipeline().unwrap();
        c.synthetic().unwrap();
    }

    #[test]
    fn precedence_per_key() {
        let mut c = RunConfig::default();
        c.apply_file_text("# comment\nepsilon = 0.1\nneighbors=5\n\n").unwrap();
        c.set("neighbors", "7").unwrap();
        assert_eq!(c.get::<f64>("epsilon").unwrap(), 0.1);
        assert_eq!(c.get::<usize>("neighbors").unwrap(), 7);
        assert_eq!(c.get::<usize>("partitions").unwrap(), 16);
    }

    #[test]
    fn unknown_and_malformed() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("bogus", "1"), Err(Error::Config(_))));
        assert!(c.apply_file_text("epsilon 0.1").is_err());
        assert!(c.apply_file_text("nope = 3").is_err());
        c.set("epsilon", "abc").unwrap();
        assert!(c.sinkhorn().is_err());
        c.set("mask-ratio", "0.5").unwrap();
        assert_eq!(c.raw("mask_ratio"), "0.5");
    }

    #[test]
    fn hash_tracks_values() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        b.set("seed", "3").unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn env_seed() {
        assert_eq!(seed_from_env(None).unwrap(), None);
        assert_eq!(seed_from_env(Some("42")).unwrap(), Some(42));
        assert!(seed_from_env(Some("x")).is_err());
    }
}
