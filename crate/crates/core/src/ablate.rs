//! Ablation driver: pretrain and evaluate once per value of one hyperparameter.

use ndarray::Axis;
use serde::Serialize;

use crate::config::RunConfig;
use crate::episode::{evaluate, LabeledEmbeddingSet};
use crate::pretrain::run_pretraining;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    MaskRatio,
    Lambda,
    K,
    P,
    M,
    Variant,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 6] = [Self::MaskRatio, Self::Lambda, Self::K, Self::P, Self::M, Self::Variant];

    pub fn name(self) -> &'static str {
        match self {
            Self::MaskRatio => "mask_ratio",
            Self::Lambda => "lambda",
            Self::K => "k",
            Self::P => "P",
            Self::M => "M",
            Self::Variant => "variant",
        }
    }

    /// Config key the axis writes to.
    pub fn key(self) -> &'static str {
        match self {
            Self::MaskRatio => "mask_ratio",
            Self::Lambda => "lambda",
            Self::K => "neighbors",
            Self::P => "partitions",
            Self::M => "memory_size",
            Self::Variant => "variant",
        }
    }

    pub fn default_grid(self) -> &'static [&'static str] {
        match self {
            Self::MaskRatio => &["0.1", "0.3", "0.5", "0.7"],
            Self::Lambda => &["0", "0.1", "0.3", "0.5"],
            Self::K => &["1", "3", "5", "10"],
            Self::P => &["100", "200", "300", "500"],
            Self::M => &["2048", "4096", "8192", "12288"],
            Self::Variant => &["fifo", "kmeans", "full"],
        }
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "mask_ratio" | "mask" => Ok(Self::MaskRatio),
            "lambda" => Ok(Self::Lambda),
            "k" | "neighbors" => Ok(Self::K),
            "P" | "p" | "partitions" => Ok(Self::P),
            "M" | "m" | "memory_size" => Ok(Self::M),
            "variant" => Ok(Self::Variant),
            _ => Err(Error::InvalidArgument(format!(
                "unknown ablation axis `{s}` (expected mask_ratio, lambda, k, P, M or variant)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRecord {
    pub axis: &'static str,
    pub value: String,
    pub config_hash: String,
    pub seed: u64,
    pub final_loss: f64,
    pub final_dbi: Option<f64>,
    pub mean_purity: Option<f64>,
    pub mean_accuracy: f64,
    pub ci95_half_width: f64,
}

/// Cell values for `axis`: the explicit list or the default grid.
pub fn cells(axis: AblationAxis, values: Option<&[String]>) -> Vec<String> {
    match values {
        Some(v) => v.to_vec(),
        None => axis.default_grid().iter().map(|s| s.to_string()).collect(),
    }
}

/// Pretrains on `data` for every cell, then evaluates episodes on the
/// teacher embeddings of the same rows.
pub fn run_cell(base: &RunConfig, axis: AblationAxis, value: &str, data: &LabeledEmbeddingSet) -> Result<AblationRecord> {
    let mut cfg = base.clone();
    cfg.set(axis.key(), value)?;
    let train = cfg.train()?;
    let result = run_pretraining(&train, &data.embeddings, Some(&data.labels), |_| Ok(()))?;
    let embedded = result.trainer.teacher.forward(&data.embeddings)?;
    let eval_set = LabeledEmbeddingSet::new(embedded, data.labels.clone())?;
    let metrics = evaluate(&eval_set, &cfg.episodes()?, &cfg.pipeline()?)?;
    let epochs = &result.trace.epochs;
    let purities: Vec<f64> = epochs.iter().filter_map(|e| e.purity).collect();
    Ok(AblationRecord {
        axis: axis.name(),
        value: value.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed()?,
        final_loss: epochs.last().map_or(f64::NAN, |e| e.mean_loss),
        final_dbi: epochs.last().and_then(|e| e.dbi),
        mean_purity: (!purities.is_empty()).then(|| purities.iter().sum::<f64>() / purities.len() as f64),
        mean_accuracy: metrics.mean_accuracy,
        ci95_half_width: metrics.ci95_half_width,
    })
}

pub fn ablate(
    base: &RunConfig,
    axis: AblationAxis,
    values: Option<&[String]>,
    data: &LabeledEmbeddingSet,
    mut on_record: impl FnMut(&AblationRecord) -> Result<()>,
) -> Result<Vec<AblationRecord>> {
    if data.embeddings.len_of(Axis(0)) == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut out = Vec::new();
    for value in cells(axis, values) {
        let rec = run_cell(base, axis, &value, data).map_err(|e| e.context(format!("{} = {value}", axis.name())))?;
        on_record(&rec)?;
        out.push(rec);
    }
    Ok(out)
}
