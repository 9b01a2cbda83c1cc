//! Streams a fixed embedding set through the memory and records diagnostics.

use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{DyceConfig, MemoryState};
use crate::episode::stream_batches;
use crate::ot::SinkhornConfig;
use crate::{Embeddings, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimConfig {
    pub dyce: DyceConfig,
    pub sinkhorn: SinkhornConfig,
    /// Rows per update, i.e. `2B`.
    pub batch_rows: usize,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub dbi: Option<f64>,
    pub purity: Option<f64>,
    pub filled: usize,
}

/// Runs `cfg.steps` memory steps over shuffled batches of `embeddings`.
///
/// Before the memory is full batches are stored; the step that fills it
/// also bootstraps the partitions. Afterwards every step first mines
/// neighbours (for purity, when labels are given) and then updates.
pub fn simulate(
    embeddings: &Embeddings,
    labels: Option<&[u32]>,
    cfg: &SimConfig,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    cfg.dyce.validate()?;
    cfg.dyce.check_batch_rows(cfg.batch_rows)?;
    if let Some(l) = labels {
        if l.len() != embeddings.nrows() {
            return Err(Error::Shape(format!("{} labels for {} rows", l.len(), embeddings.nrows())));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_epoch = embeddings.nrows() / cfg.batch_rows.max(1);
    if per_epoch == 0 {
        return Err(Error::Capacity(format!(
            "{} rows cannot supply a batch of {}",
            embeddings.nrows(),
            cfg.batch_rows
        )));
    }
    let epochs = cfg.steps.div_ceil(per_epoch);
    let batches = stream_batches(embeddings.nrows(), cfg.batch_rows, epochs, &mut rng)?;

    let mut memory = MemoryState::new(&cfg.dyce)?;
    let mut records = Vec::with_capacity(cfg.steps);
    for (step, idx) in batches.into_iter().take(cfg.steps).enumerate() {
        let batch = embeddings.select(Axis(0), &idx);
        let batch_labels: Option<Vec<u32>> = labels.map(|l| idx.iter().map(|&i| l[i]).collect());
        let mut purity = None;

        if !memory.is_full() {
            memory.ingest_fill(&batch, batch_labels.as_deref())?;
            if memory.is_full() {
                memory.bootstrap_partitions(&cfg.dyce, cfg.seed)?;
            }
        } else {
            if cfg.dyce.neighbors > 0 {
                let enhanced = memory.topk_enhance(&batch, &cfg.dyce)?;
                if let Some(bl) = batch_labels.as_deref() {
                    purity = Some(memory.positive_purity(&enhanced, bl)?);
                }
            }
            memory.update_memory(&batch, batch_labels.as_deref(), &cfg.dyce, &cfg.sinkhorn)?;
        }

        let record = StepRecord {
            step,
            dbi: if memory.initialized() { memory.dbi().ok() } else { None },
            purity,
            filled: memory.filled(),
        };
        on_step(&record)?;
        records.push(record);
    }
    Ok(records)
}

/// Mean of the defined purity values, if any.
pub fn mean_purity(records: &[StepRecord]) -> Option<f64> {
    let vals: Vec<f64> = records.iter().filter_map(|r| r.purity).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}
