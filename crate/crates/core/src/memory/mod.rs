//! Dynamic clustered memory.
//!
//! The memory stores up to `M` embeddings split into `P` partitions, each
//! summarised by a prototype. It serves two paths:
//!
//! 1. **Enhancement** ([`MemoryState::topk_enhance`]): every batch row is
//!    assigned to its nearest prototype and the `k` closest stored
//!    embeddings of that partition are appended to the batch as extra
//!    positives.
//! 2. **Update** ([`MemoryState::update_memory`]): the batch is assigned to
//!    partitions through an equipartitioned transport plan, prototypes move
//!    towards their new members by EMA, and the `2B` oldest slots are evicted.
//!
//! Until the memory is full for the first time batches are simply stored;
//! then a single k-means pass bootstraps the partitions.

pub mod kmeans;
pub mod metrics;
pub mod sim;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::linalg::{argmax, mean_of_rows, norm, sq_dist};
use crate::ot::{pairwise_cost, sinkhorn_relaxed, Marginals, Metric, SinkhornConfig, TransportPlan};
use crate::{Embeddings, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Transport-based partition updates.
    #[default]
    Full,
    /// No partitions; plain queue with global nearest neighbours.
    Fifo,
    /// Partitions kept, but batch rows join their nearest prototype.
    Kmeans,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Fifo, Variant::Kmeans, Variant::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Fifo => "fifo",
            Variant::Kmeans => "kmeans",
        }
    }

    fn partitioned(self) -> bool {
        self != Variant::Fifo
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "fifo" => Ok(Variant::Fifo),
            "kmeans" => Ok(Variant::Kmeans),
            other => Err(Error::InvalidArgument(format!("unknown memory variant `{other}`"))),
        }
    }
}

/// How prototypes follow their partitions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrototypeRule {
    /// `γ ← η γ + (1 − η) · mean(new members)` for every partition that received rows.
    #[default]
    Ema,
    /// Exact mean of the current members, recomputed after eviction.
    PartitionMean,
}

impl FromStr for PrototypeRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ema" => Ok(PrototypeRule::Ema),
            "mean" | "partition-mean" => Ok(PrototypeRule::PartitionMean),
            other => Err(Error::InvalidArgument(format!("unknown prototype rule `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DyceConfig {
    pub capacity: usize,
    pub partitions: usize,
    pub neighbors: usize,
    /// Epoch from which the enhancement path is active.
    pub epoch_threshold: usize,
    pub prototype_ema_rate: f64,
    pub variant: Variant,
    pub prototype_rule: PrototypeRule,
    /// L2-normalise embeddings before they enter the memory.
    pub normalize: bool,
}

impl Default for DyceConfig {
    fn default() -> Self {
        Self {
            capacity: 512,
            partitions: 16,
            neighbors: 3,
            epoch_threshold: 0,
            prototype_ema_rate: 0.9,
            variant: Variant::Full,
            prototype_rule: PrototypeRule::Ema,
            normalize: true,
        }
    }
}

impl DyceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.partitions == 0 || self.partitions > self.capacity {
            return Err(Error::InvalidArgument(format!(
                "need capacity >= partitions >= 1 (capacity {}, partitions {})",
                self.capacity, self.partitions
            )));
        }
        if !(0.0..=1.0).contains(&self.prototype_ema_rate) {
            return Err(Error::InvalidArgument(format!(
                "prototype EMA rate {} outside [0, 1]",
                self.prototype_ema_rate
            )));
        }
        Ok(())
    }

    /// Checks that batches of `rows` rows tile the capacity exactly.
    pub fn check_batch_rows(&self, rows: usize) -> Result<()> {
        if rows == 0 || rows > self.capacity || !self.capacity.is_multiple_of(rows) {
            return Err(Error::InvalidArgument(format!(
                "capacity {} is not a multiple of the batch row count {rows}",
                self.capacity
            )));
        }
        Ok(())
    }

    pub fn enhancement_active(&self, epoch: usize) -> bool {
        epoch >= self.epoch_threshold
    }
}

/// One stored embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub embedding: Vec<f64>,
    /// Insertion stamp from a monotone clock; smaller means older.
    pub stamp: u64,
    pub partition: Option<usize>,
    /// Ground-truth class, when the stream carries one (synthetic runs).
    pub label: Option<u32>,
}

impl Slot {
    fn view(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.embedding.as_slice())
    }
}

#[derive(Clone, Debug)]
pub struct MemoryState {
    capacity: usize,
    normalize: bool,
    dim: Option<usize>,
    slots: Vec<Slot>,
    prototypes: Option<Array2<f64>>,
    clock: u64,
    initialized: bool,
}

/// Batch rows followed by the mined neighbours.
#[derive(Clone, Debug, PartialEq)]
pub struct EnhancedBatch {
    pub rows: Embeddings,
    /// Originating batch row for every row; originals map to themselves.
    pub source_index: Vec<usize>,
    /// Memory slot each neighbour row was copied from.
    pub memory_slot: Vec<Option<usize>>,
    pub batch_rows: usize,
    pub neighbors: usize,
}

impl EnhancedBatch {
    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    /// Rows appended after the originals.
    pub fn neighbor_rows(&self) -> ndarray::ArrayView2<'_, f64> {
        self.rows.slice(ndarray::s![self.batch_rows.., ..])
    }
}

/// What one post-fill update did.
#[derive(Clone, Debug)]
pub struct UpdateReport {
    /// Transport plan used for assignment (variant `full` only).
    pub plan: Option<TransportPlan>,
    /// Partition of each incoming row (empty for `fifo`).
    pub assignments: Vec<usize>,
    pub evicted_stamps: Vec<u64>,
}

impl MemoryState {
    pub fn new(cfg: &DyceConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            capacity: cfg.capacity,
            normalize: cfg.normalize,
            dim: None,
            slots: Vec::with_capacity(cfg.capacity),
            prototypes: None,
            clock: 0,
            initialized: false,
        })
    }

    /// Builds a state from explicit slots, e.g. to replay a known history.
    /// `clock` must exceed every stamp.
    pub fn from_parts(
        cfg: &DyceConfig,
        slots: Vec<Slot>,
        prototypes: Option<Array2<f64>>,
        clock: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if slots.len() > cfg.capacity {
            return Err(Error::Precondition(format!(
                "{} slots exceed capacity {}",
                slots.len(),
                cfg.capacity
            )));
        }
        if slots.iter().any(|s| s.stamp >= clock) {
            return Err(Error::InvalidArgument("clock must exceed every slot stamp".into()));
        }
        let dim = slots.first().map(|s| s.embedding.len());
        if let Some(d) = dim {
            if slots.iter().any(|s| s.embedding.len() != d) {
                return Err(Error::Shape("slots have differing dimensions".into()));
            }
        }
        let initialized = match &prototypes {
            Some(p) => {
                if p.nrows() != cfg.partitions {
                    return Err(Error::Shape(format!(
                        "{} prototypes for {} partitions",
                        p.nrows(),
                        cfg.partitions
                    )));
                }
                if slots.iter().any(|s| s.partition.is_none_or(|j| j >= cfg.partitions)) {
                    return Err(Error::InvalidArgument("every slot needs a valid partition".into()));
                }
                true
            }
            None => false,
        };
        Ok(Self {
            capacity: cfg.capacity,
            normalize: cfg.normalize,
            dim,
            slots,
            prototypes,
            clock,
            initialized,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn filled(&self) -> usize {
        self.slots.len()
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() == self.capacity
    }

    pub fn initialized(&self) -> bool {
        self.initialized
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn prototypes(&self) -> Option<&Array2<f64>> {
        self.prototypes.as_ref()
    }

    /// Age of every slot: `clock − stamp`, so the oldest slot has the largest age.
    pub fn ages(&self) -> Vec<u64> {
        self.slots.iter().map(|s| self.clock - s.stamp).collect()
    }

    pub fn assignments(&self) -> Vec<Option<usize>> {
        self.slots.iter().map(|s| s.partition).collect()
    }

    fn prepare(&self, batch: &Embeddings) -> Result<Embeddings> {
        if let Some(d) = self.dim {
            if batch.ncols() != d {
                return Err(Error::Shape(format!("batch dim {} but memory dim {d}", batch.ncols())));
            }
        }
        if !batch.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("batch contains non-finite values".into()));
        }
        if self.normalize {
            crate::linalg::l2_normalize_rows(batch)
        } else {
            Ok(batch.clone())
        }
    }

    fn check_labels(batch: &Embeddings, labels: Option<&[u32]>) -> Result<()> {
        match labels {
            Some(l) if l.len() != batch.nrows() => Err(Error::Shape(format!(
                "{} labels for {} batch rows",
                l.len(),
                batch.nrows()
            ))),
            _ => Ok(()),
        }
    }

    fn push_rows(&mut self, rows: &Embeddings, labels: Option<&[u32]>, partitions: Option<&[usize]>) {
        self.dim.get_or_insert(rows.ncols());
        for (i, row) in rows.axis_iter(Axis(0)).enumerate() {
            self.slots.push(Slot {
                embedding: row.to_vec(),
                stamp: self.clock,
                partition: partitions.map(|p| p[i]),
                label: labels.map(|l| l[i]),
            });
            self.clock += 1;
        }
    }

    /// Stores a batch while the memory is still filling up.
    pub fn ingest_fill(&mut self, batch: &Embeddings, labels: Option<&[u32]>) -> Result<()> {
        if self.is_full() {
            return Err(Error::Precondition("memory is full; use update_memory".into()));
        }
        if batch.nrows() > self.capacity - self.filled() {
            return Err(Error::Precondition(format!(
                "batch of {} rows does not fit in {} free slots",
                batch.nrows(),
                self.capacity - self.filled()
            )));
        }
        Self::check_labels(batch, labels)?;
        let rows = self.prepare(batch)?;
        self.push_rows(&rows, labels, None);
        Ok(())
    }

    /// One-off k-means over the full memory to seed prototypes and partitions.
    pub fn bootstrap_partitions(&mut self, cfg: &DyceConfig, seed: u64) -> Result<()> {
        if !self.is_full() {
            return Err(Error::Precondition(format!(
                "bootstrap needs a full memory ({} of {} slots)",
                self.filled(),
                self.capacity
            )));
        }
        if self.initialized {
            return Err(Error::Precondition("partitions already bootstrapped".into()));
        }
        if cfg.variant.partitioned() {
            let points: Vec<&[f64]> = self.slots.iter().map(|s| s.embedding.as_slice()).collect();
            let fit = kmeans::fit(&points, cfg.partitions, seed)?;
            for (slot, a) in self.slots.iter_mut().zip(fit.assignments) {
                slot.partition = Some(a);
            }
            self.prototypes = Some(fit.centroids);
        }
        self.initialized = true;
        Ok(())
    }

    /// Path (i): append the `k` nearest memory embeddings of every batch row.
    ///
    /// The search is restricted to the partition of the row's nearest
    /// prototype; when that partition has fewer than `k` members the
    /// remainder comes from the nearest slots of the whole store. The `fifo`
    /// variant always searches the whole store.
    pub fn topk_enhance(&self, batch: &Embeddings, cfg: &DyceConfig) -> Result<EnhancedBatch> {
        if !self.initialized {
            return Err(Error::Precondition("memory partitions not bootstrapped".into()));
        }
        let queries = self.prepare(batch)?;
        let k = cfg.neighbors;
        let n = batch.nrows();
        let d = batch.ncols();
        let k_eff = k.min(self.slots.len());
        if k_eff < k {
            return Err(Error::Precondition(format!(
                "memory holds {} slots, fewer than k = {k}",
                self.slots.len()
            )));
        }

        let nu = match (&self.prototypes, cfg.variant.partitioned()) {
            (Some(p), true) => Some(assign_nearest_prototype(&queries, p)?),
            _ => None,
        };

        let mut rows = Array2::<f64>::zeros((n * (k + 1), d));
        rows.slice_mut(ndarray::s![..n, ..]).assign(batch);
        let mut source_index: Vec<usize> = (0..n).collect();
        let mut memory_slot = vec![None; n];

        for (i, q) in queries.axis_iter(Axis(0)).enumerate() {
            let chosen = self.neighbours_of(q, nu.as_ref().map(|v| v[i]), k);
            for (t, &slot) in chosen.iter().enumerate() {
                rows.row_mut(n + i * k + t).assign(&self.slots[slot].view());
                source_index.push(i);
                memory_slot.push(Some(slot));
            }
        }
        Ok(EnhancedBatch { rows, source_index, memory_slot, batch_rows: n, neighbors: k })
    }

    fn neighbours_of(&self, q: ArrayView1<f64>, partition: Option<usize>, k: usize) -> Vec<usize> {
        if k == 0 {
            return Vec::new();
        }
        let by_distance = |mut idx: Vec<usize>| {
            let mut keyed: Vec<(f64, usize)> =
                idx.drain(..).map(|s| (sq_dist(q, self.slots[s].view()), s)).collect();
            keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            keyed.into_iter().map(|(_, s)| s).collect::<Vec<_>>()
        };
        let mut chosen: Vec<usize> = match partition {
            Some(p) => {
                let members: Vec<usize> = (0..self.slots.len())
                    .filter(|&s| self.slots[s].partition == Some(p))
                    .collect();
                by_distance(members).into_iter().take(k).collect()
            }
            None => Vec::new(),
        };
        if chosen.len() < k {
            let global = by_distance((0..self.slots.len()).collect());
            for s in global {
                if chosen.len() == k {
                    break;
                }
                if !chosen.contains(&s) {
                    chosen.push(s);
                }
            }
        }
        chosen
    }

    /// Path (ii): add a batch to the full memory and evict the oldest rows.
    pub fn update_memory(
        &mut self,
        batch: &Embeddings,
        labels: Option<&[u32]>,
        cfg: &DyceConfig,
        sinkhorn_cfg: &SinkhornConfig,
    ) -> Result<UpdateReport> {
        if !self.is_full() {
            return Err(Error::Precondition(format!(
                "update needs a full memory ({} of {} slots)",
                self.filled(),
                self.capacity
            )));
        }
        if !self.initialized {
            return Err(Error::Precondition("memory partitions not bootstrapped".into()));
        }
        cfg.check_batch_rows(batch.nrows())?;
        Self::check_labels(batch, labels)?;
        let rows = self.prepare(batch)?;

        let mut plan = None;
        let assignments: Vec<usize> = match cfg.variant {
            Variant::Fifo => Vec::new(),
            Variant::Kmeans => assign_nearest_prototype(&rows, self.require_prototypes()?)?,
            Variant::Full => {
                let protos = self.require_prototypes()?;
                let cost = pairwise_cost(&rows, protos, Metric::SquaredEuclidean)?;
                let marg = Marginals::uniform(rows.nrows(), protos.nrows())?;
                let p = sinkhorn_relaxed(&cost, &marg, sinkhorn_cfg)?;
                let a = p
                    .values
                    .axis_iter(Axis(0))
                    .map(|r| argmax(r.iter().copied()).expect("non-empty plan row"))
                    .collect();
                plan = Some(p);
                a
            }
        };

        let partitions = (!assignments.is_empty()).then_some(assignments.as_slice());
        self.push_rows(&rows, labels, partitions);

        if cfg.variant.partitioned() && cfg.prototype_rule == PrototypeRule::Ema {
            let eta = cfg.prototype_ema_rate;
            let protos = self.prototypes.as_mut().expect("checked above");
            for j in 0..protos.nrows() {
                let members: Vec<usize> = (0..rows.nrows()).filter(|&i| assignments[i] == j).collect();
                if let Some(mean) = mean_of_rows(&rows, &members) {
                    let mut g = protos.row_mut(j);
                    g.zip_mut_with(&mean, |gj, mj| *gj = eta * *gj + (1.0 - eta) * mj);
                }
            }
        }

        let evicted_stamps = self.evict_oldest(rows.nrows());

        if cfg.variant.partitioned() && cfg.prototype_rule == PrototypeRule::PartitionMean {
            self.recompute_partition_means();
        }
        Ok(UpdateReport { plan, assignments, evicted_stamps })
    }

    fn require_prototypes(&self) -> Result<&Array2<f64>> {
        self.prototypes
            .as_ref()
            .ok_or_else(|| Error::Precondition("memory has no prototypes".into()))
    }

    fn evict_oldest(&mut self, count: usize) -> Vec<u64> {
        let mut order: Vec<(u64, usize)> =
            self.slots.iter().enumerate().map(|(i, s)| (s.stamp, i)).collect();
        order.sort_unstable();
        let mut doomed = vec![false; self.slots.len()];
        let mut evicted: Vec<u64> = Vec::with_capacity(count);
        for &(stamp, i) in order.iter().take(count) {
            doomed[i] = true;
            evicted.push(stamp);
        }
        let mut idx = 0;
        self.slots.retain(|_| {
            let keep = !doomed[idx];
            idx += 1;
            keep
        });
        evicted
    }

    fn recompute_partition_means(&mut self) {
        let Some(protos) = self.prototypes.as_mut() else { return };
        let d = protos.ncols();
        let mut sums = Array2::<f64>::zeros(protos.dim());
        let mut counts = vec![0usize; protos.nrows()];
        for s in &self.slots {
            if let Some(p) = s.partition {
                counts[p] += 1;
                for c in 0..d {
                    sums[[p, c]] += s.embedding[c];
                }
            }
        }
        for (j, &n) in counts.iter().enumerate() {
            if n > 0 {
                let mean = &sums.row(j) / n as f64;
                protos.row_mut(j).assign(&mean);
            }
        }
    }

    /// Davies-Bouldin index over the memory partitions.
    pub fn dbi(&self) -> Result<f64> {
        let Some(protos) = self.prototypes.as_ref() else {
            return Err(Error::MetricUndefined("memory has no partitions".into()));
        };
        let points: Vec<&[f64]> = self.slots.iter().map(|s| s.embedding.as_slice()).collect();
        let labels: Vec<usize> = self
            .slots
            .iter()
            .map(|s| s.partition.ok_or_else(|| Error::MetricUndefined("unassigned slot".into())))
            .collect::<Result<_>>()?;
        metrics::davies_bouldin(&points, &labels, protos.nrows())
    }

    /// Fraction of mined neighbours whose class matches their source row.
    pub fn positive_purity(&self, enhanced: &EnhancedBatch, batch_labels: &[u32]) -> Result<f64> {
        if enhanced.neighbors == 0 {
            return Err(Error::MetricUndefined("no neighbours were mined (k = 0)".into()));
        }
        if batch_labels.len() != enhanced.batch_rows {
            return Err(Error::Shape(format!(
                "{} labels for {} batch rows",
                batch_labels.len(),
                enhanced.batch_rows
            )));
        }
        let mut hits = 0usize;
        let mut total = 0usize;
        for (row, slot) in enhanced.memory_slot.iter().enumerate().skip(enhanced.batch_rows) {
            let slot = slot.ok_or_else(|| Error::InvalidArgument(format!("row {row} has no slot")))?;
            let label = self
                .slots
                .get(slot)
                .and_then(|s| s.label)
                .ok_or_else(|| Error::InvalidArgument(format!("memory slot {slot} has no label")))?;
            total += 1;
            if label == batch_labels[enhanced.source_index[row]] {
                hits += 1;
            }
        }
        Ok(hits as f64 / total as f64)
    }
}

/// Nearest prototype (squared euclidean) for every row; ties go to the lowest index.
pub fn assign_nearest_prototype(batch: &Embeddings, prototypes: &Array2<f64>) -> Result<Vec<usize>> {
    if batch.ncols() != prototypes.ncols() {
        return Err(Error::Shape(format!(
            "batch dim {} but prototype dim {}",
            batch.ncols(),
            prototypes.ncols()
        )));
    }
    if prototypes.nrows() == 0 {
        return Err(Error::Precondition("no prototypes".into()));
    }
    Ok(batch.axis_iter(Axis(0)).map(|z| kmeans::nearest(z, prototypes)).collect())
}

/// L2 norm of every stored slot; handy for checking normalisation.
pub fn slot_norms(state: &MemoryState) -> Array1<f64> {
    state.slots.iter().map(|s| norm(s.view())).collect()
}
