//! Student/teacher pretraining of a linear encoder over memory-enhanced batches.
//!
//! Each step corrupts a batch into two views, embeds them with both networks,
//! mines neighbours for the teacher embeddings, takes one gradient step on
//! the student, moves the teacher towards the student and finally pushes the
//! teacher embeddings into the memory.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::episode::{stream_batches, LabeledEmbeddingSet};
use crate::loss::{build_pair_map, loss_and_grad, LossConfig};
use crate::memory::{DyceConfig, MemoryState};
use crate::ot::SinkhornConfig;
use crate::{Embeddings, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LinearEncoder {
    /// `d_in × d_out`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearEncoder {
    /// Gaussian weights with variance `1/d_in`, zero bias.
    pub fn random(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (d_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((d_in, d_out), || {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        });
        Self { weight, bias: Array1::zeros(d_out) }
    }

    pub fn d_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Embeddings) -> Result<Embeddings> {
        if x.ncols() != self.d_in() {
            return Err(Error::Shape(format!("input dim {} but encoder expects {}", x.ncols(), self.d_in())));
        }
        Ok(x.dot(&self.weight) + &self.bias)
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.weight.dim() != other.weight.dim() || self.bias.len() != other.bias.len() {
            return Err(Error::Shape(format!(
                "encoders {:?} and {:?} differ",
                self.weight.dim(),
                other.weight.dim()
            )));
        }
        Ok(())
    }
}

/// `ψ ← mψ + (1 − m)θ` for every parameter.
pub fn ema_update(teacher: &LinearEncoder, student: &LinearEncoder, m: f64) -> Result<LinearEncoder> {
    teacher.same_shape(student)?;
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidArgument(format!("momentum {m} outside [0, 1]")));
    }
    Ok(LinearEncoder {
        weight: &teacher.weight * m + &student.weight * (1.0 - m),
        bias: &teacher.bias * m + &student.bias * (1.0 - m),
    })
}

/// Number of coordinates zeroed per row at mask ratio `rho`.
pub fn masked_count(rho: f64, d: usize) -> usize {
    ((rho * d as f64 + 1e-9).floor() as usize).min(d)
}

/// Two noisy copies of `batch` and the masked student inputs built from them.
#[derive(Clone, Debug, PartialEq)]
pub struct Views {
    pub view_a: Embeddings,
    pub view_b: Embeddings,
    pub student_a: Embeddings,
    pub student_b: Embeddings,
}

pub fn two_views(batch: &Embeddings, mask_ratio: f64, noise_std: f64, rng: &mut impl Rng) -> Result<Views> {
    if !(0.0..=1.0).contains(&mask_ratio) {
        return Err(Error::InvalidArgument(format!("mask ratio {mask_ratio} outside [0, 1]")));
    }
    let noise = Normal::new(0.0, noise_std)
        .map_err(|_| Error::InvalidArgument(format!("noise std {noise_std} must be finite and >= 0")))?;
    let mut noisy = || batch.mapv(|v| v + noise.sample(rng));
    let view_a = noisy();
    let view_b = noisy();
    let d = batch.ncols();
    let hidden = masked_count(mask_ratio, d);
    let mut mask = |v: &Embeddings| {
        let mut out = v.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for j in sample(rng, d, hidden) {
                row[j] = 0.0;
            }
        }
        out
    };
    let student_a = mask(&view_a);
    let student_b = mask(&view_b);
    Ok(Views { view_a, view_b, student_a, student_b })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Samples per batch; every step embeds `2B` rows.
    pub batch: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub teacher_momentum: f64,
    pub mask_ratio: f64,
    pub noise_std: f64,
    pub d_out: usize,
    pub loss: LossConfig,
    pub dyce: DyceConfig,
    pub sinkhorn: SinkhornConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 32,
            epochs: 50,
            learning_rate: 0.5,
            teacher_momentum: 0.99,
            mask_ratio: 0.3,
            noise_std: 0.3,
            d_out: 16,
            loss: LossConfig::default(),
            dyce: DyceConfig { capacity: 512, partitions: 16, neighbors: 3, ..Default::default() },
            sinkhorn: SinkhornConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::InvalidArgument(format!("batch must be >= 2, got {}", self.batch)));
        }
        if !(0.0..=1.0).contains(&self.teacher_momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} outside [0, 1]", self.teacher_momentum)));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::InvalidArgument(format!("mask ratio {} outside [0, 1]", self.mask_ratio)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise std {} must be >= 0", self.noise_std)));
        }
        if self.d_out == 0 {
            return Err(Error::InvalidArgument("d_out must be >= 1".into()));
        }
        self.loss.validate()?;
        self.dyce.validate()?;
        self.dyce.check_batch_rows(2 * self.batch)?;
        self.sinkhorn.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Rows of the enhanced batch the loss was computed on.
    pub enhanced_rows: usize,
    /// Fraction of mined neighbours sharing their source's label.
    pub purity: Option<f64>,
    /// The memory finished filling and was partitioned on this step.
    pub bootstrapped: bool,
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub student: LinearEncoder,
    pub teacher: LinearEncoder,
    pub memory: MemoryState,
    pub cfg: TrainConfig,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Random student, teacher copied from it, empty memory.
    pub fn new(cfg: &TrainConfig, d_in: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let student = LinearEncoder::random(d_in, cfg.d_out, &mut rng);
        Ok(Self {
            teacher: student.clone(),
            student,
            memory: MemoryState::new(&cfg.dyce)?,
            cfg: cfg.clone(),
            rng,
        })
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Student gradient (`dW`, `db`) of the loss for fixed inputs.
    ///
    /// `x_s` and `x_t` hold the `2B` student and teacher inputs; `neighbors`
    /// are appended to both embeddings and carry no gradient.
    pub fn student_gradient(
        &self,
        x_s: &Embeddings,
        x_t: &Embeddings,
        neighbors: Option<&Embeddings>,
    ) -> Result<(f64, Array2<f64>, Array1<f64>)> {
        let z_s = self.student.forward(x_s)?;
        let z_t = self.teacher.forward(x_t)?;
        let k = neighbors.map_or(0, |n| n.nrows() / z_s.nrows());
        let (zs_hat, zt_hat) = match neighbors {
            Some(n) => (concatenate![Axis(0), z_s, *n], concatenate![Axis(0), z_t, *n]),
            None => (z_s, z_t),
        };
        let pairs = build_pair_map(self.cfg.batch, k)?;
        let (loss, g) = loss_and_grad(&zs_hat, &zt_hat, &pairs, &self.cfg.loss)?;
        let g0 = g.slice(s![..x_s.nrows(), ..]);
        Ok((loss, x_s.t().dot(&g0), g0.sum_axis(Axis(0))))
    }

    /// One training step on `B` raw rows.
    pub fn train_step(&mut self, batch: &Embeddings, labels: Option<&[u32]>, epoch: usize) -> Result<StepOutcome> {
        if batch.nrows() != self.cfg.batch {
            return Err(Error::Shape(format!("batch of {} rows, expected {}", batch.nrows(), self.cfg.batch)));
        }
        let views = two_views(batch, self.cfg.mask_ratio, self.cfg.noise_std, &mut self.rng)?;
        let x_s = concatenate![Axis(0), views.student_a, views.student_b];
        let x_t = concatenate![Axis(0), views.view_a, views.view_b];
        let z_t = self.teacher.forward(&x_t)?;
        let row_labels: Option<Vec<u32>> = labels.map(|l| l.iter().chain(l).copied().collect());

        let enhance = self.memory.initialized() && self.cfg.dyce.neighbors > 0 && self.cfg.dyce.enhancement_active(epoch);
        let mut purity = None;
        let neighbors = if enhance {
            let e = self.memory.topk_enhance(&z_t, &self.cfg.dyce)?;
            if let Some(l) = row_labels.as_deref() {
                purity = Some(self.memory.positive_purity(&e, l)?);
            }
            Some(e.neighbor_rows().to_owned())
        } else {
            None
        };
        let enhanced_rows = x_s.nrows() + neighbors.as_ref().map_or(0, |n| n.nrows());

        let (loss, dw, db) = self.student_gradient(&x_s, &x_t, neighbors.as_ref())?;
        self.student.weight.scaled_add(-self.cfg.learning_rate, &dw);
        self.student.bias.scaled_add(-self.cfg.learning_rate, &db);
        if !self.student.is_finite() {
            return Err(Error::Instability("student parameters became non-finite".into()));
        }
        self.teacher = ema_update(&self.teacher, &self.student, self.cfg.teacher_momentum)?;

        let mut bootstrapped = false;
        if !self.memory.is_full() {
            self.memory.ingest_fill(&z_t, row_labels.as_deref())?;
            if self.memory.is_full() {
                self.memory.bootstrap_partitions(&self.cfg.dyce, self.cfg.seed)?;
                bootstrapped = true;
            }
        } else {
            self.memory
                .update_memory(&z_t, row_labels.as_deref(), &self.cfg.dyce, &self.cfg.sinkhorn)?;
        }
        Ok(StepOutcome { loss, enhanced_rows, purity, bootstrapped })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Memory DBI at the end of the epoch, once partitions exist.
    pub dbi: Option<f64>,
    pub purity: Option<f64>,
    pub max_enhanced_rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainTrace {
    /// DBI right after the partitions were bootstrapped.
    pub bootstrap_dbi: Option<f64>,
    pub bootstrap_epoch: Option<usize>,
    pub epochs: Vec<EpochRecord>,
}

pub struct PretrainResult {
    pub trace: PretrainTrace,
    pub trainer: Trainer,
}

/// Trains for `cfg.epochs` epochs; labels, when present, only feed the
/// purity diagnostic.
pub fn run_pretraining(
    cfg: &TrainConfig,
    data: &Embeddings,
    labels: Option<&[u32]>,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<PretrainResult> {
    cfg.validate()?;
    if data.nrows() < cfg.batch {
        return Err(Error::Capacity(format!("{} rows for batches of {}", data.nrows(), cfg.batch)));
    }
    if let Some(l) = labels {
        if l.len() != data.nrows() {
            return Err(Error::Shape(format!("{} labels for {} rows", l.len(), data.nrows())));
        }
    }
    let mut trainer = Trainer::new(cfg, data.ncols())?;
    let mut trace = PretrainTrace { bootstrap_dbi: None, bootstrap_epoch: None, epochs: Vec::new() };
    for epoch in 0..cfg.epochs {
        let batches = stream_batches(data.nrows(), cfg.batch, 1, trainer.rng_mut())?;
        let mut losses = Vec::with_capacity(batches.len());
        let mut purities = Vec::new();
        let mut max_rows = 0;
        for idx in batches {
            let x = data.select(Axis(0), &idx);
            let l: Option<Vec<u32>> = labels.map(|l| idx.iter().map(|&i| l[i]).collect());
            let out = trainer.train_step(&x, l.as_deref(), epoch)?;
            if out.bootstrapped {
                trace.bootstrap_dbi = trainer.memory.dbi().ok();
                trace.bootstrap_epoch = Some(epoch);
            }
            losses.push(out.loss);
            purities.extend(out.purity);
            max_rows = max_rows.max(out.enhanced_rows);
        }
        let record = EpochRecord {
            epoch,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            dbi: if trainer.memory.initialized() { trainer.memory.dbi().ok() } else { None },
            purity: (!purities.is_empty()).then(|| purities.iter().sum::<f64>() / purities.len() as f64),
            max_enhanced_rows: max_rows,
        };
        on_epoch(&record)?;
        trace.epochs.push(record);
    }
    Ok(PretrainResult { trace, trainer })
}

/// Convenience wrapper for labelled sets.
pub fn pretrain_labeled(cfg: &TrainConfig, data: &LabeledEmbeddingSet) -> Result<PretrainResult> {
    run_pretraining(cfg, &data.embeddings, Some(&data.labels), |_| Ok(()))
}

pub const ENCODER_MAGIC: &[u8; 4] = b"ENC1";

/// `"ENC1" | d_in: u32 | d_out: u32 | weight f32 row-major | bias f32`, little-endian.
pub fn encode_encoder(enc: &LinearEncoder) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * (enc.weight.len() + enc.bias.len()));
    out.extend_from_slice(ENCODER_MAGIC);
    out.extend_from_slice(&(enc.d_in() as u32).to_le_bytes());
    out.extend_from_slice(&(enc.d_out() as u32).to_le_bytes());
    for v in enc.weight.iter().chain(enc.bias.iter()) {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_encoder(bytes: &[u8]) -> Result<LinearEncoder> {
    if bytes.len() < 12 {
        return Err(Error::format(bytes.len() as u64, "truncated encoder header"));
    }
    if &bytes[..4] != ENCODER_MAGIC {
        return Err(Error::format(0, "bad encoder magic"));
    }
    let d_in = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let d_out = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let count = d_in
        .checked_mul(d_out)
        .and_then(|w| w.checked_add(d_out))
        .ok_or_else(|| Error::format(4, "encoder shape overflows"))?;
    let expected = count.checked_mul(4).and_then(|b| b.checked_add(12));
    if expected != Some(bytes.len()) {
        return Err(Error::format(bytes.len() as u64, "encoder payload length does not match header"));
    }
    let vals: Vec<f64> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    let weight = Array2::from_shape_vec((d_in, d_out), vals[..d_in * d_out].to_vec()).expect("length checked");
    Ok(LinearEncoder { weight, bias: Array1::from(vals[d_in * d_out..].to_vec()) })
}
