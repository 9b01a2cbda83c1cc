//! Optimal-transport machinery for unsupervised few-shot learning.
//!
//! The crate is organised around the data flowing between stages:
//!
//! * [`ot`] solves entropically regularised transport problems in the log domain.
//! * [`memory`] is the dynamic clustered memory used to mine positives while
//!   pretraining, including its FIFO and k-means ablation variants.
//! * [`loss`] evaluates the symmetric contrastive loss and its exact gradient.
//! * [`opta`] aligns support prototypes with the query distribution at
//!   inference time and classifies queries.
//! * [`episode`] samples (N-way, K-shot) episodes, generates synthetic
//!   embeddings and aggregates accuracy metrics.
//! * [`pretrain`] trains a linear student/teacher encoder pair end to end.
//! * [`io`], [`config`] and [`ablate`] provide file formats, run configuration
//!   and the ablation driver used by the command-line front end.

pub mod ablate;
pub mod config;
pub mod episode;
pub mod error;
pub mod io;
pub mod linalg;
pub mod loss;
pub mod memory;
pub mod opta;
pub mod ot;
pub mod pretrain;

pub use error::{Error, Result};

/// Row-major `n × d` matrix of embeddings.
pub type Embeddings = ndarray::Array2<f64>;
