//! Mini-batch learning-to-match.
//!
//! Learns a cross-modal ground metric by making the entropic optimal
//! transport plan of every minibatch agree with the known pairing. The
//! crate covers the numerical pieces end to end:
//!
//! - [`ot`]: log-domain Sinkhorn and entropic partial transport
//! - [`metric`]: Euclidean, cosine and Mahalanobis ground costs, PSD projection
//! - [`grad`]: a small reverse-mode tape that differentiates through unrolled Sinkhorn
//! - [`loss`]: the matching loss, its partial-mass variant, contrastive and triplet baselines
//! - [`model`]: MLP encoders, Adam, the training loop and checkpoints
//! - [`data`]: synthetic paired data, correspondence noise, embedding files
//! - [`eval`]: ranking, recall@k and the modality gap
//! - [`cli`]: the `otmatch` command line

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod grad;
pub mod loss;
pub mod metric;
pub mod model;
pub mod ot;

pub use error::{Error, Result};
