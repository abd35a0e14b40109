//! Few-shot traffic speed prediction: a GRU / graph-attention / GRU
//! spatio-temporal encoder, an adversarial source/target discriminator,
//! and an episodic meta-trainer, with the data plumbing and metrics around
//! them.

pub mod diffcore;
pub mod domain_adversarial;
pub mod error;
pub mod eval_metrics;
pub mod graph_data;
pub mod inference_head;
pub mod meta_trainer;
pub mod st_embedding;

pub use diffcore::{DenseArray, ParamSet};
pub use error::{Error, Result};
