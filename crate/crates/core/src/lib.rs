//! Dataset mixture selection with merged models as surrogates.
//!
//! Fine-tune one model per candidate dataset, average the models of every
//! candidate mixture, and pick the mixture whose averaged model scores best
//! on the target task. The crate also carries the comparison baselines,
//! correlation analytics and a small synthetic benchmark.

pub mod analytics;
pub mod baselines;
pub mod bench;
pub mod error;
pub mod evaluator;
pub mod merge;
pub mod mlp;
pub mod rng;
pub mod search;
pub mod tensor_store;

pub use error::{Error, ErrorKind, Result};
pub use evaluator::{EvalDataset, Evaluator, Score, Split};
pub use merge::{merge_uniform, merge_weighted, MixtureVector, ModelBank};
pub use search::{run_search, Objective, SearchConfig, SearchReport};
pub use tensor_store::{Checkpoint, EmbeddingSet, Tensor};
