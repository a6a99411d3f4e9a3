//! Learned sparse retrieval at desk scale: expanded-vocabulary masked-LM
//! heads, a toy max-pooling encoder, ranking and sparsity objectives, static
//! top-k pruning, an impact-ordered inverted index and ranking metrics.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar to `f64`, with `F32*` variants for the smaller
//! footprint.

mod binio;
pub mod digest;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod index;
pub mod objectives;
pub mod retrieval;
pub mod scalar;
pub mod sparsevec;
pub mod trainer;
pub mod vocab;

pub use encoder::{Checkpoint, ModelDims, ModelParams};
pub use error::{Error, Result};
pub use evalkit::{EvalSet, MetricReport, PreparedEval};
pub use index::{DocId, InvertedIndex};
pub use objectives::LossConfig;
pub use scalar::Scalar;
pub use sparsevec::{PruneConfig, SparseVec};
pub use trainer::TrainConfig;
pub use vocab::{ExpandedVocab, SubwordId, SubwordVocab, TermId};

pub type Real = f64;
pub type Vector = SparseVec<f64>;
pub type Params = ModelParams<f64>;
pub type Model = Checkpoint<f64>;
pub type Index = InvertedIndex<f64>;

pub type F32Vector = SparseVec<f32>;
pub type F32Params = ModelParams<f32>;
pub type F32Model = Checkpoint<f32>;
pub type F32Index = InvertedIndex<f32>;
