//! Core library for the voicespace stack.
//!
//! Everything runs on a small dense-f64 tensor engine with reverse-mode
//! differentiation ([`graph`]), on top of which sit the multimodal voice
//! aggregator ([`kvformer`]), the soft contrastive losses ([`softcl`]),
//! the optimal-transport flow-matching objective and sampler ([`cfm`]),
//! a synthetic multimodal world generator ([`synth`]), the staged
//! trainer ([`trainer`]) and the objective evaluation harness ([`eval`]).
//!
//! All randomness is drawn from named substreams of a single run seed
//! ([`rng`]), and every training artifact round-trips bit-exactly
//! through the checkpoint and embedding-file formats ([`checkpoint`],
//! [`embfile`]).

pub mod cfm;
pub mod checkpoint;
pub mod config;
pub mod embfile;
pub mod error;
pub mod eval;
pub mod fdiff;
pub mod graph;
pub mod kvformer;
pub mod params;
pub mod rng;
pub mod softcl;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{CoreError, ErrorClass, Result};
pub use graph::{Graph, TensorId};
pub use tensor::Tensor;
