//! Few-shot classification engine with multi-perspective support enrichment.

pub mod auca;
pub mod bank;
pub mod classifier;
pub mod episodes;
pub mod error;
pub mod extract;
pub mod hma;
pub mod lmse;
pub mod model;
pub mod provider;
pub mod report;
pub mod rng;
pub mod synth;

pub use error::{MpaError, Result};
pub use model::{EmbeddingVector, EpisodeSpec, LabeledEmbedding, Modality, Prototype, PrototypeSource};
