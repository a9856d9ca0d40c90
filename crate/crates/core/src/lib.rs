//! Cross-lingual, domain-aware specialisation of static word vectors.
//!
//! The crate covers the whole flow: loading vector spaces and lexical
//! constraints, projecting source-language constraints into the target
//! language, filtering them with a relation classifier, specialising the
//! target space with margin losses, propagating the specialisation to unseen
//! words through a learned mapping, and evaluating the result.

pub mod attract_repel;
pub mod constraints;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod fixture;
pub mod nn;
pub mod pipeline;
pub mod postspec;
pub mod projection;
pub mod seed;
pub mod stm;

pub use constraints::{ConstraintSet, Group, Relation, TaggedTerm, TermPair};
pub use embedding::{EmbeddingSpace, Metric, Neighbor};
pub use error::{Error, Result};
pub use projection::{ProjectionConfig, ProjectionMatrix};
pub use pipeline::{Pipeline, PipelineConfig, RunManifest, StageRecord, StageStatus};
