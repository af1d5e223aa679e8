//! Dataset-bias measurement and bias-aware reward construction for
//! information-extraction corpora.
//!
//! The numeric code is generic over [`Real`]; the aliases below fix it to
//! `f64`, which is what the command-line tool uses.

pub mod agreement;
pub mod corpus;
pub mod embed;
pub mod llm;
pub mod parse;
pub mod prompts;
pub mod rewards;
pub mod scalar;
pub mod score;

pub use corpus::{Annotation, Dataset, DatasetDescriptor, Example, Registry, Split, Task};
pub use scalar::Real;

pub type EmbeddingVector = embed::EmbeddingVector<f64>;
pub type FilterConfig = embed::FilterConfig<f64>;
pub type FilterOutcome = embed::FilterOutcome<f64>;
pub type KappaReport = agreement::KappaReport<f64>;
pub type EvalReport = score::EvalReport<f64>;
pub type CrossValMatrix = score::CrossValMatrix<f64>;
pub type RewardContext = rewards::RewardContext<f64>;
pub type RewardedInstance = rewards::RewardedInstance<f64>;
