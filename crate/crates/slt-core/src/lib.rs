//! Gloss-free sign language translation baselines.
//!
//! One stack, many pretraining strategies: the crate provides a toy video
//! corpus, a shared visual/text encoder-decoder model, the pretraining
//! objectives the published methods differ by, a deterministic trainer, and
//! from-scratch translation metrics with convention profiles. Everything is
//! reproducible bit-for-bit for a fixed seed regardless of thread count.

pub mod corpus;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod nn;
pub mod par;
pub mod tensor;
pub mod trainer;
