//! Prompt inversion toolkit for LLM-empowered recommender systems.
//!
//! The crate is organised along the attack pipeline:
//!
//! - [`corpus`] turns public rating dumps into instruction datasets.
//! - [`logits`] filters, aligns and projects victim logits into fixed-size embeddings.
//! - [`backend`] abstracts the victim recommender and the inverter (toy and remote).
//! - [`refine`] runs the base inversion and the similarity-guided refinement loop.
//! - [`metrics`] scores reconstructions (ItemMatch, ProfileMatch, BLEU, ROUGE-L, token F1).
//! - [`pipeline`] wires everything into the `synth`, `attack` and `eval` commands.

pub mod backend;
pub mod corpus;
pub mod logits;
pub mod metrics;
pub mod pipeline;
pub mod refine;
pub mod toy_world;
pub mod util;

pub use backend::{BackendError, ModelBackend};
pub use corpus::{InstructionSample, Profile, TaskType};
pub use logits::{LogitMatrix, ProjectedEmbedding, ProjectionWeights};
pub use refine::{attack, AttackResult, RefinementConfig};
