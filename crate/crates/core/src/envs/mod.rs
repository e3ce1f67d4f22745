//! Symbolic task environments.
//!
//! Rendered images are replaced by deterministic text listings of scene
//! objects. A camera viewpoint change becomes a change in the order objects
//! are listed.

pub mod counting;
pub mod numeric;
pub mod scene;
pub mod trance;
pub mod training;
pub mod transform;

use thiserror::Error;

pub use scene::{canonicalize_sequence, serialize_observation, apply_step, AttributeVocab, SceneObject, TranceScene, View};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("infeasible config: {0}")]
    InfeasibleConfig(String),
    #[error("generation exhausted after {0} attempts")]
    GenerationExhausted(usize),
}
