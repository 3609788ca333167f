//! Linear-softmax policy over the structured token vocabulary.

pub mod features;
pub mod format;
pub mod grammar;
pub mod model;
pub mod rollout;
pub mod trajectory;

pub use crate::vocab::Vocab;
pub use features::{Featurizer, HistorySummary};
pub use format::{is_block_valid, is_step_valid, is_traj_valid};
pub use model::{PolicyModel, PolicyParams};
pub use rollout::{
    block_log_prob, extend_rollout, replay_log_probs, rollout, sample_block, visit_policy_tokens, RolloutConfig,
    SampledTrajectory,
};
pub use trajectory::{
    apply_block, parse_block, BlockEffect, BlockSpan, Provenance, State, StateView, Step, StepKind, Trajectory,
};
