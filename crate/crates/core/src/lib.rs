//! Process-supervised reinforcement learning for retrieval-augmented
//! multi-hop reasoning, at desk scale.

pub mod env;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod harness;
pub mod mcts;
pub mod parallel;
pub mod policy;
pub mod prm;
pub mod rft;
pub mod rl;
pub mod scalar;
pub mod seeds;
pub mod sft;
pub mod vocab;

pub use error::{LabError, Result};
pub use scalar::Scalar;

pub type Params = policy::PolicyParams<f64>;
pub type ParamsF32 = policy::PolicyParams<f32>;
