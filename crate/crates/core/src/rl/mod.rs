//! Group-sampled policy optimization with process and outcome advantages.

mod advantage;
mod loss;
mod train;

pub use advantage::{build_advantages, normalize_group, AdvantageTable, GroupStats, TrajectoryAdvantage};
pub use loss::{clipped_loss, clipped_loss_grad, surrogate_term, token_records, LossOptions, TokenRecord};
pub use train::{
    env_log_probs, group_sample, train_rl, write_metrics, GroupDump, GroupTrajectory, RlMetrics, RlOutcome,
    GROUP_DUMP_FILE,
};

use serde::{Deserialize, Serialize};

use crate::env::metrics::token_f1;
use crate::error::{LabError, Result};
use crate::policy::{is_block_valid, is_traj_valid, StateView, Step, Trajectory};
use crate::prm::PrmParams;
use crate::scalar::Scalar;
use crate::vocab::Vocab;

/// How step rewards are grouped before normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepScope {
    /// All steps of all trajectories in the group share one mean and deviation.
    #[default]
    Pooled,
    PerTrajectory,
    PerStepIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub group_size: usize,
    pub beta: f64,
    pub epsilon: f64,
    pub nu1: f64,
    pub nu2: f64,
    pub sigma_floor: f64,
    pub lr: f64,
    pub iterations: usize,
    /// Queries sampled per iteration; each gets its own group.
    pub queries_per_iter: usize,
    /// Gradient steps per sampling round, all against the same old policy.
    pub update_epochs: usize,
    pub temperature: f64,
    pub include_env_tokens: bool,
    pub step_scope: StepScope,
    /// Evaluate every this many iterations (0 disables).
    pub eval_every: usize,
    pub record_wall_time: bool,
    /// Write the sampled groups with per-token ratios and advantages every
    /// this many iterations when a checkpoint directory is given (0 disables).
    pub dump_every: usize,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            beta: 0.3,
            epsilon: 0.2,
            nu1: 0.2,
            nu2: 0.5,
            sigma_floor: 1e-6,
            lr: 1.0,
            iterations: 400,
            queries_per_iter: 32,
            update_epochs: 1,
            temperature: 1.0,
            include_env_tokens: false,
            step_scope: StepScope::Pooled,
            eval_every: 50,
            record_wall_time: false,
            dump_every: 100,
            seed: 0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::Config(m.into()));
        if self.group_size < 2 {
            return bad("rl.group_size must be >= 2");
        }
        if !(self.beta >= 0.0) {
            return bad("rl.beta must be >= 0");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("rl.epsilon must lie in (0, 1)");
        }
        if !(self.sigma_floor > 0.0) {
            return bad("rl.sigma_floor must be > 0");
        }
        if !(self.lr > 0.0) || self.queries_per_iter == 0 || self.update_epochs == 0 {
            return bad("rl.lr, rl.queries_per_iter and rl.update_epochs must be positive");
        }
        Ok(())
    }
}

/// Step rewards (one per policy block) and the outcome reward of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBundle {
    pub step: Vec<f64>,
    pub outcome: f64,
}

/// `R(x, y) + ν1 · 1[block follows the schema]`.
pub fn step_reward<T: Scalar>(
    prm: &PrmParams<T>,
    vocab: &Vocab,
    context: &StateView<'_>,
    block: &[Step],
    nu1: f64,
) -> f64 {
    let fmt = if is_block_valid(vocab, block) { 1.0 } else { 0.0 };
    prm.score(context, block).as_f64() + nu1 * fmt
}

/// `F1(answer, gold) + ν2 · 1[complete workflow]`; no answer scores 0 F1.
pub fn outcome_reward(vocab: &Vocab, traj: &Trajectory, nu2: f64) -> f64 {
    let f1 = traj
        .answer
        .as_ref()
        .map_or(0.0, |a| token_f1(a, &traj.query.gold_answer));
    let fmt = if is_traj_valid(vocab, traj) { 1.0 } else { 0.0 };
    f1 + nu2 * fmt
}

pub fn reward_bundle<T: Scalar>(
    prm: &PrmParams<T>,
    vocab: &Vocab,
    traj: &Trajectory,
    nu1: f64,
    nu2: f64,
) -> RewardBundle {
    RewardBundle {
        step: (0..traj.num_blocks())
            .map(|b| step_reward(prm, vocab, &traj.context(b), traj.block_steps(b), nu1))
            .collect(),
        outcome: outcome_reward(vocab, traj, nu2),
    }
}
