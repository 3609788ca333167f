use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{PolicyModel, PolicyParams};
use super::trajectory::{ends_block, StateView, Step, Trajectory, MAX_BLOCK_TOKENS};
use crate::env::query::QueryInstance;
use crate::env::world::World;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::vocab::Token;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    /// Maximum number of policy blocks.
    pub max_steps: usize,
    pub k_docs: usize,
    /// Sampling temperature; 0 is greedy.
    pub temperature: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            max_steps: 10,
            k_docs: 3,
            temperature: 1.0,
        }
    }
}

impl RolloutConfig {
    pub fn greedy(self) -> Self {
        Self {
            temperature: 0.0,
            ..self
        }
    }
}

/// A trajectory plus the sampling policy's temperature-1 log-probability of
/// every policy token, in generation order.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTrajectory<T> {
    pub trajectory: Trajectory,
    pub logp: Vec<T>,
}

/// Generates one block from a history.
pub fn sample_block<T: Scalar, R: Rng>(
    model: &PolicyModel,
    params: &PolicyParams<T>,
    query: &QueryInstance,
    steps: &[Step],
    temperature: f64,
    rng: &mut R,
) -> Result<(Vec<Token>, Vec<T>)> {
    let mut partial: Vec<Token> = Vec::with_capacity(MAX_BLOCK_TOKENS);
    let mut logps = Vec::with_capacity(MAX_BLOCK_TOKENS);
    loop {
        let view = StateView {
            query,
            steps,
            partial: &partial,
        };
        let (t, lp) = model.sample_token(params, &view, temperature, rng)?;
        partial.push(t);
        logps.push(lp);
        if ends_block(t) || partial.len() >= MAX_BLOCK_TOKENS {
            return Ok((partial, logps));
        }
    }
}

/// Temperature-1 log-probability of a whole block given its history.
pub fn block_log_prob<T: Scalar>(
    model: &PolicyModel,
    params: &PolicyParams<T>,
    query: &QueryInstance,
    steps: &[Step],
    tokens: &[Token],
) -> Result<T> {
    let mut total = T::zero();
    for k in 0..tokens.len() {
        let view = StateView {
            query,
            steps,
            partial: &tokens[..k],
        };
        total += model.log_prob(params, &view, tokens[k])?;
    }
    Ok(total)
}

/// Samples blocks until the trajectory terminates or reaches `max_steps` blocks.
pub fn extend_rollout<T: Scalar, R: Rng>(
    model: &PolicyModel,
    params: &PolicyParams<T>,
    world: &World,
    traj: &mut Trajectory,
    logp: &mut Vec<T>,
    cfg: &RolloutConfig,
    rng: &mut R,
) -> Result<()> {
    while !traj.terminal && traj.num_blocks() < cfg.max_steps {
        let (tokens, lps) = sample_block(model, params, &traj.query, &traj.steps, cfg.temperature, rng)?;
        logp.extend(lps);
        traj.push_block(world, &tokens, cfg.k_docs);
    }
    Ok(())
}

pub fn rollout<T: Scalar, R: Rng>(
    model: &PolicyModel,
    params: &PolicyParams<T>,
    world: &World,
    query: Arc<QueryInstance>,
    cfg: &RolloutConfig,
    rng: &mut R,
) -> Result<SampledTrajectory<T>> {
    let mut trajectory = Trajectory::new(query);
    let mut logp = Vec::new();
    extend_rollout(model, params, world, &mut trajectory, &mut logp, cfg, rng)?;
    Ok(SampledTrajectory { trajectory, logp })
}

/// Calls `f(block, view, token)` for every policy token, in generation order.
pub fn visit_policy_tokens<F>(traj: &Trajectory, mut f: F) -> Result<()>
where
    F: FnMut(usize, &StateView<'_>, Token) -> Result<()>,
{
    for b in 0..traj.num_blocks() {
        let tokens = traj.block_tokens(b);
        let ctx = traj.context(b);
        for k in 0..tokens.len() {
            let view = StateView {
                partial: &tokens[..k],
                ..ctx
            };
            f(b, &view, tokens[k])?;
        }
    }
    Ok(())
}

/// Recomputes temperature-1 log-probabilities of every policy token.
pub fn replay_log_probs<T: Scalar>(model: &PolicyModel, params: &PolicyParams<T>, traj: &Trajectory) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(traj.policy_token_count());
    visit_policy_tokens(traj, |_, view, t| {
        out.push(model.log_prob(params, view, t)?);
        Ok(())
    })?;
    Ok(out)
}
