//! Step-level rejection sampling: keep blocks from correct trajectories that
//! the verifier scores above a threshold, then fine-tune on them.

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::metrics::exact_match;
use crate::env::query::QueryInstance;
use crate::env::world::World;
use crate::error::{LabError, Result};
use crate::policy::rollout::{rollout, RolloutConfig};
use crate::policy::{PolicyModel, PolicyParams, State, Step, Trajectory};
use crate::prm::PrmParams;
use crate::scalar::Scalar;
use crate::sft::{train_sft, SftConfig, SftExample, SftRecord, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RftConfig {
    /// Candidates per query.
    pub n: usize,
    pub theta: f64,
    pub temperature: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RftConfig {
    fn default() -> Self {
        Self {
            n: 8,
            theta: 0.0,
            temperature: 1.0,
            lr: 0.1,
            epochs: 4,
            batch_size: 32,
            seed: 0,
        }
    }
}

pub fn sample_candidates<T: Scalar, R: Rng>(
    model: &PolicyModel,
    params: &PolicyParams<T>,
    world: &World,
    query: &Arc<QueryInstance>,
    n: usize,
    rollout_cfg: &RolloutConfig,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    if n == 0 {
        return Err(LabError::Config("rft.n must be >= 1".into()));
    }
    (0..n)
        .map(|_| rollout(model, params, world, Arc::clone(query), rollout_cfg, rng).map(|s| s.trajectory))
        .collect()
}

/// A retained (context, block) training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RetainedPair {
    pub context: State,
    pub block: Vec<Step>,
    pub score: f64,
    pub trajectory: usize,
    pub block_index: usize,
}

impl RetainedPair {
    pub fn target(&self) -> Vec<crate::vocab::Token> {
        self.block.iter().flat_map(|s| s.tokens.iter().copied()).collect()
    }
}

pub fn is_correct(t: &Trajectory) -> bool {
    t.answer.as_ref().is_some_and(|a| exact_match(a, &t.query.gold_answer))
}

/// Keeps block `b` of trajectory `i` iff the trajectory's answer exactly
/// matches gold and the verifier scores the block above `theta`. Only policy
/// blocks are candidates, so retrieval content never becomes a target.
pub fn filter_dual<T: Scalar>(trajs: &[Trajectory], prm: &PrmParams<T>, theta: f64) -> Vec<RetainedPair> {
    let mut out = Vec::new();
    for (i, t) in trajs.iter().enumerate() {
        if !is_correct(t) {
            continue;
        }
        for b in 0..t.num_blocks() {
            let block = t.block_steps(b);
            let score = prm.score(&t.context(b), block).as_f64();
            if score > theta {
                out.push(RetainedPair {
                    context: t.context_state(b),
                    block: block.to_vec(),
                    score,
                    trajectory: i,
                    block_index: b,
                });
            }
        }
    }
    out
}

pub fn to_examples(world: &World, pairs: &[RetainedPair]) -> Vec<SftExample> {
    let vocab = world.vocab();
    pairs
        .iter()
        .map(|p| SftExample::new(&vocab, p.context.clone(), p.target()))
        .collect()
}

pub fn write_retained<W: Write>(world: &World, pairs: &[RetainedPair], w: W) -> Result<()> {
    let records: Vec<SftRecord> = to_examples(world, pairs)
        .iter()
        .zip(pairs)
        .map(|(e, p)| SftRecord {
            prm_score: Some(p.score),
            ..SftRecord::from(e)
        })
        .collect();
    crate::sft::write_records(&records, w)
}

/// Plain next-token likelihood training from the warmup policy.
pub fn train_rft<T: Scalar>(
    model: &PolicyModel,
    init: &PolicyParams<T>,
    world: &World,
    pairs: &[RetainedPair],
    cfg: &RftConfig,
) -> Result<TrainOutcome<T>> {
    if pairs.is_empty() {
        return Err(LabError::EmptyDataset(
            "no refinement pairs survived filtering; lower rft.theta or raise rft.n".into(),
        ));
    }
    let sft_cfg = SftConfig {
        lambda: 1.0,
        lr: cfg.lr,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
    };
    train_sft(model, init, &to_examples(world, pairs), &sft_cfg, "rft")
}
