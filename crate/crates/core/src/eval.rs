//! Greedy evaluation: exact match, token F1, per-hop breakdown and
//! cumulative F1 by number of retrievals used.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::metrics::{exact_match, token_f1};
use crate::env::query::QueryInstance;
use crate::env::world::World;
use crate::error::Result;
use crate::parallel;
use crate::policy::rollout::{rollout, RolloutConfig};
use crate::policy::{is_traj_valid, PolicyModel, PolicyParams, Trajectory};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HopStats {
    pub hops: usize,
    pub n: usize,
    pub em: f64,
    pub f1: f64,
}

/// Queries answered with at most `max_retrievals` retrievals (`None` = any).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub max_retrievals: Option<usize>,
    pub coverage: f64,
    /// Sum of F1 over covered queries divided by all queries.
    pub cumulative_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub em: f64,
    pub f1: f64,
    pub format_rate: f64,
    pub per_hop: Vec<HopStats>,
    pub coverage: Vec<CoverageRow>,
}

#[derive(Debug, Clone)]
pub struct Scored {
    pub trajectory: Trajectory,
    pub em: bool,
    pub f1: f64,
    pub valid: bool,
}

pub fn score_trajectory(world: &World, t: Trajectory) -> Scored {
    let gold = &t.query.gold_answer;
    let pred: &[_] = t.answer.as_deref().unwrap_or(&[]);
    let em = t.answer.is_some() && exact_match(pred, gold);
    let f1 = if t.answer.is_some() { token_f1(pred, gold) } else { 0.0 };
    let valid = is_traj_valid(&world.vocab(), &t);
    Scored {
        trajectory: t,
        em,
        f1,
        valid,
    }
}

/// Greedy rollouts of every query.
pub fn greedy_rollouts<T: Scalar>(
    model: &PolicyModel,
    params: &PolicyParams<T>,
    world: &World,
    queries: &[Arc<QueryInstance>],
    k_docs: usize,
    max_steps: usize,
) -> Result<Vec<Scored>> {
    let cfg = RolloutConfig {
        max_steps,
        k_docs,
        temperature: 0.0,
    };
    parallel::map(queries, |_, q| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = rollout(model, params, world, Arc::clone(q), &cfg, &mut rng)?;
        Ok(score_trajectory(world, t.trajectory))
    })
}

pub fn summarize(scored: &[Scored]) -> EvalReport {
    let n = scored.len();
    let nf = n.max(1) as f64;
    let mean = |f: &dyn Fn(&Scored) -> f64| scored.iter().map(f).sum::<f64>() / nf;
    let mut hops: Vec<usize> = scored.iter().map(|s| s.trajectory.query.hop_count).collect();
    hops.sort_unstable();
    hops.dedup();
    let per_hop = hops
        .into_iter()
        .map(|h| {
            let sub: Vec<&Scored> = scored.iter().filter(|s| s.trajectory.query.hop_count == h).collect();
            let m = sub.len() as f64;
            HopStats {
                hops: h,
                n: sub.len(),
                em: sub.iter().filter(|s| s.em).count() as f64 / m,
                f1: sub.iter().map(|s| s.f1).sum::<f64>() / m,
            }
        })
        .collect();
    let coverage = [Some(1), Some(2), None]
        .into_iter()
        .map(|cap| {
            let covered: Vec<&Scored> = scored
                .iter()
                .filter(|s| cap.is_none_or(|c| s.trajectory.num_retrievals() <= c))
                .collect();
            CoverageRow {
                max_retrievals: cap,
                coverage: covered.len() as f64 / nf,
                cumulative_f1: covered.iter().map(|s| s.f1).sum::<f64>() / nf,
            }
        })
        .collect();
    EvalReport {
        n,
        em: mean(&|s| if s.em { 1.0 } else { 0.0 }),
        f1: mean(&|s| s.f1),
        format_rate: mean(&|s| if s.valid { 1.0 } else { 0.0 }),
        per_hop,
        coverage,
    }
}

pub fn evaluate<T: Scalar>(
    model: &PolicyModel,
    params: &PolicyParams<T>,
    world: &World,
    queries: &[Arc<QueryInstance>],
    k_docs: usize,
    max_steps: usize,
) -> Result<EvalReport> {
    Ok(summarize(&greedy_rollouts(
        model, params, world, queries, k_docs, max_steps,
    )?))
}
