use serde::{Deserialize, Serialize};

use super::{RewardBundle, StepScope};
use crate::error::{LabError, Result};
use crate::policy::Trajectory;

/// `(v - μ) / max(σ, floor)` with the population deviation. A constant group
/// maps to zeros.
pub fn normalize_group(values: &[f64], sigma_floor: f64) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(LabError::Config(format!(
            "group normalization needs at least 2 values, got {}",
            values.len()
        )));
    }
    let (mu, sigma) = mean_std(values);
    if sigma < sigma_floor && values.iter().all(|&v| v == values[0]) {
        return Ok(vec![0.0; values.len()]);
    }
    let d = sigma.max(sigma_floor);
    Ok(values.iter().map(|v| (v - mu) / d).collect())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

/// Normalizes where possible; single-element scopes get zero advantage.
fn normalize_lenient(values: &[f64], floor: f64) -> Vec<f64> {
    if values.len() < 2 {
        vec![0.0; values.len()]
    } else {
        normalize_group(values, floor).expect("length checked")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mu_step: f64,
    pub sigma_step: f64,
    pub mu_out: f64,
    pub sigma_out: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryAdvantage {
    pub a_out: f64,
    /// One process advantage per policy block.
    pub a_proc: Vec<f64>,
    /// Block index of every policy token, in generation order.
    pub token_block: Vec<usize>,
}

impl TrajectoryAdvantage {
    pub fn a_total(&self, block: usize, beta: f64) -> f64 {
        self.a_out + beta * self.a_proc[block]
    }

    /// Per-token `(A_proc, A_out, A_total)`.
    pub fn tokens(&self, beta: f64) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.token_block
            .iter()
            .map(move |&b| (self.a_proc[b], self.a_out, self.a_total(b, beta)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageTable {
    pub beta: f64,
    pub trajectories: Vec<TrajectoryAdvantage>,
    pub stats: GroupStats,
}

/// Outcome advantages are normalized across the group; step advantages within
/// `scope`. Both are broadcast to every policy token of their trajectory or
/// block. Environment tokens get no entry.
pub fn build_advantages(
    group: &[Trajectory],
    rewards: &[RewardBundle],
    beta: f64,
    sigma_floor: f64,
    scope: StepScope,
) -> Result<AdvantageTable> {
    if group.len() != rewards.len() {
        return Err(LabError::Misaligned(format!(
            "{} trajectories but {} reward bundles",
            group.len(),
            rewards.len()
        )));
    }
    for (i, (t, r)) in group.iter().zip(rewards).enumerate() {
        if t.num_blocks() != r.step.len() {
            return Err(LabError::Misaligned(format!(
                "trajectory {i} has {} blocks but {} step rewards",
                t.num_blocks(),
                r.step.len()
            )));
        }
    }
    let outcomes: Vec<f64> = rewards.iter().map(|r| r.outcome).collect();
    let a_out = normalize_group(&outcomes, sigma_floor)?;
    let pooled: Vec<f64> = rewards.iter().flat_map(|r| r.step.iter().copied()).collect();
    let a_proc: Vec<Vec<f64>> = match scope {
        StepScope::Pooled => {
            let flat = normalize_lenient(&pooled, sigma_floor);
            let mut it = flat.into_iter();
            rewards
                .iter()
                .map(|r| it.by_ref().take(r.step.len()).collect())
                .collect()
        }
        StepScope::PerTrajectory => rewards
            .iter()
            .map(|r| normalize_lenient(&r.step, sigma_floor))
            .collect(),
        StepScope::PerStepIndex => {
            let depth = rewards.iter().map(|r| r.step.len()).max().unwrap_or(0);
            let mut out: Vec<Vec<f64>> = rewards.iter().map(|r| vec![0.0; r.step.len()]).collect();
            for d in 0..depth {
                let idx: Vec<usize> = (0..rewards.len()).filter(|&i| rewards[i].step.len() > d).collect();
                let vals: Vec<f64> = idx.iter().map(|&i| rewards[i].step[d]).collect();
                for (&i, a) in idx.iter().zip(normalize_lenient(&vals, sigma_floor)) {
                    out[i][d] = a;
                }
            }
            out
        }
    };
    let (mu_out, sigma_out) = mean_std(&outcomes);
    let (mu_step, sigma_step) = if pooled.is_empty() {
        (0.0, 0.0)
    } else {
        mean_std(&pooled)
    };
    let trajectories = group
        .iter()
        .zip(a_out)
        .zip(a_proc)
        .map(|((t, ao), ap)| {
            let mut token_block = Vec::with_capacity(t.policy_token_count());
            for b in 0..t.num_blocks() {
                let n: usize = t.block_steps(b).iter().map(|s| s.tokens.len()).sum();
                token_block.extend(std::iter::repeat_n(b, n));
            }
            TrajectoryAdvantage {
                a_out: ao,
                a_proc: ap,
                token_block,
            }
        })
        .collect();
    Ok(AdvantageTable {
        beta,
        trajectories,
        stats: GroupStats {
            mu_step,
            sigma_step,
            mu_out,
            sigma_out,
        },
    })
}
