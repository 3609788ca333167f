use serde::{Deserialize, Serialize};

use super::advantage::AdvantageTable;
use super::train::GroupTrajectory;
use crate::error::{LabError, Result};
use crate::policy::{PolicyModel, PolicyParams, StateView, StepKind};
use crate::scalar::Scalar;
use crate::vocab::Token;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub epsilon: f64,
    /// Also score retrieval tokens, with unmasked probabilities and the
    /// advantage of the block that issued the subquery.
    pub include_env_tokens: bool,
}

/// `min(ρA, clip(ρ, 1-ε, 1+ε)·A)`.
pub fn surrogate_term(rho: f64, a: f64, eps: f64) -> f64 {
    (rho * a).min(rho.clamp(1.0 - eps, 1.0 + eps) * a)
}

/// Whether the clipped branch is strictly the minimum, which zeroes the
/// gradient through ρ.
fn clip_active(rho: f64, a: f64, eps: f64) -> bool {
    rho.clamp(1.0 - eps, 1.0 + eps) * a < rho * a
}

struct Term<'a> {
    traj: usize,
    index: usize,
    block: usize,
    view: StateView<'a>,
    token: Token,
    old: f64,
    advantage: f64,
    env: bool,
}

fn visit_terms<F>(group: &[GroupTrajectory], adv: &AdvantageTable, include_env: bool, mut f: F) -> Result<()>
where
    F: FnMut(Term<'_>) -> Result<()>,
{
    if group.len() != adv.trajectories.len() {
        return Err(LabError::Misaligned(format!(
            "{} trajectories but {} advantage rows",
            group.len(),
            adv.trajectories.len()
        )));
    }
    for (i, (g, a)) in group.iter().zip(&adv.trajectories).enumerate() {
        let t = &g.trajectory;
        if g.old_logp.len() != a.token_block.len() {
            return Err(LabError::Misaligned(format!(
                "trajectory {i}: {} old log-probs for {} policy tokens",
                g.old_logp.len(),
                a.token_block.len()
            )));
        }
        let mut k = 0;
        for b in 0..t.num_blocks() {
            let tokens = t.block_tokens(b);
            let ctx = t.context(b);
            for j in 0..tokens.len() {
                f(Term {
                    traj: i,
                    index: k,
                    block: b,
                    view: StateView {
                        partial: &tokens[..j],
                        ..ctx
                    },
                    token: tokens[j],
                    old: g.old_logp[k],
                    advantage: a.a_total(b, adv.beta),
                    env: false,
                })?;
                k += 1;
            }
        }
        if include_env {
            let mut e = 0;
            for b in 0..t.num_blocks() {
                let end = t.blocks[b].end;
                let Some(step) = t.steps.get(end).filter(|s| s.kind == StepKind::Retrieval) else {
                    continue;
                };
                for j in 0..step.tokens.len() {
                    let old = *g.env_old_logp.get(e).ok_or_else(|| {
                        LabError::Misaligned(format!("trajectory {i}: missing environment log-probs"))
                    })?;
                    f(Term {
                        traj: i,
                        index: k + e,
                        block: b,
                        view: StateView {
                            query: &t.query,
                            steps: &t.steps[..end],
                            partial: &step.tokens[..j],
                        },
                        token: step.tokens[j],
                        old,
                        advantage: a.a_total(b, adv.beta),
                        env: true,
                    })?;
                    e += 1;
                }
            }
        }
    }
    Ok(())
}

fn ratio(lp: f64, old: f64, traj: usize, token: usize) -> Result<f64> {
    let rho = (lp - old).exp();
    if rho.is_finite() {
        Ok(rho)
    } else {
        Err(LabError::NonFiniteRatio {
            trajectory: traj,
            token,
        })
    }
}

/// `-(1/G) Σ_i Σ_t Σ_k min(ρA, clip(ρ)A)` over policy tokens.
pub fn clipped_loss<T: Scalar>(
    model: &PolicyModel,
    params: &PolicyParams<T>,
    group: &[GroupTrajectory],
    adv: &AdvantageTable,
    opts: LossOptions,
) -> Result<f64> {
    let unmasked = PolicyModel {
        masking: false,
        ..*model
    };
    let mut total = 0.0;
    visit_terms(group, adv, opts.include_env_tokens, |t| {
        let m = if t.env { &unmasked } else { model };
        let lp = m.log_prob(params, &t.view, t.token)?.as_f64();
        let rho = ratio(lp, t.old, t.traj, t.index)?;
        total += surrogate_term(rho, t.advantage, opts.epsilon);
        Ok(())
    })?;
    Ok(-total / group.len() as f64)
}

/// Loss and its exact gradient.
pub fn clipped_loss_grad<T: Scalar>(
    model: &PolicyModel,
    params: &PolicyParams<T>,
    group: &[GroupTrajectory],
    adv: &AdvantageTable,
    opts: LossOptions,
) -> Result<(f64, PolicyParams<T>)> {
    let unmasked = PolicyModel {
        masking: false,
        ..*model
    };
    let inv_g = 1.0 / group.len() as f64;
    let mut grad = params.zeros_like();
    let mut total = 0.0;
    visit_terms(group, adv, opts.include_env_tokens, |t| {
        let m = if t.env { &unmasked } else { model };
        let lp = m.log_prob(params, &t.view, t.token)?.as_f64();
        let rho = ratio(lp, t.old, t.traj, t.index)?;
        total += surrogate_term(rho, t.advantage, opts.epsilon);
        if !clip_active(rho, t.advantage, opts.epsilon) && t.advantage != 0.0 {
            let scale = T::lit(-inv_g * t.advantage * rho);
            m.accumulate_log_prob_grad(params, &t.view, t.token, scale, &mut grad)?;
        }
        Ok(())
    })?;
    Ok((-total * inv_g, grad))
}

/// Per-token view of the surrogate for audit dumps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub token: u32,
    pub block: usize,
    pub env: bool,
    pub old_logp: f64,
    pub logp: f64,
    pub rho: f64,
    pub a_out: f64,
    pub a_proc: f64,
    pub a_total: f64,
    pub clipped: bool,
}

/// One list of token records per trajectory of the group, in loss order.
pub fn token_records<T: Scalar>(
    model: &PolicyModel,
    params: &PolicyParams<T>,
    group: &[GroupTrajectory],
    adv: &AdvantageTable,
    opts: LossOptions,
) -> Result<Vec<Vec<TokenRecord>>> {
    let unmasked = PolicyModel {
        masking: false,
        ..*model
    };
    let mut out = vec![Vec::new(); group.len()];
    visit_terms(group, adv, opts.include_env_tokens, |t| {
        let m = if t.env { &unmasked } else { model };
        let lp = m.log_prob(params, &t.view, t.token)?.as_f64();
        let rho = ratio(lp, t.old, t.traj, t.index)?;
        let a = &adv.trajectories[t.traj];
        out[t.traj].push(TokenRecord {
            token: t.token.0,
            block: t.block,
            env: t.env,
            old_logp: t.old,
            logp: lp,
            rho,
            a_out: a.a_out,
            a_proc: a.a_proc[t.block],
            a_total: t.advantage,
            clipped: clip_active(rho, t.advantage, opts.epsilon),
        });
        Ok(())
    })?;
    Ok(out)
}
