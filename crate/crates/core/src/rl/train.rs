use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::advantage::build_advantages;
use super::loss::{clipped_loss_grad, token_records, LossOptions, TokenRecord};
use super::{reward_bundle, RlConfig};
use crate::env::query::QueryInstance;
use crate::env::world::World;
use crate::error::{LabError, Result};
use crate::eval::evaluate;
use crate::policy::rollout::{rollout, RolloutConfig};
use crate::policy::{is_traj_valid, PolicyModel, PolicyParams, StateView, StepKind, Trajectory};
use crate::prm::PrmParams;
use crate::scalar::Scalar;
use crate::seeds;

/// A sampled trajectory with the sampling policy's log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupTrajectory {
    pub trajectory: Trajectory,
    /// Per policy token, generation order.
    pub old_logp: Vec<f64>,
    /// Per retrieval token under the unmasked policy; empty unless requested.
    pub env_old_logp: Vec<f64>,
}

pub fn env_log_probs<T: Scalar>(model: &PolicyModel, params: &PolicyParams<T>, t: &Trajectory) -> Result<Vec<f64>> {
    let unmasked = PolicyModel {
        masking: false,
        ..*model
    };
    let mut out = Vec::new();
    for b in 0..t.num_blocks() {
        let end = t.blocks[b].end;
        if let Some(step) = t.steps.get(end).filter(|s| s.kind == StepKind::Retrieval) {
            for j in 0..step.tokens.len() {
                let view = StateView {
                    query: &t.query,
                    steps: &t.steps[..end],
                    partial: &step.tokens[..j],
                };
                out.push(unmasked.log_prob(params, &view, step.tokens[j])?.as_f64());
            }
        }
    }
    Ok(out)
}

/// `g` rollouts from one snapshot.
pub fn group_sample<T: Scalar, R: Rng>(
    model: &PolicyModel,
    params: &PolicyParams<T>,
    world: &World,
    query: &Arc<QueryInstance>,
    g: usize,
    rollout_cfg: &RolloutConfig,
    with_env: bool,
    rng: &mut R,
) -> Result<Vec<GroupTrajectory>> {
    if g < 2 {
        return Err(LabError::Config("rl.group_size must be >= 2".into()));
    }
    (0..g)
        .map(|_| {
            let s = rollout(model, params, world, Arc::clone(query), rollout_cfg, rng)?;
            let env_old_logp = if with_env {
                env_log_probs(model, params, &s.trajectory)?
            } else {
                Vec::new()
            };
            Ok(GroupTrajectory {
                old_logp: s.logp.iter().map(|x| x.as_f64()).collect(),
                trajectory: s.trajectory,
                env_old_logp,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlMetrics {
    pub iteration: usize,
    pub mean_r_out: f64,
    pub mean_r_step: f64,
    pub format_rate: f64,
    pub eval_em: Option<f64>,
    pub eval_f1: Option<f64>,
    pub wall_ms: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RlOutcome<T> {
    pub params: PolicyParams<T>,
    pub metrics: Vec<RlMetrics>,
}

impl<T> RlOutcome<T> {
    /// First iteration whose mean outcome reward reaches `threshold`.
    pub fn iterations_to(&self, threshold: f64) -> Option<usize> {
        self.metrics
            .iter()
            .find(|m| m.mean_r_out >= threshold)
            .map(|m| m.iteration)
    }

    pub fn final_reward(&self) -> f64 {
        self.metrics.last().map_or(f64::NAN, |m| m.mean_r_out)
    }
}

struct Round<T> {
    groups: Vec<(Vec<GroupTrajectory>, super::advantage::AdvantageTable)>,
    mean_r_out: f64,
    mean_r_step: f64,
    format_rate: f64,
    _p: std::marker::PhantomData<T>,
}

#[allow(clippy::too_many_arguments)]
fn sample_round<T: Scalar>(
    model: &PolicyModel,
    params: &PolicyParams<T>,
    prm: &PrmParams<f64>,
    world: &World,
    queries: &[Arc<QueryInstance>],
    cfg: &RlConfig,
    limits: &RolloutConfig,
    it: usize,
) -> Result<Round<T>> {
    let vocab = world.vocab();
    let mut pick = seeds::rng(cfg.seed, "rl-batch", it as u64);
    let q = cfg.queries_per_iter.min(queries.len());
    let chosen: Vec<usize> = rand::seq::index::sample(&mut pick, queries.len(), q).into_vec();
    let rcfg = RolloutConfig {
        temperature: cfg.temperature,
        ..*limits
    };
    let groups = crate::parallel::map(&chosen, |j, &qi| {
        let mut rng = seeds::rng(cfg.seed, "rl-group", (it * cfg.queries_per_iter + j) as u64);
        let group = group_sample(
            model,
            params,
            world,
            &queries[qi],
            cfg.group_size,
            &rcfg,
            cfg.include_env_tokens,
            &mut rng,
        )?;
        let rewards: Vec<_> = group
            .iter()
            .map(|g| reward_bundle(prm, &vocab, &g.trajectory, cfg.nu1, cfg.nu2))
            .collect();
        let trajs: Vec<Trajectory> = group.iter().map(|g| g.trajectory.clone()).collect();
        let adv = build_advantages(&trajs, &rewards, cfg.beta, cfg.sigma_floor, cfg.step_scope)?;
        Ok((group, adv, rewards))
    })?;
    let mut r_out = 0.0;
    let mut r_step = 0.0;
    let mut n_step = 0usize;
    let mut valid = 0usize;
    let mut n = 0usize;
    let mut out = Vec::with_capacity(groups.len());
    for (group, adv, rewards) in groups {
        for (g, r) in group.iter().zip(&rewards) {
            r_out += r.outcome;
            r_step += r.step.iter().sum::<f64>();
            n_step += r.step.len();
            valid += is_traj_valid(&vocab, &g.trajectory) as usize;
            n += 1;
        }
        out.push((group, adv));
    }
    Ok(Round {
        groups: out,
        mean_r_out: r_out / n as f64,
        mean_r_step: if n_step == 0 { 0.0 } else { r_step / n_step as f64 },
        format_rate: valid as f64 / n as f64,
        _p: std::marker::PhantomData,
    })
}

/// Sample, score, normalize, update; one row of metrics per sampling round
/// plus a closing row for the final parameters. `limits` supplies the step
/// budget and documents per retrieval; its temperature is ignored.
#[allow(clippy::too_many_arguments)]
pub fn train_rl<T: Scalar>(
    model: &PolicyModel,
    init: &PolicyParams<T>,
    prm: &PrmParams<f64>,
    world: &World,
    train_queries: &[Arc<QueryInstance>],
    eval_queries: &[Arc<QueryInstance>],
    cfg: &RlConfig,
    limits: &RolloutConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<RlOutcome<T>> {
    cfg.validate()?;
    if train_queries.is_empty() {
        return Err(LabError::EmptyDataset("rl training queries".into()));
    }
    let opts = LossOptions {
        epsilon: cfg.epsilon,
        include_env_tokens: cfg.include_env_tokens,
    };
    let mut params = init.clone();
    let mut metrics = Vec::with_capacity(cfg.iterations + 1);
    let mut dump = match checkpoint_dir {
        Some(dir) if cfg.dump_every > 0 => Some(crate::harness::io::create(&dir.join(GROUP_DUMP_FILE))?),
        _ => None,
    };
    for it in 0..=cfg.iterations {
        let start = cfg.record_wall_time.then(Instant::now);
        let round = sample_round(model, &params, prm, world, train_queries, cfg, limits, it)?;
        let eval_now =
            cfg.eval_every > 0 && !eval_queries.is_empty() && (it % cfg.eval_every == 0 || it == cfg.iterations);
        let report = if eval_now {
            Some(evaluate(
                model,
                &params,
                world,
                eval_queries,
                limits.k_docs,
                limits.max_steps,
            )?)
        } else {
            None
        };
        if it < cfg.iterations {
            let last_good = params.clone();
            for epoch in 0..cfg.update_epochs {
                if let Some(w) = dump
                    .as_mut()
                    .filter(|_| epoch + 1 == cfg.update_epochs && it % cfg.dump_every == 0)
                {
                    dump_round(model, &params, &round.groups, opts, it, w)?;
                }
                let parts =
                    crate::parallel::map(&round.groups, |_, (g, a)| clipped_loss_grad(model, &params, g, a, opts))?;
                let mut grad = params.zeros_like();
                let mut loss = 0.0;
                let scale = T::lit(1.0 / parts.len() as f64);
                for (l, g) in parts {
                    loss += l;
                    grad.axpy(scale, &g);
                }
                params.axpy(T::lit(-cfg.lr), &grad);
                if !loss.is_finite() || !params.is_finite() {
                    if let Some(dir) = checkpoint_dir {
                        last_good.save(&dir.join("rl_last_good.json"))?;
                    }
                    return Err(LabError::Diverged {
                        stage: "rl",
                        iteration: it,
                        detail: format!("loss {loss}, parameters finite: {}", params.is_finite()),
                    });
                }
            }
        }
        metrics.push(RlMetrics {
            iteration: it,
            mean_r_out: round.mean_r_out,
            mean_r_step: round.mean_r_step,
            format_rate: round.format_rate,
            eval_em: report.as_ref().map(|r| r.em),
            eval_f1: report.as_ref().map(|r| r.f1),
            wall_ms: start.map(|s| s.elapsed().as_millis() as u64),
        });
    }
    if let Some(mut w) = dump {
        std::io::Write::flush(&mut w)?;
    }
    Ok(RlOutcome { params, metrics })
}

/// One line of the trajectory-group dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDump {
    pub iteration: usize,
    pub group: usize,
    pub member: usize,
    pub query_id: u64,
    pub tokens: Vec<TokenRecord>,
}

pub const GROUP_DUMP_FILE: &str = "rl_groups.jsonl";

#[allow(clippy::too_many_arguments)]
fn dump_round<T: Scalar, W: std::io::Write>(
    model: &PolicyModel,
    params: &PolicyParams<T>,
    groups: &[(Vec<GroupTrajectory>, super::advantage::AdvantageTable)],
    opts: LossOptions,
    iteration: usize,
    w: &mut W,
) -> Result<()> {
    for (gi, (g, a)) in groups.iter().enumerate() {
        for (member, tokens) in token_records(model, params, g, a, opts)?.into_iter().enumerate() {
            let rec = GroupDump {
                iteration,
                group: gi,
                member,
                query_id: g[member].trajectory.query.id,
                tokens,
            };
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn write_metrics<W: std::io::Write>(rows: &[RlMetrics], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}
