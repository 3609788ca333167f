//! Supervised warmup with a control-token-weighted likelihood.
//!
//! `L = -Σ_{t∉ctrl} log P(y_t) - λ Σ_{t∈ctrl} log P(y_t)`, summed per example
//! and averaged over the batch.

use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::oracle::oracle_trajectory_k;
use crate::env::query::QueryInstance;
use crate::env::world::World;
use crate::error::{LabError, Result};
use crate::parallel;
use crate::policy::{PolicyModel, PolicyParams, State, StateView, Step};
use crate::scalar::Scalar;
use crate::vocab::{Token, Vocab};

/// One next-block prediction target.
#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub context: State,
    pub target: Vec<Token>,
    /// Whether each target token is a schema marker.
    pub control: Vec<bool>,
}

impl SftExample {
    pub fn new(vocab: &Vocab, context: State, target: Vec<Token>) -> Self {
        let control = target.iter().map(|&t| vocab.is_control(t)).collect();
        Self {
            context,
            target,
            control,
        }
    }
}

/// Line-delimited export form of an example.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftRecord {
    pub query_id: u64,
    pub context: Vec<Step>,
    pub target: Vec<Token>,
    pub control: Vec<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prm_score: Option<f64>,
}

impl From<&SftExample> for SftRecord {
    fn from(e: &SftExample) -> Self {
        Self {
            query_id: e.context.query.id,
            context: e.context.steps.clone(),
            target: e.target.clone(),
            control: e.control.clone(),
            prm_score: None,
        }
    }
}

pub fn write_records<W: Write>(records: &[SftRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// One example per policy block of every reference trajectory.
pub fn build_sft_dataset(world: &World, queries: &[Arc<QueryInstance>], k_docs: usize) -> Vec<SftExample> {
    let vocab = world.vocab();
    let mut out = Vec::new();
    for q in queries {
        let traj = oracle_trajectory_k(world, q, k_docs);
        for b in 0..traj.num_blocks() {
            out.push(SftExample::new(&vocab, traj.context_state(b), traj.block_tokens(b)));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    /// Control-token weight, at least 1.
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            lr: 0.5,
            epochs: 60,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 1.0) {
            return Err(LabError::Config(format!(
                "sft.lambda must be >= 1, got {}",
                self.lambda
            )));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(LabError::Config("sft.lr must be > 0 and sft.batch_size >= 1".into()));
        }
        Ok(())
    }
}

/// Batch-averaged loss and its two likelihood components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SftLoss<T> {
    pub loss: T,
    pub normal_nll: T,
    pub control_nll: T,
}

fn example_nll<T: Scalar>(model: &PolicyModel, params: &PolicyParams<T>, ex: &SftExample) -> Result<(T, T)> {
    let mut normal = T::zero();
    let mut control = T::zero();
    for k in 0..ex.target.len() {
        let view = StateView {
            partial: &ex.target[..k],
            ..ex.context.view()
        };
        let lp = model.log_prob(params, &view, ex.target[k])?;
        if ex.control[k] {
            control -= lp;
        } else {
            normal -= lp;
        }
    }
    Ok((normal, control))
}

pub fn sft_loss_parts<T: Scalar>(
    model: &PolicyModel,
    params: &PolicyParams<T>,
    batch: &[SftExample],
    lambda: f64,
) -> Result<SftLoss<T>> {
    if batch.is_empty() {
        return Err(LabError::EmptyDataset("sft batch".into()));
    }
    let parts = parallel::map(batch, |_, ex| example_nll(model, params, ex))?;
    let n = T::lit(batch.len() as f64);
    let normal: T = parts.iter().map(|p| p.0).sum::<T>() / n;
    let control: T = parts.iter().map(|p| p.1).sum::<T>() / n;
    Ok(SftLoss {
        loss: normal + T::lit(lambda) * control,
        normal_nll: normal,
        control_nll: control,
    })
}

pub fn sft_loss<T: Scalar>(
    model: &PolicyModel,
    params: &PolicyParams<T>,
    batch: &[SftExample],
    lambda: f64,
) -> Result<T> {
    Ok(sft_loss_parts(model, params, batch, lambda)?.loss)
}

/// Loss and its exact gradient.
pub fn sft_loss_grad<T: Scalar>(
    model: &PolicyModel,
    params: &PolicyParams<T>,
    batch: &[SftExample],
    lambda: f64,
) -> Result<(T, PolicyParams<T>)> {
    if batch.is_empty() {
        return Err(LabError::EmptyDataset("sft batch".into()));
    }
    let inv_n = T::lit(1.0 / batch.len() as f64);
    let lam = T::lit(lambda);
    parallel::accumulate(batch.len(), params, |i, g| {
        let ex = &batch[i];
        let mut loss = T::zero();
        for k in 0..ex.target.len() {
            let view = StateView {
                partial: &ex.target[..k],
                ..ex.context.view()
            };
            let w = if ex.control[k] { lam } else { T::one() };
            let lp = model.accumulate_log_prob_grad(params, &view, ex.target[k], -w * inv_n, g)?;
            loss -= w * lp * inv_n;
        }
        Ok(loss)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub control_nll: f64,
    pub normal_nll: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: PolicyParams<T>,
    /// Full-dataset loss before training (epoch 0) and after every epoch.
    pub curve: Vec<EpochRecord>,
}

/// Mini-batch gradient descent with a fixed step size.
pub fn train_sft<T: Scalar>(
    model: &PolicyModel,
    init: &PolicyParams<T>,
    dataset: &[SftExample],
    cfg: &SftConfig,
    stage: &'static str,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(LabError::EmptyDataset(format!("{stage} training set")));
    }
    let mut params = init.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    let record = |epoch: usize, p: &PolicyParams<T>| -> Result<EpochRecord> {
        let l = sft_loss_parts(model, p, dataset, cfg.lambda)?;
        let r = EpochRecord {
            epoch,
            loss: l.loss.as_f64(),
            control_nll: l.control_nll.as_f64(),
            normal_nll: l.normal_nll.as_f64(),
        };
        if !r.loss.is_finite() {
            return Err(LabError::Diverged {
                stage,
                iteration: epoch,
                detail: format!("loss became {}", r.loss),
            });
        }
        Ok(r)
    };
    curve.push(record(0, &params)?);
    let lr = T::lit(cfg.lr);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| dataset[i].clone()));
            let (_, g) = sft_loss_grad(model, &params, &batch, cfg.lambda)?;
            params.axpy(-lr, &g);
        }
        if !params.is_finite() {
            return Err(LabError::Diverged {
                stage,
                iteration: epoch,
                detail: "non-finite parameters".into(),
            });
        }
        curve.push(record(epoch, &params)?);
    }
    Ok(TrainOutcome { params, curve })
}

pub fn write_curve<W: Write>(curve: &[EpochRecord], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in curve {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}
