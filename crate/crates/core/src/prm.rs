//! Step verifier trained on sibling preferences with a pairwise logistic loss.
//!
//! A candidate block is scored by a linear model over
//! `[policy features of (context + block) | local consistency checks | block kind]`.
//! Most checks compare the block with the immediately preceding context. The
//! rest compare it with the relation path confirmed so far by retrieved
//! documents, which is observable without access to the gold chain.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::query::QueryInstance;
use crate::error::{LabError, Result};
use crate::policy::features::Featurizer;
use crate::policy::model::{check_header, Checkpoint, CHECKPOINT_VERSION};
use crate::policy::{is_block_valid, State, StateView, Step, StepKind};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::vocab::{EntityId, RelationId, Vocab, EOS};

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub context: State,
    pub chosen: Vec<Step>,
    pub rejected: Vec<Step>,
    pub tree_id: u64,
    pub node_id: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRecord {
    pub tree_id: u64,
    pub node_id: usize,
    pub query: QueryInstance,
    pub context: Vec<Step>,
    pub chosen: Vec<Step>,
    pub rejected: Vec<Step>,
}

pub fn write_pairs<W: Write>(pairs: &[PreferencePair], mut w: W) -> Result<()> {
    for p in pairs {
        let rec = PairRecord {
            tree_id: p.tree_id,
            node_id: p.node_id,
            query: (*p.context.query).clone(),
            context: p.context.steps.clone(),
            chosen: p.chosen.clone(),
            rejected: p.rejected.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_pairs<R: BufRead>(r: R) -> Result<Vec<PreferencePair>> {
    let mut out = Vec::new();
    let mut last: Option<Arc<QueryInstance>> = None;
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line)?;
        let query = match &last {
            Some(q) if **q == rec.query => Arc::clone(q),
            _ => Arc::new(rec.query),
        };
        last = Some(Arc::clone(&query));
        out.push(PreferencePair {
            context: State {
                query,
                steps: rec.context,
                partial: Vec::new(),
            },
            chosen: rec.chosen,
            rejected: rec.rejected,
            tree_id: rec.tree_id,
            node_id: rec.node_id,
        });
    }
    Ok(out)
}

const NUM_CHECKS: usize = 6;
const NUM_KINDS: usize = 4;

/// Feature map for (context, block).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrmFeaturizer {
    pub base: Featurizer,
}

impl PrmFeaturizer {
    pub fn new(vocab: Vocab, max_hops: usize) -> Self {
        Self {
            base: Featurizer::new(vocab, max_hops),
        }
    }

    pub fn dim(&self) -> usize {
        self.base.dim() + NUM_CHECKS + NUM_KINDS
    }

    /// Index of the first step-kind indicator (subquery, subanswer, answer, other).
    pub fn kind_offset(&self) -> usize {
        self.base.dim() + NUM_CHECKS
    }

    /// Sparse features; duplicate indices do not occur.
    pub fn active(&self, context: &StateView<'_>, block: &[Step]) -> Vec<(usize, f64)> {
        let vocab = &self.base.vocab;
        let mut joined: Vec<Step> = Vec::with_capacity(context.steps.len() + block.len());
        joined.extend_from_slice(context.steps);
        joined.extend_from_slice(block);
        let after = StateView {
            query: context.query,
            steps: &joined,
            partial: &[],
        };
        let mut out = self.base.active(&after);

        let before = self.base.summarize(context);
        let prev = context.steps.last();
        let top_tail = prev.and_then(|s| s.top_document()).and_then(|d| vocab.as_entity(d[2]));
        let sub = block.iter().find_map(|s| s.as_subquery(vocab));
        let plan_rel = block
            .iter()
            .find(|s| s.kind == StepKind::Plan)
            .and_then(|s| match s.interior() {
                [r] => vocab.as_relation(*r),
                _ => None,
            });
        let named = |k: StepKind| block.iter().find(|s| s.kind == k).and_then(|s| s.named_entity(vocab));
        let repeated = sub.is_some_and(|sq| context.steps.iter().any(|s| s.as_subquery(vocab) == Some(sq)));
        let subanswer = named(StepKind::Subanswer);
        let answer = named(StepKind::Answer);
        let chain = ChainWalk::new(vocab, context);
        let local = match (sub, subanswer, answer) {
            (Some((r, e)), _, _) => Some(r) == before.slot_relation && Some(e) == before.focus && plan_rel == Some(r),
            (None, Some(e), _) => Some(e) == top_tail,
            (None, None, Some(e)) => Some(e) == before.focus,
            _ => false,
        };
        let grounded = match (sub, subanswer, answer) {
            (Some((r, _)), _, _) => !chain.pending && sub == chain.next_subquery && plan_rel == Some(r),
            (None, Some(e), _) => chain.pending && Some(e) == chain.entity,
            (None, None, Some(e)) => !chain.pending && chain.complete && Some(e) == chain.entity,
            _ => false,
        };
        let checks = [
            is_block_valid(vocab, block),
            local,
            grounded,
            repeated,
            block.iter().any(|s| s.kind == StepKind::Subanswer) && prev.is_none_or(|s| s.kind != StepKind::Retrieval),
            block.last().and_then(|s| s.tokens.last()) == Some(&EOS),
        ];
        let o = self.base.dim();
        for (i, &c) in checks.iter().enumerate() {
            if c {
                out.push((o + i, 1.0));
            }
        }
        let kind = match block.first().map(|s| s.kind) {
            Some(StepKind::Plan) | Some(StepKind::Subquery) => 0,
            Some(StepKind::Subanswer) => 1,
            Some(StepKind::Answer) => 2,
            _ => 3,
        };
        out.push((self.kind_offset() + kind, 1.0));
        out
    }
}

/// The prefix of the question's relation path confirmed by retrieved
/// documents: each hop counts once a top document joins the current entity
/// to its successor through the next relation of the question.
struct ChainWalk {
    entity: Option<EntityId>,
    next_subquery: Option<(RelationId, EntityId)>,
    /// The last step is the retrieval that confirmed the latest hop.
    pending: bool,
    complete: bool,
}

impl ChainWalk {
    fn new(vocab: &Vocab, view: &StateView<'_>) -> Self {
        let q = view.query;
        let mut entity = q.head(vocab);
        let mut hops = 0;
        let mut pending = false;
        for s in view.steps {
            pending = false;
            let Some(doc) = s.top_document() else {
                continue;
            };
            let (Some(cur), Some(r)) = (entity, q.relation_at(vocab, hops)) else {
                continue;
            };
            if vocab.as_entity(doc[0]) == Some(cur) && vocab.as_relation(doc[1]) == Some(r) {
                entity = vocab.as_entity(doc[2]);
                hops += 1;
                pending = true;
            }
        }
        let next_subquery = match (q.relation_at(vocab, hops), entity) {
            (Some(r), Some(e)) => Some((r, e)),
            _ => None,
        };
        Self {
            entity,
            next_subquery,
            pending,
            complete: hops == q.surface_hops(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrmParams<T> {
    pub featurizer: PrmFeaturizer,
    pub weights: Vec<T>,
    pub bias: T,
}

const PRM_FORMAT: &str = "steplab-prm";

impl<T: Scalar> PrmParams<T> {
    pub fn zeros(featurizer: PrmFeaturizer) -> Self {
        Self {
            featurizer,
            weights: vec![T::zero(); featurizer.dim()],
            bias: T::zero(),
        }
    }

    /// `R(x, y)`: finite and unbounded.
    pub fn score(&self, context: &StateView<'_>, block: &[Step]) -> T {
        self.bias
            + self
                .featurizer
                .active(context, block)
                .into_iter()
                .map(|(j, x)| self.weights[j] * T::lit(x))
                .sum::<T>()
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            format: PRM_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            params: self,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint<Self> = serde_json::from_str(s)?;
        check_header(&ck.format, ck.version, PRM_FORMAT)?;
        if ck.params.weights.len() != ck.params.featurizer.dim() {
            return Err(LabError::Shape("prm weights disagree with featurizer".into()));
        }
        Ok(ck.params)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut s = self.to_json()?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(std::fs::read_to_string(path)?.trim_end())
    }
}

pub fn prm_score<T: Scalar>(prm: &PrmParams<T>, context: &StateView<'_>, block: &[Step]) -> T {
    prm.score(context, block)
}

/// Score margin `R(x, y+) - R(x, y-)`.
pub fn margin<T: Scalar>(prm: &PrmParams<T>, pair: &PreferencePair) -> T {
    let v = pair.context.view();
    prm.score(&v, &pair.chosen) - prm.score(&v, &pair.rejected)
}

/// `-ln σ(Δ)` as a function of the margin.
pub fn ranking_loss_from_margin<T: Scalar>(delta: T) -> T {
    softplus(-delta)
}

pub fn ranking_loss<T: Scalar>(prm: &PrmParams<T>, pair: &PreferencePair) -> T {
    ranking_loss_from_margin(margin(prm, pair))
}

/// Difference features `ψ(y+) - ψ(y-)` with zero entries dropped.
pub fn pair_delta(f: &PrmFeaturizer, pair: &PreferencePair) -> Vec<(usize, f64)> {
    let v = pair.context.view();
    let mut d: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
    for (j, x) in f.active(&v, &pair.chosen) {
        *d.entry(j).or_default() += x;
    }
    for (j, x) in f.active(&v, &pair.rejected) {
        *d.entry(j).or_default() -= x;
    }
    d.into_iter().filter(|&(_, x)| x != 0.0).collect()
}

/// Gradient of the loss with respect to the weights, and the loss.
/// The bias receives no gradient: it cancels in the margin.
pub fn ranking_loss_grad<T: Scalar>(prm: &PrmParams<T>, pair: &PreferencePair) -> (T, PrmParams<T>) {
    let delta = pair_delta(&prm.featurizer, pair);
    let m: T = delta.iter().map(|&(j, x)| prm.weights[j] * T::lit(x)).sum();
    let coef = -sigmoid(-m);
    let mut g = PrmParams::zeros(prm.featurizer);
    for (j, x) in delta {
        g.weights[j] = coef * T::lit(x);
    }
    (ranking_loss_from_margin(m), g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrmConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of search trees held out for evaluation.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for PrmConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            epochs: 30,
            batch_size: 64,
            holdout: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrmEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub heldout_loss: f64,
    pub heldout_acc: f64,
}

#[derive(Debug, Clone)]
pub struct PrmOutcome {
    pub params: PrmParams<f64>,
    pub curve: Vec<PrmEpoch>,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
}

impl PrmOutcome {
    pub fn heldout_accuracy(&self) -> f64 {
        self.curve.last().map_or(0.0, |e| e.heldout_acc)
    }
}

/// Splits pairs by tree id: a seeded shuffle of the distinct ids assigns the
/// first `holdout` fraction to the held-out side.
pub fn split_by_tree(pairs: &[PreferencePair], holdout: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut trees: Vec<u64> = pairs.iter().map(|p| p.tree_id).collect();
    trees.sort_unstable();
    trees.dedup();
    trees.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_hold = ((trees.len() as f64) * holdout).round() as usize;
    let n_hold = if holdout > 0.0 && trees.len() > 1 {
        n_hold.clamp(1, trees.len() - 1)
    } else {
        0
    };
    let held: std::collections::HashSet<u64> = trees[..n_hold].iter().copied().collect();
    (0..pairs.len()).partition(|&i| !held.contains(&pairs[i].tree_id))
}

fn evaluate(w: &[f64], deltas: &[Vec<(usize, f64)>], idx: &[usize]) -> (f64, f64) {
    if idx.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for &i in idx {
        let m: f64 = deltas[i].iter().map(|&(j, x)| w[j] * x).sum();
        loss += softplus(-m);
        if m > 0.0 {
            correct += 1;
        }
    }
    let n = idx.len() as f64;
    (loss / n, correct as f64 / n)
}

/// Mean of `(R(x, y+) + R(x, y-)) / 2` over the indexed pairs.
fn midpoint(params: &PrmParams<f64>, pairs: &[PreferencePair], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let total: f64 = idx
        .iter()
        .map(|&i| {
            let p = &pairs[i];
            let v = p.context.view();
            0.5 * (params.score(&v, &p.chosen) + params.score(&v, &p.rejected))
        })
        .sum();
    total / idx.len() as f64
}

/// Mini-batch gradient descent on the mean pairwise loss. The loss fixes
/// scores only up to a constant, so the bias is then set to put the mean
/// chosen/rejected midpoint of the training pairs at zero; a threshold of
/// zero then separates the two sides on average.
pub fn train_prm(featurizer: PrmFeaturizer, pairs: &[PreferencePair], cfg: &PrmConfig) -> Result<PrmOutcome> {
    if pairs.is_empty() {
        return Err(LabError::EmptyDataset("preference pairs".into()));
    }
    let (train, held) = split_by_tree(pairs, cfg.holdout, cfg.seed);
    let deltas: Vec<Vec<(usize, f64)>> = crate::parallel::map(pairs, |_, p| Ok(pair_delta(&featurizer, p)))?;
    let mut params = PrmParams::<f64>::zeros(featurizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order = train.clone();
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    let log = |epoch: usize, w: &[f64]| {
        let (tl, ta) = evaluate(w, &deltas, &train);
        let (hl, ha) = evaluate(w, &deltas, &held);
        PrmEpoch {
            epoch,
            train_loss: tl,
            train_acc: ta,
            heldout_loss: hl,
            heldout_acc: ha,
        }
    };
    curve.push(log(0, &params.weights));
    let bs = cfg.batch_size.max(1);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(bs) {
            let mut g = vec![0.0; params.weights.len()];
            for &i in batch {
                let m: f64 = deltas[i].iter().map(|&(j, x)| params.weights[j] * x).sum();
                let coef = -sigmoid(-m) / batch.len() as f64;
                for &(j, x) in &deltas[i] {
                    g[j] += coef * x;
                }
            }
            for (w, gj) in params.weights.iter_mut().zip(&g) {
                *w -= cfg.lr * gj;
            }
        }
        let rec = log(epoch, &params.weights);
        if !rec.train_loss.is_finite() || !params.is_finite() {
            return Err(LabError::Diverged {
                stage: "prm",
                iteration: epoch,
                detail: format!("training loss became {}", rec.train_loss),
            });
        }
        curve.push(rec);
    }
    params.bias = -midpoint(&params, pairs, &train);
    Ok(PrmOutcome {
        params,
        curve,
        train_pairs: train.len(),
        heldout_pairs: held.len(),
    })
}

pub fn write_curve<W: Write>(curve: &[PrmEpoch], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in curve {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}
