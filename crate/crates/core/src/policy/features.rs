//! Fixed-dimension state features for the linear policy.
//!
//! All blocks except `position` are one-hot:
//! focus entity | last retrieved relation | relation at the current hop slot |
//! hops remaining | total hops | last step kind |
//! block phase (kind of open block x position) | position (scalar) | step index.

use serde::{Deserialize, Serialize};

use super::trajectory::{StateView, StepKind, MAX_BLOCK_TOKENS};
use crate::scalar::Scalar;
use crate::vocab::{EntityId, Marker, RelationId, Vocab};

const PHASE_KINDS: usize = 5;
const PHASE_POSITIONS: usize = MAX_BLOCK_TOKENS;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Offsets {
    pub focus: usize,
    pub last_relation: usize,
    pub slot_relation: usize,
    pub remaining: usize,
    pub hops: usize,
    pub last_kind: usize,
    pub phase: usize,
    pub position: usize,
    pub step_index: usize,
    pub dim: usize,
}

/// What the featurizer extracts from a history.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HistorySummary {
    /// Most recently mentioned entity: top retrieved tail, subanswer, or the query head.
    pub focus: Option<EntityId>,
    pub last_relation: Option<RelationId>,
    /// Retrieval steps so far (hops attempted).
    pub progress: usize,
    pub hops: usize,
    pub slot_relation: Option<RelationId>,
    pub last_kind: Option<StepKind>,
}

impl HistorySummary {
    pub fn remaining(&self) -> usize {
        self.hops.saturating_sub(self.progress)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Featurizer {
    pub vocab: Vocab,
    pub max_hops: usize,
    pub max_step_index: usize,
}

impl Featurizer {
    pub fn new(vocab: Vocab, max_hops: usize) -> Self {
        Self {
            vocab,
            max_hops,
            max_step_index: 4 * max_hops + 4,
        }
    }

    pub fn offsets(&self) -> Offsets {
        let e = self.vocab.num_entities as usize;
        let r = self.vocab.num_relations as usize;
        let h = self.max_hops + 1;
        let focus = 0;
        let last_relation = focus + e;
        let slot_relation = last_relation + r;
        let remaining = slot_relation + r;
        let hops = remaining + h;
        let last_kind = hops + h;
        let phase = last_kind + 1 + StepKind::ALL.len();
        let position = phase + 1 + PHASE_KINDS * PHASE_POSITIONS;
        let step_index = position + 1;
        let dim = step_index + self.max_step_index + 1;
        Offsets {
            focus,
            last_relation,
            slot_relation,
            remaining,
            hops,
            last_kind,
            phase,
            position,
            step_index,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.offsets().dim
    }

    pub fn summarize(&self, view: &StateView<'_>) -> HistorySummary {
        let vocab = &self.vocab;
        let mut focus = view.query.head(vocab);
        let mut last_relation = None;
        let mut progress = 0;
        for s in view.steps {
            match s.kind {
                StepKind::Retrieval => {
                    progress += 1;
                    if let Some(doc) = s.top_document() {
                        last_relation = vocab.as_relation(doc[1]);
                        focus = vocab.as_entity(doc[2]);
                    }
                }
                StepKind::Subanswer => {
                    if let Some(e) = s.named_entity(vocab) {
                        focus = Some(e);
                    }
                }
                _ => {}
            }
        }
        let hops = view.query.surface_hops();
        HistorySummary {
            focus,
            last_relation,
            progress,
            hops,
            slot_relation: view.query.relation_at(vocab, progress),
            last_kind: view.steps.last().map(|s| s.kind),
        }
    }

    /// Sparse `(index, value)` features; all values are 1 except `position`.
    pub fn active(&self, view: &StateView<'_>) -> Vec<(usize, f64)> {
        let o = self.offsets();
        let s = self.summarize(view);
        let mut out = Vec::with_capacity(10);
        if let Some(e) = s.focus {
            out.push((o.focus + e.0 as usize, 1.0));
        }
        if let Some(r) = s.last_relation {
            out.push((o.last_relation + r.0 as usize, 1.0));
        }
        if let Some(r) = s.slot_relation {
            out.push((o.slot_relation + r.0 as usize, 1.0));
        }
        out.push((o.remaining + s.remaining().min(self.max_hops), 1.0));
        out.push((o.hops + s.hops.min(self.max_hops), 1.0));
        out.push((o.last_kind + s.last_kind.map_or(0, |k| 1 + k.index()), 1.0));
        out.push((o.phase + self.phase_index(view.partial), 1.0));
        if !view.partial.is_empty() {
            out.push((o.position, view.partial.len() as f64 / MAX_BLOCK_TOKENS as f64));
        }
        out.push((o.step_index + view.step_index().min(self.max_step_index), 1.0));
        out
    }

    fn phase_index(&self, partial: &[crate::vocab::Token]) -> usize {
        let Some(&first) = partial.first() else {
            return 0;
        };
        let kind = match self.vocab.marker_of(first) {
            Some(Marker::StepOpen) => 0,
            Some(Marker::SubqueryOpen) => 1,
            Some(Marker::SubanswerOpen) => 2,
            Some(Marker::AnswerOpen) => 3,
            _ => 4,
        };
        1 + kind * PHASE_POSITIONS + (partial.len() - 1).min(PHASE_POSITIONS - 1)
    }

    /// Phase feature index for a block kind and position, for hand-built weights.
    pub fn phase_feature(&self, open: Marker, position: usize) -> usize {
        let kind = match open {
            Marker::StepOpen => 0,
            Marker::SubqueryOpen => 1,
            Marker::SubanswerOpen => 2,
            Marker::AnswerOpen => 3,
            _ => 4,
        };
        self.offsets().phase + 1 + kind * PHASE_POSITIONS + position.min(PHASE_POSITIONS - 1)
    }

    pub fn featurize<T: Scalar>(&self, view: &StateView<'_>) -> Vec<T> {
        let mut x = vec![T::zero(); self.dim()];
        for (j, v) in self.active(view) {
            x[j] = T::lit(v);
        }
        x
    }
}
