//! Schema validity checks behind the format bonuses.

use super::trajectory::{Provenance, Step, StepKind, Trajectory};
use crate::env::world::DOC_LEN;
use crate::vocab::{Marker, Token, Vocab};

fn wrapped(step: &Step, open: Marker) -> Option<&[Token]> {
    let t = &step.tokens;
    (t.len() >= 2 && t[0] == open.token() && *t.last().unwrap() == open.closer().token()).then(|| &t[1..t.len() - 1])
}

/// Matched markers, kind-consistent interior, and kind-consistent provenance.
pub fn is_step_valid(vocab: &Vocab, step: &Step) -> bool {
    if step.provenance.len() != step.tokens.len() {
        return false;
    }
    let expected = if step.kind == StepKind::Retrieval {
        Provenance::Environment
    } else {
        Provenance::Policy
    };
    if step.provenance.iter().any(|&p| p != expected) {
        return false;
    }
    let rel = |t: &Token| vocab.as_relation(*t).is_some();
    let ent = |t: &Token| vocab.as_entity(*t).is_some();
    let Some(open) = step.kind.open_marker() else {
        return false;
    };
    let Some(inner) = wrapped(step, open) else {
        return false;
    };
    match step.kind {
        StepKind::Plan => matches!(inner, [r] if rel(r)),
        StepKind::Subquery => matches!(inner, [r, e] if rel(r) && ent(e)),
        StepKind::Subanswer | StepKind::Answer => !inner.is_empty() && inner.iter().all(ent),
        StepKind::Retrieval => {
            inner.len() % DOC_LEN == 0 && inner.chunks(DOC_LEN).all(|d| ent(&d[0]) && rel(&d[1]) && ent(&d[2]))
        }
        StepKind::Other => false,
    }
}

/// A policy block is `plan, subquery`, `subanswer`, or `answer`, each step valid.
pub fn is_block_valid(vocab: &Vocab, steps: &[Step]) -> bool {
    let kinds: Vec<StepKind> = steps.iter().map(|s| s.kind).collect();
    let shape_ok = matches!(
        kinds.as_slice(),
        [StepKind::Plan, StepKind::Subquery] | [StepKind::Subanswer] | [StepKind::Answer]
    );
    shape_ok && steps.iter().all(|s| is_step_valid(vocab, s))
}

/// Complete workflow: at least one subquery and one retrieval, exactly one
/// answer step which is last, and every step valid.
pub fn is_traj_valid(vocab: &Vocab, traj: &Trajectory) -> bool {
    let count = |k: StepKind| traj.steps.iter().filter(|s| s.kind == k).count();
    count(StepKind::Subquery) >= 1
        && count(StepKind::Retrieval) >= 1
        && count(StepKind::Answer) == 1
        && traj.steps.last().is_some_and(|s| s.kind == StepKind::Answer)
        && traj.steps.iter().all(|s| is_step_valid(vocab, s))
}
