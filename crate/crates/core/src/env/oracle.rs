//! Rule-based stand-ins for a teacher that writes reference reasoning and a
//! judge that compares sibling steps.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::query::QueryInstance;
use super::world::{verbalize, World};
use crate::policy::trajectory::{StateView, Step, StepKind, Trajectory};
use crate::vocab::{Marker, Token, Vocab};

/// Documents per retrieval in reference trajectories.
pub const DEFAULT_K_DOCS: usize = 3;

/// Gold hops already resolved in `steps`: the length of the gold-chain prefix
/// whose documents were retrieved at rank 0, in order.
pub fn gold_progress(vocab: &Vocab, query: &QueryInstance, steps: &[Step]) -> usize {
    let mut p = 0;
    for s in steps {
        if p < query.gold_chain.len() && s.kind == StepKind::Retrieval {
            if let Some(doc) = s.top_document() {
                if doc == verbalize(vocab, &query.gold_chain[p]).as_slice() {
                    p += 1;
                }
            }
        }
    }
    p
}

/// The reference next block for a history.
pub fn oracle_next_block(vocab: &Vocab, query: &QueryInstance, steps: &[Step]) -> Vec<Token> {
    let p = gold_progress(vocab, query, steps);
    let pending = p > 0
        && steps
            .last()
            .is_some_and(|s| s.top_document() == Some(verbalize(vocab, &query.gold_chain[p - 1]).as_slice()));
    if pending {
        vec![
            Marker::SubanswerOpen.token(),
            vocab.entity(query.gold_chain[p - 1].tail),
            Marker::SubanswerClose.token(),
        ]
    } else if p < query.gold_chain.len() {
        let f = query.gold_chain[p];
        let r = vocab.relation(f.relation);
        vec![
            Marker::StepOpen.token(),
            r,
            Marker::StepClose.token(),
            Marker::SubqueryOpen.token(),
            r,
            vocab.entity(f.head),
            Marker::SubqueryClose.token(),
        ]
    } else {
        let mut v = vec![Marker::AnswerOpen.token()];
        v.extend_from_slice(&query.gold_answer);
        v.push(Marker::AnswerClose.token());
        v
    }
}

/// Reference trajectory executing the gold subqueries in order.
pub fn oracle_trajectory(world: &World, query: &Arc<QueryInstance>) -> Trajectory {
    oracle_trajectory_k(world, query, DEFAULT_K_DOCS)
}

pub fn oracle_trajectory_k(world: &World, query: &Arc<QueryInstance>, k_docs: usize) -> Trajectory {
    let vocab = world.vocab();
    let mut traj = Trajectory::new(Arc::clone(query));
    let budget = 2 * query.hop_count + 1;
    while !traj.terminal && traj.num_blocks() < budget {
        let block = oracle_next_block(&vocab, query, &traj.steps);
        traj.push_block(world, &block, k_docs);
    }
    traj
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preference {
    First,
    Second,
    Tie,
}

fn flatten(steps: &[Step]) -> Vec<Token> {
    steps.iter().flat_map(|s| s.tokens.iter().copied()).collect()
}

/// Prefers the candidate that equals the gold continuation of `context`.
/// Off-chain, repeated, or malformed candidates all differ from it.
pub fn oracle_judge(vocab: &Vocab, context: &StateView<'_>, step_a: &[Step], step_b: &[Step]) -> Preference {
    let expected = oracle_next_block(vocab, context.query, context.steps);
    let a = flatten(step_a) == expected;
    let b = flatten(step_b) == expected;
    match (a, b) {
        (true, false) => Preference::First,
        (false, true) => Preference::Second,
        _ => Preference::Tie,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::metrics::token_f1;
    use crate::env::query::gen_query;
    use crate::env::world::{gen_world, WorldConfig};
    use crate::policy::format::is_traj_valid;
    use crate::policy::trajectory::parse_block;
    use crate::policy::{is_step_valid, State};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> World {
        gen_world(
            &WorldConfig {
                num_entities: 50,
                num_relations: 6,
                max_hops: 3,
                ..Default::default()
            },
            11,
        )
        .unwrap()
    }

    #[test]
    fn one_hop_shape() {
        let w = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = Arc::new(gen_query(&w, 1, &mut rng).unwrap());
        let t = oracle_trajectory(&w, &q);
        let kinds: Vec<_> = t.steps.iter().map(|s| s.kind).collect();
        assert_eq!(
            kinds,
            vec![
                StepKind::Plan,
                StepKind::Subquery,
                StepKind::Retrieval,
                StepKind::Subanswer,
                StepKind::Answer
            ]
        );
        assert_eq!(t.num_blocks(), 3);
        assert_eq!(t.answer.as_deref(), Some(q.gold_answer.as_slice()));
    }

    #[test]
    fn three_hop_replays_chain() {
        let w = setup();
        let v = w.vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..25 {
            let q = Arc::new(gen_query(&w, 3, &mut rng).unwrap());
            let t = oracle_trajectory(&w, &q);
            let subanswers: Vec<_> = t
                .steps
                .iter()
                .filter(|s| s.kind == StepKind::Subanswer)
                .map(|s| s.named_entity(&v).unwrap())
                .collect();
            let tails: Vec<_> = q.gold_chain.iter().map(|f| f.tail).collect();
            assert_eq!(subanswers, tails);
            assert_eq!(t.steps.iter().filter(|s| s.kind == StepKind::Subquery).count(), 3);
            assert!(is_traj_valid(&v, &t));
            assert!(t.steps.iter().all(|s| is_step_valid(&v, s)));
            assert_eq!(token_f1(t.answer.as_ref().unwrap(), &q.gold_answer), 1.0);
        }
    }

    #[test]
    fn judge_rules() {
        let w = setup();
        let v = w.vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Arc::new(gen_query(&w, 2, &mut rng).unwrap());
        let full = oracle_trajectory(&w, &q);
        // Context after the first hop is answered.
        let ctx = full.context_state(2);
        let gold = parse_block(&v, &oracle_next_block(&v, &q, &ctx.steps));
        // Off-chain: wrong relation.
        let f = q.gold_chain[1];
        let other_rel = crate::vocab::RelationId((f.relation.0 + 1) % w.config.num_relations);
        let off = parse_block(
            &v,
            &[
                Marker::StepOpen.token(),
                v.relation(other_rel),
                Marker::StepClose.token(),
                Marker::SubqueryOpen.token(),
                v.relation(other_rel),
                v.entity(f.head),
                Marker::SubqueryClose.token(),
            ],
        );
        // Repeats the first hop's subquery.
        let repeat = full.block_steps(0).to_vec();
        let view = ctx.view();
        assert_eq!(oracle_judge(&v, &view, &gold, &off), Preference::First);
        assert_eq!(oracle_judge(&v, &view, &off, &gold), Preference::Second);
        assert_eq!(oracle_judge(&v, &view, &gold, &gold), Preference::Tie);
        assert_eq!(oracle_judge(&v, &view, &gold, &repeat), Preference::First);
        assert_eq!(oracle_judge(&v, &view, &off, &repeat), Preference::Tie);
        let _ = State::new(q);
    }
}
