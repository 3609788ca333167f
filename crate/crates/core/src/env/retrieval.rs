use super::world::{Document, World};
use crate::vocab::{EntityId, RelationId};

/// Top-`k` documents for a `(relation, entity)` subquery.
///
/// The matching fact, when it exists, is always first. Remaining slots are
/// filled from near-miss facts and distractors by lexical overlap with the
/// subquery (number of its two tokens present), ties broken by pool index
/// (facts in sorted order, then distractors).
pub fn retrieve(world: &World, subquery: (RelationId, EntityId), k: usize) -> Vec<Document> {
    let (relation, entity) = subquery;
    let vocab = world.vocab();
    let rt = vocab.relation(relation);
    let et = vocab.entity(entity);
    let gold = world.lookup(relation, entity).copied();

    let pool_len = world.facts.len() + world.distractors.len();
    let mut out = Vec::with_capacity(k.min(pool_len));
    if k == 0 {
        return out;
    }
    if let Some(f) = gold {
        out.push(Document {
            tokens: world.documents[&f].clone(),
            source_fact: Some(f),
        });
    }

    let mut scored: Vec<(u8, usize)> = Vec::with_capacity(pool_len);
    for (i, f) in world.facts.iter().enumerate() {
        if Some(*f) == gold {
            continue;
        }
        scored.push((overlap(&world.documents[f], rt, et), i));
    }
    let nf = world.facts.len();
    for (j, d) in world.distractors.iter().enumerate() {
        scored.push((overlap(d, rt, et), nf + j));
    }
    let need = k - out.len();
    if need > 0 && !scored.is_empty() {
        let cmp = |a: &(u8, usize), b: &(u8, usize)| b.0.cmp(&a.0).then(a.1.cmp(&b.1));
        let take = need.min(scored.len());
        if take < scored.len() {
            scored.select_nth_unstable_by(take - 1, cmp);
            scored.truncate(take);
        }
        scored.sort_by(cmp);
        for (_, idx) in scored {
            out.push(if idx < nf {
                let f = world.facts[idx];
                Document {
                    tokens: world.documents[&f].clone(),
                    source_fact: Some(f),
                }
            } else {
                Document {
                    tokens: world.distractors[idx - nf].clone(),
                    source_fact: None,
                }
            });
        }
    }
    out
}

fn overlap(doc: &[crate::vocab::Token], rt: crate::vocab::Token, et: crate::vocab::Token) -> u8 {
    doc.contains(&rt) as u8 + doc.contains(&et) as u8
}
