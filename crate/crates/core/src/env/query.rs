use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::world::{Fact, World};
use crate::error::{LabError, Result};
use crate::vocab::{EntityId, RelationId, Token, Vocab};

/// A multi-hop question: start entity followed by the relation path to follow.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QueryInstance {
    pub id: u64,
    /// `[entity(head), relation(r1), ..., relation(r_hops)]`.
    pub query_tokens: Vec<Token>,
    pub hop_count: usize,
    pub gold_chain: Vec<Fact>,
    pub gold_subqueries: Vec<(RelationId, EntityId)>,
    pub gold_answer: Vec<Token>,
}

impl QueryInstance {
    pub fn from_chain(vocab: &Vocab, id: u64, chain: Vec<Fact>) -> Self {
        assert!(!chain.is_empty());
        let mut query_tokens = vec![vocab.entity(chain[0].head)];
        query_tokens.extend(chain.iter().map(|f| vocab.relation(f.relation)));
        let gold_subqueries = chain.iter().map(|f| (f.relation, f.head)).collect();
        let gold_answer = vec![vocab.entity(chain.last().unwrap().tail)];
        Self {
            id,
            query_tokens,
            hop_count: chain.len(),
            gold_chain: chain,
            gold_subqueries,
            gold_answer,
        }
    }

    pub fn head(&self, vocab: &Vocab) -> Option<EntityId> {
        self.query_tokens.first().and_then(|&t| vocab.as_entity(t))
    }

    /// Relation at hop `slot` as read from the query surface.
    pub fn relation_at(&self, vocab: &Vocab, slot: usize) -> Option<RelationId> {
        self.query_tokens.get(slot + 1).and_then(|&t| vocab.as_relation(t))
    }

    /// Hop count as read from the query surface (the policy never reads gold fields).
    pub fn surface_hops(&self) -> usize {
        self.query_tokens.len().saturating_sub(1)
    }

    /// Identity of the question irrespective of id.
    pub fn key(&self) -> &[Token] {
        &self.query_tokens
    }

    pub fn check_invariants(&self) -> bool {
        self.gold_chain.len() == self.hop_count
            && self.gold_chain.windows(2).all(|w| w[0].tail == w[1].head)
            && self.gold_subqueries.len() == self.hop_count
    }
}

/// Samples a `hops`-hop question whose chain visits distinct entities.
pub fn gen_query<R: Rng>(world: &World, hops: usize, rng: &mut R) -> Result<QueryInstance> {
    if hops == 0 || hops > world.config.max_hops {
        return Err(LabError::NoChain { hops });
    }
    let mut starts = world.entities.clone();
    starts.shuffle(rng);
    for &s in &starts {
        let mut path = Vec::with_capacity(hops);
        if extend(world, s, hops, &mut path, rng) {
            return Ok(QueryInstance::from_chain(&world.vocab(), 0, path));
        }
    }
    Err(LabError::NoChain { hops })
}

fn extend<R: Rng>(world: &World, at: EntityId, remaining: usize, path: &mut Vec<Fact>, rng: &mut R) -> bool {
    if remaining == 0 {
        return true;
    }
    let mut out: Vec<Fact> = world.outgoing(at).copied().collect();
    out.shuffle(rng);
    for f in out {
        let seen = f.tail == path.first().map_or(at, |p| p.head) || path.iter().any(|p| p.tail == f.tail);
        if seen {
            continue;
        }
        path.push(f);
        if extend(world, f.tail, remaining - 1, path, rng) {
            return true;
        }
        path.pop();
    }
    false
}

/// Draws `count` distinct questions (by surface form) of the given hop depths,
/// skipping any whose surface appears in `exclude`.
pub fn gen_query_set<R: Rng>(
    world: &World,
    hops: &[usize],
    count: usize,
    exclude: &std::collections::HashSet<Vec<Token>>,
    first_id: u64,
    rng: &mut R,
) -> Result<Vec<QueryInstance>> {
    if hops.is_empty() {
        return Err(LabError::Config("empty hop list".into()));
    }
    let mut seen = exclude.clone();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        let h = hops[out.len() % hops.len()];
        let mut q = gen_query(world, h, rng)?;
        attempts += 1;
        if seen.insert(q.query_tokens.clone()) {
            q.id = first_id + out.len() as u64;
            out.push(q);
        } else if attempts > 50 * count + 1000 {
            return Err(LabError::Config(format!(
                "world too small for {count} distinct questions with hops {hops:?}"
            )));
        }
    }
    Ok(out)
}

pub fn write_queries<W: Write>(queries: &[QueryInstance], mut w: W) -> Result<()> {
    for q in queries {
        writeln!(w, "{}", serde_json::to_string(q)?)?;
    }
    Ok(())
}

pub fn read_queries<R: BufRead>(r: R) -> Result<Vec<QueryInstance>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
