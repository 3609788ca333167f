use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::vocab::{EntityId, RelationId, Token, Vocab};

/// Upper bound on supported chain length.
pub const MAX_SUPPORTED_HOPS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub num_entities: u32,
    pub num_relations: u32,
    pub num_distractors: u32,
    pub max_hops: usize,
    /// Probability that a free (head, relation) slot receives a random fact.
    pub fact_density: f64,
    /// Extra planted chains of length `max_hops`, beyond the one always present.
    pub planted_chains: u32,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_entities: 60,
            num_relations: 5,
            num_distractors: 60,
            max_hops: 3,
            fact_density: 0.35,
            planted_chains: 8,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_relations < 1 {
            return Err(LabError::Config("num_relations must be >= 1".into()));
        }
        if !(1..=MAX_SUPPORTED_HOPS).contains(&self.max_hops) {
            return Err(LabError::Config(format!(
                "max_hops must lie in [1, {MAX_SUPPORTED_HOPS}], got {}",
                self.max_hops
            )));
        }
        if !(0.0..=1.0).contains(&self.fact_density) {
            return Err(LabError::Config("fact_density must lie in [0, 1]".into()));
        }
        if (self.num_entities as usize) < 2 * self.max_hops {
            return Err(LabError::InfeasibleWorld(format!(
                "{} entities cannot embed a {}-hop chain (need at least {})",
                self.num_entities,
                self.max_hops,
                2 * self.max_hops
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Fact {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub tokens: Vec<Token>,
    pub source_fact: Option<Fact>,
}

/// Every document is `[entity, relation, entity]`.
pub const DOC_LEN: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub seed: u64,
    pub entities: Vec<EntityId>,
    pub relations: Vec<RelationId>,
    /// Sorted, with at most one fact per (head, relation).
    pub facts: Vec<Fact>,
    pub documents: BTreeMap<Fact, Vec<Token>>,
    pub distractors: Vec<Vec<Token>>,
    index: HashMap<(RelationId, EntityId), usize>,
}

pub fn verbalize(vocab: &Vocab, f: &Fact) -> Vec<Token> {
    vec![vocab.entity(f.head), vocab.relation(f.relation), vocab.entity(f.tail)]
}

/// Builds a world deterministically from `(config, seed)`.
pub fn gen_world(config: &WorldConfig, seed: u64) -> Result<World> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ne = config.num_entities;
    let nr = config.num_relations;
    let mut edges: BTreeMap<(u32, u32), u32> = BTreeMap::new();

    // Planted chains of distinct entities guarantee max_hops-chains exist.
    let mut order: Vec<u32> = (0..ne).collect();
    for c in 0..=config.planted_chains {
        order.shuffle(&mut rng);
        let chain = &order[..=config.max_hops];
        let mut ok = true;
        let mut planned = Vec::with_capacity(config.max_hops);
        for w in chain.windows(2) {
            let r = rng.gen_range(0..nr);
            if edges.contains_key(&(w[0], r)) {
                ok = false;
                break;
            }
            planned.push((w[0], r, w[1]));
        }
        if ok || c == 0 {
            for (h, r, t) in planned {
                edges.entry((h, r)).or_insert(t);
            }
        }
    }
    for h in 0..ne {
        for r in 0..nr {
            if !edges.contains_key(&(h, r)) && rng.gen_bool(config.fact_density) {
                let mut t = rng.gen_range(0..ne - 1);
                if t >= h {
                    t += 1;
                }
                edges.insert((h, r), t);
            }
        }
    }

    let vocab = Vocab::new(nr, ne);
    let facts: Vec<Fact> = {
        let mut v: Vec<Fact> = edges
            .iter()
            .map(|(&(h, r), &t)| Fact {
                head: EntityId(h),
                relation: RelationId(r),
                tail: EntityId(t),
            })
            .collect();
        v.sort();
        v
    };
    let documents = facts.iter().map(|f| (*f, verbalize(&vocab, f))).collect();

    let saturated = edges.len() as u64 >= ne as u64 * nr as u64;
    let mut distractors = Vec::with_capacity(config.num_distractors as usize);
    while distractors.len() < config.num_distractors as usize {
        let a = rng.gen_range(0..ne);
        let r = rng.gen_range(0..nr);
        let b = rng.gen_range(0..ne);
        if a == b || (!saturated && edges.contains_key(&(a, r))) {
            continue;
        }
        distractors.push(vec![
            vocab.entity(EntityId(a)),
            vocab.relation(RelationId(r)),
            vocab.entity(EntityId(b)),
        ]);
    }

    Ok(World::assemble(config.clone(), seed, facts, documents, distractors))
}

impl World {
    fn assemble(
        config: WorldConfig,
        seed: u64,
        facts: Vec<Fact>,
        documents: BTreeMap<Fact, Vec<Token>>,
        distractors: Vec<Vec<Token>>,
    ) -> Self {
        let index = facts
            .iter()
            .enumerate()
            .map(|(i, f)| ((f.relation, f.head), i))
            .collect();
        Self {
            entities: (0..config.num_entities).map(EntityId).collect(),
            relations: (0..config.num_relations).map(RelationId).collect(),
            config,
            seed,
            facts,
            documents,
            distractors,
            index,
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.config.num_relations, self.config.num_entities)
    }

    pub fn lookup(&self, relation: RelationId, entity: EntityId) -> Option<&Fact> {
        self.index.get(&(relation, entity)).map(|&i| &self.facts[i])
    }

    pub fn fact_index(&self, f: &Fact) -> Option<usize> {
        self.index
            .get(&(f.relation, f.head))
            .copied()
            .filter(|&i| self.facts[i] == *f)
    }

    /// Outgoing facts of `entity`, ordered by relation.
    pub fn outgoing(&self, entity: EntityId) -> impl Iterator<Item = &Fact> {
        self.relations.iter().filter_map(move |&r| self.lookup(r, entity))
    }

    /// Writes the world as JSON lines: one header, then facts, then distractors.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = WorldRecord::Header {
            seed: self.seed,
            config: self.config.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for f in &self.facts {
            let rec = WorldRecord::Fact {
                fact: *f,
                doc: self.documents[f].clone(),
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        for d in &self.distractors {
            let rec = WorldRecord::Distractor { doc: d.clone() };
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<World> {
        let mut header = None;
        let mut facts = Vec::new();
        let mut documents = BTreeMap::new();
        let mut distractors = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<WorldRecord>(&line)? {
                WorldRecord::Header { seed, config } => header = Some((seed, config)),
                WorldRecord::Fact { fact, doc } => {
                    facts.push(fact);
                    documents.insert(fact, doc);
                }
                WorldRecord::Distractor { doc } => distractors.push(doc),
            }
        }
        let (seed, config) = header.ok_or_else(|| LabError::Format("world file has no header".into()))?;
        facts.sort();
        Ok(World::assemble(config, seed, facts, documents, distractors))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum WorldRecord {
    Header { seed: u64, config: WorldConfig },
    Fact { fact: Fact, doc: Vec<Token> },
    Distractor { doc: Vec<Token> },
}
