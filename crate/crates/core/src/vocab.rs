//! Token vocabulary: schema markers, EOS, relation and entity tokens.
//!
//! Layout is dense and fixed for a given world size:
//! `[0, 10)` markers, `10` EOS, then `num_relations` relation tokens, then
//! `num_entities` entity tokens.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Marker {
    StepOpen,
    StepClose,
    SubqueryOpen,
    SubqueryClose,
    RetrievalOpen,
    RetrievalClose,
    SubanswerOpen,
    SubanswerClose,
    AnswerOpen,
    AnswerClose,
}

impl Marker {
    pub const ALL: [Marker; 10] = [
        Marker::StepOpen,
        Marker::StepClose,
        Marker::SubqueryOpen,
        Marker::SubqueryClose,
        Marker::RetrievalOpen,
        Marker::RetrievalClose,
        Marker::SubanswerOpen,
        Marker::SubanswerClose,
        Marker::AnswerOpen,
        Marker::AnswerClose,
    ];

    pub fn token(self) -> Token {
        Token(self as u32)
    }

    pub fn is_open(self) -> bool {
        (self as u32).is_multiple_of(2)
    }

    /// The closing marker paired with an opening one.
    pub fn closer(self) -> Marker {
        Marker::ALL[(self as usize) | 1]
    }

    fn text(self) -> &'static str {
        match self {
            Marker::StepOpen => "<step>",
            Marker::StepClose => "</step>",
            Marker::SubqueryOpen => "<subquery>",
            Marker::SubqueryClose => "</subquery>",
            Marker::RetrievalOpen => "<retrieval>",
            Marker::RetrievalClose => "</retrieval>",
            Marker::SubanswerOpen => "<subanswer>",
            Marker::SubanswerClose => "</subanswer>",
            Marker::AnswerOpen => "<answer>",
            Marker::AnswerClose => "</answer>",
        }
    }
}

pub const NUM_MARKERS: u32 = 10;
pub const EOS: Token = Token(NUM_MARKERS);
const FIRST_RELATION: u32 = NUM_MARKERS + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Marker(Marker),
    Eos,
    Relation(RelationId),
    Entity(EntityId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocab {
    pub num_relations: u32,
    pub num_entities: u32,
}

impl Vocab {
    pub fn new(num_relations: u32, num_entities: u32) -> Self {
        Self {
            num_relations,
            num_entities,
        }
    }

    pub fn size(&self) -> usize {
        (FIRST_RELATION + self.num_relations + self.num_entities) as usize
    }

    pub fn relation(&self, r: RelationId) -> Token {
        debug_assert!(r.0 < self.num_relations);
        Token(FIRST_RELATION + r.0)
    }

    pub fn entity(&self, e: EntityId) -> Token {
        debug_assert!(e.0 < self.num_entities);
        Token(FIRST_RELATION + self.num_relations + e.0)
    }

    pub fn class(&self, t: Token) -> Option<TokenClass> {
        let id = t.0;
        if id < NUM_MARKERS {
            Some(TokenClass::Marker(Marker::ALL[id as usize]))
        } else if id == EOS.0 {
            Some(TokenClass::Eos)
        } else if id < FIRST_RELATION + self.num_relations {
            Some(TokenClass::Relation(RelationId(id - FIRST_RELATION)))
        } else if (id as usize) < self.size() {
            Some(TokenClass::Entity(EntityId(id - FIRST_RELATION - self.num_relations)))
        } else {
            None
        }
    }

    pub fn marker_of(&self, t: Token) -> Option<Marker> {
        (t.0 < NUM_MARKERS).then(|| Marker::ALL[t.0 as usize])
    }

    pub fn as_relation(&self, t: Token) -> Option<RelationId> {
        match self.class(t) {
            Some(TokenClass::Relation(r)) => Some(r),
            _ => None,
        }
    }

    pub fn as_entity(&self, t: Token) -> Option<EntityId> {
        match self.class(t) {
            Some(TokenClass::Entity(e)) => Some(e),
            _ => None,
        }
    }

    /// Membership in the control-token set: exactly the open/close markers.
    pub fn is_control(&self, t: Token) -> bool {
        t.0 < NUM_MARKERS
    }

    pub fn relation_tokens(&self) -> std::ops::Range<u32> {
        FIRST_RELATION..FIRST_RELATION + self.num_relations
    }

    pub fn entity_tokens(&self) -> std::ops::Range<u32> {
        FIRST_RELATION + self.num_relations..self.size() as u32
    }

    pub fn render(&self, t: Token) -> String {
        match self.class(t) {
            Some(TokenClass::Marker(m)) => m.text().to_string(),
            Some(TokenClass::Eos) => "<eos>".to_string(),
            Some(TokenClass::Relation(r)) => format!("R{}", r.0),
            Some(TokenClass::Entity(e)) => format!("E{}", e.0),
            None => format!("?{}", t.0),
        }
    }

    pub fn render_seq(&self, ts: &[Token]) -> String {
        ts.iter().map(|&t| self.render(t)).collect::<Vec<_>>().join(" ")
    }
}
