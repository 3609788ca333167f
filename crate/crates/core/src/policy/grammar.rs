//! Block grammar used for structural masking during generation.

use crate::vocab::{Marker, Token, TokenClass, Vocab, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    M(Marker),
    Rel,
    Ent,
}

const PLAN_BLOCK: [Slot; 7] = [
    Slot::M(Marker::StepOpen),
    Slot::Rel,
    Slot::M(Marker::StepClose),
    Slot::M(Marker::SubqueryOpen),
    Slot::Rel,
    Slot::Ent,
    Slot::M(Marker::SubqueryClose),
];
const SUBANSWER_BLOCK: [Slot; 3] = [
    Slot::M(Marker::SubanswerOpen),
    Slot::Ent,
    Slot::M(Marker::SubanswerClose),
];
const ANSWER_BLOCK: [Slot; 3] = [Slot::M(Marker::AnswerOpen), Slot::Ent, Slot::M(Marker::AnswerClose)];

/// Tokens the grammar permits next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Allowed {
    /// `<step>`, `<subanswer>`, `<answer>` or EOS.
    BlockStart,
    Only(Marker),
    Relations,
    Entities,
    Any,
}

impl Allowed {
    pub fn contains(&self, vocab: &Vocab, t: Token) -> bool {
        match self {
            Allowed::Any => vocab.class(t).is_some(),
            Allowed::BlockStart => {
                t == EOS
                    || t == Marker::StepOpen.token()
                    || t == Marker::SubanswerOpen.token()
                    || t == Marker::AnswerOpen.token()
            }
            Allowed::Only(m) => t == m.token(),
            Allowed::Relations => matches!(vocab.class(t), Some(TokenClass::Relation(_))),
            Allowed::Entities => matches!(vocab.class(t), Some(TokenClass::Entity(_))),
        }
    }

    /// Number of tokens with nonzero mass.
    pub fn count(&self, vocab: &Vocab) -> usize {
        match self {
            Allowed::Any => vocab.size(),
            Allowed::BlockStart => 4,
            Allowed::Only(_) => 1,
            Allowed::Relations => vocab.num_relations as usize,
            Allowed::Entities => vocab.num_entities as usize,
        }
    }
}

/// Next-token constraint given the block generated so far.
pub fn allowed(vocab: &Vocab, partial: &[Token]) -> Allowed {
    let Some(&first) = partial.first() else {
        return Allowed::BlockStart;
    };
    let template: &[Slot] = match vocab.marker_of(first) {
        Some(Marker::StepOpen) => &PLAN_BLOCK,
        Some(Marker::SubanswerOpen) => &SUBANSWER_BLOCK,
        Some(Marker::AnswerOpen) => &ANSWER_BLOCK,
        _ => return Allowed::Any,
    };
    let conforms = partial.iter().zip(template).all(|(&t, slot)| match slot {
        Slot::M(m) => t == m.token(),
        Slot::Rel => vocab.as_relation(t).is_some(),
        Slot::Ent => vocab.as_entity(t).is_some(),
    });
    match template.get(partial.len()) {
        Some(_) if !conforms => Allowed::Any,
        Some(Slot::M(m)) => Allowed::Only(*m),
        Some(Slot::Rel) => Allowed::Relations,
        Some(Slot::Ent) => Allowed::Entities,
        None => Allowed::Any,
    }
}
