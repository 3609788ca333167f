//! Steps, states and trajectories.
//!
//! The policy emits *blocks*: the unit of one reasoning action. A block is
//! either `<step>..</step><subquery>..</subquery>`, a `<subanswer>` step, an
//! `<answer>` step, or an early stop. After a block that ends in a
//! well-formed subquery the environment appends a `<retrieval>` step.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::query::QueryInstance;
use crate::env::retrieval::retrieve;
use crate::env::world::{Document, World, DOC_LEN};
use crate::vocab::{EntityId, Marker, RelationId, Token, Vocab, EOS};

/// Hard cap on tokens per block when structural masking is off.
pub const MAX_BLOCK_TOKENS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Plan,
    Subquery,
    Retrieval,
    Subanswer,
    Answer,
    /// Anything that does not open with a known marker, or an unclosed answer.
    Other,
}

impl StepKind {
    pub const ALL: [StepKind; 6] = [
        StepKind::Plan,
        StepKind::Subquery,
        StepKind::Retrieval,
        StepKind::Subanswer,
        StepKind::Answer,
        StepKind::Other,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn open_marker(self) -> Option<Marker> {
        match self {
            StepKind::Plan => Some(Marker::StepOpen),
            StepKind::Subquery => Some(Marker::SubqueryOpen),
            StepKind::Retrieval => Some(Marker::RetrievalOpen),
            StepKind::Subanswer => Some(Marker::SubanswerOpen),
            StepKind::Answer => Some(Marker::AnswerOpen),
            StepKind::Other => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Policy,
    Environment,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    pub kind: StepKind,
    pub tokens: Vec<Token>,
    pub provenance: Vec<Provenance>,
}

impl Step {
    pub fn policy(kind: StepKind, tokens: Vec<Token>) -> Self {
        let provenance = vec![Provenance::Policy; tokens.len()];
        Self {
            kind,
            tokens,
            provenance,
        }
    }

    pub fn retrieval(docs: &[Document]) -> Self {
        let mut tokens = Vec::with_capacity(2 + docs.len() * DOC_LEN);
        tokens.push(Marker::RetrievalOpen.token());
        for d in docs {
            tokens.extend_from_slice(&d.tokens);
        }
        tokens.push(Marker::RetrievalClose.token());
        let provenance = vec![Provenance::Environment; tokens.len()];
        Self {
            kind: StepKind::Retrieval,
            tokens,
            provenance,
        }
    }

    pub fn is_policy(&self) -> bool {
        self.kind != StepKind::Retrieval
    }

    /// Tokens strictly between the opening and closing marker, or all tokens
    /// when the step is not wrapped.
    pub fn interior(&self) -> &[Token] {
        match self.kind.open_marker() {
            Some(m) if self.tokens.first() == Some(&m.token()) => {
                let end = if self.tokens.len() >= 2 && self.tokens.last() == Some(&m.closer().token()) {
                    self.tokens.len() - 1
                } else {
                    self.tokens.len()
                };
                &self.tokens[1..end]
            }
            _ => &self.tokens,
        }
    }

    /// `(relation, entity)` of a well-formed subquery step.
    pub fn as_subquery(&self, vocab: &Vocab) -> Option<(RelationId, EntityId)> {
        if self.kind != StepKind::Subquery {
            return None;
        }
        match self.tokens.as_slice() {
            [o, r, e, c] if *o == Marker::SubqueryOpen.token() && *c == Marker::SubqueryClose.token() => {
                Some((vocab.as_relation(*r)?, vocab.as_entity(*e)?))
            }
            _ => None,
        }
    }

    /// Top-ranked document `[head, relation, tail]` of a retrieval step.
    pub fn top_document(&self) -> Option<&[Token]> {
        (self.kind == StepKind::Retrieval && self.tokens.len() >= DOC_LEN + 2).then(|| &self.tokens[1..1 + DOC_LEN])
    }

    /// Single entity named by a well-formed subanswer or answer step.
    pub fn named_entity(&self, vocab: &Vocab) -> Option<EntityId> {
        match self.kind {
            StepKind::Subanswer | StepKind::Answer => match self.interior() {
                [e] if self.tokens.len() == 3 => vocab.as_entity(*e),
                _ => None,
            },
            _ => None,
        }
    }
}

fn is_open(vocab: &Vocab, t: Token) -> bool {
    vocab.marker_of(t).is_some_and(|m| m.is_open())
}

/// Whether `t` ends the block being generated.
pub fn ends_block(t: Token) -> bool {
    t == EOS
        || t == Marker::SubqueryClose.token()
        || t == Marker::SubanswerClose.token()
        || t == Marker::AnswerClose.token()
}

/// Splits raw block tokens into typed policy steps. Malformed spans are kept,
/// typed `Other`; nothing is repaired.
pub fn parse_block(vocab: &Vocab, tokens: &[Token]) -> Vec<Step> {
    let mut segments: Vec<Vec<Token>> = Vec::new();
    let mut cur: Vec<Token> = Vec::new();
    for &t in tokens {
        if !cur.is_empty() && (is_open(vocab, t) || t == EOS || segment_closed(vocab, &cur)) {
            segments.push(std::mem::take(&mut cur));
        }
        cur.push(t);
    }
    if !cur.is_empty() {
        segments.push(cur);
    }
    segments
        .into_iter()
        .map(|seg| {
            let kind = match vocab.marker_of(seg[0]) {
                Some(Marker::StepOpen) => StepKind::Plan,
                Some(Marker::SubqueryOpen) => StepKind::Subquery,
                Some(Marker::SubanswerOpen) => StepKind::Subanswer,
                Some(Marker::AnswerOpen) if segment_closed(vocab, &seg) => StepKind::Answer,
                _ => StepKind::Other,
            };
            Step::policy(kind, seg)
        })
        .collect()
}

fn segment_closed(vocab: &Vocab, seg: &[Token]) -> bool {
    match (seg.first().and_then(|&t| vocab.marker_of(t)), seg.last()) {
        (Some(m), Some(&last)) if m.is_open() && seg.len() >= 2 => last == m.closer().token(),
        _ => false,
    }
}

/// Borrowed view of a decision point: query, closed steps, and the tokens of
/// the block generated so far.
#[derive(Debug, Clone, Copy)]
pub struct StateView<'a> {
    pub query: &'a QueryInstance,
    pub steps: &'a [Step],
    pub partial: &'a [Token],
}

impl StateView<'_> {
    /// Count of closed steps.
    pub fn step_index(&self) -> usize {
        self.steps.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct State {
    pub query: Arc<QueryInstance>,
    pub steps: Vec<Step>,
    pub partial: Vec<Token>,
}

impl State {
    pub fn new(query: Arc<QueryInstance>) -> Self {
        Self {
            query,
            steps: Vec::new(),
            partial: Vec::new(),
        }
    }

    pub fn view(&self) -> StateView<'_> {
        StateView {
            query: &self.query,
            steps: &self.steps,
            partial: &self.partial,
        }
    }

    pub fn step_index(&self) -> usize {
        self.steps.len()
    }
}

/// Block starts in a history: policy steps that follow the start, a
/// retrieval step, or a step ending in a block terminator. Blocks cut by the
/// token cap are not recoverable this way; generated trajectories track spans
/// directly.
fn block_starts(steps: &[Step]) -> impl Iterator<Item = usize> + '_ {
    (0..steps.len()).filter(move |&i| {
        steps[i].is_policy()
            && (i == 0 || !steps[i - 1].is_policy() || steps[i - 1].tokens.last().is_some_and(|&t| ends_block(t)))
    })
}

/// Outcome of appending one block to a history.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockEffect {
    pub terminal: bool,
    pub answer: Option<Vec<Token>>,
    pub retrieved: bool,
}

/// Parses `tokens` as a block, appends its steps to `steps`, and resolves a
/// trailing well-formed subquery against the world with `k_docs` documents.
pub fn apply_block(world: &World, steps: &mut Vec<Step>, tokens: &[Token], k_docs: usize) -> BlockEffect {
    let vocab = world.vocab();
    let parsed = parse_block(&vocab, tokens);
    let last = parsed.last().cloned();
    steps.extend(parsed);
    let mut effect = BlockEffect {
        terminal: tokens.last() == Some(&EOS),
        answer: None,
        retrieved: false,
    };
    if let Some(last) = last {
        if last.kind == StepKind::Answer {
            effect.terminal = true;
            effect.answer = Some(last.interior().to_vec());
        } else if let Some(sq) = last.as_subquery(&vocab) {
            steps.push(Step::retrieval(&retrieve(world, sq, k_docs)));
            effect.retrieved = true;
        }
    }
    effect
}

/// Step range of one policy block inside a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpan {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub query: Arc<QueryInstance>,
    pub steps: Vec<Step>,
    pub blocks: Vec<BlockSpan>,
    pub answer: Option<Vec<Token>>,
    pub terminal: bool,
}

impl Trajectory {
    pub fn new(query: Arc<QueryInstance>) -> Self {
        Self {
            query,
            steps: Vec::new(),
            blocks: Vec::new(),
            answer: None,
            terminal: false,
        }
    }

    /// Rebuilds block spans from a step history.
    pub fn from_steps(query: Arc<QueryInstance>, steps: Vec<Step>) -> Self {
        let starts: Vec<usize> = block_starts(&steps).collect();
        let mut blocks = Vec::with_capacity(starts.len());
        for (i, &s) in starts.iter().enumerate() {
            let mut e = starts.get(i + 1).copied().unwrap_or(steps.len());
            while e > s && !steps[e - 1].is_policy() {
                e -= 1;
            }
            blocks.push(BlockSpan { start: s, end: e });
        }
        let last = steps.last();
        let answer = last
            .filter(|s| s.kind == StepKind::Answer)
            .map(|s| s.interior().to_vec());
        let terminal = answer.is_some() || last.is_some_and(|s| s.tokens.last() == Some(&EOS));
        Self {
            query,
            steps,
            blocks,
            answer,
            terminal,
        }
    }

    /// Appends a generated block and lets the environment respond.
    pub fn push_block(&mut self, world: &World, tokens: &[Token], k_docs: usize) -> BlockEffect {
        let start = self.steps.len();
        let effect = apply_block(world, &mut self.steps, tokens, k_docs);
        let end = if effect.retrieved {
            self.steps.len() - 1
        } else {
            self.steps.len()
        };
        self.blocks.push(BlockSpan { start, end });
        if effect.terminal {
            self.terminal = true;
            self.answer = effect.answer.clone();
        }
        effect
    }

    /// Number of policy-generated blocks.
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_steps(&self, b: usize) -> &[Step] {
        let s = self.blocks[b];
        &self.steps[s.start..s.end]
    }

    pub fn block_tokens(&self, b: usize) -> Vec<Token> {
        self.block_steps(b)
            .iter()
            .flat_map(|s| s.tokens.iter().copied())
            .collect()
    }

    /// Decision context before block `b` (empty partial).
    pub fn context(&self, b: usize) -> StateView<'_> {
        StateView {
            query: &self.query,
            steps: &self.steps[..self.blocks[b].start],
            partial: &[],
        }
    }

    pub fn context_state(&self, b: usize) -> State {
        State {
            query: Arc::clone(&self.query),
            steps: self.steps[..self.blocks[b].start].to_vec(),
            partial: Vec::new(),
        }
    }

    pub fn policy_token_count(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.is_policy())
            .map(|s| s.tokens.len())
            .sum()
    }

    pub fn num_retrievals(&self) -> usize {
        self.steps.iter().filter(|s| s.kind == StepKind::Retrieval).count()
    }
}
