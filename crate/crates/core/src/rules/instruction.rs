//! Linearized instructions over an atomic symbol vocabulary.
//!
//! Each event becomes the eleven tokens `t : [ s , r , i . o ]`, where `i`
//! is the per-instruction index of object `o`. The query follows a marker
//! as the seven-token prefix `t : [ s , r ,` and the answer is `i . o ]`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::retrieval::EventChain;
use crate::data::{EntityId, Query, TemporalKG};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const QUERY: u32 = 2;
pub const COLON: u32 = 3;
pub const OPEN: u32 = 4;
pub const COMMA: u32 = 5;
pub const DOT: u32 = 6;
/// Closes every event; also terminates generation.
pub const CLOSE: u32 = 7;
const FIXED: u32 = 8;

pub const EVENT_LEN: usize = 11;
pub const QUERY_LEN: usize = 7;
pub const ANSWER_LEN: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenClass {
    Special,
    Punct,
    Index(u32),
    Entity(EntityId),
    Relation(u32),
    Time(u32),
}

/// Token ids laid out as: specials and punctuation, index tokens,
/// entities, relations (inverses included), time literals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolVocab {
    num_index: u32,
    num_entities: u32,
    num_relations: u32,
    num_times: u32,
    names: Vec<String>,
}

impl SymbolVocab {
    pub fn new(tkg: &TemporalKG, num_index: usize) -> Self {
        let mut names: Vec<String> = ["<pad>", "<bos>", "<query>", ":", "[", ",", ".", "]"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        names.extend((0..num_index).map(|i| i.to_string()));
        names.extend((0..tkg.num_entities() as u32).map(|e| tkg.entity_name(e).to_string()));
        names.extend((0..tkg.num_relation_ids() as u32).map(|r| tkg.relation_name(r)));
        names.extend(tkg.raw_times().iter().map(|t| t.to_string()));
        SymbolVocab {
            num_index: num_index as u32,
            num_entities: tkg.num_entities() as u32,
            num_relations: tkg.num_relation_ids() as u32,
            num_times: tkg.num_times() as u32,
            names,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_index(&self) -> usize {
        self.num_index as usize
    }

    pub fn name(&self, tok: u32) -> &str {
        self.names.get(tok as usize).map_or("<?>", String::as_str)
    }

    fn entity_base(&self) -> u32 {
        FIXED + self.num_index
    }

    fn relation_base(&self) -> u32 {
        self.entity_base() + self.num_entities
    }

    fn time_base(&self) -> u32 {
        self.relation_base() + self.num_relations
    }

    pub fn index_token(&self, i: u32) -> Result<u32> {
        if i >= self.num_index {
            return Err(Error::Range {
                what: "candidate index",
                index: i as usize,
                limit: self.num_index as usize,
            });
        }
        Ok(FIXED + i)
    }

    pub fn entity_token(&self, e: EntityId) -> u32 {
        self.entity_base() + e
    }

    pub fn relation_token(&self, r: u32) -> u32 {
        self.relation_base() + r
    }

    pub fn time_token(&self, t: u32) -> u32 {
        self.time_base() + t
    }

    pub fn class(&self, tok: u32) -> TokenClass {
        match tok {
            t if t < COLON => TokenClass::Special,
            t if t < FIXED => TokenClass::Punct,
            t if t < self.entity_base() => TokenClass::Index(t - FIXED),
            t if t < self.relation_base() => TokenClass::Entity(t - self.entity_base()),
            t if t < self.time_base() => TokenClass::Relation(t - self.relation_base()),
            t => TokenClass::Time(t - self.time_base()),
        }
    }

    pub fn is_entity(&self, tok: u32) -> bool {
        matches!(self.class(tok), TokenClass::Entity(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSequence {
    pub query: Query,
    /// Context tokens, ending with the query prefix.
    pub tokens: Vec<u32>,
    /// τ: for each context position, the position of its event's time
    /// token; positions outside any span map to themselves.
    pub time_map: Vec<usize>,
    /// Half-open token ranges, one per event and the last for the query.
    pub event_spans: Vec<(usize, usize)>,
    /// Entity for each numeric index, in order of first appearance.
    pub candidate_index: Vec<EntityId>,
    pub gold: Option<EntityId>,
    /// Answer tokens `i . o ]` when the gold entity is known.
    pub target: Option<Vec<u32>>,
}

impl InstructionSequence {
    /// Position of the query's time token.
    pub fn query_time_pos(&self) -> usize {
        self.event_spans.last().expect("query span").0
    }

    /// τ extended over `extra` generated tokens, which belong to the query.
    pub fn time_map_with(&self, extra: usize) -> Vec<usize> {
        let q = self.query_time_pos();
        let mut m = self.time_map.clone();
        m.extend(std::iter::repeat_n(q, extra));
        m
    }

    /// Context followed by the target, for teacher forcing.
    pub fn full_tokens(&self) -> Vec<u32> {
        let mut t = self.tokens.clone();
        if let Some(y) = &self.target {
            t.extend_from_slice(y);
        }
        t
    }

    /// Entity named by generated answer tokens `i . o ]`. A known index wins;
    /// an index past the candidate list falls back to the entity token.
    pub fn resolve(&self, vocab: &SymbolVocab, generated: &[u32]) -> Option<EntityId> {
        let [i, dot, o, close] = generated else {
            return None;
        };
        if *dot != DOT || *close != CLOSE {
            return None;
        }
        let (TokenClass::Index(i), TokenClass::Entity(o)) = (vocab.class(*i), vocab.class(*o)) else {
            return None;
        };
        Some(self.candidate_index.get(i as usize).copied().unwrap_or(o))
    }

    pub fn render(&self, vocab: &SymbolVocab) -> String {
        let mut out = String::new();
        for &(a, b) in &self.event_spans {
            let toks = &self.tokens[a..b];
            let _ = writeln!(out, "{}", render_span(vocab, toks));
        }
        if let Some(y) = &self.target {
            let _ = writeln!(out, "=> {}", render_span(vocab, y));
        }
        out
    }
}

/// `t : [ s , r , i . o ]` → `t: [s, r, i.o]`.
pub fn render_span(vocab: &SymbolVocab, toks: &[u32]) -> String {
    let mut s = String::new();
    for (k, &t) in toks.iter().enumerate() {
        match t {
            COLON => s.push_str(": "),
            COMMA if k + 1 == toks.len() => s.push(','),
            COMMA => s.push_str(", "),
            _ => s.push_str(vocab.name(t)),
        }
    }
    s
}

/// Linearizes a chain and query; `gold` adds the answer tokens.
pub fn build_instruction(
    query: Query,
    chain: &EventChain,
    vocab: &SymbolVocab,
    gold: Option<EntityId>,
) -> Result<InstructionSequence> {
    let mut tokens = vec![BOS];
    let mut time_map = vec![0];
    let mut event_spans = Vec::with_capacity(chain.len() + 1);
    let mut candidate_index: Vec<EntityId> = Vec::new();
    let index_of = |e: EntityId, cands: &mut Vec<EntityId>| -> u32 {
        match cands.iter().position(|&c| c == e) {
            Some(i) => i as u32,
            None => {
                cands.push(e);
                cands.len() as u32 - 1
            }
        }
    };
    for ev in &chain.events {
        if ev.timestamp >= query.time {
            return Err(Error::Contract(format!(
                "chain event at time {} does not precede query time {}",
                ev.timestamp, query.time
            )));
        }
        let i = index_of(ev.object, &mut candidate_index);
        let start = tokens.len();
        tokens.extend_from_slice(&[
            vocab.time_token(ev.timestamp),
            COLON,
            OPEN,
            vocab.entity_token(ev.subject),
            COMMA,
            vocab.relation_token(ev.relation),
            COMMA,
            vocab.index_token(i)?,
            DOT,
            vocab.entity_token(ev.object),
            CLOSE,
        ]);
        time_map.extend(std::iter::repeat_n(start, EVENT_LEN));
        event_spans.push((start, tokens.len()));
    }
    tokens.push(QUERY);
    time_map.push(tokens.len() - 1);
    let start = tokens.len();
    tokens.extend_from_slice(&[
        vocab.time_token(query.time),
        COLON,
        OPEN,
        vocab.entity_token(query.subject),
        COMMA,
        vocab.relation_token(query.relation),
        COMMA,
    ]);
    time_map.extend(std::iter::repeat_n(start, QUERY_LEN));
    event_spans.push((start, tokens.len()));
    let target = match gold {
        Some(g) => {
            let mut cands = candidate_index.clone();
            let i = index_of(g, &mut cands);
            Some(vec![vocab.index_token(i)?, DOT, vocab.entity_token(g), CLOSE])
        }
        None => None,
    };
    Ok(InstructionSequence {
        query,
        tokens,
        time_map,
        event_spans,
        candidate_index,
        gold,
        target,
    })
}
