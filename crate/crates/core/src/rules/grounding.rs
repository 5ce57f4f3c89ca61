//! Exhaustive matching of rule bodies against a graph.

use std::collections::HashMap;

use crate::data::{EntityId, RelationId, TemporalKG, TimeId};

/// Visits every grounding of `body`: a chain of fact indices whose
/// relations follow `body`, linked object-to-subject, with strictly
/// increasing timestamps all before `before`. With `anchor`, the first
/// fact must have that subject.
pub(crate) fn for_each_grounding(
    tkg: &TemporalKG,
    body: &[RelationId],
    anchor: Option<EntityId>,
    before: TimeId,
    visit: &mut impl FnMut(&[usize]),
) {
    if body.is_empty() {
        return;
    }
    let starts = match anchor {
        Some(s) => tkg.outgoing_with(s, body[0]),
        None => tkg.with_relation(body[0]),
    };
    let mut chain = Vec::with_capacity(body.len());
    for &i in starts {
        if tkg.fact(i).timestamp >= before {
            break;
        }
        chain.push(i);
        extend(tkg, body, before, &mut chain, visit);
        chain.pop();
    }
}

fn extend(
    tkg: &TemporalKG,
    body: &[RelationId],
    before: TimeId,
    chain: &mut Vec<usize>,
    visit: &mut impl FnMut(&[usize]),
) {
    let depth = chain.len();
    if depth == body.len() {
        visit(chain);
        return;
    }
    let last = *tkg.fact(*chain.last().expect("non-empty chain"));
    let cands = tkg.outgoing_with(last.object, body[depth]);
    let lo = cands.partition_point(|&i| tkg.fact(i).timestamp <= last.timestamp);
    for &i in &cands[lo..] {
        if tkg.fact(i).timestamp >= before {
            break;
        }
        chain.push(i);
        extend(tkg, body, before, chain, visit);
        chain.pop();
    }
}

/// Support counts of one rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RuleStats {
    pub support: u64,
    pub body_support: u64,
}

impl RuleStats {
    /// `support / body_support`, or 0 when the body never matched.
    pub fn confidence(&self) -> f64 {
        if self.body_support == 0 {
            0.0
        } else {
            self.support as f64 / self.body_support as f64
        }
    }

    pub fn unmatched(&self) -> bool {
        self.body_support == 0
    }
}

/// Latest time of each `(s, o)` pair under relation `head`.
pub(crate) fn head_index(tkg: &TemporalKG, head: RelationId) -> HashMap<(EntityId, EntityId), TimeId> {
    let mut latest = HashMap::new();
    for &i in tkg.with_relation(head) {
        let f = tkg.fact(i);
        let e = latest.entry((f.subject, f.object)).or_insert(f.timestamp);
        *e = (*e).max(f.timestamp);
    }
    latest
}

pub(crate) fn stats_with_index(
    tkg: &TemporalKG,
    body: &[RelationId],
    heads: &HashMap<(EntityId, EntityId), TimeId>,
) -> RuleStats {
    let mut stats = RuleStats {
        support: 0,
        body_support: 0,
    };
    for_each_grounding(tkg, body, None, TimeId::MAX, &mut |chain| {
        let first = tkg.fact(chain[0]);
        let last = tkg.fact(chain[chain.len() - 1]);
        stats.body_support += 1;
        if heads
            .get(&(first.subject, last.object))
            .is_some_and(|&t| t > last.timestamp)
        {
            stats.support += 1;
        }
    });
    stats
}

/// Counts body groundings and those followed by the head, exhaustively.
pub fn rule_confidence(tkg: &TemporalKG, head: RelationId, body: &[RelationId]) -> RuleStats {
    stats_with_index(tkg, body, &head_index(tkg, head))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Quadruple, Vocab};

    fn graph(base: &[(u32, u32, u32, u32)]) -> TemporalKG {
        let facts: Vec<Quadruple> = base.iter().map(|&(s, r, o, t)| Quadruple::new(s, r, o, t)).collect();
        TemporalKG::from_base_facts(
            &facts,
            Vocab::from_names(["a", "b", "c", "d"]),
            Vocab::from_names(["h", "b"]),
            (0..6).collect(),
        )
        .unwrap()
    }

    #[test]
    fn half_of_four_groundings_hold() {
        // body relation 1 matches four times; the head follows twice
        let g = graph(&[
            (0, 1, 1, 0),
            (0, 0, 1, 1),
            (1, 1, 2, 0),
            (2, 1, 3, 1),
            (3, 1, 0, 2),
            (3, 0, 0, 3),
        ]);
        let s = rule_confidence(&g, 0, &[1]);
        assert_eq!(s, RuleStats { support: 2, body_support: 4 });
        assert_eq!(s.confidence(), 0.5);
    }

    #[test]
    fn unmatched_body_is_flagged() {
        let g = graph(&[(0, 0, 1, 1)]);
        let s = rule_confidence(&g, 0, &[1]);
        assert!(s.unmatched());
        assert_eq!(s.confidence(), 0.0);
    }

    #[test]
    fn groundings_need_strictly_increasing_times() {
        // b(a,b,1) then b(b,c,1): same timestamp, not a grounding of [b, b]
        let g = graph(&[(0, 1, 1, 1), (1, 1, 2, 1), (1, 1, 3, 2)]);
        let s = rule_confidence(&g, 0, &[1, 1]);
        assert_eq!(s.body_support, 1);
    }
}
