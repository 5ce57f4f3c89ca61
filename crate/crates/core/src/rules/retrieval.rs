//! Query-specific event chains from rule groundings plus a recency fallback.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::grounding::for_each_grounding;
use super::rule::RuleSet;
use crate::data::{Quadruple, Query, TemporalKG};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    Rule(usize),
    Recency,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EventChain {
    /// Chronological, all before the query time.
    pub events: Vec<Quadruple>,
    pub provenance: Vec<Provenance>,
}

impl EventChain {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Collects facts grounding the rules for `query.relation` anchored at the
/// query subject, in rule order, stopping after the first rule that brings
/// the total to `max_events`. Shortfalls are padded with the subject's most
/// recent facts. The result keeps the `max_events` most recent events.
pub fn retrieve_chain(query: Query, rules: &RuleSet, tkg: &TemporalKG, max_events: usize) -> Result<EventChain> {
    if query.time == 0 {
        return Err(Error::EmptyHistory(0));
    }
    if max_events == 0 {
        return Err(Error::Config("max_events must be positive".into()));
    }
    let mut found: HashMap<usize, Provenance> = HashMap::new();
    let mut order: Vec<usize> = Vec::new();
    for rule in rules.rules_for(query.relation) {
        for_each_grounding(tkg, &rule.body, Some(query.subject), query.time, &mut |chain| {
            for &i in chain {
                found.entry(i).or_insert_with(|| {
                    order.push(i);
                    Provenance::Rule(rule.id)
                });
            }
        });
        if order.len() >= max_events {
            break;
        }
    }
    if order.len() < max_events {
        for &i in tkg.outgoing_before(query.subject, query.time).iter().rev() {
            if order.len() >= max_events {
                break;
            }
            found.entry(i).or_insert_with(|| {
                order.push(i);
                Provenance::Recency
            });
        }
    }
    // fact indices are chronological, so sorting them sorts by time
    order.sort_unstable();
    let keep = &order[order.len().saturating_sub(max_events)..];
    Ok(EventChain {
        events: keep.iter().map(|&i| *tkg.fact(i)).collect(),
        provenance: keep.iter().map(|i| found[i]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Vocab;
    use crate::rules::TemporalRule;

    fn graph(base: &[(u32, u32, u32, u32)]) -> TemporalKG {
        let facts: Vec<Quadruple> = base.iter().map(|&(s, r, o, t)| Quadruple::new(s, r, o, t)).collect();
        TemporalKG::from_base_facts(
            &facts,
            Vocab::from_names((0..6).map(|i| format!("e{i}"))),
            Vocab::from_names(["h", "b", "c"]),
            (0..10).collect(),
        )
        .unwrap()
    }

    fn one_rule(head: u32, body: Vec<u32>, id: usize) -> RuleSet {
        let mut s = RuleSet::default();
        s.rules_by_head.insert(
            head,
            vec![TemporalRule {
                id,
                head,
                body,
                support: 1,
                body_support: 1,
                confidence: 1.0,
            }],
        );
        s
    }

    #[test]
    fn recency_fallback_without_rules() {
        let g = graph(&[(0, 1, 1, 0), (0, 2, 2, 1), (3, 1, 0, 2), (0, 1, 4, 7)]);
        let c = retrieve_chain(Query::new(0, 0, 5), &RuleSet::default(), &g, 50).unwrap();
        assert_eq!(c.len(), 3);
        assert!(c.provenance.iter().all(|p| *p == Provenance::Recency));
        assert!(c.events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        assert!(c.events.iter().all(|e| e.timestamp < 5));
    }

    #[test]
    fn rule_grounding_is_tagged() {
        // ten facts; rule h <- b, c anchored at e0 grounds once: b(0,1,2), c(1,2,4)
        let g = graph(&[
            (0, 1, 1, 2),
            (1, 2, 2, 4),
            (1, 2, 3, 1),
            (0, 2, 5, 3),
            (4, 1, 5, 0),
            (2, 0, 3, 5),
            (5, 1, 4, 6),
            (3, 2, 1, 2),
            (4, 0, 0, 8),
            (2, 1, 0, 9),
        ]);
        let rules = one_rule(0, vec![1, 2], 7);
        let c = retrieve_chain(Query::new(0, 0, 6), &rules, &g, 2).unwrap();
        assert_eq!(c.events, vec![Quadruple::new(0, 1, 1, 2), Quadruple::new(1, 2, 2, 4)]);
        assert_eq!(c.provenance, vec![Provenance::Rule(7); 2]);
    }

    #[test]
    fn trim_keeps_most_recent_match() {
        let base: Vec<_> = (0..5).map(|t| (0, 1, 1 + (t % 3), t)).collect();
        let g = graph(&base);
        let rules = one_rule(0, vec![1], 0);
        let c = retrieve_chain(Query::new(0, 0, 6), &rules, &g, 1).unwrap();
        assert_eq!(c.events, vec![Quadruple::new(0, 1, 2, 4)]);
    }
}
