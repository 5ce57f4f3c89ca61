//! Time-decreasing random walks and rule mining.

use std::collections::BTreeSet;

use rand::Rng;

use super::grounding::{head_index, stats_with_index};
use super::rule::{rule_order, MiningConfig, RuleSet, TemporalRule};
use crate::data::{RelationId, TemporalKG, TimeId};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::rng::rng_for;

/// Step distribution over candidate edges with timestamps `times`, taken
/// from an anchor at time `anchor`: `P(u) ∝ exp(t_u − anchor)`.
pub fn transition_probabilities(anchor: TimeId, times: &[TimeId]) -> Vec<f64> {
    let Some(&max) = times.iter().max() else {
        return Vec::new();
    };
    // shifting by the max leaves the ratios unchanged and avoids underflow
    let shift = max as f64 - anchor as f64;
    let w: Vec<f64> = times
        .iter()
        .map(|&t| (t as f64 - anchor as f64 - shift).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Draws one candidate index from [`transition_probabilities`].
pub fn sample_transition(rng: &mut impl Rng, anchor: TimeId, times: &[TimeId]) -> Option<usize> {
    let p = transition_probabilities(anchor, times);
    if p.is_empty() {
        return None;
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return Some(i);
        }
    }
    Some(p.len() - 1)
}

/// Walks `len` steps backward in time from the object of the head fact,
/// with the last step forced back onto its subject. Returns the rule body
/// in chronological order.
pub(crate) fn sample_body(tkg: &TemporalKG, head_fact: usize, len: usize, rng: &mut impl Rng) -> Option<Vec<RelationId>> {
    let head = *tkg.fact(head_fact);
    let mut cur = head.object;
    let mut now = head.timestamp;
    let mut steps = Vec::with_capacity(len);
    for step in 0..len {
        let last = step + 1 == len;
        let cands: Vec<usize> = tkg
            .outgoing_before(cur, now)
            .iter()
            .copied()
            .filter(|&i| !last || tkg.fact(i).object == head.subject)
            .collect();
        let times: Vec<TimeId> = cands.iter().map(|&i| tkg.fact(i).timestamp).collect();
        let pick = cands[sample_transition(rng, now, &times)?];
        let f = tkg.fact(pick);
        steps.push(f.relation);
        cur = f.object;
        now = f.timestamp;
    }
    Some(steps.iter().rev().map(|&r| tkg.inverse_relation(r)).collect())
}

fn mine_head(tkg: &TemporalKG, head: RelationId, config: &MiningConfig) -> Vec<TemporalRule> {
    let facts = tkg.with_relation(head);
    if facts.is_empty() {
        log::warn!("relation {} has no facts; no rules mined", tkg.relation_name(head));
        return Vec::new();
    }
    let mut rng = rng_for(&[config.seed, head as u64]);
    let mut bodies = BTreeSet::new();
    for len in 1..=config.max_body_len {
        for _ in 0..config.walks_per_relation {
            let f = facts[rng.gen_range(0..facts.len())];
            if let Some(body) = sample_body(tkg, f, len, &mut rng) {
                bodies.insert(body);
            }
        }
    }
    let heads = head_index(tkg, head);
    let mut rules: Vec<TemporalRule> = bodies
        .into_iter()
        .map(|body| {
            let stats = stats_with_index(tkg, &body, &heads);
            TemporalRule {
                id: 0,
                head,
                body,
                support: stats.support,
                body_support: stats.body_support,
                confidence: stats.confidence(),
            }
        })
        .collect();
    rules.sort_by(rule_order);
    rules
}

/// Mines rules for every relation id (inverses included).
///
/// Each head has its own random stream, so the result does not depend on
/// `mode`.
pub fn mine_rules(tkg: &TemporalKG, config: MiningConfig, mode: ExecMode) -> Result<RuleSet> {
    config.validate()?;
    if tkg.facts().is_empty() {
        return Err(Error::Validation("cannot mine rules from an empty graph".into()));
    }
    let heads: Vec<RelationId> = (0..tkg.num_relation_ids() as RelationId).collect();
    let per_head = exec::map(mode, &heads, |&h| mine_head(tkg, h, &config));
    let mut set = RuleSet {
        config,
        ..RuleSet::default()
    };
    let mut next_id = 0;
    for (h, mut rules) in heads.into_iter().zip(per_head) {
        for r in &mut rules {
            r.id = next_id;
            next_id += 1;
        }
        set.rules_by_head.insert(h, rules);
    }
    Ok(set)
}
