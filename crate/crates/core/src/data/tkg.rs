use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use crate::error::{Error, Result};

pub type EntityId = u32;
pub type RelationId = u32;
pub type TimeId = u32;

/// One fact `(subject, relation, object, timestamp)`.
///
/// Inverse relations occupy ids `|R|..2|R|`: the inverse of `(s, r, o, t)`
/// is `(o, r + |R|, s, t)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Quadruple {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
    pub timestamp: TimeId,
}

impl Quadruple {
    pub fn new(subject: EntityId, relation: RelationId, object: EntityId, timestamp: TimeId) -> Self {
        Quadruple {
            subject,
            relation,
            object,
            timestamp,
        }
    }
}

/// A query `(subject, relation, ?, time)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Query {
    pub subject: EntityId,
    pub relation: RelationId,
    pub time: TimeId,
}

impl Query {
    pub fn new(subject: EntityId, relation: RelationId, time: TimeId) -> Self {
        Query {
            subject,
            relation,
            time,
        }
    }
}

impl From<&Quadruple> for Query {
    fn from(q: &Quadruple) -> Self {
        Query::new(q.subject, q.relation, q.timestamp)
    }
}

/// Chronological train/valid/test partition of the fact list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Range<usize>,
    pub valid: Range<usize>,
    pub test: Range<usize>,
    /// Last time id of the train and valid portions.
    pub boundary_timestamps: (TimeId, TimeId),
}

impl DatasetSplit {
    /// Number of facts per portion before inverse augmentation.
    pub fn base_counts(&self) -> (usize, usize, usize) {
        (self.train.len() / 2, self.valid.len() / 2, self.test.len() / 2)
    }
}

/// Immutable, time-sorted fact store with inverse facts materialized.
#[derive(Clone, Debug)]
pub struct TemporalKG {
    facts: Vec<Quadruple>,
    entities: Vocab,
    relations: Vocab,
    /// Raw timestamp value for each time id; strictly increasing.
    times: Vec<u64>,
    snapshot_index: Vec<Range<usize>>,
    /// Fact indices with the entity as subject, sorted by (timestamp, index).
    by_subject: Vec<Vec<usize>>,
    by_subject_relation: HashMap<(EntityId, RelationId), Vec<usize>>,
    by_relation: Vec<Vec<usize>>,
}

impl TemporalKG {
    /// Builds a graph from facts that already carry inverses and are sorted
    /// by timestamp. Use [`TemporalKG::from_base_facts`] to add inverses.
    pub(crate) fn from_sorted(
        facts: Vec<Quadruple>,
        entities: Vocab,
        relations: Vocab,
        times: Vec<u64>,
    ) -> Result<Self> {
        let ne = entities.len() as u32;
        let nr = relations.len() as u32;
        let nt = times.len() as u32;
        for (i, f) in facts.iter().enumerate() {
            if f.subject >= ne || f.object >= ne {
                return Err(Error::Validation(format!("fact {i} references unknown entity")));
            }
            if f.relation >= 2 * nr {
                return Err(Error::Validation(format!("fact {i} references unknown relation")));
            }
            if f.timestamp >= nt {
                return Err(Error::Validation(format!("fact {i} references unknown time")));
            }
            if i > 0 && facts[i - 1].timestamp > f.timestamp {
                return Err(Error::Validation(format!("fact {i} out of chronological order")));
            }
        }
        let mut snapshot_index = vec![0..0; times.len()];
        let mut start = 0;
        while start < facts.len() {
            let t = facts[start].timestamp;
            let mut end = start;
            while end < facts.len() && facts[end].timestamp == t {
                end += 1;
            }
            snapshot_index[t as usize] = start..end;
            start = end;
        }
        let mut by_subject = vec![Vec::new(); entities.len()];
        let mut by_subject_relation: HashMap<_, Vec<usize>> = HashMap::new();
        let mut by_relation = vec![Vec::new(); 2 * relations.len()];
        for (i, f) in facts.iter().enumerate() {
            by_subject[f.subject as usize].push(i);
            by_relation[f.relation as usize].push(i);
            by_subject_relation.entry((f.subject, f.relation)).or_default().push(i);
        }
        Ok(TemporalKG {
            facts,
            entities,
            relations,
            times,
            snapshot_index,
            by_subject,
            by_subject_relation,
            by_relation,
        })
    }

    /// Builds a graph from base facts (relations `< |R|`, time ids already
    /// normalized), adding one inverse per fact.
    pub fn from_base_facts(
        base: &[Quadruple],
        entities: Vocab,
        relations: Vocab,
        times: Vec<u64>,
    ) -> Result<Self> {
        let nr = relations.len() as u32;
        if let Some(f) = base.iter().find(|f| f.relation >= nr) {
            return Err(Error::Validation(format!("base fact {f:?} uses an inverse relation id")));
        }
        let facts = with_inverses(base, nr);
        Self::from_sorted(facts, entities, relations, times)
    }

    pub fn facts(&self) -> &[Quadruple] {
        &self.facts
    }

    pub fn fact(&self, idx: usize) -> &Quadruple {
        &self.facts[idx]
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// `|R|`, the number of base relations.
    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    /// `2|R|`, the size of the relation id space including inverses.
    pub fn num_relation_ids(&self) -> usize {
        2 * self.relations.len()
    }

    pub fn num_times(&self) -> usize {
        self.times.len()
    }

    pub fn entity_vocab(&self) -> &Vocab {
        &self.entities
    }

    pub fn relation_vocab(&self) -> &Vocab {
        &self.relations
    }

    pub fn raw_times(&self) -> &[u64] {
        &self.times
    }

    pub fn entity_name(&self, e: EntityId) -> &str {
        self.entities.name(e).unwrap_or("?")
    }

    pub fn relation_name(&self, r: RelationId) -> String {
        let nr = self.relations.len() as u32;
        if r < nr {
            self.relations.name(r).unwrap_or("?").to_string()
        } else {
            format!("inv_{}", self.relations.name(r - nr).unwrap_or("?"))
        }
    }

    pub fn inverse_relation(&self, r: RelationId) -> RelationId {
        let nr = self.relations.len() as u32;
        if r < nr {
            r + nr
        } else {
            r - nr
        }
    }

    pub fn is_inverse(&self, r: RelationId) -> bool {
        r as usize >= self.relations.len()
    }

    /// Facts with timestamp `t`.
    pub fn snapshot_at(&self, t: TimeId) -> Result<&[Quadruple]> {
        let range = self.snapshot_index.get(t as usize).ok_or(Error::Range {
            what: "time id",
            index: t as usize,
            limit: self.times.len(),
        })?;
        Ok(&self.facts[range.clone()])
    }

    pub fn snapshot_range(&self, t: TimeId) -> Range<usize> {
        self.snapshot_index
            .get(t as usize)
            .cloned()
            .unwrap_or(0..0)
    }

    /// Indices of facts whose subject is `e`, in chronological order.
    pub fn outgoing(&self, e: EntityId) -> &[usize] {
        self.by_subject.get(e as usize).map_or(&[], Vec::as_slice)
    }

    /// Indices of facts with relation `r` in chronological order.
    pub fn with_relation(&self, r: RelationId) -> &[usize] {
        self.by_relation.get(r as usize).map_or(&[], Vec::as_slice)
    }

    /// Indices of facts `(e, r, ·, ·)` in chronological order.
    pub fn outgoing_with(&self, e: EntityId, r: RelationId) -> &[usize] {
        self.by_subject_relation.get(&(e, r)).map_or(&[], Vec::as_slice)
    }

    /// Indices of facts with subject `e` and timestamp strictly before `t`.
    pub fn outgoing_before(&self, e: EntityId, t: TimeId) -> &[usize] {
        let all = self.outgoing(e);
        let end = all.partition_point(|&i| self.facts[i].timestamp < t);
        &all[..end]
    }

    /// Indices of facts with subject `e` at exactly time `t`.
    pub fn outgoing_at(&self, e: EntityId, t: TimeId) -> &[usize] {
        let all = self.outgoing(e);
        let lo = all.partition_point(|&i| self.facts[i].timestamp < t);
        let hi = all.partition_point(|&i| self.facts[i].timestamp <= t);
        &all[lo..hi]
    }

    /// The graph restricted to facts before time `t` (vocabularies unchanged).
    pub fn truncated_before(&self, t: TimeId) -> TemporalKG {
        self.prefix(self.facts.partition_point(|f| f.timestamp < t))
    }

    /// The graph made of the first `n` facts, e.g. the training portion.
    pub fn prefix(&self, n: usize) -> TemporalKG {
        TemporalKG::from_sorted(
            self.facts[..n.min(self.facts.len())].to_vec(),
            self.entities.clone(),
            self.relations.clone(),
            self.times.clone(),
        )
        .expect("prefix of a valid graph is valid")
    }

    /// Checks that inverse facts pair one-to-one with base facts.
    pub fn check_inverse_closure(&self) -> Result<()> {
        let mut balance: HashMap<Quadruple, i64> = HashMap::new();
        for f in &self.facts {
            if self.is_inverse(f.relation) {
                let base = Quadruple::new(f.object, self.inverse_relation(f.relation), f.subject, f.timestamp);
                *balance.entry(base).or_default() -= 1;
            } else {
                *balance.entry(*f).or_default() += 1;
            }
        }
        match balance.iter().find(|(_, &v)| v != 0) {
            Some((q, _)) => Err(Error::Validation(format!("fact {q:?} lacks a matching inverse"))),
            None => Ok(()),
        }
    }
}

/// Interleaves each base fact with its inverse and sorts stably by time.
pub(crate) fn with_inverses(base: &[Quadruple], num_relations: u32) -> Vec<Quadruple> {
    let mut facts = Vec::with_capacity(base.len() * 2);
    for f in base {
        facts.push(*f);
        facts.push(Quadruple::new(f.object, f.relation + num_relations, f.subject, f.timestamp));
    }
    facts.sort_by_key(|f| f.timestamp);
    facts
}
