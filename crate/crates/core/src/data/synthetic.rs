//! Generated graphs for tests, benches, and the learnability task.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::io::{assemble, RawQuadruple};
use super::tkg::{DatasetSplit, TemporalKG};
use super::vocab::{Vocab, Vocabs};
use crate::error::Result;

/// Parameters of the recurring-pair task: every `(s, r)` pair has a fixed
/// object given by a per-relation permutation and recurs every `period`
/// timestamps with a pair-specific phase.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurringConfig {
    pub num_entities: usize,
    pub num_relations: usize,
    pub num_times: usize,
    pub period: usize,
    /// Fraction of `(s, r)` pairs that ever occur.
    pub pair_density: f64,
    pub seed: u64,
}

impl Default for RecurringConfig {
    fn default() -> Self {
        RecurringConfig {
            num_entities: 20,
            num_relations: 5,
            num_times: 24,
            period: 3,
            pair_density: 0.5,
            seed: 0,
        }
    }
}

fn vocabs(num_entities: usize, num_relations: usize) -> Vocabs {
    Vocabs {
        entities: Vocab::from_names((0..num_entities).map(|i| format!("E{i}"))),
        relations: Vocab::from_names((0..num_relations).map(|i| format!("R{i}"))),
    }
}

/// Splits raw facts 8:1:1 by timestamp (not by count).
fn chronological(facts: Vec<RawQuadruple>, num_times: usize) -> [Vec<RawQuadruple>; 3] {
    let t1 = ((num_times as f64) * 0.8).round() as u64;
    let t2 = ((num_times as f64) * 0.9).round() as u64;
    let mut parts: [Vec<RawQuadruple>; 3] = Default::default();
    for f in facts {
        let i = if f.timestamp < t1 {
            0
        } else if f.timestamp < t2 {
            1
        } else {
            2
        };
        parts[i].push(f);
    }
    parts
}

/// The object of `(s, r)` in a recurring-pair graph, i.e. `π_r(s)`.
pub fn recurring_objects(config: &RecurringConfig) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.num_relations)
        .map(|_| {
            let mut p: Vec<u32> = (0..config.num_entities as u32).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect()
}

pub fn recurring_tkg(config: &RecurringConfig) -> Result<(TemporalKG, DatasetSplit)> {
    let objects = recurring_objects(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let period = config.period.max(1);
    let mut pairs = Vec::new();
    for s in 0..config.num_entities as u32 {
        for r in 0..config.num_relations as u32 {
            if rng.gen_bool(config.pair_density.clamp(0.0, 1.0)) {
                pairs.push((s, r, rng.gen_range(0..period)));
            }
        }
    }
    let mut facts = Vec::new();
    for t in 0..config.num_times {
        for &(s, r, phase) in &pairs {
            if t % period == phase {
                facts.push(RawQuadruple {
                    subject: s,
                    relation: r,
                    object: objects[r as usize][s as usize],
                    timestamp: t as u64,
                });
            }
        }
    }
    assemble(
        chronological(facts, config.num_times),
        vocabs(config.num_entities, config.num_relations),
    )
}

/// Uniformly random facts (duplicates removed), all placed in train.
pub fn random_tkg(
    rng: &mut impl Rng,
    num_entities: usize,
    num_relations: usize,
    num_times: usize,
    num_facts: usize,
) -> Result<TemporalKG> {
    let mut facts: Vec<RawQuadruple> = (0..num_facts)
        .map(|_| RawQuadruple {
            subject: rng.gen_range(0..num_entities as u32),
            relation: rng.gen_range(0..num_relations as u32),
            object: rng.gen_range(0..num_entities as u32),
            timestamp: rng.gen_range(0..num_times as u64),
        })
        .collect();
    facts.sort_by_key(|f| (f.timestamp, f.subject, f.relation, f.object));
    facts.dedup();
    let (g, _) = assemble([facts, vec![], vec![]], vocabs(num_entities, num_relations))?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recurring_graph_is_deterministic_in_s_and_r() {
        let cfg = RecurringConfig::default();
        let (g, split) = recurring_tkg(&cfg).unwrap();
        let objects = recurring_objects(&cfg);
        for f in g.facts() {
            if !g.is_inverse(f.relation) {
                assert_eq!(objects[f.relation as usize][f.subject as usize], f.object);
            }
        }
        assert!(!split.test.is_empty() && !split.valid.is_empty());
        let (a, b) = split.boundary_timestamps;
        assert!(a < b);
        g.check_inverse_closure().unwrap();
        let again = recurring_tkg(&cfg).unwrap().0;
        assert_eq!(again.facts(), g.facts());
    }
}
