//! Per-query historical subgraph sampling.
//!
//! For each of the most recent timestamps before the query in which the
//! root has edges, a BFS from the root keeps at most `fanout` edges per
//! expanded node, down to `depth` hops.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{EntityId, Quadruple, Query, TemporalKG, TimeId};
use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub fanout: usize,
    pub depth: usize,
    pub window: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            fanout: 10,
            depth: 2,
            window: 16,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fanout == 0 || self.depth == 0 || self.window == 0 {
            return Err(Error::Config("sampler fanout, depth, and window must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampledSnapshot {
    pub time: TimeId,
    pub edges: Vec<Quadruple>,
    /// Sampled nodes in discovery order; the root comes first.
    pub nodes: Vec<EntityId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubgraphSequence {
    pub query: Query,
    /// Chronological (oldest first).
    pub snapshots: Vec<SampledSnapshot>,
    pub config: SamplerConfig,
}

impl SubgraphSequence {
    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn render(&self, tkg: &TemporalKG) -> String {
        let mut out = String::new();
        let q = &self.query;
        let _ = writeln!(
            out,
            "query {} {} ? @{}",
            tkg.entity_name(q.subject),
            tkg.relation_name(q.relation),
            q.time
        );
        for snap in &self.snapshots {
            let _ = writeln!(out, "snapshot {} nodes={}", snap.time, snap.nodes.len());
            for e in &snap.edges {
                let _ = writeln!(
                    out,
                    "  {}\t{}\t{}",
                    tkg.entity_name(e.subject),
                    tkg.relation_name(e.relation),
                    tkg.entity_name(e.object)
                );
            }
        }
        out
    }
}

/// Timestamps before `t` at which `e` has edges, most recent first, capped at `window`.
pub(crate) fn recent_active_times(tkg: &TemporalKG, e: EntityId, t: TimeId, window: usize) -> Vec<TimeId> {
    let mut times = Vec::new();
    for &i in tkg.outgoing_before(e, t).iter().rev() {
        let ti = tkg.fact(i).timestamp;
        if times.last() != Some(&ti) {
            if times.len() == window {
                break;
            }
            times.push(ti);
        }
    }
    times
}

pub fn sample_history(tkg: &TemporalKG, query: Query, config: SamplerConfig, seed: u64) -> Result<SubgraphSequence> {
    config.validate()?;
    if query.time == 0 {
        return Err(Error::EmptyHistory(query.time));
    }
    if query.subject as usize >= tkg.num_entities() {
        return Err(Error::Range {
            what: "entity id",
            index: query.subject as usize,
            limit: tkg.num_entities(),
        });
    }
    let mut times = recent_active_times(tkg, query.subject, query.time, config.window);
    times.reverse();
    let snapshots = times
        .into_iter()
        .map(|t| {
            let mut rng = rng_for(&[seed, query.subject as u64, query.relation as u64, query.time as u64, t as u64]);
            sample_snapshot(tkg, query.subject, t, config, &mut rng)
        })
        .collect();
    Ok(SubgraphSequence {
        query,
        snapshots,
        config,
    })
}

/// Like [`sample_history`], but a query at time 0 yields an empty sequence.
pub fn sample_history_or_empty(tkg: &TemporalKG, query: Query, config: SamplerConfig, seed: u64) -> Result<SubgraphSequence> {
    match sample_history(tkg, query, config, seed) {
        Err(Error::EmptyHistory(_)) => Ok(SubgraphSequence {
            query,
            snapshots: Vec::new(),
            config,
        }),
        other => other,
    }
}

fn sample_snapshot(
    tkg: &TemporalKG,
    root: EntityId,
    t: TimeId,
    config: SamplerConfig,
    rng: &mut impl rand::Rng,
) -> SampledSnapshot {
    let mut nodes = vec![root];
    let mut seen: HashSet<EntityId> = HashSet::from([root]);
    let mut edges = Vec::new();
    let mut frontier = vec![root];
    for _ in 0..config.depth {
        let mut next = Vec::new();
        for &node in &frontier {
            // only edges that reach new nodes count as neighbors
            let cands: Vec<usize> = tkg
                .outgoing_at(node, t)
                .iter()
                .copied()
                .filter(|&i| !seen.contains(&tkg.fact(i).object))
                .collect();
            let chosen: Vec<usize> = if cands.len() <= config.fanout {
                cands
            } else {
                let mut picks: Vec<usize> = sample(rng, cands.len(), config.fanout).into_iter().collect();
                picks.sort_unstable();
                picks.into_iter().map(|j| cands[j]).collect()
            };
            for i in chosen {
                let f = *tkg.fact(i);
                edges.push(f);
                if seen.insert(f.object) {
                    nodes.push(f.object);
                    next.push(f.object);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    SampledSnapshot { time: t, edges, nodes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Vocab;

    fn graph(base: &[(u32, u32, u32, u32)], ne: usize, nt: usize) -> TemporalKG {
        let facts: Vec<Quadruple> = base.iter().map(|&(s, r, o, t)| Quadruple::new(s, r, o, t)).collect();
        TemporalKG::from_base_facts(
            &facts,
            Vocab::from_names((0..ne).map(|i| format!("e{i}"))),
            Vocab::from_names(["r0", "r1"]),
            (0..nt as u64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn fanout_above_degree_keeps_all() {
        let g = graph(&[(0, 0, 1, 0), (0, 1, 2, 0)], 3, 2);
        let cfg = SamplerConfig { fanout: 5, depth: 1, window: 4 };
        let seq = sample_history(&g, Query::new(0, 0, 1), cfg, 0).unwrap();
        assert_eq!(seq.snapshots.len(), 1);
        assert_eq!(seq.snapshots[0].edges.len(), 2);
    }

    #[test]
    fn star_is_capped_at_fanout() {
        let base: Vec<_> = (1..=10).map(|o| (0, 0, o, 0)).collect();
        let g = graph(&base, 11, 2);
        let cfg = SamplerConfig { fanout: 3, depth: 1, window: 4 };
        let seq = sample_history(&g, Query::new(0, 0, 1), cfg, 9).unwrap();
        let edges = &seq.snapshots[0].edges;
        assert_eq!(edges.len(), 3);
        for e in edges {
            assert!(g.snapshot_at(0).unwrap().contains(e));
        }
    }

    #[test]
    fn chain_is_followed_to_depth() {
        let g = graph(&[(0, 0, 1, 0), (1, 0, 2, 0)], 3, 2);
        let cfg = SamplerConfig { fanout: 1, depth: 2, window: 4 };
        let seq = sample_history(&g, Query::new(0, 0, 1), cfg, 3).unwrap();
        assert_eq!(seq.snapshots[0].nodes, vec![0, 1, 2]);
    }

    #[test]
    fn time_zero_has_no_history() {
        let g = graph(&[(0, 0, 1, 0)], 2, 1);
        assert!(matches!(
            sample_history(&g, Query::new(0, 0, 0), SamplerConfig::default(), 0),
            Err(Error::EmptyHistory(0))
        ));
    }

    #[test]
    fn window_keeps_most_recent_active_times() {
        let g = graph(&[(0, 0, 1, 0), (0, 0, 1, 2), (0, 0, 1, 3), (1, 0, 0, 4)], 2, 6);
        let cfg = SamplerConfig { fanout: 2, depth: 1, window: 2 };
        let seq = sample_history(&g, Query::new(0, 0, 5), cfg, 0).unwrap();
        let times: Vec<_> = seq.snapshots.iter().map(|s| s.time).collect();
        // entity 0 is the object at t=4, so the inverse edge makes it active there
        assert_eq!(times, vec![3, 4]);
    }
}
