use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stk_core::adapter::{balance_value, top_k};
use stk_core::data::synthetic::random_tkg;
use stk_core::data::{read_bundle, write_bundle, DatasetSplit, Query, TemporalKG};
use stk_core::eval::{beam_search, hybrid_scores, rank_by_score, Decoder};
use stk_core::exec::ExecMode;
use stk_core::rules::{
    build_instruction, mine_rules, retrieve_chain, transition_probabilities, MiningConfig, Provenance, SymbolVocab,
    TokenClass,
};
use stk_core::sampler::{sample_history, SamplerConfig};

fn graph(seed: u64, facts: usize) -> TemporalKG {
    random_tkg(&mut ChaCha8Rng::seed_from_u64(seed), 8, 3, 10, facts).unwrap()
}

fn distribution(raw: &[f64]) -> Vec<f64> {
    let z: f64 = raw.iter().sum();
    raw.iter().map(|x| x / z).collect()
}

/// A decoder whose next-token distribution depends only on the position.
struct Table(Vec<Vec<f64>>);

impl Decoder for Table {
    type State = usize;

    fn initial(&self) -> stk_core::Result<(usize, Vec<f64>)> {
        Ok((0, self.0[0].clone()))
    }

    fn step(&self, &pos: &usize, _: u32) -> stk_core::Result<(usize, Vec<f64>)> {
        let next = (pos + 1).min(self.0.len() - 1);
        Ok((next, self.0[next].clone()))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transition_probabilities_favor_recent_edges(
        anchor in 5u32..50,
        offsets in prop::collection::vec(0u32..5, 1..10),
    ) {
        let times: Vec<u32> = offsets.iter().map(|o| anchor - o).collect();
        let p = transition_probabilities(anchor, &times);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..times.len() {
            for j in 0..times.len() {
                if times[i] > times[j] {
                    prop_assert!(p[i] > p[j]);
                } else if times[i] == times[j] {
                    prop_assert_eq!(p[i], p[j]);
                }
            }
        }
    }

    #[test]
    fn top_k_takes_the_largest_gates(gates in prop::collection::vec(0.0f64..1.0, 1..10), k in 1usize..10) {
        let k = k.min(gates.len());
        let idx = top_k(&gates, k);
        prop_assert_eq!(idx.len(), k);
        prop_assert_eq!(idx.iter().collect::<HashSet<_>>().len(), k);
        let weakest = idx.iter().map(|&i| gates[i]).fold(f64::INFINITY, f64::min);
        for (i, &g) in gates.iter().enumerate() {
            if !idx.contains(&i) {
                prop_assert!(g <= weakest);
            }
        }
        prop_assert!(idx.windows(2).all(|w| gates[w[0]] >= gates[w[1]]));
    }

    #[test]
    fn balance_with_matching_fractions_is_at_least_uniform(raw in prop::collection::vec(0.01f64..1.0, 1..12)) {
        let p = distribution(&raw);
        prop_assert!(balance_value(&p, &p) >= 1.0 / p.len() as f64 - 1e-12);
    }

    #[test]
    fn hybrid_scores_stay_in_the_unit_interval(
        pairs in prop::collection::vec((0.01f64..1.0, 0.01f64..1.0), 1..20),
        lambda in 0.0f64..=1.0,
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (llm, tkg) = (distribution(&a), distribution(&b));
        let s = hybrid_scores(&llm, &tkg, lambda).unwrap();
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let ranking = rank_by_score(&s);
        let mut sorted = ranking.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..s.len() as u32).collect::<Vec<_>>());
        prop_assert!(ranking.windows(2).all(|w| s[w[0] as usize] >= s[w[1] as usize]));
    }

    #[test]
    fn beams_are_sorted_distinct_and_bounded(
        rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4), 1..4),
        width in 1usize..8,
        max_len in 1usize..4,
    ) {
        let table = Table(rows.iter().map(|r| distribution(r).iter().map(|p| p.ln()).collect()).collect());
        let beams = beam_search(&table, width, max_len, Some(3)).unwrap();
        prop_assert!(!beams.is_empty() && beams.len() <= width);
        prop_assert!(beams.windows(2).all(|w| w[0].log_prob >= w[1].log_prob));
        prop_assert_eq!(beams.iter().map(|b| &b.tokens).collect::<HashSet<_>>().len(), beams.len());
        for b in &beams {
            prop_assert!(b.log_prob <= 0.0);
            prop_assert!(b.tokens.len() == max_len || b.tokens.last() == Some(&3));
        }
    }

    #[test]
    fn sampled_snapshots_respect_the_budget(seed in 0u64..1000, pick in 0usize..1000, fanout in 1usize..4, depth in 1usize..3) {
        let g = graph(seed, 40);
        let fact = g.facts()[pick % g.facts().len()];
        prop_assume!(fact.timestamp > 0);
        let config = SamplerConfig { fanout, depth, window: 4 };
        let query = Query::from(&fact);
        let seq = sample_history(&g, query, config, seed).unwrap();
        prop_assert!(seq.snapshots.len() <= 4);
        prop_assert!(seq.snapshots.windows(2).all(|w| w[0].time < w[1].time));
        for snap in &seq.snapshots {
            prop_assert!(snap.time < query.time);
            prop_assert_eq!(snap.nodes.first(), Some(&query.subject));
            prop_assert_eq!(snap.nodes.iter().collect::<HashSet<_>>().len(), snap.nodes.len());
            let present = g.snapshot_at(snap.time).unwrap();
            for e in &snap.edges {
                prop_assert!(present.contains(e));
                prop_assert!(snap.nodes.contains(&e.subject) && snap.nodes.contains(&e.object));
            }
            for n in &snap.nodes {
                prop_assert!(snap.edges.iter().filter(|e| e.subject == *n).count() <= fanout);
            }
        }
    }

    #[test]
    fn instructions_follow_the_layout(seed in 0u64..1000, pick in 0usize..1000, max_events in 1usize..6) {
        let g = graph(seed, 40);
        let fact = g.facts()[pick % g.facts().len()];
        prop_assume!(fact.timestamp > 0);
        let rules = mine_rules(&g, MiningConfig { walks_per_relation: 10, max_body_len: 2, seed }, ExecMode::Sequential).unwrap();
        let query = Query::from(&fact);
        let chain = retrieve_chain(query, &rules, &g, max_events).unwrap();
        prop_assert!(chain.len() <= max_events);
        prop_assert_eq!(chain.provenance.len(), chain.len());
        prop_assert!(chain.events.iter().all(|e| e.timestamp < query.time));
        prop_assert!(chain.events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        for (e, p) in chain.events.iter().zip(&chain.provenance) {
            if let Provenance::Rule(id) = p {
                prop_assert!(rules.find(*id).is_some());
            }
            prop_assert!(g.facts().contains(e));
        }

        let vocab = SymbolVocab::new(&g, max_events + 1);
        let ins = build_instruction(query, &chain, &vocab, Some(fact.object)).unwrap();
        prop_assert_eq!(ins.event_spans.len(), chain.len() + 1);
        prop_assert_eq!(ins.time_map.len(), ins.tokens.len());
        for &(a, b) in &ins.event_spans {
            prop_assert!(matches!(vocab.class(ins.tokens[a]), TokenClass::Time(_)));
            prop_assert!((a..b).all(|j| ins.time_map[j] == a));
        }
        prop_assert_eq!(ins.resolve(&vocab, &ins.target.clone().unwrap()), Some(fact.object));
    }

    #[test]
    fn bundles_round_trip(seed in 0u64..1000, facts in 1usize..60) {
        let g = graph(seed, facts);
        let (n, last) = (g.facts().len(), g.facts().last().unwrap().timestamp);
        let split = DatasetSplit { train: 0..n, valid: n..n, test: n..n, boundary_timestamps: (last, last) };
        let mut buf = Vec::new();
        write_bundle(&mut buf, &g, &split).unwrap();
        let (back, back_split) = read_bundle(&mut buf.as_slice(), "memory").unwrap();
        prop_assert_eq!(back.facts(), g.facts());
        prop_assert_eq!(back_split, split);
        prop_assert_eq!(back.num_entities(), g.num_entities());
        prop_assert_eq!(back.num_relations(), g.num_relations());
    }
}
