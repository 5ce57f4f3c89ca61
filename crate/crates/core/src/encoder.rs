//! Evolving graph encoder and the topology-aware candidate scorer.
//!
//! Each sampled snapshot runs one round of relation-conditioned mean
//! aggregation (both edge directions) over the rows it touches, followed by
//! a gated recurrent blend with the previous state:
//!
//! ```text
//! m_v = mean(h_u + e_r)            over edges u -r-> v
//! c_v = tanh(m_v W_msg + h_v W_self)
//! z_v = sigmoid([h_v; c_v] W_gate + b_gate)
//! h_v ← (1 − z_v) h_v + z_v c_v
//! ```
//!
//! Relation embeddings stay static. A candidate `o` for `(s, r)` scores
//! `((h_s W_score) ⊙ e_r) · h_o`, normalized by softmax over the candidates.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EntityId, Query, RelationId, TemporalKG, TimeId};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::numerics::{clip_grad_norm, init, AdamW, AdamWConfig, ParamGrads, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::derive_seed;
use crate::sampler::{sample_history_or_empty, SamplerConfig, SubgraphSequence};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Negatives per query; all entities are scored when `|E| ≤ negatives + 1`.
    pub negatives: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 16,
            epochs: 20,
            learning_rate: 1e-2,
            batch_size: 32,
            negatives: 64,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.batch_size == 0 {
            return Err(Error::Config("encoder dim and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("encoder learning_rate must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Encoder output for one query's history.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub entity: Tensor,
    pub relation: Tensor,
    pub as_of_time: TimeId,
}

/// The query's graph-side representation threaded through the adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphState {
    /// `[1, 2·d_g]`, fixed once built.
    pub h0: Tensor,
    pub h_current: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct Ids {
    entity: ParamId,
    relation: ParamId,
    w_msg: ParamId,
    w_self: ParamId,
    w_gate: ParamId,
    b_gate: ParamId,
    w_score: ParamId,
}

#[derive(Clone, Debug)]
pub struct GraphEncoder {
    store: ParamStore,
    ids: Ids,
    dim: usize,
}

const NAMES: [&str; 7] = [
    "encoder.entity",
    "encoder.relation",
    "encoder.w_msg",
    "encoder.w_self",
    "encoder.w_gate",
    "encoder.b_gate",
    "encoder.w_score",
];

impl GraphEncoder {
    pub fn new(num_entities: usize, num_relation_ids: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("encoder dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = 1.0 / (dim as f64).sqrt();
        let mut store = ParamStore::new();
        store.add(NAMES[0], init::uniform(&mut rng, &[num_entities, dim], emb), true)?;
        store.add(NAMES[1], init::uniform(&mut rng, &[num_relation_ids, dim], emb), true)?;
        store.add(NAMES[2], init::xavier(&mut rng, dim, dim), true)?;
        store.add(NAMES[3], init::xavier(&mut rng, dim, dim), true)?;
        store.add(NAMES[4], init::xavier(&mut rng, 2 * dim, dim), true)?;
        store.add(NAMES[5], Tensor::zeros(&[dim]), true)?;
        let mut w = Tensor::identity(dim);
        for (x, n) in w.data_mut().iter_mut().zip(init::uniform(&mut rng, &[dim, dim], 0.1).data()) {
            *x += n;
        }
        store.add(NAMES[6], w, true)?;
        Self::from_store(store)
    }

    /// Wraps a loaded checkpoint, checking names and shapes.
    pub fn from_store(store: ParamStore) -> Result<Self> {
        let get = |n: &str| store.require(n);
        let ids = Ids {
            entity: get(NAMES[0])?,
            relation: get(NAMES[1])?,
            w_msg: get(NAMES[2])?,
            w_self: get(NAMES[3])?,
            w_gate: get(NAMES[4])?,
            b_gate: get(NAMES[5])?,
            w_score: get(NAMES[6])?,
        };
        let dim = store.value(ids.entity).cols();
        let expect = [
            (ids.relation, dim),
            (ids.w_msg, dim),
            (ids.w_self, dim),
            (ids.w_gate, dim),
            (ids.w_score, dim),
        ];
        for (id, cols) in expect {
            if store.value(id).cols() != cols {
                return Err(Error::Validation(format!("encoder parameter {} has wrong width", store.get(id).name)));
            }
        }
        Ok(GraphEncoder { store, ids, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_entities(&self) -> usize {
        self.store.value(self.ids.entity).rows()
    }

    pub fn num_relation_ids(&self) -> usize {
        self.store.value(self.ids.relation).rows()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn freeze(&mut self) {
        self.store.set_trainable_prefix("encoder.", false);
    }

    pub fn fingerprint(&self) -> u64 {
        self.store.fingerprint(|_| true)
    }

    /// Fails if the encoder was built for different vocabulary sizes.
    pub fn check_compatible(&self, tkg: &TemporalKG) -> Result<()> {
        if self.num_entities() != tkg.num_entities() || self.num_relation_ids() != tkg.num_relation_ids() {
            return Err(Error::Validation(format!(
                "encoder expects {} entities / {} relations, dataset has {} / {}",
                self.num_entities(),
                self.num_relation_ids(),
                tkg.num_entities(),
                tkg.num_relation_ids()
            )));
        }
        Ok(())
    }

    fn check_ids(&self, e: &[EntityId], r: &[RelationId]) -> Result<()> {
        if let Some(&bad) = e.iter().find(|&&x| x as usize >= self.num_entities()) {
            return Err(Error::Range {
                what: "entity id",
                index: bad as usize,
                limit: self.num_entities(),
            });
        }
        if let Some(&bad) = r.iter().find(|&&x| x as usize >= self.num_relation_ids()) {
            return Err(Error::Range {
                what: "relation id",
                index: bad as usize,
                limit: self.num_relation_ids(),
            });
        }
        Ok(())
    }

    /// Records the recurrence on `tape`; returns the full entity matrix
    /// and the relation matrix.
    fn encode_vars(&self, tape: &mut Tape, seq: &SubgraphSequence) -> Result<(Var, Var)> {
        let p = |tape: &mut Tape, id| tape.param(&self.store, id);
        let base = p(tape, self.ids.entity);
        let rel = p(tape, self.ids.relation);
        if seq.snapshots.iter().all(|s| s.edges.is_empty()) {
            return Ok((base, rel));
        }
        let w_msg = p(tape, self.ids.w_msg);
        let w_self = p(tape, self.ids.w_self);
        let w_gate = p(tape, self.ids.w_gate);
        let b_gate = p(tape, self.ids.b_gate);

        // local rows for every entity the history touches
        let mut local: HashMap<EntityId, usize> = HashMap::new();
        let mut globals: Vec<usize> = Vec::new();
        for snap in &seq.snapshots {
            for e in &snap.edges {
                self.check_ids(&[e.subject, e.object], &[e.relation])?;
                for x in [e.subject, e.object] {
                    local.entry(x).or_insert_with(|| {
                        globals.push(x as usize);
                        globals.len() - 1
                    });
                }
            }
        }
        let mut state = tape.gather_rows(base, &globals)?;
        let inv = |r: RelationId| {
            let half = (self.num_relation_ids() / 2) as RelationId;
            if r < half {
                r + half
            } else {
                r - half
            }
        };
        for snap in &seq.snapshots {
            if snap.edges.is_empty() {
                continue;
            }
            // incoming messages: (source local row, relation, target local row)
            let mut msgs = Vec::with_capacity(2 * snap.edges.len());
            for e in &snap.edges {
                let (u, v) = (local[&e.subject], local[&e.object]);
                msgs.push((u, e.relation, v));
                msgs.push((v, inv(e.relation), u));
            }
            let mut touched: Vec<usize> = msgs.iter().map(|m| m.2).collect();
            touched.sort_unstable();
            touched.dedup();
            let slot: HashMap<usize, usize> = touched.iter().enumerate().map(|(k, &t)| (t, k)).collect();
            let mut deg = vec![0usize; touched.len()];
            for m in &msgs {
                deg[slot[&m.2]] += 1;
            }
            let mut agg = Tensor::zeros(&[touched.len(), msgs.len()]);
            for (j, m) in msgs.iter().enumerate() {
                let k = slot[&m.2];
                agg.row_mut(k)[j] = 1.0 / deg[k] as f64;
            }
            let src: Vec<usize> = msgs.iter().map(|m| m.0).collect();
            let rels: Vec<usize> = msgs.iter().map(|m| m.1 as usize).collect();
            let hs = tape.gather_rows(state, &src)?;
            let er = tape.gather_rows(rel, &rels)?;
            let raw = tape.add(hs, er)?;
            let agg = tape.constant(agg);
            let m = tape.matmul(agg, raw)?;
            let h = tape.gather_rows(state, &touched)?;
            let a = tape.matmul(m, w_msg)?;
            let b = tape.matmul(h, w_self)?;
            let pre = tape.add(a, b)?;
            let c = tape.tanh(pre);
            let hc = tape.concat_cols(&[h, c])?;
            let zl = tape.matmul(hc, w_gate)?;
            let zl = tape.add_row(zl, b_gate)?;
            let z = tape.sigmoid(zl);
            let delta = tape.sub(c, h)?;
            let step = tape.mul(z, delta)?;
            let h_new = tape.add(h, step)?;
            state = tape.scatter_rows(state, &touched, h_new)?;
        }
        let full = tape.scatter_rows(base, &globals, state)?;
        Ok((full, rel))
    }

    pub fn encode_history(&self, seq: &SubgraphSequence) -> Result<EncoderState> {
        let mut tape = Tape::inference();
        let (e, r) = self.encode_vars(&mut tape, seq)?;
        Ok(EncoderState {
            entity: tape.value(e).clone(),
            relation: tape.value(r).clone(),
            as_of_time: seq.query.time,
        })
    }

    /// Raw candidate scores `[1, n]` on `tape`.
    fn score_vars(
        &self,
        tape: &mut Tape,
        ent: Var,
        rel: Var,
        s: EntityId,
        r: RelationId,
        candidates: &[EntityId],
    ) -> Result<Var> {
        let w = tape.param(&self.store, self.ids.w_score);
        let hs = tape.gather_rows(ent, &[s as usize])?;
        let hr = tape.gather_rows(rel, &[r as usize])?;
        let proj = tape.matmul(hs, w)?;
        let q = tape.mul(proj, hr)?;
        let idx: Vec<usize> = candidates.iter().map(|&c| c as usize).collect();
        let ho = tape.gather_rows(ent, &idx)?;
        tape.matmul_nt(q, ho)
    }

    /// Softmax-normalized scores of `candidates` for `(s, r)`.
    pub fn tkg_score(&self, state: &EncoderState, s: EntityId, r: RelationId, candidates: &[EntityId]) -> Result<Vec<f64>> {
        if candidates.is_empty() {
            return Err(Error::Contract("tkg_score needs at least one candidate".into()));
        }
        self.check_ids(candidates, &[r])?;
        self.check_ids(&[s], &[])?;
        let mut tape = Tape::inference();
        let ent = tape.constant(state.entity.clone());
        let rel = tape.constant(state.relation.clone());
        let raw = self.score_vars(&mut tape, ent, rel, s, r, candidates)?;
        let p = tape.softmax_rows(raw, None)?;
        Ok(tape.value(p).data().to_vec())
    }

    /// Loss and gradients for one training query.
    fn example_grads(&self, seq: &SubgraphSequence, gold: EntityId, candidates: &[EntityId]) -> Result<(f64, ParamGrads)> {
        let mut tape = Tape::new();
        let (ent, rel) = self.encode_vars(&mut tape, seq)?;
        let q = seq.query;
        let raw = self.score_vars(&mut tape, ent, rel, q.subject, q.relation, candidates)?;
        let pos = candidates.iter().position(|&c| c == gold).expect("gold among candidates");
        let loss = tape.cross_entropy(raw, &[(0, pos)])?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numerical(format!("encoder loss is {value} for query {q:?}")));
        }
        Ok((value, tape.backward(loss)?.into_params()))
    }
}

/// `h0 = [H_E[s] ; H_R[r]]`.
pub fn initial_graph_repr(state: &EncoderState, s: EntityId, r: RelationId) -> Result<GraphState> {
    let (ne, nr) = (state.entity.rows(), state.relation.rows());
    if s as usize >= ne {
        return Err(Error::Range {
            what: "entity id",
            index: s as usize,
            limit: ne,
        });
    }
    if r as usize >= nr {
        return Err(Error::Range {
            what: "relation id",
            index: r as usize,
            limit: nr,
        });
    }
    let mut row = state.entity.row(s as usize).to_vec();
    row.extend_from_slice(state.relation.row(r as usize));
    let h0 = Tensor::row_vector(&row);
    Ok(GraphState {
        h_current: h0.clone(),
        h0,
    })
}

/// Samples, encodes, and builds the graph state for one query.
pub fn graph_state_for(
    encoder: &GraphEncoder,
    tkg: &TemporalKG,
    query: Query,
    sampler: SamplerConfig,
    seed: u64,
) -> Result<(EncoderState, GraphState)> {
    let seq = sample_history_or_empty(tkg, query, sampler, seed)?;
    let state = encoder.encode_history(&seq)?;
    let g = initial_graph_repr(&state, query.subject, query.relation)?;
    Ok((state, g))
}

/// Trains the encoder on every training fact as a query; returns the mean
/// loss per epoch and leaves the parameters frozen.
pub fn pretrain_encoder(
    encoder: &mut GraphEncoder,
    tkg_train: &TemporalKG,
    sampler: SamplerConfig,
    config: &EncoderConfig,
    mode: ExecMode,
) -> Result<Vec<f64>> {
    config.validate()?;
    encoder.check_compatible(tkg_train)?;
    let ne = tkg_train.num_entities();
    let mut opt = AdamW::new(AdamWConfig {
        learning_rate: config.learning_rate,
        ..AdamWConfig::default()
    });
    let facts: Vec<usize> = (0..tkg_train.facts().len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order = facts.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, epoch as u64]));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let jobs: Vec<(usize, u64)> = batch
                .iter()
                .map(|&i| (i, derive_seed(&[config.seed, epoch as u64, b as u64, i as u64])))
                .collect();
            let results = exec::try_map(mode, &jobs, |&(i, job_seed)| {
                let f = *tkg_train.fact(i);
                let q = Query::from(&f);
                let seq = sample_history_or_empty(tkg_train, q, sampler, config.seed)?;
                let cands = candidates(ne, f.object, config.negatives, job_seed);
                encoder.example_grads(&seq, f.object, &cands)
            })?;
            let mut grads = ParamGrads::new();
            for (loss, g) in &results {
                total += loss;
                grads.merge(g);
            }
            grads.scale(1.0 / batch.len() as f64);
            clip_grad_norm(&mut grads, 1.0);
            opt.step(&mut encoder.store, &grads);
        }
        let mean = total / facts.len().max(1) as f64;
        log::info!("encoder epoch {epoch}: loss {mean:.4}");
        history.push(mean);
    }
    encoder.freeze();
    Ok(history)
}

/// Gold first, then either every other entity or a sample of negatives.
fn candidates(num_entities: usize, gold: EntityId, negatives: usize, seed: u64) -> Vec<EntityId> {
    let mut out = vec![gold];
    if num_entities <= negatives + 1 {
        out.extend((0..num_entities as EntityId).filter(|&e| e != gold));
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        while out.len() < negatives + 1 {
            let e = rng.gen_range(0..num_entities as EntityId);
            if !out.contains(&e) {
                out.push(e);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Quadruple;
    use crate::sampler::SampledSnapshot;

    fn seq(snaps: Vec<(TimeId, Vec<Quadruple>)>) -> SubgraphSequence {
        SubgraphSequence {
            query: Query::new(0, 0, 9),
            snapshots: snaps
                .into_iter()
                .map(|(time, edges)| SampledSnapshot {
                    time,
                    nodes: Vec::new(),
                    edges,
                })
                .collect(),
            config: SamplerConfig::default(),
        }
    }

    #[test]
    fn empty_history_returns_base_embeddings() {
        let enc = GraphEncoder::new(4, 4, 3, 1).unwrap();
        let st = enc.encode_history(&seq(vec![])).unwrap();
        assert_eq!(&st.entity, enc.store().value(enc.ids.entity));
    }

    #[test]
    fn only_incident_rows_change() {
        let enc = GraphEncoder::new(4, 4, 3, 1).unwrap();
        let st = enc.encode_history(&seq(vec![(0, vec![Quadruple::new(0, 1, 2, 0)])])).unwrap();
        let base = enc.store().value(enc.ids.entity);
        for e in 0..4 {
            let same = st.entity.row(e) == base.row(e);
            assert_eq!(same, e == 1 || e == 3, "row {e}");
        }
    }

    #[test]
    fn snapshot_order_matters() {
        let enc = GraphEncoder::new(4, 4, 3, 1).unwrap();
        let a = (0, vec![Quadruple::new(0, 0, 1, 0)]);
        let b = (1, vec![Quadruple::new(1, 1, 2, 1), Quadruple::new(0, 1, 3, 1)]);
        let x = enc.encode_history(&seq(vec![a.clone(), b.clone()])).unwrap();
        let y = enc.encode_history(&seq(vec![b, a])).unwrap();
        assert_ne!(x.entity, y.entity);
    }

    #[test]
    fn initial_repr_concatenates() {
        let st = EncoderState {
            entity: Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap(),
            relation: Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap(),
            as_of_time: 0,
        };
        let g = initial_graph_repr(&st, 0, 0).unwrap();
        assert_eq!(g.h0.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.h_current, g.h0);
        let g2 = initial_graph_repr(&st, 0, 1).unwrap();
        assert_eq!(g.h0.data()[..2], g2.h0.data()[..2]);
        assert!(initial_graph_repr(&st, 1, 0).is_err());
    }

    #[test]
    fn score_is_a_distribution() {
        let enc = GraphEncoder::new(5, 4, 3, 2).unwrap();
        let st = enc.encode_history(&seq(vec![])).unwrap();
        assert_eq!(enc.tkg_score(&st, 0, 0, &[3]).unwrap(), vec![1.0]);
        let p = enc.tkg_score(&st, 0, 1, &[0, 1, 2, 3, 4]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| x > 0.0));
        // the same entity twice is a tie
        let p = enc.tkg_score(&st, 0, 1, &[2, 2]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }
}
