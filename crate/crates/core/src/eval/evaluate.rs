//! Single-step Hit@K evaluation.

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::decode::{decode_candidates, ModelDecoder};
use super::hybrid::{hit_at_k, hybrid_rank};
use crate::adapter::{Ablation, RoutingStats};
use crate::data::{EntityId, Query, TemporalKG};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::model::StkModel;
use crate::pipeline::QueryContext;
use crate::rules::instruction::ANSWER_LEN;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub beam_width: usize,
    /// Weight λ of the encoder's score in the hybrid ranking.
    pub lambda: f64,
    pub max_len: usize,
    /// Whether gold facts of earlier test timestamps are visible.
    pub gold_append: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            beam_width: 20,
            lambda: 0.1,
            max_len: ANSWER_LEN,
            gold_append: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.max_len == 0 {
            return Err(Error::Config("beam_width and max_len must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda = {} is outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub query: Query,
    pub gold: EntityId,
    /// 1-based rank of the gold entity.
    pub rank: usize,
    pub top: Vec<EntityId>,
    /// Beam candidates that resolved to no entity.
    pub unresolved: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub hit1: f64,
    pub hit3: f64,
    pub hit10: f64,
    pub beam_width: usize,
    pub lambda: f64,
    pub gold_append: bool,
    pub results: Vec<QueryResult>,
}

impl EvalReport {
    fn from_results(cfg: &EvalConfig, lambda: f64, results: Vec<QueryResult>) -> Self {
        let n = results.len().max(1) as f64;
        let hit = |k: usize| results.iter().filter(|r| r.rank <= k).count() as f64 / n;
        EvalReport {
            hit1: hit(1),
            hit3: hit(3),
            hit10: hit(10),
            beam_width: cfg.beam_width,
            lambda,
            gold_append: cfg.gold_append,
            results,
        }
    }

    pub fn to_text(&self) -> String {
        let unresolved: usize = self.results.iter().map(|r| r.unresolved).sum();
        let mut s = String::from("# stk eval v1\n");
        let _ = writeln!(s, "beam_width\t{}", self.beam_width);
        let _ = writeln!(s, "lambda\t{}", self.lambda);
        let _ = writeln!(s, "gold_append\t{}", self.gold_append);
        let _ = writeln!(s, "queries\t{}", self.results.len());
        let _ = writeln!(s, "unresolved_candidates\t{unresolved}");
        let _ = writeln!(s, "hit@1\t{:.6}", self.hit1);
        let _ = writeln!(s, "hit@3\t{:.6}", self.hit3);
        let _ = writeln!(s, "hit@10\t{:.6}", self.hit10);
        s
    }

    /// One line per query: the query, gold, its rank, and the top entities.
    pub fn rankings_to_text(&self, tkg: &TemporalKG) -> String {
        let mut s = String::from("# stk rankings v1\n# subject\trelation\ttime\tgold\trank\ttop\n");
        for r in &self.results {
            let top: Vec<&str> = r.top.iter().map(|&e| tkg.entity_name(e)).collect();
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                tkg.entity_name(r.query.subject),
                tkg.relation_name(r.query.relation),
                r.query.time,
                tkg.entity_name(r.gold),
                r.rank,
                top.join(",")
            );
        }
        s
    }
}

/// Evaluates the facts `tkg.facts()[test]` in timestamp order.
///
/// Each query sees exactly the facts before its timestamp. With
/// `gold_append` that includes gold test facts of earlier timestamps, which
/// is the single-step protocol; without it history stops at the first test
/// timestamp. Inverse facts are test facts too, so both directions count.
pub fn evaluate(
    model: &StkModel,
    ctx: &QueryContext<'_>,
    tkg: &TemporalKG,
    test: Range<usize>,
    cfg: &EvalConfig,
    ablation: &Ablation,
    mode: ExecMode,
) -> Result<(EvalReport, RoutingStats)> {
    cfg.validate()?;
    ctx.encoder.check_compatible(tkg)?;
    if model.backbone.vocab_size != ctx.vocab.len() {
        return Err(Error::Validation(format!(
            "model vocabulary has {} tokens, dataset symbols need {}",
            model.backbone.vocab_size,
            ctx.vocab.len()
        )));
    }
    let queries = tkg
        .facts()
        .get(test.clone())
        .ok_or_else(|| Error::Contract(format!("test range {test:?} exceeds {} facts", tkg.facts().len())))?;
    let truncated;
    let history = match queries.first() {
        Some(first) if !cfg.gold_append => {
            truncated = tkg.truncated_before(first.timestamp);
            &truncated
        }
        _ => tkg,
    };
    let ctx = QueryContext { history, ..*ctx };
    let lambda = if ablation.disable_hybrid_score { 0.0 } else { cfg.lambda };
    let all: Vec<EntityId> = (0..tkg.num_entities() as EntityId).collect();
    let per_query = exec::try_map(mode, queries, |f| {
        let query = Query::from(f);
        let prepared = ctx.prepare(query, None)?;
        let (cands, records) = decode_candidates(
            model,
            ctx.vocab,
            &prepared.instruction,
            Some((&prepared.graph, ablation)),
            cfg.beam_width,
            cfg.max_len,
        )?;
        let tkg_dist = ctx.encoder.tkg_score(&prepared.encoder_state, query.subject, query.relation, &all)?;
        let ranking = hybrid_rank(&cands, &tkg_dist, lambda)?;
        let rank = ranking.iter().position(|&e| e == f.object).map_or(ranking.len() + 1, |p| p + 1);
        debug_assert_eq!(hit_at_k(&ranking, f.object, 1) == 1, rank == 1);
        let result = QueryResult {
            query,
            gold: f.object,
            rank,
            top: ranking.into_iter().take(10).collect(),
            unresolved: cands.iter().filter(|c| c.entity.is_none()).count(),
        };
        Ok::<_, Error>((result, records))
    })?;
    let mut stats = RoutingStats::default();
    let mut results = Vec::with_capacity(per_query.len());
    for (r, records) in per_query {
        stats.absorb(&records);
        results.push(r);
    }
    let report = EvalReport::from_results(cfg, lambda, results);
    let unresolved: usize = report.results.iter().map(|r| r.unresolved).sum();
    if unresolved > 0 {
        log::info!("{unresolved} beam candidates did not resolve to an entity and were dropped");
    }
    log::info!(
        "evaluated {} queries: hit@1 {:.4} hit@3 {:.4} hit@10 {:.4}",
        report.results.len(),
        report.hit1,
        report.hit3,
        report.hit10
    );
    Ok((report, stats))
}

/// Routing statistics of the prompt passes over `tkg.facts()[queries]`,
/// each query seeing the facts before its timestamp.
pub fn routing_stats(
    model: &StkModel,
    ctx: &QueryContext<'_>,
    tkg: &TemporalKG,
    queries: Range<usize>,
    ablation: &Ablation,
    mode: ExecMode,
) -> Result<RoutingStats> {
    let facts = tkg
        .facts()
        .get(queries.clone())
        .ok_or_else(|| Error::Contract(format!("query range {queries:?} exceeds {} facts", tkg.facts().len())))?;
    let ctx = QueryContext { history: tkg, ..*ctx };
    let per_query = exec::try_map(mode, facts, |f| {
        let p = ctx.prepare(Query::from(f), None)?;
        let (_, records) = ModelDecoder::for_instruction(model, &p.instruction, Some((&p.graph, ablation)))?;
        Ok::<_, Error>(records)
    })?;
    let mut stats = RoutingStats::default();
    for records in &per_query {
        stats.absorb(records);
    }
    Ok(stats)
}
