//! Beam-search decoding, hybrid ranking, and Hit@K evaluation.

mod beam;
mod decode;
mod evaluate;
mod hybrid;

pub use beam::{beam_search, hypothesis_order, Decoder, Hypothesis};
pub use decode::{decode_candidates, BeamCandidate, DecodeState, ModelDecoder};
pub use evaluate::{evaluate, routing_stats, EvalConfig, EvalReport, QueryResult};
pub use hybrid::{hit_at_k, hybrid_rank, hybrid_scores, llm_scores, rank_by_score};
