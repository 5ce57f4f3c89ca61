//! Incremental decoding of the model behind the [`Decoder`] trait.

use super::beam::{beam_search, Decoder};
use crate::adapter::{Ablation, RouteRecord};
use crate::data::EntityId;
use crate::encoder::GraphState;
use crate::error::Result;
use crate::model::{DecodeCache, GraphPath, StkModel};
use crate::numerics::{Tape, Tensor};
use crate::rules::instruction::CLOSE;
use crate::rules::{InstructionSequence, SymbolVocab};

/// A decoded answer with the entity it resolves to, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamCandidate {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub entity: Option<EntityId>,
}

#[derive(Clone, Debug)]
pub struct DecodeState {
    cache: DecodeCache,
}

/// Runs the prompt once, then extends a cloned KV cache one token at a time.
/// Generated tokens route through the position `answer_tau`.
pub struct ModelDecoder<'a> {
    model: &'a StkModel,
    graph: Option<(Vec<Tensor>, Ablation)>,
    answer_tau: usize,
    start: (DecodeState, Vec<f64>),
}

fn log_softmax_last(logits: &Tensor) -> Vec<f64> {
    let row = logits.row(logits.rows() - 1);
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

impl<'a> ModelDecoder<'a> {
    /// Processes `prompt` and returns the decoder with the routing records
    /// of the prompt pass (graph pathway included).
    pub fn new(
        model: &'a StkModel,
        prompt: &[u32],
        tau: &[usize],
        answer_tau: usize,
        graph: Option<(&GraphState, &Ablation)>,
    ) -> Result<(Self, Vec<RouteRecord>)> {
        let mut tape = Tape::inference();
        let mut records = Vec::new();
        let mut path_values = None;
        let path = match graph {
            Some((g, ablation)) => {
                let h0 = tape.constant(g.h0.clone());
                let path = model.graph_path(&mut tape, h0, ablation, &mut records)?;
                path_values = Some((path.iter().map(|&v| tape.value(v).clone()).collect(), *ablation));
                Some((path, ablation))
            }
            None => None,
        };
        let mut cache = DecodeCache::default();
        let logits = model.forward_step(
            &mut tape,
            prompt,
            tau,
            path.as_ref().map(|(p, a)| (p, *a)),
            &mut cache,
            &mut records,
        )?;
        let logp = log_softmax_last(tape.value(logits));
        Ok((
            ModelDecoder {
                model,
                graph: path_values,
                answer_tau,
                start: (DecodeState { cache }, logp),
            },
            records,
        ))
    }

    /// Decoder for an instruction's context, generating its answer.
    pub fn for_instruction(
        model: &'a StkModel,
        ins: &InstructionSequence,
        graph: Option<(&GraphState, &Ablation)>,
    ) -> Result<(Self, Vec<RouteRecord>)> {
        Self::new(model, &ins.tokens, &ins.time_map, ins.query_time_pos(), graph)
    }
}

impl Decoder for ModelDecoder<'_> {
    type State = DecodeState;

    fn initial(&self) -> Result<(DecodeState, Vec<f64>)> {
        Ok(self.start.clone())
    }

    fn step(&self, state: &DecodeState, token: u32) -> Result<(DecodeState, Vec<f64>)> {
        let mut tape = Tape::inference();
        let mut cache = state.cache.clone();
        let path: Option<(GraphPath, Ablation)> = self
            .graph
            .as_ref()
            .map(|(vals, a)| (vals.iter().map(|t| tape.constant(t.clone())).collect(), *a));
        let logits = self.model.forward_step(
            &mut tape,
            &[token],
            &[self.answer_tau],
            path.as_ref().map(|(p, a)| (p, a)),
            &mut cache,
            &mut Vec::new(),
        )?;
        Ok((DecodeState { cache }, log_softmax_last(tape.value(logits))))
    }
}

/// Beam-decodes the answer of `ins` and resolves each hypothesis.
pub fn decode_candidates(
    model: &StkModel,
    vocab: &SymbolVocab,
    ins: &InstructionSequence,
    graph: Option<(&GraphState, &Ablation)>,
    beam_width: usize,
    max_len: usize,
) -> Result<(Vec<BeamCandidate>, Vec<RouteRecord>)> {
    let (decoder, records) = ModelDecoder::for_instruction(model, ins, graph)?;
    let hyps = beam_search(&decoder, beam_width, max_len, Some(CLOSE))?;
    let cands = hyps
        .into_iter()
        .map(|h| BeamCandidate {
            entity: ins.resolve(vocab, &h.tokens),
            tokens: h.tokens,
            log_prob: h.log_prob,
        })
        .collect();
    Ok((cands, records))
}
