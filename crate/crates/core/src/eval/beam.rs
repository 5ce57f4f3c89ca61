//! Beam search over any autoregressive scorer.

use std::cmp::Ordering;

use crate::adapter::top_k;
use crate::error::{Error, Result};

/// A left-to-right scorer: log-probabilities of the next token given a state.
pub trait Decoder {
    type State: Clone;

    /// State after the prompt, with log-probabilities of the first token.
    fn initial(&self) -> Result<(Self::State, Vec<f64>)>;

    /// State after appending `token`, with next-token log-probabilities.
    fn step(&self, state: &Self::State, token: u32) -> Result<(Self::State, Vec<f64>)>;
}

/// A finished hypothesis: its tokens and `Σ log P(token | prefix)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
}

struct Beam<S> {
    tokens: Vec<u32>,
    score: f64,
    next: Option<(S, Vec<f64>)>,
}

/// Higher score first; equal scores fall back to lexicographic token order.
pub fn hypothesis_order(a: (&[u32], f64), b: (&[u32], f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// Keeps the best `beam_width` sequences by cumulative log-probability.
///
/// Each live beam proposes its `beam_width` most likely next tokens; the
/// global best `beam_width` survive. A beam ends at `end` or at `max_len`
/// tokens and is carried forward unchanged. No length normalization.
pub fn beam_search<D: Decoder>(
    decoder: &D,
    beam_width: usize,
    max_len: usize,
    end: Option<u32>,
) -> Result<Vec<Hypothesis>> {
    if beam_width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mut beams = vec![Beam {
        tokens: Vec::new(),
        score: 0.0,
        next: Some(decoder.initial()?),
    }];
    while beams.iter().any(|b| b.next.is_some()) {
        // (parent, token) with token = None for a carried finished beam.
        let mut proposals: Vec<(usize, Option<u32>, Vec<u32>, f64)> = Vec::new();
        for (i, b) in beams.iter().enumerate() {
            match &b.next {
                None => proposals.push((i, None, b.tokens.clone(), b.score)),
                Some((_, logp)) => {
                    for t in top_k(logp, beam_width) {
                        let mut tokens = b.tokens.clone();
                        tokens.push(t as u32);
                        proposals.push((i, Some(t as u32), tokens, b.score + logp[t]));
                    }
                }
            }
        }
        proposals.sort_by(|a, b| hypothesis_order((&a.2, a.3), (&b.2, b.3)));
        proposals.truncate(beam_width);
        let mut next_beams = Vec::with_capacity(proposals.len());
        for (parent, token, tokens, score) in proposals {
            let next = match token {
                None => None,
                Some(t) if Some(t) == end || tokens.len() >= max_len => None,
                Some(t) => {
                    let (state, _) = beams[parent].next.as_ref().expect("live parent");
                    Some(decoder.step(state, t)?)
                }
            };
            next_beams.push(Beam { tokens, score, next });
        }
        beams = next_beams;
    }
    Ok(beams
        .into_iter()
        .map(|b| Hypothesis {
            tokens: b.tokens,
            log_prob: b.score,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Same distribution at every step.
    struct Iid(Vec<f64>);

    impl Decoder for Iid {
        type State = ();
        fn initial(&self) -> Result<((), Vec<f64>)> {
            Ok(((), self.0.iter().map(|p| p.ln()).collect()))
        }
        fn step(&self, _: &(), _: u32) -> Result<((), Vec<f64>)> {
            self.initial()
        }
    }

    #[test]
    fn two_beams_over_iid_steps() {
        let d = Iid(vec![0.6, 0.3, 0.1]);
        let out = beam_search(&d, 2, 2, None).unwrap();
        let toks: Vec<_> = out.iter().map(|h| h.tokens.clone()).collect();
        // AB and BA tie at 0.18; lexicographic order keeps AB.
        assert_eq!(toks, vec![vec![0, 0], vec![0, 1]]);
        assert!((out[0].log_prob - 0.36f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn width_one_is_greedy() {
        let d = Iid(vec![0.2, 0.5, 0.3]);
        let out = beam_search(&d, 1, 3, None).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].tokens, vec![1, 1, 1]);
    }

    #[test]
    fn end_token_finishes_beams() {
        let d = Iid(vec![0.7, 0.3]);
        let out = beam_search(&d, 3, 4, Some(0)).unwrap();
        assert_eq!(out[0].tokens, vec![0]);
        assert!(out.iter().all(|h| h.tokens.last() == Some(&0) || h.tokens.len() == 4));
    }

    #[test]
    fn zero_width_is_rejected() {
        assert!(matches!(beam_search(&Iid(vec![1.0]), 0, 1, None), Err(Error::Config(_))));
    }
}
