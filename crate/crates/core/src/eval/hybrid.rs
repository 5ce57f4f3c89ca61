//! Entity ranking from beam candidates and the graph encoder's scores.

use super::decode::BeamCandidate;
use crate::data::EntityId;
use crate::error::{Error, Result};

/// `S_LLM(o)`: softmax over candidate log-probabilities, then the maximum
/// over candidates resolving to `o`. Unresolved candidates keep their share
/// of the softmax mass but contribute to no entity.
pub fn llm_scores(candidates: &[BeamCandidate], num_entities: usize) -> Vec<f64> {
    let mut s = vec![0.0; num_entities];
    if candidates.is_empty() {
        return s;
    }
    let m = candidates.iter().map(|c| c.log_prob).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = candidates.iter().map(|c| (c.log_prob - m).exp()).sum();
    for c in candidates {
        if let Some(e) = c.entity.filter(|&e| (e as usize) < num_entities) {
            let p = (c.log_prob - m).exp() / z;
            s[e as usize] = s[e as usize].max(p);
        }
    }
    s
}

/// `S(o) = (1 − λ)·S_LLM(o) + λ·S_TKG(o)`.
pub fn hybrid_scores(s_llm: &[f64], s_tkg: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda = {lambda} is outside [0, 1]")));
    }
    if s_llm.len() != s_tkg.len() {
        return Err(Error::shape("hybrid score", &[s_llm.len()], &[s_tkg.len()]));
    }
    Ok(s_llm.iter().zip(s_tkg).map(|(a, b)| (1.0 - lambda) * a + lambda * b).collect())
}

/// Entity ids by descending score, ties to the lower id.
pub fn rank_by_score(scores: &[f64]) -> Vec<EntityId> {
    let mut ids: Vec<EntityId> = (0..scores.len() as EntityId).collect();
    ids.sort_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b)));
    ids
}

/// Ranks every entity by the hybrid score.
pub fn hybrid_rank(candidates: &[BeamCandidate], tkg_dist: &[f64], lambda: f64) -> Result<Vec<EntityId>> {
    let s_llm = llm_scores(candidates, tkg_dist.len());
    Ok(rank_by_score(&hybrid_scores(&s_llm, tkg_dist, lambda)?))
}

/// 1 when `truth` is among the first `k` entries of `ranking`.
pub fn hit_at_k(ranking: &[EntityId], truth: EntityId, k: usize) -> u8 {
    ranking.iter().take(k).any(|&e| e == truth) as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(lp: f64, e: Option<u32>) -> BeamCandidate {
        BeamCandidate {
            tokens: vec![],
            log_prob: lp,
            entity: e,
        }
    }

    #[test]
    fn mixing_arithmetic() {
        let s = hybrid_scores(&[0.8], &[0.5], 0.1).unwrap();
        assert!((s[0] - 0.77).abs() < 1e-12);
        assert!(hybrid_scores(&[0.8], &[0.5], 1.5).is_err());
        assert!(hybrid_scores(&[0.8], &[0.5], -0.1).is_err());
    }

    #[test]
    fn hits() {
        let r = [1, 0, 2];
        assert_eq!(hit_at_k(&r, 0, 1), 0);
        assert_eq!(hit_at_k(&r, 0, 3), 1);
        assert_eq!(hit_at_k(&r, 7, 10), 0);
    }

    #[test]
    fn max_aggregation_and_absent_entities() {
        let c = [cand(-0.1, Some(2)), cand(-1.0, Some(2)), cand(-2.0, None), cand(-3.0, Some(0))];
        let s = llm_scores(&c, 4);
        assert!(s[2] > s[0] && s[0] > 0.0);
        assert_eq!((s[1], s[3]), (0.0, 0.0));
        assert_eq!(rank_by_score(&s), vec![2, 0, 1, 3]);
    }

    #[test]
    fn endpoints() {
        let c = [cand(-0.2, Some(3)), cand(-0.5, Some(1))];
        let tkg = [0.1, 0.2, 0.6, 0.1];
        assert_eq!(hybrid_rank(&c, &tkg, 0.0).unwrap()[..2], [3, 1]);
        assert_eq!(hybrid_rank(&c, &tkg, 1.0).unwrap(), rank_by_score(&tkg));
    }
}
