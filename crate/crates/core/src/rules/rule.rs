use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::data::RelationId;
use crate::error::{Error, Result};

/// `head(X0, XL, t) <- body[0](X0, X1, t1) ∧ … ∧ body[L-1](XL-1, XL, tL)`
/// with `t1 < … < tL < t`.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalRule {
    /// Stable identifier used for chain provenance.
    pub id: usize,
    pub head: RelationId,
    pub body: Vec<RelationId>,
    pub support: u64,
    pub body_support: u64,
    pub confidence: f64,
}

impl TemporalRule {
    /// True when the body never matched, so the confidence of 0 is a default.
    pub fn unmatched(&self) -> bool {
        self.body_support == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub walks_per_relation: usize,
    pub max_body_len: usize,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            walks_per_relation: 100,
            max_body_len: 3,
            seed: 0,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.walks_per_relation == 0 || self.max_body_len == 0 {
            return Err(Error::Config("walks_per_relation and max_body_len must be positive".into()));
        }
        Ok(())
    }
}

/// Confidence-descending, then support-descending, then body order.
pub(crate) fn rule_order(a: &TemporalRule, b: &TemporalRule) -> std::cmp::Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(b.support.cmp(&a.support))
        .then_with(|| a.body.cmp(&b.body))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RuleSet {
    pub rules_by_head: BTreeMap<RelationId, Vec<TemporalRule>>,
    pub config: MiningConfig,
}

impl RuleSet {
    pub fn rules_for(&self, head: RelationId) -> &[TemporalRule] {
        self.rules_by_head.get(&head).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.rules_by_head.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &TemporalRule> {
        self.rules_by_head.values().flatten()
    }

    pub fn find(&self, id: usize) -> Option<&TemporalRule> {
        self.iter().find(|r| r.id == id)
    }

    /// Keeps rules with confidence ≥ `min_confidence`, at most `top_n` per head.
    pub fn filter(&self, min_confidence: f64, top_n: usize) -> RuleSet {
        let rules_by_head = self
            .rules_by_head
            .iter()
            .map(|(&h, rules)| {
                let kept: Vec<_> = rules
                    .iter()
                    .filter(|r| r.confidence >= min_confidence)
                    .take(top_n)
                    .cloned()
                    .collect();
                (h, kept)
            })
            .collect();
        RuleSet {
            rules_by_head,
            config: self.config,
        }
    }

    pub fn to_text(&self, relation_name: impl Fn(RelationId) -> String) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# stk rules v1");
        let c = &self.config;
        let _ = writeln!(
            out,
            "# walks_per_relation={} max_body_len={} seed={}",
            c.walks_per_relation, c.max_body_len, c.seed
        );
        let _ = writeln!(out, "# id\thead\tbody\tsupport\tbody_support\tconfidence\treadable");
        for r in self.iter() {
            let body: Vec<String> = r.body.iter().map(|b| b.to_string()).collect();
            let names: Vec<String> = r.body.iter().map(|&b| relation_name(b)).collect();
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{} <- {}",
                r.id,
                r.head,
                body.join(","),
                r.support,
                r.body_support,
                r.confidence,
                relation_name(r.head),
                names.join(" & ")
            );
        }
        out
    }

    pub fn write_text(&self, w: &mut impl Write, relation_name: impl Fn(RelationId) -> String) -> Result<()> {
        w.write_all(self.to_text(relation_name).as_bytes())?;
        Ok(())
    }

    pub fn read_text(r: impl BufRead, origin: &str) -> Result<RuleSet> {
        let mut set = RuleSet::default();
        let mut lines = r.lines().enumerate();
        let err = |line: usize, message: String| Error::Parse {
            path: origin.to_string(),
            line,
            message,
        };
        match lines.next() {
            Some((_, Ok(l))) if l.trim() == "# stk rules v1" => {}
            _ => {
                return Err(Error::Format {
                    path: origin.to_string(),
                    message: "missing rules header".into(),
                })
            }
        }
        for (i, line) in lines {
            let line = line?;
            let n = i + 1;
            if let Some(rest) = line.strip_prefix("# walks_per_relation=") {
                let nums: Vec<&str> = rest.split_whitespace().collect();
                let get = |k: usize, key: &str| -> Result<u64> {
                    let v = if k == 0 { Some(nums[0]) } else { nums.get(k).and_then(|s| s.strip_prefix(key)) };
                    v.and_then(|v| v.parse().ok()).ok_or_else(|| err(n, "bad mining config line".into()))
                };
                set.config = MiningConfig {
                    walks_per_relation: get(0, "")? as usize,
                    max_body_len: get(1, "max_body_len=")? as usize,
                    seed: get(2, "seed=")?,
                };
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() < 6 {
                return Err(err(n, format!("expected 6 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<u64>().map_err(|_| err(n, format!("bad integer {s:?}")));
            let body = f[2]
                .split(',')
                .map(|b| num(b).map(|v| v as RelationId))
                .collect::<Result<Vec<_>>>()?;
            if body.is_empty() {
                return Err(err(n, "empty rule body".into()));
            }
            let rule = TemporalRule {
                id: num(f[0])? as usize,
                head: num(f[1])? as RelationId,
                body,
                support: num(f[3])?,
                body_support: num(f[4])?,
                confidence: f[5].parse().map_err(|_| err(n, format!("bad confidence {:?}", f[5])))?,
            };
            set.rules_by_head.entry(rule.head).or_default().push(rule);
        }
        for rules in set.rules_by_head.values_mut() {
            rules.sort_by(rule_order);
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rule(id: usize, head: u32, body: Vec<u32>, support: u64, body_support: u64) -> TemporalRule {
        TemporalRule {
            id,
            head,
            body,
            support,
            body_support,
            confidence: support as f64 / body_support as f64,
        }
    }

    fn set() -> RuleSet {
        let mut s = RuleSet::default();
        s.rules_by_head
            .insert(0, vec![rule(0, 0, vec![1], 9, 10), rule(1, 0, vec![2, 3], 5, 10), rule(2, 0, vec![2], 3, 10)]);
        s.rules_by_head.insert(1, vec![rule(3, 1, vec![0], 1, 3)]);
        s
    }

    #[test]
    fn filter_examples() {
        let s = set();
        assert_eq!(s.filter(0.0, usize::MAX), s);
        assert!(s.filter(1.01, usize::MAX).is_empty());
        let f = s.filter(0.4, 1);
        assert_eq!(f.rules_for(0).len(), 1);
        assert_eq!(f.rules_for(0)[0].confidence, 0.9);
    }

    #[test]
    fn text_round_trip() {
        let s = set();
        let text = s.to_text(|r| format!("rel{r}"));
        let back = RuleSet::read_text(text.as_bytes(), "mem").unwrap();
        assert_eq!(back, s);
    }
}
