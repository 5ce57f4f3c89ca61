//! Softmax routers with top-k selection, plus the statistics behind the
//! load-balancing term and the routing report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModuleKind {
    St,
    Ea,
    Cma,
}

impl ModuleKind {
    pub fn label(self) -> &'static str {
        match self {
            ModuleKind::St => "st",
            ModuleKind::Ea => "ea",
            ModuleKind::Cma => "cma",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub gate_full: Vec<f64>,
    /// Top-k expert indices, strongest first; ties go to the lower index.
    pub active: Vec<usize>,
    /// Renormalized weights aligned with `active`.
    pub gate_active: Vec<f64>,
}

impl RoutingDecision {
    pub fn top1(&self) -> usize {
        self.active[0]
    }
}

/// Router output on the tape.
#[derive(Clone, Debug)]
pub struct Routed {
    /// `[rows, n]` softmax of the router logits.
    pub gate_full: Var,
    /// `[rows, n]`, zero outside the active set, rows summing to one.
    pub gate_active: Var,
    pub decisions: Vec<RoutingDecision>,
}

/// Indices of the `k` largest entries, ties to the lower index.
pub fn top_k(gates: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..gates.len()).collect();
    idx.sort_by(|&a, &b| gates[b].total_cmp(&gates[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `gate_full = softmax(input · router)`; keeps the top `k` per row.
pub fn route(tape: &mut Tape, router: Var, input: Var, k: usize) -> Result<Routed> {
    let n = tape.value(router).cols();
    if k == 0 || k > n {
        return Err(Error::Config(format!("top_k = {k} must lie in 1..={n}")));
    }
    let logits = tape.matmul(input, router)?;
    let gate_full = tape.softmax_rows(logits, None)?;
    let g = tape.value(gate_full).clone();
    let rows = g.rows();
    let mut decisions = Vec::with_capacity(rows);
    let mut mask = Tensor::zeros(&[rows, n]);
    for i in 0..rows {
        let row = g.row(i);
        let active = top_k(row, k);
        let total: f64 = active.iter().map(|&j| row[j]).sum();
        let gate_active = active.iter().map(|&j| row[j] / total).collect();
        for &j in &active {
            mask.row_mut(i)[j] = 1.0;
        }
        decisions.push(RoutingDecision {
            gate_full: row.to_vec(),
            active,
            gate_active,
        });
    }
    let gate_active = if k == n {
        gate_full
    } else {
        let m = tape.constant(mask);
        let kept = tape.mul(gate_full, m)?;
        tape.normalize_rows(kept)?
    };
    Ok(Routed {
        gate_full,
        gate_active,
        decisions,
    })
}

/// One router invocation, kept for the balance term and the report.
#[derive(Clone, Debug)]
pub struct RouteRecord {
    pub layer: usize,
    pub module: ModuleKind,
    /// `[rows, n]`; one row per routed unit (token for EA, query otherwise).
    pub gate_full: Var,
    pub decisions: Vec<RoutingDecision>,
}

pub type StatKey = (usize, ModuleKind);

/// Top-1 counts and row totals per (layer, module), for `f_j`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AssignmentCounts {
    pub counts: BTreeMap<StatKey, (Vec<u64>, u64)>,
}

impl AssignmentCounts {
    pub fn absorb(&mut self, records: &[RouteRecord]) {
        for r in records {
            let n = r.decisions.first().map_or(0, |d| d.gate_full.len());
            let entry = self
                .counts
                .entry((r.layer, r.module))
                .or_insert_with(|| (vec![0; n], 0));
            for d in &r.decisions {
                entry.0[d.top1()] += 1;
                entry.1 += 1;
            }
        }
    }

    pub fn fractions(&self, key: StatKey) -> Option<Vec<f64>> {
        self.counts
            .get(&key)
            .map(|(c, total)| c.iter().map(|&x| x as f64 / (*total).max(1) as f64).collect())
    }
}

/// How balance terms of different (layer, module) pairs are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BalanceReduction {
    #[default]
    Sum,
    Mean,
}

/// `Σ_j f_j p_j`.
pub fn balance_value(f: &[f64], p: &[f64]) -> f64 {
    f.iter().zip(p).map(|(a, b)| a * b).sum()
}

/// Records this example's share of the batch balance term.
///
/// With `f_j` from `batch` and `p_j` the batch mean of `gate_full`, summing
/// the returned terms over the batch's examples yields the batch term.
pub fn balance_term(
    tape: &mut Tape,
    records: &[RouteRecord],
    batch: &AssignmentCounts,
    reduction: BalanceReduction,
) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    for r in records {
        let key = (r.layer, r.module);
        let (Some(f), Some((_, rows))) = (batch.fractions(key), batch.counts.get(&key)) else {
            return Err(Error::Contract(format!("no batch statistics for {key:?}")));
        };
        let weights: Vec<f64> = f.iter().map(|x| x / *rows as f64).collect();
        let col = tape.constant(Tensor::new(vec![weights.len(), 1], weights)?);
        let sums = tape.sum_rows(r.gate_full);
        terms.push(tape.matmul(sums, col)?);
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    let total = tape.sum(total);
    Ok(Some(match reduction {
        BalanceReduction::Sum => total,
        BalanceReduction::Mean => tape.scale(total, 1.0 / batch.counts.len() as f64),
    }))
}

/// Activation ratios per layer × module × expert, accumulated over queries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingStats {
    active: BTreeMap<StatKey, (Vec<u64>, u64)>,
}

impl RoutingStats {
    pub fn absorb(&mut self, records: &[RouteRecord]) {
        for r in records {
            let n = r.decisions.first().map_or(0, |d| d.gate_full.len());
            let e = self.active.entry((r.layer, r.module)).or_insert_with(|| (vec![0; n], 0));
            for d in &r.decisions {
                for &j in &d.active {
                    e.0[j] += 1;
                }
                e.1 += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &RoutingStats) {
        for (k, (c, rows)) in &other.active {
            let e = self.active.entry(*k).or_insert_with(|| (vec![0; c.len()], 0));
            for (a, b) in e.0.iter_mut().zip(c) {
                *a += b;
            }
            e.1 += rows;
        }
    }

    /// Fraction of routed rows that activated each expert.
    pub fn ratios(&self, layer: usize, module: ModuleKind) -> Option<Vec<f64>> {
        self.active
            .get(&(layer, module))
            .map(|(c, rows)| c.iter().map(|&x| x as f64 / (*rows).max(1) as f64).collect())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# stk routing v1\n# layer\tmodule\texpert\tratio\trows\n");
        for ((layer, module), (c, rows)) in &self.active {
            for (j, &x) in c.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{layer}\t{}\t{j}\t{:.6}\t{rows}",
                    module.label(),
                    x as f64 / (*rows).max(1) as f64
                );
            }
        }
        out
    }
}
