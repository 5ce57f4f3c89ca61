//! Backbone pretraining, the composite adapter loss, and adapter training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::StkModel;
use crate::adapter::{balance_term, Ablation, AssignmentCounts, BalanceReduction, RouteRecord};
use crate::encoder::GraphState;
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::numerics::{clip_grad_norm, AdamW, AdamWConfig, ParamGrads, Tape, Var};
use crate::rng::derive_seed;
use crate::rules::InstructionSequence;

/// One supervised query: its instruction (with target) and graph state.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub instruction: InstructionSequence,
    pub graph: GraphState,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 3,
            learning_rate: 3e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Balance coefficient α.
    pub alpha: f64,
    pub balance_reduction: BalanceReduction,
    pub clip: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2,
            learning_rate: 3e-3,
            alpha: 0.01,
            balance_reduction: BalanceReduction::Sum,
            clip: 1.0,
            weight_decay: 0.01,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.alpha >= 0.0 && self.clip > 0.0) {
            return Err(Error::Config("learning_rate and alpha must be ≥ 0, clip > 0".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    /// Mean per-example cross-entropy.
    pub ce: f64,
    /// Batch balance term `Σ f_j p_j` (before α).
    pub balance: f64,
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// `(logit row, token)` pairs supervising the answer tokens.
pub fn target_pairs(ins: &InstructionSequence) -> Result<Vec<(usize, usize)>> {
    let target = ins
        .target
        .as_ref()
        .filter(|t| !t.is_empty())
        .ok_or_else(|| Error::Contract("training example has no target".into()))?;
    let n = ins.tokens.len();
    Ok(target.iter().enumerate().map(|(i, &t)| (n - 1 + i, t as usize)).collect())
}

/// `−Σ log P(y_i | ·) + α · balance`.
pub fn compute_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &[(usize, usize)],
    balance: Option<Var>,
    alpha: f64,
) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Contract("empty target".into()));
    }
    let ce = tape.cross_entropy(logits, targets)?;
    match balance {
        Some(b) => {
            let b = tape.scale(b, alpha);
            tape.add(ce, b)
        }
        None => Ok(ce),
    }
}

/// Teacher-forced forward of one example; returns the logits.
pub fn example_forward(
    model: &StkModel,
    tape: &mut Tape,
    ex: &Example,
    ablation: &Ablation,
    records: &mut Vec<RouteRecord>,
) -> Result<Var> {
    let ins = &ex.instruction;
    target_pairs(ins)?;
    let full = ins.full_tokens();
    let inputs = &full[..full.len() - 1];
    let tau = ins.time_map_with(inputs.len() - ins.tokens.len());
    let h0 = tape.constant(ex.graph.h0.clone());
    let path = model.graph_path(tape, h0, ablation, records)?;
    model.forward(tape, inputs, &tau, Some((&path, ablation)), records)
}

/// Shuffled minibatches, each sorted so sums run in a fixed order.
fn minibatches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch as u64])));
    order
        .chunks(batch_size)
        .map(|c| {
            let mut b = c.to_vec();
            b.sort_unstable();
            b
        })
        .collect()
}

fn check_finite(value: f64, what: &str, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} is {value} at step {step}")))
    }
}

/// Next-token pretraining of the backbone alone (no adapters, no graph).
pub fn pretrain_backbone(
    model: &mut StkModel,
    sequences: &[InstructionSequence],
    cfg: &PretrainConfig,
    mode: ExecMode,
) -> Result<Vec<StepRecord>> {
    if sequences.is_empty() {
        return Err(Error::Validation("no pretraining sequences".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    model.unfreeze_backbone_only();
    let mut opt = AdamW::new(AdamWConfig {
        learning_rate: cfg.learning_rate,
        ..AdamWConfig::default()
    });
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in minibatches(sequences.len(), cfg.batch_size, cfg.seed, epoch) {
            let m: &StkModel = model;
            let results = exec::try_map(mode, &batch, |&i| -> Result<(f64, ParamGrads)> {
                let ins = &sequences[i];
                let full = ins.full_tokens();
                let tau = ins.time_map_with(full.len() - ins.tokens.len());
                let mut tape = Tape::new();
                let logits = m.forward(&mut tape, &full, &tau, None, &mut Vec::new())?;
                let targets: Vec<(usize, usize)> = (0..full.len() - 1).map(|p| (p, full[p + 1] as usize)).collect();
                let ce = tape.cross_entropy(logits, &targets)?;
                let loss = tape.scale(ce, 1.0 / targets.len() as f64);
                let value = tape.value(loss).data()[0];
                Ok((value, tape.backward(loss)?.into_params()))
            })?;
            let mut grads = ParamGrads::new();
            let mut ce = 0.0;
            for (v, g) in &results {
                ce += v;
                grads.merge(g);
            }
            ce /= batch.len() as f64;
            check_finite(ce, "pretraining loss", step)?;
            grads.scale(1.0 / batch.len() as f64);
            let grad_norm = clip_grad_norm(&mut grads, 1.0);
            opt.step(model.store_mut(), &grads);
            log.push(StepRecord {
                step,
                epoch,
                ce,
                balance: 0.0,
                loss: ce,
                grad_norm,
            });
            step += 1;
        }
        if let Some(last) = log.last() {
            log::info!("backbone epoch {epoch}: loss {:.4}", last.loss);
        }
    }
    model.freeze_backbone();
    Ok(log)
}

/// Fine-tunes the adapters with the backbone frozen.
///
/// Routing fractions `f_j` are gathered over the whole minibatch before any
/// example's balance term is added, so each step sees batch statistics.
pub fn train_adapters(
    model: &mut StkModel,
    examples: &[Example],
    ablation: &Ablation,
    cfg: &TrainConfig,
    mode: ExecMode,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Validation("no training examples".into()));
    }
    model.freeze_backbone();
    let mut opt = AdamW::new(AdamWConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in minibatches(examples.len(), cfg.batch_size, cfg.seed, epoch) {
            let m: &StkModel = model;
            let forwards = exec::try_map(mode, &batch, |&i| {
                let ex = &examples[i];
                let mut tape = Tape::new();
                let mut records = Vec::new();
                let logits = example_forward(m, &mut tape, ex, ablation, &mut records)?;
                let ce = compute_loss(&mut tape, logits, &target_pairs(&ex.instruction)?, None, 0.0)?;
                Ok::<_, Error>((tape, ce, records))
            })?;
            let mut counts = AssignmentCounts::default();
            for (_, _, records) in &forwards {
                counts.absorb(records);
            }
            let reduction = cfg.balance_reduction;
            let alpha = cfg.alpha;
            let results = exec::map_owned(mode, forwards, |(mut tape, ce, records)| {
                let bal = balance_term(&mut tape, &records, &counts, reduction)?;
                let ce_value = tape.value(ce).data()[0];
                let bal_value = bal.map_or(0.0, |b| tape.value(b).data()[0]);
                let loss = match bal {
                    Some(b) => {
                        let s = tape.scale(b, alpha);
                        tape.add(ce, s)?
                    }
                    None => ce,
                };
                Ok::<_, Error>((ce_value, bal_value, tape.backward(loss)?.into_params()))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let mut grads = ParamGrads::new();
            let (mut ce, mut balance) = (0.0, 0.0);
            for (c, b, g) in &results {
                ce += c;
                balance += b;
                grads.merge(g);
            }
            ce /= batch.len() as f64;
            let loss = ce + alpha * balance / batch.len() as f64;
            check_finite(loss, "training loss", step)?;
            grads.scale(1.0 / batch.len() as f64);
            let grad_norm = clip_grad_norm(&mut grads, cfg.clip);
            check_finite(grad_norm, "gradient norm", step)?;
            opt.step(model.store_mut(), &grads);
            log.push(StepRecord {
                step,
                epoch,
                ce,
                balance,
                loss,
                grad_norm,
            });
            step += 1;
        }
        if let Some(last) = log.last() {
            log::info!("adapter epoch {epoch}: loss {:.4}", last.loss);
        }
    }
    Ok(log)
}
