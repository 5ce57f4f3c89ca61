//! One function per subcommand; each returns its summary line.

use std::io::Write;

use anyhow::{Context, Result};
use serde_json::json;
use stk_core::data::{load_bundle, load_dataset, save_bundle, DatasetSplit, TemporalKG};
use stk_core::encoder::GraphEncoder;
use stk_core::eval::{evaluate, routing_stats};
use stk_core::model::{pretrain_backbone, train_adapters, StepRecord, StkModel};
use stk_core::numerics::ParamStore;
use stk_core::pipeline::{
    mine, new_model, read_examples, symbol_vocab, train_encoder, write_examples, PipelineConfig, QueryContext,
};
use stk_core::rules::{RuleSet, SymbolVocab};
use stk_core::Error;

use crate::run::*;

fn dataset(run: &RunDir) -> Result<(TemporalKG, DatasetSplit)> {
    Ok(load_bundle(&run.require(DATASET)?)?)
}

fn encoder(run: &RunDir, tkg: &TemporalKG) -> Result<GraphEncoder> {
    let enc = GraphEncoder::from_store(ParamStore::load(&run.require(ENCODER)?)?)?;
    enc.check_compatible(tkg)?;
    Ok(enc)
}

fn rules(run: &RunDir) -> Result<RuleSet> {
    let origin = run.path(RULES).display().to_string();
    Ok(RuleSet::read_text(run.reader(RULES)?, &origin)?)
}

fn model(run: &RunDir, cfg: &PipelineConfig, vocab: &SymbolVocab, enc: &GraphEncoder) -> Result<StkModel> {
    let mut m = new_model(cfg, vocab, enc.dim())?;
    m.store_mut().load_into(&run.require(MODEL)?)?;
    Ok(m)
}

pub fn ingest(run: &RunDir, cfg: &PipelineConfig) -> Result<String> {
    let path = |p: &Option<std::path::PathBuf>, key: &str| {
        p.clone().ok_or_else(|| Error::Config(format!("data.{key} is not set")))
    };
    let (train, valid, test) = (
        path(&cfg.data.train, "train")?,
        path(&cfg.data.valid, "valid")?,
        path(&cfg.data.test, "test")?,
    );
    let (tkg, split) = load_dataset(&train, &valid, &test)?;
    let out = run.path(DATASET);
    save_bundle(&out, &tkg, &split)?;
    let (tr, va, te) = split.base_counts();
    Ok(format!(
        "ingest: {} entities, {} relations, {} timestamps, train {tr} / valid {va} / test {te} -> {}",
        tkg.num_entities(),
        tkg.num_relations(),
        tkg.num_times(),
        out.display()
    ))
}

pub fn pretrain_encoder(run: &RunDir, cfg: &PipelineConfig) -> Result<String> {
    let (tkg, split) = dataset(run)?;
    let train = tkg.prefix(split.train.end);
    let (enc, losses) = train_encoder(&train, cfg, cfg.exec_mode())?;
    let out = run.path(ENCODER);
    enc.store().save(&out)?;
    let last = losses.last().map_or("n/a".to_string(), |l| format!("{l:.4}"));
    Ok(format!(
        "pretrain-encoder: {} epochs, final loss {last} -> {}",
        losses.len(),
        out.display()
    ))
}

pub fn mine_rules(run: &RunDir, cfg: &PipelineConfig) -> Result<String> {
    let (tkg, split) = dataset(run)?;
    let train = tkg.prefix(split.train.end);
    let rules = mine(&train, &cfg.rules, cfg.exec_mode())?;
    let out = run.write(RULES, |w| Ok(rules.write_text(w, |r| tkg.relation_name(r).to_string())?))?;
    Ok(format!("mine-rules: {} rules -> {}", rules.len(), out.display()))
}

fn context<'a>(
    history: &'a TemporalKG,
    enc: &'a GraphEncoder,
    rules: &'a RuleSet,
    vocab: &'a SymbolVocab,
    cfg: &PipelineConfig,
) -> QueryContext<'a> {
    QueryContext {
        history,
        encoder: enc,
        rules,
        vocab,
        sampler: cfg.sampler,
        max_events: cfg.rules.max_events,
        seed: cfg.seed,
    }
}

pub fn build_instructions(run: &RunDir, cfg: &PipelineConfig) -> Result<String> {
    let (tkg, split) = dataset(run)?;
    let rules = rules(run)?;
    let enc = encoder(run, &tkg)?;
    let train = tkg.prefix(split.train.end);
    let vocab = symbol_vocab(&tkg, &cfg.rules);
    let ctx = context(&train, &enc, &rules, &vocab, cfg);
    let examples = ctx.examples(train.facts(), cfg.exec_mode())?;
    let out = run.write(TRAIN_EXAMPLES, |w| Ok(write_examples(w, &examples)?))?;
    run.write(INSTRUCTION_SAMPLE, |w| {
        writeln!(w, "# stk instruction sample v1")?;
        for ex in examples.iter().take(20) {
            writeln!(w, "{}", ex.instruction.render(&vocab))?;
        }
        Ok(())
    })?;
    Ok(format!("build-instructions: {} training instructions -> {}", examples.len(), out.display()))
}

fn log_line(w: &mut impl Write, phase: &str, r: &StepRecord) -> Result<()> {
    let mut v = serde_json::to_value(r)?;
    v["phase"] = json!(phase);
    writeln!(w, "{v}")?;
    Ok(())
}

pub fn train(run: &RunDir, cfg: &PipelineConfig) -> Result<String> {
    let (tkg, _) = dataset(run)?;
    let enc = encoder(run, &tkg)?;
    let origin = run.path(TRAIN_EXAMPLES).display().to_string();
    let examples = read_examples(run.reader(TRAIN_EXAMPLES)?, &origin)?;
    let vocab = symbol_vocab(&tkg, &cfg.rules);
    if examples
        .iter()
        .any(|e| e.instruction.full_tokens().iter().any(|&t| t as usize >= vocab.len()))
    {
        return Err(Error::Validation(format!(
            "{origin} was built with a different rules.max_events or dataset; rerun build-instructions"
        ))
        .into());
    }
    let mode = cfg.exec_mode();
    let mut model = new_model(cfg, &vocab, enc.dim())?;
    let sequences: Vec<_> = examples.iter().map(|e| e.instruction.clone()).collect();
    let pre = pretrain_backbone(&mut model, &sequences, &cfg.backbone.pretrain(), mode)?;
    let frozen = model.backbone_fingerprint();
    let steps = train_adapters(&mut model, &examples, &cfg.ablation, &cfg.training, mode)?;
    if model.backbone_fingerprint() != frozen {
        return Err(Error::Contract("backbone changed during adapter training".into()).into());
    }
    let out = run.path(MODEL);
    model.store().save(&out)?;
    run.write(TRAIN_LOG, |w| {
        writeln!(w, "{}", json!({"format": "stk-train-log", "version": 1}))?;
        for r in &pre {
            log_line(w, "backbone", r)?;
        }
        for r in &steps {
            log_line(w, "adapter", r)?;
        }
        Ok(())
    })?;
    let last = steps.last().map_or(f64::NAN, |r| r.loss);
    Ok(format!(
        "train: {} backbone + {} adapter steps, final loss {last:.4} -> {}",
        pre.len(),
        steps.len(),
        out.display()
    ))
}

pub fn eval(run: &RunDir, cfg: &PipelineConfig) -> Result<String> {
    let (tkg, split) = dataset(run)?;
    let rules = rules(run)?;
    let enc = encoder(run, &tkg)?;
    let vocab = symbol_vocab(&tkg, &cfg.rules);
    let model = model(run, cfg, &vocab, &enc)?;
    let ctx = context(&tkg, &enc, &rules, &vocab, cfg);
    let (report, stats) = evaluate(
        &model,
        &ctx,
        &tkg,
        split.test.clone(),
        &cfg.inference,
        &cfg.ablation,
        cfg.exec_mode(),
    )?;
    let out = run.write(EVAL, |w| Ok(w.write_all(report.to_text().as_bytes())?))?;
    run.write(RANKINGS, |w| Ok(w.write_all(report.rankings_to_text(&tkg).as_bytes())?))?;
    run.write(ROUTING, |w| Ok(w.write_all(stats.to_text().as_bytes())?))?;
    Ok(format!(
        "eval: {} queries, hit@1 {:.4} hit@3 {:.4} hit@10 {:.4} (B={}, lambda={}) -> {}",
        report.results.len(),
        report.hit1,
        report.hit3,
        report.hit10,
        report.beam_width,
        report.lambda,
        out.display()
    ))
}

pub fn routing(run: &RunDir, cfg: &PipelineConfig) -> Result<String> {
    let (tkg, split) = dataset(run)?;
    let rules = rules(run)?;
    let enc = encoder(run, &tkg)?;
    let vocab = symbol_vocab(&tkg, &cfg.rules);
    let model = model(run, cfg, &vocab, &enc)?;
    let ctx = context(&tkg, &enc, &rules, &vocab, cfg);
    let stats = routing_stats(&model, &ctx, &tkg, split.test.clone(), &cfg.ablation, cfg.exec_mode())
        .context("collecting routing statistics")?;
    let out = run.write(ROUTING, |w| Ok(w.write_all(stats.to_text().as_bytes())?))?;
    Ok(format!("routing-stats: {} queries -> {}", split.test.len(), out.display()))
}
