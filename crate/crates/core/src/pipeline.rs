//! Pipeline configuration and the in-memory path from a dataset to an
//! evaluation report. The CLI runs the same steps with artifacts between them.

use std::io::{BufRead, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::adapter::{Ablation, AdapterConfig, RoutingStats};
use crate::data::{DatasetSplit, EntityId, Quadruple, Query, TemporalKG};
use crate::encoder::{graph_state_for, pretrain_encoder, EncoderConfig, EncoderState, GraphEncoder, GraphState};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport};
use crate::exec::{self, ExecMode};
use crate::model::{
    pretrain_backbone, train_adapters, BackboneConfig, Example, PretrainConfig, StepRecord, StkModel, TrainConfig,
};
use crate::rules::instruction::{ANSWER_LEN, EVENT_LEN, QUERY_LEN};
use crate::rules::{build_instruction, mine_rules, retrieve_chain, EventChain, InstructionSequence, MiningConfig};
use crate::rules::{RuleSet, SymbolVocab};
use crate::numerics::Tensor;
use crate::sampler::SamplerConfig;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RulesConfig {
    pub walks_per_relation: usize,
    pub max_body_len: usize,
    pub min_confidence: f64,
    pub top_n: usize,
    pub max_events: usize,
    pub seed: u64,
}

impl Default for RulesConfig {
    fn default() -> Self {
        let m = MiningConfig::default();
        RulesConfig {
            walks_per_relation: m.walks_per_relation,
            max_body_len: m.max_body_len,
            min_confidence: 0.01,
            top_n: 20,
            max_events: 16,
            seed: m.seed,
        }
    }
}

impl RulesConfig {
    pub fn mining(&self) -> MiningConfig {
        MiningConfig {
            walks_per_relation: self.walks_per_relation,
            max_body_len: self.max_body_len,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub d_t: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub pretrain_learning_rate: f64,
    pub pretrain_batch_size: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let b = BackboneConfig::default();
        let p = PretrainConfig::default();
        BackboneSection {
            d_t: b.d_t,
            n_layers: b.n_layers,
            n_heads: b.n_heads,
            d_ffn: b.d_ffn,
            max_seq_len: b.max_seq_len,
            seed: b.seed,
            pretrain_epochs: p.epochs,
            pretrain_learning_rate: p.learning_rate,
            pretrain_batch_size: p.batch_size,
        }
    }
}

impl BackboneSection {
    pub fn config(&self, vocab_size: usize) -> BackboneConfig {
        BackboneConfig {
            vocab_size,
            d_t: self.d_t,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ffn: self.d_ffn,
            max_seq_len: self.max_seq_len,
            seed: self.seed,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            learning_rate: self.pretrain_learning_rate,
            batch_size: self.pretrain_batch_size,
            seed: self.seed,
        }
    }
}

/// Everything a run needs, one section per stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub sampler: SamplerConfig,
    pub rules: RulesConfig,
    pub encoder: EncoderConfig,
    pub backbone: BackboneSection,
    pub adapter: AdapterConfig,
    pub training: TrainConfig,
    pub inference: EvalConfig,
    pub ablation: Ablation,
    /// Seed for per-query history sampling.
    pub seed: u64,
    pub parallel: bool,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.rules.mining().validate()?;
        self.encoder.validate()?;
        self.adapter.validate()?;
        self.training.validate()?;
        self.inference.validate()?;
        if self.rules.max_events == 0 || self.rules.top_n == 0 {
            return Err(Error::Config("rules.max_events and rules.top_n must be positive".into()));
        }
        if !(0.0..=1.01).contains(&self.rules.min_confidence) {
            return Err(Error::Config("rules.min_confidence must lie in [0, 1.01]".into()));
        }
        let needed = max_instruction_len(self.rules.max_events);
        if needed > self.backbone.max_seq_len {
            return Err(Error::Config(format!(
                "{} events need {needed} positions but backbone.max_seq_len = {}",
                self.rules.max_events, self.backbone.max_seq_len
            )));
        }
        self.backbone.config(1).validate()
    }

    pub fn exec_mode(&self) -> ExecMode {
        if self.parallel {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

/// Longest instruction plus answer for `max_events` events.
pub fn max_instruction_len(max_events: usize) -> usize {
    2 + max_events * EVENT_LEN + QUERY_LEN + ANSWER_LEN
}

/// Symbol vocabulary with one index token per possible candidate slot.
pub fn symbol_vocab(tkg: &TemporalKG, rules: &RulesConfig) -> SymbolVocab {
    SymbolVocab::new(tkg, rules.max_events + 1)
}

/// Frozen components shared by every query, plus the visible history.
#[derive(Clone, Copy)]
pub struct QueryContext<'a> {
    pub history: &'a TemporalKG,
    pub encoder: &'a GraphEncoder,
    pub rules: &'a RuleSet,
    pub vocab: &'a SymbolVocab,
    pub sampler: SamplerConfig,
    pub max_events: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedQuery {
    pub instruction: InstructionSequence,
    pub encoder_state: EncoderState,
    pub graph: GraphState,
}

impl QueryContext<'_> {
    /// Retrieves the chain, builds the instruction, and encodes the history.
    pub fn prepare(&self, query: Query, gold: Option<EntityId>) -> Result<PreparedQuery> {
        let chain = match retrieve_chain(query, self.rules, self.history, self.max_events) {
            Err(Error::EmptyHistory(_)) => EventChain::default(),
            other => other?,
        };
        let instruction = build_instruction(query, &chain, self.vocab, gold)?;
        let (encoder_state, graph) = graph_state_for(self.encoder, self.history, query, self.sampler, self.seed)?;
        Ok(PreparedQuery {
            instruction,
            encoder_state,
            graph,
        })
    }

    /// Supervised examples for `facts`, skipping those at time 0 (no history).
    pub fn examples(&self, facts: &[Quadruple], mode: ExecMode) -> Result<Vec<Example>> {
        let facts: Vec<&Quadruple> = facts.iter().filter(|f| f.timestamp > 0).collect();
        exec::try_map(mode, &facts, |f| {
            let p = self.prepare(Query::from(*f), Some(f.object))?;
            Ok(Example {
                instruction: p.instruction,
                graph: p.graph,
            })
        })
    }
}

/// Trains and freezes the encoder on `train`; returns per-epoch losses.
pub fn train_encoder(train: &TemporalKG, cfg: &PipelineConfig, mode: ExecMode) -> Result<(GraphEncoder, Vec<f64>)> {
    let mut enc = GraphEncoder::new(train.num_entities(), train.num_relation_ids(), cfg.encoder.dim, cfg.encoder.seed)?;
    let losses = pretrain_encoder(&mut enc, train, cfg.sampler, &cfg.encoder, mode)?;
    Ok((enc, losses))
}

/// Mines rules on `train` and applies the confidence and count filters.
pub fn mine(train: &TemporalKG, cfg: &RulesConfig, mode: ExecMode) -> Result<RuleSet> {
    Ok(mine_rules(train, cfg.mining(), mode)?.filter(cfg.min_confidence, cfg.top_n))
}

/// Fresh model sized for `vocab` and an encoder of width `encoder_dim`.
pub fn new_model(cfg: &PipelineConfig, vocab: &SymbolVocab, encoder_dim: usize) -> Result<StkModel> {
    StkModel::new(
        cfg.backbone.config(vocab.len()),
        cfg.ablation.effective(cfg.adapter),
        2 * encoder_dim,
    )
}

pub struct RunOutcome {
    pub report: EvalReport,
    pub routing: RoutingStats,
    pub encoder_losses: Vec<f64>,
    pub pretrain_log: Vec<StepRecord>,
    pub train_log: Vec<StepRecord>,
    pub model: StkModel,
}

/// Runs every stage in memory and evaluates on the test split.
pub fn run_all(tkg: &TemporalKG, split: &DatasetSplit, cfg: &PipelineConfig, mode: ExecMode) -> Result<RunOutcome> {
    cfg.validate()?;
    let train = tkg.prefix(split.train.end);
    let (encoder, encoder_losses) = train_encoder(&train, cfg, mode)?;
    let rules = mine(&train, &cfg.rules, mode)?;
    let vocab = symbol_vocab(tkg, &cfg.rules);
    let ctx = QueryContext {
        history: &train,
        encoder: &encoder,
        rules: &rules,
        vocab: &vocab,
        sampler: cfg.sampler,
        max_events: cfg.rules.max_events,
        seed: cfg.seed,
    };
    let examples = ctx.examples(train.facts(), mode)?;
    let mut model = new_model(cfg, &vocab, encoder.dim())?;
    let sequences: Vec<InstructionSequence> = examples.iter().map(|e| e.instruction.clone()).collect();
    let pretrain_log = pretrain_backbone(&mut model, &sequences, &cfg.backbone.pretrain(), mode)?;
    let train_log = train_adapters(&mut model, &examples, &cfg.ablation, &cfg.training, mode)?;
    let (report, routing) = evaluate(&model, &ctx, tkg, split.test.clone(), &cfg.inference, &cfg.ablation, mode)?;
    Ok(RunOutcome {
        report,
        routing,
        encoder_losses,
        pretrain_log,
        train_log,
        model,
    })
}

const EXAMPLES_FORMAT: &str = "stk-examples";
const EXAMPLES_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ExamplesHeader {
    format: String,
    version: u32,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    instruction: InstructionSequence,
    h0: Vec<f64>,
}

/// Writes examples as JSON lines after a header line.
pub fn write_examples(w: &mut impl Write, examples: &[Example]) -> Result<()> {
    let header = ExamplesHeader {
        format: EXAMPLES_FORMAT.into(),
        version: EXAMPLES_VERSION,
        count: examples.len(),
    };
    let json = |e: serde_json::Error| Error::Validation(e.to_string());
    writeln!(w, "{}", serde_json::to_string(&header).map_err(json)?)?;
    for ex in examples {
        let rec = ExampleRecord {
            instruction: ex.instruction.clone(),
            h0: ex.graph.h0.data().to_vec(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec).map_err(json)?)?;
    }
    Ok(())
}

pub fn read_examples(r: impl BufRead, origin: &str) -> Result<Vec<Example>> {
    let bad = |message: String| Error::Format {
        path: origin.to_string(),
        message,
    };
    let mut lines = r.lines();
    let first = lines.next().ok_or_else(|| bad("empty file".into()))??;
    let header: ExamplesHeader = serde_json::from_str(&first).map_err(|e| bad(e.to_string()))?;
    if header.format != EXAMPLES_FORMAT || header.version != EXAMPLES_VERSION {
        return Err(bad(format!("unsupported format {} v{}", header.format, header.version)));
    }
    let mut out = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        let rec: ExampleRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: i + 2,
            message: e.to_string(),
        })?;
        let h0 = Tensor::new(vec![1, rec.h0.len()], rec.h0)?;
        out.push(Example {
            instruction: rec.instruction,
            graph: GraphState {
                h_current: h0.clone(),
                h0,
            },
        });
    }
    if out.len() != header.count {
        return Err(bad(format!("header promises {} examples, found {}", header.count, out.len())));
    }
    Ok(out)
}
