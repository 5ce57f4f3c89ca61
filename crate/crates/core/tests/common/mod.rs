#![allow(dead_code)]

pub mod grad;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use stk_core::data::synthetic::{recurring_tkg, RecurringConfig};
use stk_core::data::{DatasetSplit, TemporalKG};
use stk_core::encoder::GraphEncoder;
use stk_core::exec::ExecMode;
use stk_core::model::{Example, StkModel};
use stk_core::numerics::{ParamStore, Tensor};
use stk_core::pipeline::{mine, new_model, symbol_vocab, PipelineConfig, QueryContext};
use stk_core::rules::{RuleSet, SymbolVocab};

pub struct Fixture {
    pub tkg: TemporalKG,
    pub split: DatasetSplit,
    pub train: TemporalKG,
    pub encoder: GraphEncoder,
    pub rules: RuleSet,
    pub vocab: SymbolVocab,
    pub cfg: PipelineConfig,
}

impl Fixture {
    pub fn ctx(&self) -> QueryContext<'_> {
        QueryContext {
            history: &self.train,
            encoder: &self.encoder,
            rules: &self.rules,
            vocab: &self.vocab,
            sampler: self.cfg.sampler,
            max_events: self.cfg.rules.max_events,
            seed: self.cfg.seed,
        }
    }

    pub fn model(&self) -> StkModel {
        new_model(&self.cfg, &self.vocab, self.encoder.dim()).unwrap()
    }

    pub fn examples(&self) -> Vec<Example> {
        self.ctx().examples(self.train.facts(), ExecMode::Sequential).unwrap()
    }
}

/// A small model configuration over the recurring-pair graph, with an
/// untrained encoder.
pub fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.rules.max_events = 3;
    cfg.rules.walks_per_relation = 20;
    cfg.rules.max_body_len = 1;
    cfg.backbone.d_t = 16;
    cfg.backbone.n_layers = 2;
    cfg.backbone.n_heads = 2;
    cfg.backbone.d_ffn = 32;
    cfg.backbone.max_seq_len = 64;
    cfg.encoder.dim = 4;
    cfg.encoder.epochs = 0;
    cfg.adapter.d_k = 4;
    cfg
}

pub fn fixture(cfg: PipelineConfig) -> Fixture {
    let (tkg, split) = recurring_tkg(&RecurringConfig {
        num_entities: 8,
        num_relations: 2,
        num_times: 20,
        ..RecurringConfig::default()
    })
    .unwrap();
    let train = tkg.prefix(split.train.end);
    let encoder = GraphEncoder::new(tkg.num_entities(), tkg.num_relation_ids(), cfg.encoder.dim, 7).unwrap();
    let rules = mine(&train, &cfg.rules, ExecMode::Sequential).unwrap();
    let vocab = symbol_vocab(&tkg, &cfg.rules);
    Fixture {
        tkg,
        split,
        train,
        encoder,
        rules,
        vocab,
        cfg,
    }
}

/// Overwrites every parameter whose name starts with `prefix` with
/// uniform noise in `±scale`.
pub fn randomize(store: &mut ParamStore, prefix: &str, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        store.set_value(id, Tensor::new(shape, data).unwrap()).unwrap();
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
