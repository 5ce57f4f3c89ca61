//! Pre-LN decoder-only transformer with an optional adapter per layer.
//!
//! [`StkModel::forward_step`] processes a chunk of tokens that continues
//! whatever the [`DecodeCache`] already holds, so a full teacher-forced pass
//! and token-by-token decoding share one code path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{
    ea_moe_forward, enhanced_text, graph_next, Ablation, AdapterConfig, AdapterLayer, RouteRecord,
};
use crate::error::{Error, Result};
use crate::numerics::{init, scaled_dot_attention, Mask, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_t: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab_size: 0,
            d_t: 64,
            n_layers: 4,
            n_heads: 4,
            d_ffn: 128,
            max_seq_len: 256,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_t == 0 || self.n_layers == 0 || self.d_ffn == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("backbone sizes must be positive".into()));
        }
        if self.n_heads == 0 || !self.d_t.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_t = {} is not divisible by n_heads = {}",
                self.d_t, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct BackboneIds {
    tok: ParamId,
    pos: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

/// Per-layer keys, values, and post-attention states of processed tokens.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerCache {
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub h_attn: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeCache {
    pub layers: Vec<LayerCache>,
    pub len: usize,
}

/// Graph inputs for each layer: `h_g^l` for `l = 0..L`.
pub type GraphPath = Vec<Var>;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct StkModel {
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    /// Width of the graph state, `2·d_g`.
    pub d_graph: usize,
    store: ParamStore,
    ids: BackboneIds,
    adapters: Vec<AdapterLayer>,
}

impl StkModel {
    /// Random backbone plus zero-output adapters.
    pub fn new(backbone: BackboneConfig, adapter: AdapterConfig, d_graph: usize) -> Result<Self> {
        backbone.validate()?;
        adapter.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(backbone.seed);
        let mut store = ParamStore::new();
        let (d, f) = (backbone.d_t, backbone.d_ffn);
        let tok = store.add("backbone.tok", init::uniform(&mut rng, &[backbone.vocab_size, d], 0.1), true)?;
        let pos = store.add("backbone.pos", init::uniform(&mut rng, &[backbone.max_seq_len, d], 0.1), true)?;
        let mut layers = Vec::with_capacity(backbone.n_layers);
        for l in 0..backbone.n_layers {
            let p = |s: &str| format!("backbone.{l}.{s}");
            let mut add = |name: String, t: Tensor| store.add(name, t, true);
            layers.push(LayerIds {
                ln1_g: add(p("ln1.g"), Tensor::filled(&[d], 1.0))?,
                ln1_b: add(p("ln1.b"), Tensor::zeros(&[d]))?,
                wq: add(p("attn.wq"), init::xavier(&mut rng, d, d))?,
                wk: add(p("attn.wk"), init::xavier(&mut rng, d, d))?,
                wv: add(p("attn.wv"), init::xavier(&mut rng, d, d))?,
                wo: add(p("attn.wo"), init::xavier(&mut rng, d, d))?,
                ln2_g: add(p("ln2.g"), Tensor::filled(&[d], 1.0))?,
                ln2_b: add(p("ln2.b"), Tensor::zeros(&[d]))?,
                w1: add(p("ffn.w1"), init::xavier(&mut rng, d, f))?,
                b1: add(p("ffn.b1"), Tensor::zeros(&[f]))?,
                w2: add(p("ffn.w2"), init::xavier(&mut rng, f, d))?,
                b2: add(p("ffn.b2"), Tensor::zeros(&[d]))?,
            });
        }
        let lnf_g = store.add("backbone.lnf.g", Tensor::filled(&[d], 1.0), true)?;
        let lnf_b = store.add("backbone.lnf.b", Tensor::zeros(&[d]), true)?;
        let mut arng = ChaCha8Rng::seed_from_u64(adapter.init_seed);
        let adapters = (0..backbone.n_layers)
            .map(|l| AdapterLayer::register(&mut store, l, d, d_graph, &adapter, &mut arng))
            .collect::<Result<Vec<_>>>()?;
        Ok(StkModel {
            backbone,
            adapter,
            d_graph,
            store,
            ids: BackboneIds {
                tok,
                pos,
                layers,
                lnf_g,
                lnf_b,
            },
            adapters,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn adapters(&self) -> &[AdapterLayer] {
        &self.adapters
    }

    /// Trainable flags for backbone pretraining.
    pub fn unfreeze_backbone_only(&mut self) {
        self.store.set_trainable_prefix("backbone.", true);
        self.store.set_trainable_prefix("adapter.", false);
    }

    /// Trainable flags for adapter fine-tuning.
    pub fn freeze_backbone(&mut self) {
        self.store.set_trainable_prefix("backbone.", false);
        self.store.set_trainable_prefix("adapter.", true);
    }

    pub fn backbone_fingerprint(&self) -> u64 {
        self.store.fingerprint(|p| p.name.starts_with("backbone."))
    }

    pub fn adapter_fingerprint(&self) -> u64 {
        self.store.fingerprint(|p| p.name.starts_with("adapter."))
    }

    /// Records the graph pathway `h_g^0 = h0`, `h_g^{l+1} = st_l(h_g^l) + h0`
    /// and returns the input of every layer.
    pub fn graph_path(
        &self,
        tape: &mut Tape,
        h0: Var,
        ablation: &Ablation,
        records: &mut Vec<RouteRecord>,
    ) -> Result<GraphPath> {
        if tape.value(h0).cols() != self.d_graph || tape.value(h0).rows() != 1 {
            return Err(Error::shape("graph state", tape.shape(h0), &[1, self.d_graph]));
        }
        let mut path = Vec::with_capacity(self.adapters.len());
        let mut h = h0;
        for layer in &self.adapters {
            path.push(h);
            h = graph_next(tape, &self.store, layer, ablation, h, h0, records)?;
        }
        Ok(path)
    }

    /// Runs `tokens` at positions `cache.len ..`, appending to `cache`.
    ///
    /// `tau[j]` is the absolute position of token `j`'s time token. With
    /// `graph = None` the adapters are skipped (plain backbone). Returns
    /// logits `[tokens.len(), vocab]`.
    pub fn forward_step(
        &self,
        tape: &mut Tape,
        tokens: &[u32],
        tau: &[usize],
        graph: Option<(&GraphPath, &Ablation)>,
        cache: &mut DecodeCache,
        records: &mut Vec<RouteRecord>,
    ) -> Result<Var> {
        let cfg = &self.backbone;
        let (m, start, d) = (tokens.len(), cache.len, cfg.d_t);
        if m == 0 {
            return Err(Error::Contract("forward_step needs at least one token".into()));
        }
        if start + m > cfg.max_seq_len {
            return Err(Error::Length {
                len: start + m,
                max: cfg.max_seq_len,
            });
        }
        if tau.len() != m {
            return Err(Error::Contract(format!("time map has {} entries for {m} tokens", tau.len())));
        }
        if let Some((j, &t)) = tau.iter().enumerate().find(|&(j, &t)| t > start + j) {
            return Err(Error::Contract(format!("time map sends token {} forward to {t}", start + j)));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Range {
                what: "token id",
                index: bad as usize,
                limit: cfg.vocab_size,
            });
        }
        if let Some((g, _)) = graph {
            if g.len() != self.adapters.len() {
                return Err(Error::Contract("graph path length differs from layer count".into()));
            }
        }
        if cache.layers.is_empty() {
            cache.layers = vec![LayerCache::default(); cfg.n_layers];
        }
        let p = |tape: &mut Tape, id| tape.param(&self.store, id);
        let tok = p(tape, self.ids.tok);
        let pos = p(tape, self.ids.pos);
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let te = tape.gather_rows(tok, &idx)?;
        let positions: Vec<usize> = (start..start + m).collect();
        let pe = tape.gather_rows(pos, &positions)?;
        let mut x = tape.add(te, pe)?;
        let dh = d / cfg.n_heads;
        let mask = Mask::Causal { offset: start };
        for (l, ids) in self.ids.layers.iter().enumerate() {
            let (g1, b1) = (p(tape, ids.ln1_g), p(tape, ids.ln1_b));
            let a = tape.layer_norm(x, g1, b1, LN_EPS)?;
            let (wq, wk, wv, wo) = (p(tape, ids.wq), p(tape, ids.wk), p(tape, ids.wv), p(tape, ids.wo));
            let q = tape.matmul(a, wq)?;
            let mut k = tape.matmul(a, wk)?;
            let mut v = tape.matmul(a, wv)?;
            let lc = &mut cache.layers[l];
            let new_k = tape.value(k).data().to_vec();
            let new_v = tape.value(v).data().to_vec();
            if start > 0 {
                let ck = tape.constant(Tensor::new(vec![start, d], lc.k.clone())?);
                let cv = tape.constant(Tensor::new(vec![start, d], lc.v.clone())?);
                k = tape.concat_rows(&[ck, k])?;
                v = tape.concat_rows(&[cv, v])?;
            }
            lc.k.extend(new_k);
            lc.v.extend(new_v);
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let (lo, hi) = (h * dh, (h + 1) * dh);
                let qh = if cfg.n_heads == 1 { q } else { tape.slice_cols(q, lo, hi)? };
                let kh = if cfg.n_heads == 1 { k } else { tape.slice_cols(k, lo, hi)? };
                let vh = if cfg.n_heads == 1 { v } else { tape.slice_cols(v, lo, hi)? };
                heads.push(scaled_dot_attention(tape, qh, kh, vh, Some(&mask))?);
            }
            let att = if cfg.n_heads == 1 { heads[0] } else { tape.concat_cols(&heads)? };
            let o = tape.matmul(att, wo)?;
            let h_attn = tape.add(x, o)?;

            let (g2, b2) = (p(tape, ids.ln2_g), p(tape, ids.ln2_b));
            let f = tape.layer_norm(h_attn, g2, b2, LN_EPS)?;
            let (w1, fb1, w2, fb2) = (p(tape, ids.w1), p(tape, ids.b1), p(tape, ids.w2), p(tape, ids.b2));
            let f = tape.matmul(f, w1)?;
            let f = tape.add_row(f, fb1)?;
            let f = tape.relu(f);
            let f = tape.matmul(f, w2)?;
            let ffn = tape.add_row(f, fb2)?;

            let mut next = tape.add(h_attn, ffn)?;
            if let Some((path, ablation)) = graph {
                let layer = &self.adapters[l];
                let cached = &cache.layers[l].h_attn;
                let enh = enhanced_text(
                    tape,
                    &self.store,
                    layer,
                    ablation,
                    h_attn,
                    |tape, records| {
                        let (input, route) = routing_rows(tape, h_attn, cached, d, start, tau)?;
                        ea_moe_forward(tape, &self.store, layer, h_attn, input, &route, records)
                    },
                    path[l],
                    records,
                )?;
                if let Some(e) = enh {
                    next = tape.add(next, e)?;
                }
            }
            cache.layers[l].h_attn.extend_from_slice(tape.value(h_attn).data());
            x = next;
        }
        cache.len += m;
        let (gf, bf) = (p(tape, self.ids.lnf_g), p(tape, self.ids.lnf_b));
        let y = tape.layer_norm(x, gf, bf, LN_EPS)?;
        tape.matmul_nt(y, tok)
    }

    /// Full forward over `tokens` from an empty cache.
    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &[u32],
        tau: &[usize],
        graph: Option<(&GraphPath, &Ablation)>,
        records: &mut Vec<RouteRecord>,
    ) -> Result<Var> {
        let mut cache = DecodeCache::default();
        self.forward_step(tape, tokens, tau, graph, &mut cache, records)
    }
}

/// Hidden states at the distinct routing positions of this chunk, taken
/// from the cache for earlier positions, plus each token's row among them.
fn routing_rows(
    tape: &mut Tape,
    h_attn: Var,
    cached: &[f64],
    d: usize,
    start: usize,
    tau: &[usize],
) -> Result<(Var, Vec<usize>)> {
    let mut unique = tau.to_vec();
    unique.sort_unstable();
    unique.dedup();
    let route: Vec<usize> = tau.iter().map(|t| unique.binary_search(t).expect("present")).collect();
    let split = unique.partition_point(|&u| u < start);
    let fresh: Vec<usize> = unique[split..].iter().map(|&u| u - start).collect();
    let input = if split == 0 {
        tape.gather_rows(h_attn, &fresh)?
    } else {
        let mut old = Vec::with_capacity(split * d);
        for &u in &unique[..split] {
            old.extend_from_slice(&cached[u * d..(u + 1) * d]);
        }
        let old = tape.constant(Tensor::new(vec![split, d], old)?);
        if fresh.is_empty() {
            old
        } else {
            let new = tape.gather_rows(h_attn, &fresh)?;
            tape.concat_rows(&[old, new])?
        }
    };
    Ok((input, route))
}
