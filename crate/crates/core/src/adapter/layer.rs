//! Parameters and forward passes of one adapter layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::routing::{route, ModuleKind, RouteRecord, Routed};
use crate::error::{Error, Result};
use crate::numerics::{init, scaled_dot_attention, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub d_k: usize,
    pub init_seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            n_experts: 4,
            top_k: 1,
            d_k: 8,
            init_seed: 0,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_k == 0 || self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::Config(format!(
                "adapter needs n_experts ≥ top_k ≥ 1 and d_k ≥ 1 (got n={}, k={}, d_k={})",
                self.n_experts, self.top_k, self.d_k
            )));
        }
        Ok(())
    }
}

/// Module switches for ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub disable_st_moe: bool,
    pub disable_ea_moe: bool,
    pub disable_cma_moe: bool,
    pub disable_hybrid_score: bool,
    /// One expert per module instead of a routed pool.
    pub single_adapter_mode: bool,
}

impl Ablation {
    /// The adapter configuration after applying `single_adapter_mode`.
    pub fn effective(&self, cfg: AdapterConfig) -> AdapterConfig {
        if self.single_adapter_mode {
            AdapterConfig {
                n_experts: 1,
                top_k: 1,
                ..cfg
            }
        } else {
            cfg
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bottleneck {
    pub down: ParamId,
    pub up: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionExpert {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdapterLayer {
    pub index: usize,
    pub top_k: usize,
    pub st_router: ParamId,
    pub ea_router: ParamId,
    pub cma_router: ParamId,
    pub st_experts: Vec<Bottleneck>,
    pub ea_experts: Vec<Bottleneck>,
    pub cma_experts: Vec<AttentionExpert>,
    pub fusion_w: ParamId,
    pub fusion_b: ParamId,
}

const ROUTER_INIT: f64 = 0.02;

impl AdapterLayer {
    /// Registers layer `index` under `adapter.{index}.`; output projections
    /// (`f_up`, `W_O`) start at zero.
    pub fn register(
        store: &mut ParamStore,
        index: usize,
        d_t: usize,
        d_g2: usize,
        cfg: &AdapterConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (n, dk) = (cfg.n_experts, cfg.d_k);
        let p = |s: &str| format!("adapter.{index}.{s}");
        let mut add = |name: String, t: Tensor| store.add(name, t, true);
        let st_router = add(p("st.router"), init::uniform(rng, &[d_g2, n], ROUTER_INIT))?;
        let ea_router = add(p("ea.router"), init::uniform(rng, &[d_t, n], ROUTER_INIT))?;
        let cma_router = add(p("cma.router"), init::uniform(rng, &[d_g2, n], ROUTER_INIT))?;
        let mut st_experts = Vec::with_capacity(n);
        let mut ea_experts = Vec::with_capacity(n);
        let mut cma_experts = Vec::with_capacity(n);
        for i in 0..n {
            st_experts.push(Bottleneck {
                down: add(p(&format!("st.{i}.down")), init::uniform(rng, &[d_g2, dk], ROUTER_INIT))?,
                up: add(p(&format!("st.{i}.up")), Tensor::zeros(&[dk, d_g2]))?,
            });
        }
        for i in 0..n {
            ea_experts.push(Bottleneck {
                down: add(p(&format!("ea.{i}.down")), init::uniform(rng, &[d_t, dk], ROUTER_INIT))?,
                up: add(p(&format!("ea.{i}.up")), Tensor::zeros(&[dk, d_t]))?,
            });
        }
        for i in 0..n {
            cma_experts.push(AttentionExpert {
                wq: add(p(&format!("cma.{i}.wq")), init::xavier(rng, d_t, dk))?,
                wk: add(p(&format!("cma.{i}.wk")), init::xavier(rng, d_g2, dk))?,
                wv: add(p(&format!("cma.{i}.wv")), init::xavier(rng, d_g2, dk))?,
                wo: add(p(&format!("cma.{i}.wo")), Tensor::zeros(&[dk, d_t]))?,
            });
        }
        let fusion_w = add(p("fusion.w"), init::uniform(rng, &[2 * d_t, d_t], ROUTER_INIT))?;
        let fusion_b = add(p("fusion.b"), Tensor::zeros(&[d_t]))?;
        Ok(AdapterLayer {
            index,
            top_k: cfg.top_k,
            st_router,
            ea_router,
            cma_router,
            st_experts,
            ea_experts,
            cma_experts,
            fusion_w,
            fusion_b,
        })
    }

    /// Finds an already registered layer (e.g. after loading a checkpoint).
    pub fn lookup(store: &ParamStore, index: usize, cfg: &AdapterConfig) -> Result<Self> {
        let p = |s: &str| store.require(&format!("adapter.{index}.{s}"));
        let n = cfg.n_experts;
        Ok(AdapterLayer {
            index,
            top_k: cfg.top_k,
            st_router: p("st.router")?,
            ea_router: p("ea.router")?,
            cma_router: p("cma.router")?,
            st_experts: (0..n)
                .map(|i| {
                    Ok(Bottleneck {
                        down: p(&format!("st.{i}.down"))?,
                        up: p(&format!("st.{i}.up"))?,
                    })
                })
                .collect::<Result<_>>()?,
            ea_experts: (0..n)
                .map(|i| {
                    Ok(Bottleneck {
                        down: p(&format!("ea.{i}.down"))?,
                        up: p(&format!("ea.{i}.up"))?,
                    })
                })
                .collect::<Result<_>>()?,
            cma_experts: (0..n)
                .map(|i| {
                    Ok(AttentionExpert {
                        wq: p(&format!("cma.{i}.wq"))?,
                        wk: p(&format!("cma.{i}.wk"))?,
                        wv: p(&format!("cma.{i}.wv"))?,
                        wo: p(&format!("cma.{i}.wo"))?,
                    })
                })
                .collect::<Result<_>>()?,
            fusion_w: p("fusion.w")?,
            fusion_b: p("fusion.b")?,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.st_experts.len()
    }
}

/// `f_up(relu(f_down(x)))`.
pub fn expert_forward(tape: &mut Tape, store: &ParamStore, expert: &Bottleneck, x: Var) -> Result<Var> {
    let down = tape.param(store, expert.down);
    let up = tape.param(store, expert.up);
    let h = tape.matmul(x, down)?;
    let h = tape.relu(h);
    tape.matmul(h, up)
}

/// Sums `gate_i · expert_i(x_rows)` over each row's active experts; each
/// expert only runs on the rows that selected it.
fn mix(
    tape: &mut Tape,
    routed: &Routed,
    x: Var,
    out_dim: usize,
    n: usize,
    mut expert: impl FnMut(&mut Tape, usize, Var) -> Result<Var>,
) -> Result<Var> {
    let rows = tape.value(x).rows();
    let mut total: Option<Var> = None;
    for i in 0..n {
        let sel: Vec<usize> = (0..rows)
            .filter(|&r| routed.decisions[r].active.contains(&i))
            .collect();
        if sel.is_empty() {
            continue;
        }
        let all = sel.len() == rows;
        let xi = if all { x } else { tape.gather_rows(x, &sel)? };
        let yi = expert(tape, i, xi)?;
        let col = tape.slice_cols(routed.gate_active, i, i + 1)?;
        let wi = if all { col } else { tape.gather_rows(col, &sel)? };
        let yi = tape.scale_rows(yi, wi)?;
        let placed = if all {
            yi
        } else {
            let zeros = tape.constant(Tensor::zeros(&[rows, out_dim]));
            tape.scatter_rows(zeros, &sel, yi)?
        };
        total = Some(match total {
            Some(t) => tape.add(t, placed)?,
            None => placed,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::zeros(&[rows, out_dim]))))
}

/// Graph-pathway refinement of `h_g: [1, 2·d_g]`.
pub fn st_moe_forward(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &AdapterLayer,
    h_g: Var,
    records: &mut Vec<RouteRecord>,
) -> Result<Var> {
    let router = tape.param(store, layer.st_router);
    let routed = route(tape, router, h_g, layer.top_k)?;
    let d = tape.value(h_g).cols();
    let out = mix(tape, &routed, h_g, d, layer.n_experts(), |tape, i, xi| {
        expert_forward(tape, store, &layer.st_experts[i], xi)
    })?;
    records.push(RouteRecord {
        layer: layer.index,
        module: ModuleKind::St,
        gate_full: routed.gate_full,
        decisions: routed.decisions,
    });
    Ok(out)
}

/// Event-aware text experts.
///
/// `route_input` holds the hidden states of the routing positions (each
/// event's time token) and `token_route[j]` names the row that token `j`
/// routes on, so every token of one event shares one decision.
pub fn ea_moe_forward(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &AdapterLayer,
    h_text: Var,
    route_input: Var,
    token_route: &[usize],
    records: &mut Vec<RouteRecord>,
) -> Result<Var> {
    let (rows, d) = (tape.value(h_text).rows(), tape.value(h_text).cols());
    let units = tape.value(route_input).rows();
    if token_route.len() != rows {
        return Err(Error::Contract(format!(
            "time map covers {} tokens, hidden state has {rows}",
            token_route.len()
        )));
    }
    if let Some(&bad) = token_route.iter().find(|&&u| u >= units) {
        return Err(Error::Contract(format!("time map entry {bad} outside {units} routing rows")));
    }
    let router = tape.param(store, layer.ea_router);
    let per_unit = route(tape, router, route_input, layer.top_k)?;
    let gate_full = tape.gather_rows(per_unit.gate_full, token_route)?;
    let gate_active = tape.gather_rows(per_unit.gate_active, token_route)?;
    let routed = Routed {
        gate_full,
        gate_active,
        decisions: token_route.iter().map(|&u| per_unit.decisions[u].clone()).collect(),
    };
    let out = mix(tape, &routed, h_text, d, layer.n_experts(), |tape, i, xi| {
        expert_forward(tape, store, &layer.ea_experts[i], xi)
    })?;
    records.push(RouteRecord {
        layer: layer.index,
        module: ModuleKind::Ea,
        gate_full: routed.gate_full,
        decisions: routed.decisions,
    });
    Ok(out)
}

/// [`ea_moe_forward`] where `tau[j]` indexes rows of `h_text` itself.
pub fn ea_moe_forward_tau(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &AdapterLayer,
    h_text: Var,
    tau: &[usize],
    records: &mut Vec<RouteRecord>,
) -> Result<Var> {
    let rows = tape.value(h_text).rows();
    if let Some(&bad) = tau.iter().find(|&&t| t >= rows) {
        return Err(Error::Contract(format!("time map entry {bad} outside {rows} tokens")));
    }
    let mut unique = tau.to_vec();
    unique.sort_unstable();
    unique.dedup();
    let token_route: Vec<usize> = tau.iter().map(|t| unique.binary_search(t).expect("present")).collect();
    let route_input = tape.gather_rows(h_text, &unique)?;
    ea_moe_forward(tape, store, layer, h_text, route_input, &token_route, records)
}

/// Cross-modality attention: text queries attend to the graph state.
pub fn cma_moe_forward(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &AdapterLayer,
    h_text: Var,
    h_g: Var,
    records: &mut Vec<RouteRecord>,
) -> Result<Var> {
    let (rows, d) = (tape.value(h_text).rows(), tape.value(h_text).cols());
    if tape.value(h_g).rows() != 1 {
        return Err(Error::shape("cma_moe graph state", tape.shape(h_g), &[1, 0]));
    }
    let router = tape.param(store, layer.cma_router);
    let routed = route(tape, router, h_g, layer.top_k)?;
    let decision = routed.decisions[0].clone();
    let mut total: Option<Var> = None;
    for &i in &decision.active {
        let e = &layer.cma_experts[i];
        let (wq, wk, wv, wo) = (
            tape.param(store, e.wq),
            tape.param(store, e.wk),
            tape.param(store, e.wv),
            tape.param(store, e.wo),
        );
        let q = tape.matmul(h_text, wq)?;
        let k = tape.matmul(h_g, wk)?;
        let v = tape.matmul(h_g, wv)?;
        let att = scaled_dot_attention(tape, q, k, v, None)?;
        let y = tape.matmul(att, wo)?;
        let g = tape.slice_cols(routed.gate_active, i, i + 1)?;
        let g = tape.gather_rows(g, &vec![0; rows])?;
        let y = tape.scale_rows(y, g)?;
        total = Some(match total {
            Some(t) => tape.add(t, y)?,
            None => y,
        });
    }
    records.push(RouteRecord {
        layer: layer.index,
        module: ModuleKind::Cma,
        gate_full: routed.gate_full,
        decisions: routed.decisions,
    });
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::zeros(&[rows, d]))))
}

/// `g ⊙ h_cma + (1 − g) ⊙ h_ea` with `g = sigmoid([h_cma; h_ea] W + b)`.
pub fn adaptive_fusion(tape: &mut Tape, store: &ParamStore, layer: &AdapterLayer, h_cma: Var, h_ea: Var) -> Result<Var> {
    if tape.shape(h_cma) != tape.shape(h_ea) {
        return Err(Error::shape("adaptive_fusion", tape.shape(h_cma), tape.shape(h_ea)));
    }
    let w = tape.param(store, layer.fusion_w);
    let b = tape.param(store, layer.fusion_b);
    let cat = tape.concat_cols(&[h_cma, h_ea])?;
    let pre = tape.matmul(cat, w)?;
    let pre = tape.add_row(pre, b)?;
    let g = tape.sigmoid(pre);
    let diff = tape.sub(h_cma, h_ea)?;
    let step = tape.mul(g, diff)?;
    tape.add(h_ea, step)
}

/// Text-side output of one layer's adapter: `H_enh`, before the residual sum.
#[allow(clippy::too_many_arguments)]
pub fn enhanced_text(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &AdapterLayer,
    ablation: &Ablation,
    h_attn: Var,
    ea: impl FnOnce(&mut Tape, &mut Vec<RouteRecord>) -> Result<Var>,
    h_g_prev: Var,
    records: &mut Vec<RouteRecord>,
) -> Result<Option<Var>> {
    let cma = if ablation.disable_cma_moe {
        None
    } else {
        Some(cma_moe_forward(tape, store, layer, h_attn, h_g_prev, records)?)
    };
    let ea = if ablation.disable_ea_moe { None } else { Some(ea(tape, records)?) };
    Ok(match (cma, ea) {
        (Some(c), Some(e)) => Some(adaptive_fusion(tape, store, layer, c, e)?),
        (Some(c), None) => Some(c),
        (None, Some(e)) => Some(e),
        (None, None) => None,
    })
}

/// Graph-side update: `h_g_next = st_moe(h_g_prev) + h_g0`.
pub fn graph_next(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &AdapterLayer,
    ablation: &Ablation,
    h_g_prev: Var,
    h_g0: Var,
    records: &mut Vec<RouteRecord>,
) -> Result<Var> {
    if ablation.disable_st_moe {
        return Ok(h_g0);
    }
    let st = st_moe_forward(tape, store, layer, h_g_prev, records)?;
    tape.add(st, h_g0)
}

/// One full adapter layer: `(Ĥ + H_enh + H_FFN, st(h_g_prev) + h_g0)`.
#[allow(clippy::too_many_arguments)]
pub fn adapter_layer_forward(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &AdapterLayer,
    ablation: &Ablation,
    h_attn: Var,
    h_ffn: Var,
    h_g_prev: Var,
    h_g0: Var,
    tau: &[usize],
    records: &mut Vec<RouteRecord>,
) -> Result<(Var, Var)> {
    let enh = enhanced_text(
        tape,
        store,
        layer,
        ablation,
        h_attn,
        |tape, records| ea_moe_forward_tau(tape, store, layer, h_attn, tau, records),
        h_g_prev,
        records,
    )?;
    let mut text = tape.add(h_attn, h_ffn)?;
    if let Some(e) = enh {
        text = tape.add(text, e)?;
    }
    let g = graph_next(tape, store, layer, ablation, h_g_prev, h_g0, records)?;
    Ok((text, g))
}
