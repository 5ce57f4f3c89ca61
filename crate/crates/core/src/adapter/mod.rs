//! Mixture-of-experts adapters: graph-pathway (ST), event-aware text (EA),
//! and cross-modality attention (CMA) experts with adaptive fusion.

mod layer;
mod routing;

pub use layer::{
    adapter_layer_forward, adaptive_fusion, cma_moe_forward, ea_moe_forward, ea_moe_forward_tau, enhanced_text,
    expert_forward, graph_next, st_moe_forward, Ablation, AdapterConfig, AdapterLayer, AttentionExpert, Bottleneck,
};
pub use routing::{
    balance_term, balance_value, route, top_k, AssignmentCounts, BalanceReduction, ModuleKind, RouteRecord, Routed,
    RoutingDecision, RoutingStats, StatKey,
};
