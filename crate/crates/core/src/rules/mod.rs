//! Temporal logic rules: mining, confidence, retrieval, and instruction
//! linearization.

mod grounding;
pub mod instruction;
mod retrieval;
mod rule;
mod walk;

pub use grounding::{rule_confidence, RuleStats};
pub use instruction::{build_instruction, InstructionSequence, SymbolVocab, TokenClass};
pub use retrieval::{retrieve_chain, EventChain, Provenance};
pub use rule::{MiningConfig, RuleSet, TemporalRule};
pub use walk::{mine_rules, sample_transition, transition_probabilities};
