//! Temporal knowledge-graph storage, loading, and snapshot views.

mod io;
pub mod synthetic;
mod tkg;
mod vocab;

pub use io::{
    assemble, load_bundle, load_dataset, parse_quadruple, read_bundle, save_bundle, write_bundle, RawQuadruple,
    BUNDLE_MAGIC, BUNDLE_VERSION,
};
pub use tkg::{DatasetSplit, EntityId, Quadruple, Query, RelationId, TemporalKG, TimeId};
pub use vocab::{Vocab, Vocabs};
