//! Switchable causal/bidirectional transformer over interleaved sequences.

mod checkpoint;
mod config;
mod model;
mod sequence;

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use config::{AttentionMode, BackboneConfig, Precision};
pub use model::{Backbone, HiddenStates, PackedBatch, TransformerStack, BACKBONE_PREFIX, INIT_STD};
pub(crate) use model::{bind_param, normal_matrix};
pub use sequence::{
    is_special, Element, InterleavedSequence, Modality, SequenceRecord, EOS, MASK, NUM_SPECIAL, PAD,
};
