//! Embedding models over interleaved text/image sequences.
//!
//! The crate trains a small transformer in two stages. Stage one corrupts
//! interleaved sequences (mask tokens for text, Gaussian noise for image
//! patches) and learns to reconstruct them under bidirectional attention.
//! Stage two tunes mean-pooled embeddings with a contrastive loss over hard
//! and in-batch negatives drawn from single-task batches. Around that sit a
//! synthetic corpus generator, a cost-balanced packing scheduler and a
//! retrieval evaluator.

pub mod autograd;
pub mod backbone;
pub mod contrastive;
pub mod cpt;
pub mod datapack;
pub mod error;
pub mod eval;
pub mod jsonl;
pub mod optim;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
