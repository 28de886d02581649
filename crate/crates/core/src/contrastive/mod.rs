//! Stage two: contrastive fine-tuning with hard and in-batch negatives.

mod batching;
mod embed;
mod instance;
mod loss;
mod train;

pub use batching::{shuffled_batches, task_aware_batches, Batch};
pub use embed::{
    cosine, embed_batch, embed_bidirectional, embed_causal, pooled, prepare, similarity, with_eos, Embedding,
    Pooling, Similarity,
};
pub use instance::{ContrastiveInstance, InstanceIds};
pub use loss::{contrastive_loss, contrastive_loss_from_rows, CandidateLayout, ClLoss};
pub use train::{cl_train_step, finetune, ClConfig, ClMetrics, ClState};
