//! Retrieval evaluation: cosine ranking, Precision@1 and NDCG@5.

mod metrics;
mod task;

pub use metrics::{
    evaluate, ndcg_at_k, ndcg_one, precision_at_1, rank, rank_embeddings, score, QueryDetail, RankedList,
    TaskResult, NDCG_K,
};
pub use task::{Item, Judgments, Qrel, RetrievalTask, POOL_FILE, QRELS_FILE, QUERIES_FILE};
