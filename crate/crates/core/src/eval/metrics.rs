use serde::{Deserialize, Serialize};

use super::task::{Judgments, RetrievalTask};
use crate::autograd::{ParamStore, Real};
use crate::backbone::{Backbone, InterleavedSequence};
use crate::contrastive::{embed_batch, Pooling};
use crate::error::{Error, Result};

/// Pool ids of one query, best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
}

fn unit(v: &[f64], id: &str) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::input(format!("embedding of {id} has norm {n}")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Ranks `pool` for each query by cosine similarity, highest first; equal
/// scores are ordered by ascending doc id.
pub fn rank_embeddings(queries: &[(String, Vec<f64>)], pool: &[(String, Vec<f64>)]) -> Result<Vec<RankedList>> {
    if pool.is_empty() {
        return Err(Error::input("empty candidate pool"));
    }
    let pool_unit: Vec<Vec<f64>> = pool.iter().map(|(id, v)| unit(v, id)).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(queries.len());
    for (qid, qv) in queries {
        let q = unit(qv, qid)?;
        let mut scored: Vec<(f64, &str)> = pool_unit
            .iter()
            .zip(pool)
            .map(|(d, (id, _))| (q.iter().zip(d).map(|(a, b)| a * b).sum(), id.as_str()))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        out.push(RankedList {
            query_id: qid.clone(),
            ids: scored.iter().map(|s| s.1.to_string()).collect(),
            scores: scored.iter().map(|s| s.0).collect(),
        });
    }
    Ok(out)
}

/// Embeds every query and pool document of `task` and ranks the pool.
pub fn rank<F: Real>(
    task: &RetrievalTask,
    backbone: &Backbone,
    store: &ParamStore<F>,
    pooling: Pooling,
) -> Result<Vec<RankedList>> {
    if task.pool.is_empty() {
        return Err(Error::input(format!("task {} has an empty pool", task.name)));
    }
    let embed = |items: &[super::task::Item]| -> Result<Vec<(String, Vec<f64>)>> {
        let seqs: Vec<&InterleavedSequence> = items.iter().map(|i| &i.sequence).collect();
        let vecs = embed_batch(backbone, store, &seqs, pooling, None)?;
        Ok(items.iter().zip(vecs).map(|(i, e)| (i.id.clone(), e.vector)).collect())
    };
    rank_embeddings(&embed(&task.queries)?, &embed(&task.pool)?)
}

fn relevant_of<'a>(
    judgments: &'a Judgments,
    query: &str,
) -> Result<&'a std::collections::BTreeSet<String>> {
    judgments
        .get(query)
        .ok_or_else(|| Error::Eval(format!("no relevance judgments for query {query}")))
}

/// Fraction of queries whose top-ranked document is relevant.
pub fn precision_at_1(ranked: &[RankedList], judgments: &Judgments) -> Result<f64> {
    if ranked.is_empty() {
        return Err(Error::Eval("no ranked lists".into()));
    }
    let mut hits = 0usize;
    for r in ranked {
        let rel = relevant_of(judgments, &r.query_id)?;
        let top = r
            .ids
            .first()
            .ok_or_else(|| Error::Eval(format!("empty ranking for query {}", r.query_id)))?;
        hits += rel.contains(top) as usize;
    }
    Ok(hits as f64 / ranked.len() as f64)
}

/// Binary-gain NDCG@k of one ranking.
pub fn ndcg_one(ids: &[String], relevant: &std::collections::BTreeSet<String>, k: usize) -> f64 {
    let discount = |r: usize| 1.0 / ((r + 2) as f64).log2();
    let dcg: f64 = ids
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, id)| relevant.contains(*id))
        .map(|(r, _)| discount(r))
        .sum();
    let idcg: f64 = (0..relevant.len().min(k)).map(discount).sum();
    dcg / idcg
}

/// Mean NDCG@k over queries that have at least one relevant document.
pub fn ndcg_at_k(ranked: &[RankedList], judgments: &Judgments, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("NDCG cutoff must be at least 1".into()));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for r in ranked {
        match judgments.get(&r.query_id) {
            Some(rel) if !rel.is_empty() => {
                total += ndcg_one(&r.ids, rel, k);
                n += 1;
            }
            _ => log::warn!("query {} has no relevant documents; excluded from NDCG", r.query_id),
        }
    }
    if n == 0 {
        return Err(Error::Eval("no query has a relevant document".into()));
    }
    Ok(total / n as f64)
}

/// Summary record for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    #[serde(rename = "P@1")]
    pub p_at_1: f64,
    #[serde(rename = "NDCG@5")]
    pub ndcg_at_5: f64,
    pub n_queries: usize,
}

/// Per-query line of the detail file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryDetail {
    pub query_id: String,
    pub top: Vec<String>,
    pub scores: Vec<f64>,
    pub relevant: Vec<String>,
    pub hit_at_1: bool,
    pub ndcg_at_5: f64,
}

pub const NDCG_K: usize = 5;

/// Both metrics from existing rankings, plus per-query details.
pub fn score(task_name: &str, ranked: &[RankedList], judgments: &Judgments) -> Result<(TaskResult, Vec<QueryDetail>)> {
    let p1 = precision_at_1(ranked, judgments)?;
    let ndcg = ndcg_at_k(ranked, judgments, NDCG_K)?;
    let details = ranked
        .iter()
        .map(|r| {
            let rel = &judgments[&r.query_id];
            QueryDetail {
                query_id: r.query_id.clone(),
                top: r.ids.iter().take(NDCG_K).cloned().collect(),
                scores: r.scores.iter().take(NDCG_K).copied().collect(),
                relevant: rel.iter().cloned().collect(),
                hit_at_1: rel.contains(&r.ids[0]),
                ndcg_at_5: if rel.is_empty() { 0.0 } else { ndcg_one(&r.ids, rel, NDCG_K) },
            }
        })
        .collect();
    Ok((
        TaskResult {
            task: task_name.to_string(),
            p_at_1: p1,
            ndcg_at_5: ndcg,
            n_queries: ranked.len(),
        },
        details,
    ))
}

pub fn evaluate<F: Real>(
    task: &RetrievalTask,
    backbone: &Backbone,
    store: &ParamStore<F>,
    pooling: Pooling,
) -> Result<(TaskResult, Vec<QueryDetail>)> {
    let ranked = rank(task, backbone, store, pooling)?;
    score(&task.name, &ranked, &task.judgments)
}
