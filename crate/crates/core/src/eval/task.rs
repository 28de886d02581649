use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::InterleavedSequence;
use crate::error::{Error, Result};
use crate::jsonl;

/// A query or a pool document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub sequence: InterleavedSequence,
}

/// Binary relevance judgments for one query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qrel {
    pub query_id: String,
    pub relevant: Vec<String>,
}

pub type Judgments = BTreeMap<String, BTreeSet<String>>;

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalTask {
    pub name: String,
    pub queries: Vec<Item>,
    pub pool: Vec<Item>,
    pub judgments: Judgments,
}

pub const QUERIES_FILE: &str = "queries.jsonl";
pub const POOL_FILE: &str = "pool.jsonl";
pub const QRELS_FILE: &str = "qrels.jsonl";

impl RetrievalTask {
    pub fn new(name: impl Into<String>, queries: Vec<Item>, pool: Vec<Item>, qrels: Vec<Qrel>) -> Result<Self> {
        let mut judgments = Judgments::new();
        for q in qrels {
            judgments.entry(q.query_id).or_default().extend(q.relevant);
        }
        let task = Self {
            name: name.into(),
            queries,
            pool,
            judgments,
        };
        task.validate()?;
        Ok(task)
    }

    /// Every judged document exists in the pool, and ids are unique.
    pub fn validate(&self) -> Result<()> {
        let pool: BTreeSet<&str> = self.pool.iter().map(|d| d.id.as_str()).collect();
        if pool.len() != self.pool.len() {
            return Err(Error::Eval(format!("task {}: duplicate pool ids", self.name)));
        }
        let queries: BTreeSet<&str> = self.queries.iter().map(|q| q.id.as_str()).collect();
        if queries.len() != self.queries.len() {
            return Err(Error::Eval(format!("task {}: duplicate query ids", self.name)));
        }
        for (q, docs) in &self.judgments {
            if !queries.contains(q.as_str()) {
                return Err(Error::Eval(format!("task {}: judgment for unknown query {q}", self.name)));
            }
            if let Some(d) = docs.iter().find(|d| !pool.contains(d.as_str())) {
                return Err(Error::Eval(format!("task {}: judged doc {d} is not in the pool", self.name)));
            }
        }
        Ok(())
    }

    pub fn qrels(&self) -> Vec<Qrel> {
        self.judgments
            .iter()
            .map(|(q, d)| Qrel {
                query_id: q.clone(),
                relevant: d.iter().cloned().collect(),
            })
            .collect()
    }

    /// Writes the three task files into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        jsonl::write(dir.join(QUERIES_FILE), &self.queries)?;
        jsonl::write(dir.join(POOL_FILE), &self.pool)?;
        jsonl::write(dir.join(QRELS_FILE), self.qrels())
    }

    /// Reads a task directory; the task is named after the directory.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "task".into());
        let read = |f: &str| -> Result<()> {
            if dir.join(f).is_file() {
                Ok(())
            } else {
                Err(Error::Data(format!("missing {}", dir.join(f).display())))
            }
        };
        read(QUERIES_FILE)?;
        read(POOL_FILE)?;
        read(QRELS_FILE)?;
        Self::new(
            name,
            jsonl::read(dir.join(QUERIES_FILE))?,
            jsonl::read(dir.join(POOL_FILE))?,
            jsonl::read(dir.join(QRELS_FILE))?,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str) -> Item {
        Item {
            id: id.into(),
            sequence: InterleavedSequence::from_tokens(&[4]),
        }
    }

    #[test]
    fn unknown_judged_doc_rejected() {
        let qrels = vec![Qrel {
            query_id: "q".into(),
            relevant: vec!["missing".into()],
        }];
        assert!(matches!(
            RetrievalTask::new("t", vec![item("q")], vec![item("d")], qrels),
            Err(Error::Eval(_))
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let qrels = vec![Qrel {
            query_id: "q".into(),
            relevant: vec!["d".into()],
        }];
        let task = RetrievalTask::new("t", vec![item("q")], vec![item("d"), item("e")], qrels).unwrap();
        let path = dir.path().join("t");
        task.save(&path).unwrap();
        assert_eq!(RetrievalTask::load(&path).unwrap(), task);
    }
}
