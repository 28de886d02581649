use serde::{Deserialize, Serialize};

use crate::backbone::InterleavedSequence;
use crate::error::{Error, Result};

/// Document ids of an instance, used for deduplicating in-batch negatives.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceIds {
    pub instance: String,
    pub query: String,
    pub positive: String,
    #[serde(default)]
    pub negatives: Vec<String>,
}

/// A query with its positive document and hard negatives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveInstance {
    pub task_id: String,
    pub query: InterleavedSequence,
    pub positive: InterleavedSequence,
    #[serde(default)]
    pub negatives: Vec<InterleavedSequence>,
    pub ids: InstanceIds,
}

impl ContrastiveInstance {
    pub fn validate(&self) -> Result<()> {
        if self.task_id.is_empty() {
            return Err(Error::Data(format!("instance {} has an empty task_id", self.ids.instance)));
        }
        if self.negatives.len() != self.ids.negatives.len() {
            return Err(Error::Data(format!(
                "instance {}: {} negatives but {} negative ids",
                self.ids.instance,
                self.negatives.len(),
                self.ids.negatives.len()
            )));
        }
        if self.ids.negatives.contains(&self.ids.positive) {
            return Err(Error::Data(format!(
                "instance {}: positive id {} also listed as a hard negative",
                self.ids.instance, self.ids.positive
            )));
        }
        Ok(())
    }

    /// Positive first, then hard negatives.
    pub fn documents(&self) -> impl Iterator<Item = (&str, &InterleavedSequence)> {
        std::iter::once((self.ids.positive.as_str(), &self.positive)).chain(
            self.ids
                .negatives
                .iter()
                .map(String::as_str)
                .zip(&self.negatives),
        )
    }
}
