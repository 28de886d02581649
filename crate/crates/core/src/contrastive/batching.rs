use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::instance::ContrastiveInstance;
use crate::error::{Error, Result};

/// Indices into the dataset forming one training batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// Set when every member shares one task.
    pub task_id: Option<String>,
    /// Shorter than the configured batch size.
    pub partial: bool,
}

fn chunk(indices: &[usize], batch_size: usize, drop_last: bool, task_id: Option<&str>) -> Vec<Batch> {
    indices
        .chunks(batch_size)
        .filter(|c| !(drop_last && c.len() < batch_size))
        .map(|c| Batch {
            indices: c.to_vec(),
            task_id: task_id.map(str::to_string),
            partial: c.len() < batch_size,
        })
        .collect()
}

fn check_batch_size(batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if batch_size < 2 {
        log::warn!("batch_size {batch_size}: no in-batch negatives");
    }
    Ok(())
}

/// One epoch of single-task batches.
///
/// Instances are shuffled within each task and cut into batches; the
/// trailing short batch of a task is kept (flagged `partial`) unless
/// `drop_last`. The resulting batches are then shuffled so tasks interleave.
pub fn task_aware_batches(
    data: &[ContrastiveInstance],
    batch_size: usize,
    drop_last: bool,
    rng: &mut impl Rng,
) -> Result<Vec<Batch>> {
    check_batch_size(batch_size)?;
    let mut by_task: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, inst) in data.iter().enumerate() {
        if inst.task_id.is_empty() {
            return Err(Error::Data(format!("instance {} has no task_id", inst.ids.instance)));
        }
        by_task.entry(&inst.task_id).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (task, mut idx) in by_task {
        idx.shuffle(rng);
        batches.extend(chunk(&idx, batch_size, drop_last, Some(task)));
    }
    batches.shuffle(rng);
    Ok(batches)
}

/// One epoch of batches drawn from the whole dataset regardless of task.
pub fn shuffled_batches(
    data: &[ContrastiveInstance],
    batch_size: usize,
    drop_last: bool,
    rng: &mut impl Rng,
) -> Result<Vec<Batch>> {
    check_batch_size(batch_size)?;
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(rng);
    let mut out = chunk(&idx, batch_size, drop_last, None);
    for b in &mut out {
        let first = &data[b.indices[0]].task_id;
        if b.indices.iter().all(|&i| &data[i].task_id == first) {
            b.task_id = Some(first.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::InterleavedSequence;
    use crate::contrastive::instance::InstanceIds;
    use crate::rng::rng_from_seed;

    fn dataset(tasks: &[(&str, usize)]) -> Vec<ContrastiveInstance> {
        let s = InterleavedSequence::from_tokens(&[4]);
        let mut out = Vec::new();
        for (t, n) in tasks {
            for i in 0..*n {
                out.push(ContrastiveInstance {
                    task_id: t.to_string(),
                    query: s.clone(),
                    positive: s.clone(),
                    negatives: vec![],
                    ids: InstanceIds {
                        instance: format!("{t}{i}"),
                        query: format!("{t}{i}q"),
                        positive: format!("{t}{i}p"),
                        negatives: vec![],
                    },
                });
            }
        }
        out
    }

    #[test]
    fn per_task_sizes() {
        let data = dataset(&[("A", 100), ("B", 60)]);
        let batches = task_aware_batches(&data, 32, false, &mut rng_from_seed(1)).unwrap();
        let sizes = |t: &str| {
            let mut s: Vec<usize> = batches
                .iter()
                .filter(|b| b.task_id.as_deref() == Some(t))
                .map(|b| b.indices.len())
                .collect();
            s.sort_unstable_by(|a, b| b.cmp(a));
            s
        };
        assert_eq!(sizes("A"), vec![32, 32, 32, 4]);
        assert_eq!(sizes("B"), vec![32, 28]);
        assert_eq!(batches.len(), 6);
        for b in &batches {
            let t = b.task_id.as_deref().unwrap();
            assert!(b.indices.iter().all(|&i| data[i].task_id == t));
            assert_eq!(b.partial, b.indices.len() < 32);
        }

        let dropped = task_aware_batches(&data, 32, true, &mut rng_from_seed(1)).unwrap();
        assert_eq!(dropped.len(), 4);
        assert!(dropped.iter().all(|b| !b.partial));
    }

    #[test]
    fn epoch_covers_each_instance_once() {
        let data = dataset(&[("A", 37), ("B", 11), ("C", 50)]);
        for batches in [
            task_aware_batches(&data, 8, false, &mut rng_from_seed(3)).unwrap(),
            shuffled_batches(&data, 8, false, &mut rng_from_seed(3)).unwrap(),
        ] {
            let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..data.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn single_task_is_plain_shuffling() {
        let data = dataset(&[("A", 20)]);
        let a = task_aware_batches(&data, 6, false, &mut rng_from_seed(5)).unwrap();
        assert_eq!(a.iter().map(|b| b.indices.len()).sum::<usize>(), 20);
        assert!(a.iter().all(|b| b.task_id.as_deref() == Some("A")));
    }

    #[test]
    fn shuffled_batches_mix_tasks() {
        let data = dataset(&[("A", 50), ("B", 50)]);
        let batches = shuffled_batches(&data, 16, false, &mut rng_from_seed(2)).unwrap();
        assert!(batches.iter().any(|b| b.task_id.is_none()));
    }

    #[test]
    fn zero_batch_size_rejected() {
        let data = dataset(&[("A", 3)]);
        assert!(task_aware_batches(&data, 0, false, &mut rng_from_seed(0)).is_err());
    }
}
