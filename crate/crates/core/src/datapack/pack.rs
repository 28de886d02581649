//! Cost model and longest-processing-time packing onto logical workers.

use serde::{Deserialize, Serialize};

use crate::backbone::InterleavedSequence;
use crate::error::{Error, Result};

/// Compute cost of a sequence: `T^gamma` where `T` counts tokens and patches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub gamma: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { gamma: 1.0 }
    }
}

impl CostModel {
    pub fn cost_of_len(&self, len: usize) -> f64 {
        (len as f64).powf(self.gamma)
    }
}

pub fn compute_cost(seq: &InterleavedSequence, model: &CostModel) -> Result<f64> {
    if seq.is_empty() {
        return Err(Error::input("cannot cost an empty sequence"));
    }
    Ok(model.cost_of_len(seq.num_text() + seq.num_patches()))
}

/// Result of distributing sequences over workers.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PackAssignment {
    pub workers: usize,
    /// Worker index of each input sequence.
    pub worker_of: Vec<usize>,
    pub loads: Vec<f64>,
}

impl PackAssignment {
    pub fn max_load(&self) -> f64 {
        self.loads.iter().copied().fold(0.0, f64::max)
    }

    pub fn min_load(&self) -> f64 {
        self.loads.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn idle_workers(&self) -> usize {
        (0..self.workers)
            .filter(|w| !self.worker_of.contains(w))
            .count()
    }

    /// Input indices assigned to each worker, in input order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.workers];
        for (i, &w) in self.worker_of.iter().enumerate() {
            out[w].push(i);
        }
        out
    }
}

/// Longest-processing-time greedy: costs in descending order (stable for
/// ties), each to the least-loaded worker (lowest index on ties).
pub fn pack(costs: &[f64], workers: usize) -> Result<PackAssignment> {
    if workers == 0 {
        return Err(Error::Config("need at least one worker".into()));
    }
    if let Some(c) = costs.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
        return Err(Error::input(format!("cost {c} is not positive")));
    }
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.sort_by(|&a, &b| costs[b].total_cmp(&costs[a]));
    let mut loads = vec![0.0; workers];
    let mut worker_of = vec![0; costs.len()];
    for i in order {
        let mut best = 0;
        for w in 1..workers {
            if loads[w] < loads[best] {
                best = w;
            }
        }
        loads[best] += costs[i];
        worker_of[i] = best;
    }
    let out = PackAssignment {
        workers,
        worker_of,
        loads,
    };
    if workers > costs.len() {
        log::debug!("{} of {workers} workers idle", out.idle_workers());
    }
    Ok(out)
}

pub fn pack_sequences(seqs: &[&InterleavedSequence], workers: usize, model: &CostModel) -> Result<PackAssignment> {
    let costs = seqs
        .iter()
        .map(|s| compute_cost(s, model))
        .collect::<Result<Vec<_>>>()?;
    pack(&costs, workers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive minimum makespan over all `m^n` assignments.
    fn brute_force_optimum(costs: &[f64], m: usize) -> f64 {
        let n = costs.len();
        let total = m.pow(n as u32);
        let mut best = f64::INFINITY;
        let mut loads = vec![0.0; m];
        for code in 0..total {
            loads.iter_mut().for_each(|l| *l = 0.0);
            let mut c = code;
            for &cost in costs {
                loads[c % m] += cost;
                c /= m;
            }
            best = best.min(loads.iter().copied().fold(0.0, f64::max));
        }
        best
    }

    #[test]
    fn costs_follow_definition() {
        let mut seq = InterleavedSequence::from_tokens(&[5; 10]);
        seq.push_image(vec![vec![0.0; 2]; 16]);
        assert_eq!(compute_cost(&seq, &CostModel::default()).unwrap(), 26.0);
        let five = InterleavedSequence::from_tokens(&[5; 5]);
        assert_eq!(compute_cost(&five, &CostModel { gamma: 2.0 }).unwrap(), 25.0);
        let before = compute_cost(&seq, &CostModel::default()).unwrap();
        seq.push_image(vec![vec![0.0; 2]]);
        assert!(compute_cost(&seq, &CostModel::default()).unwrap() > before);
        assert!(compute_cost(&InterleavedSequence::default(), &CostModel::default()).is_err());
    }

    #[test]
    fn single_worker_takes_everything() {
        let a = pack(&[3.0, 1.0, 2.0], 1).unwrap();
        assert_eq!(a.max_load(), 6.0);
    }

    #[test]
    fn textbook_instance_is_optimal() {
        let costs = [4.0, 3.0, 3.0, 2.0];
        let a = pack(&costs, 2).unwrap();
        assert_eq!(a.loads, vec![6.0, 6.0]);
        assert_eq!(brute_force_optimum(&costs, 2), 6.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let a = pack(&[1.0, 1.0, 1.0], 3).unwrap();
        assert_eq!(a.worker_of, vec![0, 1, 2]);
        let idle = pack(&[1.0], 3).unwrap();
        assert_eq!(idle.idle_workers(), 2);
        assert!(pack(&[1.0, 0.0], 2).is_err());
        assert!(pack(&[1.0], 0).is_err());
    }

    proptest! {
        #[test]
        fn graham_bound_and_conservation(
            costs in prop::collection::vec(1u32..50, 1..9),
            m in 1usize..4,
        ) {
            let costs: Vec<f64> = costs.into_iter().map(f64::from).collect();
            let a = pack(&costs, m).unwrap();
            let sum: f64 = costs.iter().sum();
            prop_assert_eq!(a.loads.iter().sum::<f64>(), sum);
            for (w, members) in a.members().iter().enumerate() {
                prop_assert_eq!(members.iter().map(|&i| costs[i]).sum::<f64>(), a.loads[w]);
            }
            let opt = brute_force_optimum(&costs, m);
            prop_assert!(a.max_load() <= (4.0 / 3.0 - 1.0 / (3.0 * m as f64)) * opt + 1e-9);
            prop_assert_eq!(pack(&costs, m).unwrap(), a);
        }

        #[test]
        fn balance_trend(costs in prop::collection::vec(1.0f64..10.0, 60..120), m in 2usize..5) {
            let a = pack(&costs, m).unwrap();
            let mean = costs.iter().sum::<f64>() / m as f64;
            let max_cost = costs.iter().copied().fold(0.0, f64::max);
            prop_assert!((a.max_load() - a.min_load()) / mean <= max_cost / mean + 1e-12);
        }
    }
}
