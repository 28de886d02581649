use ndarray::Array2;

use super::embed::{pooled, prepare, Pooling};
use super::instance::ContrastiveInstance;
use crate::autograd::{Real, Tape, Var};
use crate::backbone::{Backbone, InterleavedSequence};
use crate::error::{Error, Result};

/// Which documents each query is scored against.
///
/// Documents are laid out instance by instance, positive first. Query `b`
/// sees its own documents plus every document of the other instances,
/// except (with dedup) those sharing its positive's id.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateLayout {
    /// Owning instance of each document column.
    pub owner: Vec<usize>,
    pub doc_ids: Vec<String>,
    /// Column of each query's positive.
    pub targets: Vec<usize>,
    /// `allowed[[b, j]]`: document `j` is in query `b`'s denominator.
    pub allowed: Array2<bool>,
}

impl CandidateLayout {
    pub fn new(batch: &[&ContrastiveInstance], dedup: bool) -> Self {
        let mut owner = Vec::new();
        let mut doc_ids = Vec::new();
        let mut targets = Vec::with_capacity(batch.len());
        for (b, inst) in batch.iter().enumerate() {
            targets.push(owner.len());
            for (id, _) in inst.documents() {
                owner.push(b);
                doc_ids.push(id.to_string());
            }
        }
        let allowed = Array2::from_shape_fn((batch.len(), owner.len()), |(b, j)| {
            owner[j] == b || !(dedup && doc_ids[j] == batch[b].ids.positive)
        });
        Self {
            owner,
            doc_ids,
            targets,
            allowed,
        }
    }

    pub fn denominator_size(&self, query: usize) -> usize {
        self.allowed.row(query).iter().filter(|&&a| a).count()
    }

    fn additive_mask<F: Real>(&self) -> Array2<F> {
        self.allowed
            .mapv(|a| if a { F::zero() } else { F::neg_infinity() })
    }
}

/// Batch-mean contrastive loss given query rows `q` and document rows `d`.
///
/// Per query: `−cos(q, d⁺)/τ + logsumexp_{j allowed} cos(q, d_j)/τ`, which is
/// `−log Φ(q,d⁺) / Σ_j Φ(q,d_j)` evaluated in log space.
pub fn contrastive_loss_from_rows<F: Real>(
    tape: &mut Tape<'_, F>,
    q: Var,
    d: Var,
    layout: &CandidateLayout,
    tau: f64,
) -> (Var, Var) {
    let qn = tape.l2_normalize_rows(q);
    let dn = tape.l2_normalize_rows(d);
    let cos = tape.matmul_nt(qn, dn);
    let logits = tape.scale(cos, F::of(1.0 / tau));
    let mask = tape.constant(layout.additive_mask());
    let logits = tape.add(logits, mask);
    let b = layout.targets.len();
    let weights = vec![F::of(1.0 / b as f64); b];
    (tape.cross_entropy(logits, &layout.targets, &weights), cos)
}

#[derive(Clone, Debug)]
pub struct ClLoss {
    pub loss: Var,
    /// Cosine of every query against every document column.
    pub cos: Var,
    pub layout: CandidateLayout,
}

impl ClLoss {
    /// Mean cosine to positives and mean cosine to every other candidate in
    /// the denominators.
    pub fn cosine_summary<F: Real>(&self, tape: &Tape<'_, F>) -> (f64, f64) {
        let cos = tape.value(self.cos);
        let (mut pos, mut neg, mut n_neg) = (0.0, 0.0, 0usize);
        for (b, &t) in self.layout.targets.iter().enumerate() {
            pos += cos[[b, t]].as_f64();
            for j in 0..cos.ncols() {
                if j != t && self.layout.allowed[[b, j]] {
                    neg += cos[[b, j]].as_f64();
                    n_neg += 1;
                }
            }
        }
        let nb = self.layout.targets.len() as f64;
        (pos / nb, if n_neg == 0 { 0.0 } else { neg / n_neg as f64 })
    }
}

/// Embeds every query and document of `batch` in one packed forward pass
/// and returns the mean loss.
pub fn contrastive_loss<F: Real>(
    tape: &mut Tape<'_, F>,
    backbone: &Backbone,
    batch: &[&ContrastiveInstance],
    tau: f64,
    dedup: bool,
    pooling: Pooling,
) -> Result<ClLoss> {
    if batch.is_empty() {
        return Err(Error::input("empty contrastive batch"));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let layout = CandidateLayout::new(batch, dedup);
    let mut seqs: Vec<&InterleavedSequence> = batch.iter().map(|i| &i.query).collect();
    for inst in batch {
        seqs.extend(inst.documents().map(|(_, s)| s));
    }
    let prepared = prepare(&seqs, pooling);
    let refs: Vec<&InterleavedSequence> = prepared.iter().map(|c| c.as_ref()).collect();
    let packed = backbone.pack(&refs, None)?;
    let rows = pooled(tape, backbone, &packed, pooling)?;
    let nq = batch.len();
    let q = tape.gather_rows(rows, &(0..nq).collect::<Vec<_>>());
    let d = tape.gather_rows(rows, &(nq..seqs.len()).collect::<Vec<_>>());
    let (loss, cos) = contrastive_loss_from_rows(tape, q, d, &layout, tau);
    Ok(ClLoss { loss, cos, layout })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParamStore;
    use crate::contrastive::instance::InstanceIds;
    use proptest::prelude::*;

    fn inst(id: &str, pos: &str, negs: &[&str]) -> ContrastiveInstance {
        let s = InterleavedSequence::from_tokens(&[5]);
        ContrastiveInstance {
            task_id: "t".into(),
            query: s.clone(),
            positive: s.clone(),
            negatives: negs.iter().map(|_| s.clone()).collect(),
            ids: InstanceIds {
                instance: id.into(),
                query: format!("{id}-q"),
                positive: pos.into(),
                negatives: negs.iter().map(|n| n.to_string()).collect(),
            },
        }
    }

    /// Direct evaluation of `−log Φ⁺ / ΣΦ` with `Φ = exp(cos/τ)`.
    fn direct_loss(q: &Array2<f64>, d: &Array2<f64>, layout: &CandidateLayout, tau: f64) -> f64 {
        let cos = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
            a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
        };
        let mut total = 0.0;
        for b in 0..q.nrows() {
            let phi = |j: usize| (cos(q.row(b), d.row(j)) / tau).exp();
            let den: f64 = (0..d.nrows()).filter(|&j| layout.allowed[[b, j]]).map(phi).sum();
            total += -(phi(layout.targets[b]) / den).ln();
        }
        total / q.nrows() as f64
    }

    fn loss_of(q: Array2<f64>, d: Array2<f64>, layout: &CandidateLayout, tau: f64) -> f64 {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let qv = tape.constant(q);
        let dv = tape.constant(d);
        let (l, _) = contrastive_loss_from_rows(&mut tape, qv, dv, layout, tau);
        tape.scalar(l)
    }

    #[test]
    fn denominator_counts() {
        let a = inst("a", "pa", &["na"]);
        let b = inst("b", "pb", &["nb"]);
        let layout = CandidateLayout::new(&[&a, &b], true);
        assert_eq!(layout.denominator_size(0), 4);
        assert_eq!(layout.targets, vec![0, 2]);

        let c = inst("c", "pc", &["x", "y"]);
        let d = inst("d", "pd", &["z", "w"]);
        let e = inst("e", "pe", &["u", "v"]);
        let layout = CandidateLayout::new(&[&c, &d, &e], true);
        for q in 0..3 {
            // 1 + K + (B − 1)(1 + K)
            assert_eq!(layout.denominator_size(q), 1 + 2 + 2 * 3);
        }
    }

    #[test]
    fn dedup_drops_copies_of_the_positive() {
        let a = inst("a", "doc1", &["n1"]);
        let b = inst("b", "doc2", &["doc1"]);
        let with = CandidateLayout::new(&[&a, &b], true);
        assert_eq!(with.denominator_size(0), 3);
        assert!(!with.allowed[[0, 3]]);
        let without = CandidateLayout::new(&[&a, &b], false);
        assert_eq!(without.denominator_size(0), 4);
    }

    #[test]
    fn equal_similarities_give_log_four() {
        let a = inst("a", "pa", &["na"]);
        let b = inst("b", "pb", &["nb"]);
        let layout = CandidateLayout::new(&[&a, &b], true);
        let q = Array2::from_elem((2, 3), 1.0);
        let d = Array2::from_elem((4, 3), 2.0);
        assert!((loss_of(q, d, &layout, 0.03) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_case() {
        // τ = 1, cos(q, d⁺) = 1, three other candidates orthogonal.
        let a = inst("a", "pa", &["na"]);
        let b = inst("b", "pb", &["nb"]);
        let mut layout = CandidateLayout::new(&[&a, &b], true);
        layout.targets.truncate(1);
        layout.allowed = layout.allowed.slice(ndarray::s![0..1, ..]).to_owned();
        let q = ndarray::array![[1.0, 0.0]];
        let d = ndarray::array![[2.0, 0.0], [0.0, 1.0], [0.0, -3.0], [0.0, 0.5]];
        let e = std::f64::consts::E;
        let expect = ((e + 3.0) / e).ln();
        assert!((loss_of(q, d, &layout, 1.0) - expect).abs() < 1e-12);
        assert!((expect - 0.7437).abs() < 1e-4);
    }

    #[test]
    fn single_candidate_is_zero() {
        let a = inst("a", "pa", &[]);
        let layout = CandidateLayout::new(&[&a], true);
        let l = loss_of(ndarray::array![[0.3, 0.1]], ndarray::array![[-1.0, 2.0]], &layout, 0.03);
        assert_eq!(l, 0.0);
    }

    fn arb_rows(n: usize) -> impl Strategy<Value = Array2<f64>> {
        prop::collection::vec(0.1f64..1.0, n * 4).prop_flat_map(move |mag| {
            prop::collection::vec(prop::bool::ANY, n * 4).prop_map(move |sign| {
                let v: Vec<f64> = mag.iter().zip(&sign).map(|(m, s)| if *s { *m } else { -*m }).collect();
                Array2::from_shape_vec((n, 4), v).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn log_space_matches_direct_evaluation(q in arb_rows(3), d in arb_rows(6)) {
            let insts = [inst("a", "p1", &["n1"]), inst("b", "p2", &["n2"]), inst("c", "p3", &["p1"])];
            let refs: Vec<&ContrastiveInstance> = insts.iter().collect();
            let layout = CandidateLayout::new(&refs, true);
            let got = loss_of(q.clone(), d.clone(), &layout, 1.0);
            let want = direct_loss(&q, &d, &layout, 1.0);
            prop_assert!((got - want).abs() < 1e-6);
            prop_assert!(got >= 0.0);
        }

        #[test]
        fn scaling_one_embedding_changes_nothing(q in arb_rows(2), d in arb_rows(4), k in 0usize..6, c in 0.01f64..100.0) {
            let insts = [inst("a", "p1", &["n1"]), inst("b", "p2", &["n2"])];
            let refs: Vec<&ContrastiveInstance> = insts.iter().collect();
            let layout = CandidateLayout::new(&refs, true);
            let base = loss_of(q.clone(), d.clone(), &layout, 0.03);
            let (mut q2, mut d2) = (q.clone(), d.clone());
            if k < 2 {
                q2.row_mut(k).mapv_inplace(|x| x * c);
            } else {
                d2.row_mut(k - 2).mapv_inplace(|x| x * c);
            }
            prop_assert!((loss_of(q2, d2, &layout, 0.03) - base).abs() < 1e-5);
        }
    }
}
