//! Mask sampling and corruption of interleaved sequences.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::backbone::{is_special, Element, InterleavedSequence, Modality, MASK};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Positions selected for corruption.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct MaskPlan {
    /// Text positions replaced by the mask token (sorted).
    pub mlm: Vec<usize>,
    /// Image-patch positions replaced by Gaussian noise (sorted).
    pub mae: Vec<usize>,
    pub seed: u64,
}

/// A corrupted sequence together with its reconstruction targets.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSequence {
    pub corrupted: InterleavedSequence,
    pub original: InterleavedSequence,
    pub plan: MaskPlan,
}

#[derive(Clone, Copy, Debug)]
pub struct MlmSampling {
    /// After `max_retries` empty draws, pick one eligible position uniformly.
    pub force_one: bool,
    pub max_retries: usize,
}

impl Default for MlmSampling {
    fn default() -> Self {
        Self {
            force_one: true,
            max_retries: 8,
        }
    }
}

/// Text positions that may be masked: not the first position (there is no
/// preceding state to predict from) and not a special token.
pub fn mlm_eligible(seq: &InterleavedSequence) -> Vec<usize> {
    seq.elements()
        .iter()
        .enumerate()
        .skip(1)
        .filter_map(|(i, e)| match e {
            Element::Text(id) if !is_special(*id) => Some(i),
            _ => None,
        })
        .collect()
}

/// Bernoulli(`p`) selection over eligible text positions, redrawn while empty.
pub fn sample_mlm_mask(
    seq: &InterleavedSequence,
    p: f64,
    rng: &mut impl Rng,
    opts: MlmSampling,
) -> Result<Vec<usize>> {
    let eligible = mlm_eligible(seq);
    if eligible.is_empty() {
        return Err(Error::Mask("no maskable text positions".into()));
    }
    for _ in 0..=opts.max_retries {
        let picked: Vec<usize> = eligible
            .iter()
            .copied()
            .filter(|_| rng.random::<f64>() < p)
            .collect();
        if !picked.is_empty() {
            return Ok(picked);
        }
    }
    if opts.force_one {
        Ok(vec![eligible[rng.random_range(0..eligible.len())]])
    } else {
        Ok(Vec::new())
    }
}

/// Exactly `floor(ratio · P)` patches per image of `P` patches, chosen
/// uniformly without replacement.
pub fn sample_mae_mask(seq: &InterleavedSequence, ratio: f64, rng: &mut impl Rng) -> Vec<usize> {
    let mut out = Vec::new();
    for span in seq.image_spans() {
        let p = span.len();
        let k = ((ratio * p as f64).floor() as usize).min(p);
        if k == 0 {
            continue;
        }
        let mut picked: Vec<usize> = sample(rng, p, k).into_iter().map(|j| span.start + j).collect();
        picked.sort_unstable();
        out.extend(picked);
    }
    out
}

/// Replaces planned text positions by the mask token and planned patches by
/// fresh unit-Gaussian vectors.
pub fn apply_masks(seq: &InterleavedSequence, plan: &MaskPlan, rng: &mut impl Rng) -> Result<MaskedSequence> {
    let mut corrupted = seq.clone();
    let tags = seq.modality_tags();
    for &i in &plan.mlm {
        match tags.get(i) {
            Some(Modality::Text) => corrupted.elements_mut()[i] = Element::Text(MASK),
            Some(Modality::Image) => {
                return Err(Error::input(format!("MLM position {i} is an image patch")))
            }
            None => return Err(Error::input(format!("MLM position {i} out of range"))),
        }
    }
    for &i in &plan.mae {
        match corrupted.elements_mut().get_mut(i) {
            Some(Element::Patch { values, .. }) => {
                for v in values.iter_mut() {
                    *v = rng.sample::<f64, _>(StandardNormal) as f32;
                }
            }
            Some(Element::Text(_)) => {
                return Err(Error::input(format!("MAE position {i} is a text token")))
            }
            None => return Err(Error::input(format!("MAE position {i} out of range"))),
        }
    }
    Ok(MaskedSequence {
        corrupted,
        original: seq.clone(),
        plan: plan.clone(),
    })
}

/// Samples both masks and applies them, all from one seeded stream.
///
/// A sequence with nothing eligible for MLM is kept with an empty MLM set.
pub fn mask_sequence(
    seq: &InterleavedSequence,
    p_mlm: f64,
    r_mae: f64,
    seed: u64,
    opts: MlmSampling,
) -> Result<MaskedSequence> {
    let mut rng = rng_from_seed(seed);
    let mlm = match sample_mlm_mask(seq, p_mlm, &mut rng, opts) {
        Ok(m) => m,
        Err(Error::Mask(msg)) => {
            log::warn!("sequence skipped for MLM: {msg}");
            Vec::new()
        }
        Err(e) => return Err(e),
    };
    let mae = sample_mae_mask(seq, r_mae, &mut rng);
    let plan = MaskPlan { mlm, mae, seed };
    apply_masks(seq, &plan, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::EOS;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;

    fn image(n: usize, dim: usize) -> Vec<Vec<f32>> {
        (0..n).map(|k| vec![k as f32; dim]).collect()
    }

    #[test]
    fn zero_probability_without_forcing_is_empty() {
        let seq = InterleavedSequence::from_tokens(&[5, 6, 7, 8]);
        let opts = MlmSampling {
            force_one: false,
            max_retries: 3,
        };
        let m = sample_mlm_mask(&seq, 0.0, &mut rng_from_seed(1), opts).unwrap();
        assert!(m.is_empty());
        let forced = sample_mlm_mask(&seq, 0.0, &mut rng_from_seed(1), MlmSampling::default()).unwrap();
        assert_eq!(forced.len(), 1);
    }

    #[test]
    fn first_position_and_specials_are_never_masked() {
        let seq = InterleavedSequence::from_tokens(&[5, 6, EOS, 7]);
        assert_eq!(mlm_eligible(&seq), vec![1, 3]);
        for seed in 0..50 {
            let m = sample_mlm_mask(&seq, 0.9, &mut rng_from_seed(seed), MlmSampling::default()).unwrap();
            assert!(!m.contains(&0) && !m.contains(&2));
        }
        let only_first = InterleavedSequence::from_tokens(&[5]);
        assert!(matches!(
            sample_mlm_mask(&only_first, 0.5, &mut rng_from_seed(0), MlmSampling::default()),
            Err(Error::Mask(_))
        ));
    }

    #[test]
    fn mlm_count_matches_binomial_moments() {
        let seq = InterleavedSequence::from_tokens(&vec![9u32; 1001]);
        let counts: Vec<f64> = (0..200)
            .map(|s| {
                sample_mlm_mask(&seq, 0.4, &mut rng_from_seed(s), MlmSampling::default())
                    .unwrap()
                    .len() as f64
            })
            .collect();
        let mean = counts.iter().sum::<f64>() / counts.len() as f64;
        // σ of a single draw, then the standard error of the 200-draw mean.
        let sigma = (1000.0f64 * 0.4 * 0.6).sqrt();
        assert!((mean - 400.0).abs() < 3.0 * sigma, "mean {mean}");
        assert!((mean - 400.0).abs() < 3.0 * sigma / (200f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn mae_selects_exact_counts_per_image() {
        let mut seq = InterleavedSequence::from_tokens(&[5]);
        seq.push_image(image(16, 2));
        let m = sample_mae_mask(&seq, 0.5, &mut rng_from_seed(0));
        assert_eq!(m.len(), 8);
        assert!(sample_mae_mask(&seq, 0.0, &mut rng_from_seed(0)).is_empty());

        let mut two = InterleavedSequence::default();
        two.push_image(image(10, 2));
        two.push_tokens(&[5, 6]);
        two.push_image(image(10, 2));
        let m = sample_mae_mask(&two, 0.5, &mut rng_from_seed(4));
        let spans = two.image_spans();
        for span in spans {
            assert_eq!(m.iter().filter(|i| span.contains(i)).count(), 5);
        }
        assert!(sample_mae_mask(&InterleavedSequence::from_tokens(&[5, 6]), 0.5, &mut rng_from_seed(0)).is_empty());
    }

    #[test]
    fn empty_plan_is_identity() {
        let mut seq = InterleavedSequence::from_tokens(&[5, 6]);
        seq.push_image(image(4, 3));
        let m = apply_masks(&seq, &MaskPlan::default(), &mut rng_from_seed(0)).unwrap();
        assert_eq!(m.corrupted, seq);
    }

    #[test]
    fn masking_text_position() {
        let seq = InterleavedSequence::from_tokens(&[5, 6, 7, 8, 9]);
        let plan = MaskPlan {
            mlm: vec![3],
            ..Default::default()
        };
        let m = apply_masks(&seq, &plan, &mut rng_from_seed(0)).unwrap();
        assert_eq!(m.corrupted, InterleavedSequence::from_tokens(&[5, 6, 7, MASK, 9]));
    }

    #[test]
    fn wrong_modality_is_rejected() {
        let mut seq = InterleavedSequence::from_tokens(&[5, 6]);
        seq.push_image(image(2, 3));
        let bad = MaskPlan {
            mlm: vec![2],
            ..Default::default()
        };
        assert!(apply_masks(&seq, &bad, &mut rng_from_seed(0)).is_err());
        let bad = MaskPlan {
            mae: vec![1],
            ..Default::default()
        };
        assert!(apply_masks(&seq, &bad, &mut rng_from_seed(0)).is_err());
        let bad = MaskPlan {
            mae: vec![9],
            ..Default::default()
        };
        assert!(apply_masks(&seq, &bad, &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn noise_is_unit_gaussian() {
        let dim = 4;
        let mut seq = InterleavedSequence::default();
        seq.push_image(image(1000, dim));
        let plan = MaskPlan {
            mae: (0..1000).collect(),
            ..Default::default()
        };
        let mut rng = rng_from_seed(11);
        let mut sums = vec![0.0f64; dim];
        let mut sq = vec![0.0f64; dim];
        let mut n = 0.0;
        for _ in 0..100 {
            let m = apply_masks(&seq, &plan, &mut rng).unwrap();
            for el in m.corrupted.elements() {
                for (c, &v) in el.patch().unwrap().iter().enumerate() {
                    sums[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
                n += 1.0;
            }
        }
        for c in 0..dim {
            let mean = sums[c] / n;
            let var = sq[c] / n - mean * mean;
            assert!(mean.abs() < 0.02, "mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "var {var}");
        }
    }

    proptest! {
        #[test]
        fn unmasked_positions_are_bit_identical(seed in 0u64..1000, n_text in 2usize..12, n_patch in 0usize..10) {
            let mut seq = InterleavedSequence::from_tokens(&(0..n_text as u32).map(|i| 3 + i).collect::<Vec<_>>());
            if n_patch > 0 {
                seq.push_image((0..n_patch).map(|k| vec![k as f32 * 0.5, -1.25]).collect());
            }
            let m = mask_sequence(&seq, 0.4, 0.5, seed, MlmSampling::default()).unwrap();
            for (i, (a, b)) in m.corrupted.elements().iter().zip(seq.elements()).enumerate() {
                if m.plan.mlm.contains(&i) {
                    prop_assert_eq!(a, &Element::Text(MASK));
                } else if !m.plan.mae.contains(&i) {
                    prop_assert_eq!(a, b);
                }
            }
            prop_assert!(m.plan.mlm.iter().all(|i| !m.plan.mae.contains(i)));
        }
    }
}
