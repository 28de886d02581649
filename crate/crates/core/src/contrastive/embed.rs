use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Real, Tape, Var};
use crate::backbone::{AttentionMode, Backbone, Element, InterleavedSequence, PackedBatch, EOS};
use crate::error::{Error, Result};

/// How a sequence is reduced to one vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Causal attention, hidden state of the trailing EOS token.
    CausalEos,
    /// Bidirectional attention, mean over real positions.
    BidirectionalMean,
}

impl Pooling {
    pub fn attention(self) -> AttentionMode {
        match self {
            Pooling::CausalEos => AttentionMode::Causal,
            Pooling::BidirectionalMean => AttentionMode::Bidirectional,
        }
    }
}

impl From<AttentionMode> for Pooling {
    fn from(mode: AttentionMode) -> Self {
        match mode {
            AttentionMode::Causal => Pooling::CausalEos,
            AttentionMode::Bidirectional => Pooling::BidirectionalMean,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub pooling: Pooling,
}

impl Embedding {
    pub fn new(vector: Vec<f64>, pooling: Pooling) -> Result<Self> {
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric(0, "non-finite embedding"));
        }
        Ok(Self { vector, pooling })
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Appends EOS unless the sequence already ends with it.
pub fn with_eos(seq: &InterleavedSequence) -> InterleavedSequence {
    let mut out = seq.clone();
    if !out.ends_with_eos() {
        out.push(Element::Text(EOS));
    }
    out
}

/// One pooled row per segment of `batch`.
///
/// For [`Pooling::CausalEos`] the sequences in `batch` must already end with
/// EOS (see [`with_eos`]).
pub fn pooled<F: Real>(tape: &mut Tape<'_, F>, backbone: &Backbone, batch: &PackedBatch, pooling: Pooling) -> Result<Var> {
    let hidden = backbone.forward(tape, batch, pooling.attention())?;
    Ok(match pooling {
        Pooling::BidirectionalMean => tape.segment_mean(hidden, batch.segments()),
        Pooling::CausalEos => {
            let rows: Vec<usize> = batch
                .segments()
                .iter()
                .map(|s| s.start + s.valid - 1)
                .collect();
            tape.gather_rows(hidden, &rows)
        }
    })
}

/// Sequences as fed to the backbone for `pooling`.
pub fn prepare<'a>(seqs: &[&'a InterleavedSequence], pooling: Pooling) -> Vec<std::borrow::Cow<'a, InterleavedSequence>> {
    seqs.iter()
        .map(|s| match pooling {
            Pooling::CausalEos if !s.ends_with_eos() => std::borrow::Cow::Owned(with_eos(s)),
            _ => std::borrow::Cow::Borrowed(*s),
        })
        .collect()
}

/// Embeds `seqs` in chunks of `chunk` sequences; `pad_to` right-pads every
/// sequence to a common length.
pub fn embed_batch<F: Real>(
    backbone: &Backbone,
    store: &ParamStore<F>,
    seqs: &[&InterleavedSequence],
    pooling: Pooling,
    pad_to: Option<usize>,
) -> Result<Vec<Embedding>> {
    const CHUNK: usize = 64;
    let prepared = prepare(seqs, pooling);
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in prepared.chunks(CHUNK) {
        let refs: Vec<&InterleavedSequence> = chunk.iter().map(|c| c.as_ref()).collect();
        let batch = backbone.pack(&refs, pad_to)?;
        let mut tape = Tape::new(store);
        let rows = pooled(&mut tape, backbone, &batch, pooling)?;
        for r in tape.value(rows).outer_iter() {
            out.push(Embedding::new(r.iter().map(|x| x.as_f64()).collect(), pooling)?);
        }
    }
    Ok(out)
}

pub fn embed_bidirectional<F: Real>(backbone: &Backbone, store: &ParamStore<F>, seq: &InterleavedSequence) -> Result<Embedding> {
    Ok(embed_batch(backbone, store, &[seq], Pooling::BidirectionalMean, None)?.remove(0))
}

pub fn embed_causal<F: Real>(backbone: &Backbone, store: &ParamStore<F>, seq: &InterleavedSequence) -> Result<Embedding> {
    Ok(embed_batch(backbone, store, &[seq], Pooling::CausalEos, None)?.remove(0))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::input("cosine of a zero-norm vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// `cos(a, b)` and `log Φ = cos / τ`, where `Φ = exp(cos / τ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub cos: f64,
    pub log_phi: f64,
}

impl Similarity {
    pub fn phi(&self) -> f64 {
        self.log_phi.exp()
    }
}

pub fn similarity(a: &Embedding, b: &Embedding, tau: f64) -> Result<Similarity> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let cos = cosine(&a.vector, &b.vector)?;
    Ok(Similarity { cos, log_phi: cos / tau })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::rng::rng_from_seed;

    fn model() -> (Backbone, ParamStore<f64>) {
        let cfg = BackboneConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 12,
            patch_dim: 3,
            max_len: 24,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let b = Backbone::init(&cfg, &mut store, &mut rng_from_seed(4)).unwrap();
        (b, store)
    }

    fn seq() -> InterleavedSequence {
        let mut s = InterleavedSequence::from_tokens(&[5, 6]);
        s.push_image(vec![vec![0.3, -0.1, 0.8], vec![-0.4, 0.2, 0.0]]);
        s.push_tokens(&[7]);
        s
    }

    #[test]
    fn mean_pooling_is_row_average() {
        let (b, store) = model();
        let s = seq();
        let h = b.hidden_states(&store, &s, AttentionMode::Bidirectional).unwrap();
        let e = embed_bidirectional(&b, &store, &s).unwrap();
        let mean = h.states.mean_axis(ndarray::Axis(0)).unwrap();
        for (a, m) in e.vector.iter().zip(mean.iter()) {
            assert!((a - m).abs() < 1e-12);
        }
        let one = InterleavedSequence::from_tokens(&[5]);
        let h = b.hidden_states(&store, &one, AttentionMode::Bidirectional).unwrap();
        assert_eq!(embed_bidirectional(&b, &store, &one).unwrap().vector, h.states.row(0).to_vec());
    }

    #[test]
    fn causal_uses_eos_row() {
        let (b, store) = model();
        let s = with_eos(&seq());
        let h = b.hidden_states(&store, &s, AttentionMode::Causal).unwrap();
        let e = embed_causal(&b, &store, &seq()).unwrap();
        assert_eq!(e.vector, h.states.row(s.len() - 1).to_vec());
        // already terminated: not appended twice
        assert_eq!(embed_causal(&b, &store, &s).unwrap(), e);
    }

    #[test]
    fn padding_leaves_embeddings_unchanged() {
        let (b, store) = model();
        let s = seq();
        for pooling in [Pooling::BidirectionalMean, Pooling::CausalEos] {
            let plain = embed_batch(&b, &store, &[&s], pooling, None).unwrap();
            let padded = embed_batch(&b, &store, &[&s], pooling, Some(12)).unwrap();
            for (x, y) in plain[0].vector.iter().zip(&padded[0].vector) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn content_before_eos_matters() {
        let (b, store) = model();
        let mut other = seq();
        other.elements_mut()[0] = Element::Text(9);
        assert_ne!(embed_causal(&b, &store, &seq()).unwrap(), embed_causal(&b, &store, &other).unwrap());
    }

    #[test]
    fn similarity_values() {
        let e = |v: Vec<f64>| Embedding::new(v, Pooling::BidirectionalMean).unwrap();
        let s = similarity(&e(vec![1.0, 2.0]), &e(vec![1.0, 2.0]), 1.0).unwrap();
        assert!((s.phi() - std::f64::consts::E).abs() < 1e-12);
        let s = similarity(&e(vec![1.0, 0.0]), &e(vec![0.0, 3.0]), 1.0).unwrap();
        assert_eq!(s.phi(), 1.0);
        // cos 60° = 0.5
        let s = similarity(&e(vec![1.0, 0.0]), &e(vec![0.5, 0.75f64.sqrt()]), 0.03).unwrap();
        assert!((s.log_phi - 0.5 / 0.03).abs() < 1e-9);
        assert!(similarity(&e(vec![0.0, 0.0]), &e(vec![1.0, 0.0]), 1.0).is_err());
        assert!(similarity(&e(vec![1.0, 0.0]), &e(vec![1.0, 0.0]), 0.0).is_err());
    }
}
