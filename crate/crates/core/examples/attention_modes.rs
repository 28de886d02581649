//! Causal vs bidirectional attention on one backbone: prefix invariance and
//! the two pooling rules.

use mmembed::autograd::ParamStore;
use mmembed::backbone::{AttentionMode, Backbone, BackboneConfig, InterleavedSequence};
use mmembed::contrastive::{cosine, embed_bidirectional, embed_causal};
use mmembed::rng::rng_from_seed;

fn main() -> mmembed::Result<()> {
    let cfg = BackboneConfig::default();
    let mut store = ParamStore::<f32>::new();
    let backbone = Backbone::init(&cfg, &mut store, &mut rng_from_seed(0))?;

    let mut full = InterleavedSequence::from_tokens(&[10, 11, 12]);
    full.push_image(vec![vec![0.5; cfg.patch_dim]; 4]);
    full.push_tokens(&[13, 14]);
    let prefix = InterleavedSequence::new(full.elements()[..5].to_vec());

    for mode in [AttentionMode::Causal, AttentionMode::Bidirectional] {
        let a = backbone.hidden_states(&store, &prefix, mode)?.states;
        let b = backbone.hidden_states(&store, &full, mode)?.states;
        let diff = (&a - &b.slice(ndarray::s![..5, ..])).mapv(f32::abs).fold(0.0f32, |m, &x| m.max(x));
        println!("{:<13} max |h(prefix) - h(full)[..5]| = {diff:e}", mode.as_str());
    }

    let eos = embed_causal(&backbone, &store, &full)?;
    let mean = embed_bidirectional(&backbone, &store, &full)?;
    println!(
        "EOS-pooled and mean-pooled embeddings: dim {} and {}, cosine {:.4}",
        eos.vector.len(),
        mean.vector.len(),
        cosine(&eos.vector, &mean.vector)?
    );
    Ok(())
}
