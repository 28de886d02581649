//! Finite-difference check of the joint reconstruction loss on a small model.

use mmembed::autograd::{parameter_gradients, ParamStore, Tape};
use mmembed::backbone::{BackboneConfig, InterleavedSequence};
use mmembed::cpt::{cpt_loss, mask_sequence, CptModel, MlmSampling, Objective};
use mmembed::rng::rng_from_seed;
use rand::Rng;

fn main() -> mmembed::Result<()> {
    let cfg = BackboneConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 20,
        patch_dim: 4,
        max_len: 16,
        ..Default::default()
    };
    let mut store = ParamStore::<f64>::new();
    let model = CptModel::init(&cfg, false, &mut store, &mut rng_from_seed(1))?;
    let mut seq = InterleavedSequence::from_tokens(&[5, 6, 7, 8]);
    seq.push_image(vec![vec![0.3, -0.2, 0.1, 0.4]; 3]);
    seq.push_tokens(&[9, 10]);
    let masked = mask_sequence(&seq, 0.4, 0.5, 7, MlmSampling::default())?;
    let loss = |s: &ParamStore<f64>| -> f64 {
        let mut t = Tape::new(s);
        let out = cpt_loss(&mut t, &model, &[&masked], Objective::default(), 1).unwrap();
        t.scalar(out.total.unwrap())
    };
    let (value, grads) = parameter_gradients(&store, |t| Ok(cpt_loss(t, &model, &[&masked], Objective::default(), 1)?.total.unwrap()))?;
    println!("loss {value:.6}");

    let mut rng = rng_from_seed(2);
    let h = 1e-6;
    for id in store.ids() {
        let idx = rng.random_range(0..store.get(id).len());
        let mut plus = store.clone();
        let mut minus = store.clone();
        plus.get_mut(id).as_slice_mut().unwrap()[idx] += h;
        minus.get_mut(id).as_slice_mut().unwrap()[idx] -= h;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let analytic = grads.get(id).as_slice().unwrap()[idx];
        println!("{:<32} analytic {analytic:>12.4e}  numeric {numeric:>12.4e}", store.name(id));
    }
    Ok(())
}
