//! The retrieval harness against two reference points: an oracle embedding
//! built from the generating attributes, and an untrained model.

use mmembed::autograd::ParamStore;
use mmembed::backbone::{Backbone, BackboneConfig};
use mmembed::contrastive::Pooling;
use mmembed::datapack::{generate_corpus, SynthSpec, CAPTION_TASK};
use mmembed::eval::{evaluate, rank_embeddings, score};
use mmembed::rng::rng_from_seed;

fn main() -> mmembed::Result<()> {
    let spec = SynthSpec::default();
    let corpus = generate_corpus(&spec)?;
    let task = corpus.eval.iter().find(|t| t.name == CAPTION_TASK).unwrap();

    let one_hot = |id: &str| {
        let attrs = &corpus.answer_key.iter().find(|e| e.instance_id == id).unwrap().attributes;
        let mut v = vec![0.0; spec.n_shapes + spec.n_colors + spec.n_counts];
        v[attrs["shape"] as usize] = 1.0;
        v[spec.n_shapes + attrs["color"] as usize] = 1.0;
        v[spec.n_shapes + spec.n_colors + attrs["count"] as usize] = 1.0;
        v
    };
    let q: Vec<_> = task.queries.iter().map(|i| (i.id.clone(), one_hot(&i.id))).collect();
    let p: Vec<_> = task.pool.iter().map(|i| (i.id.clone(), one_hot(&i.id))).collect();
    let (oracle, _) = score(&task.name, &rank_embeddings(&q, &p)?, &task.judgments)?;
    println!("attribute oracle : P@1 {:.3}  NDCG@5 {:.3}", oracle.p_at_1, oracle.ndcg_at_5);

    let mut store = ParamStore::<f32>::new();
    let backbone = Backbone::init(&BackboneConfig::default(), &mut store, &mut rng_from_seed(0))?;
    let (random, details) = evaluate(task, &backbone, &store, Pooling::BidirectionalMean)?;
    println!(
        "untrained model  : P@1 {:.3}  NDCG@5 {:.3}  (chance P@1 {:.3})",
        random.p_at_1,
        random.ndcg_at_5,
        1.0 / task.pool.len() as f64
    );
    let d = &details[0];
    println!("first query {} top-5 {:?}, relevant {:?}", d.query_id, d.top, d.relevant);
    Ok(())
}
