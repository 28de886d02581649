//! Contrastive fine-tuning on all three synthetic tasks, evaluated on the
//! held-out splits before and after.
//!
//! cargo run --release --example finetune [steps]

use mmembed::backbone::BackboneConfig;
use mmembed::contrastive::{finetune, ClConfig, ClState, Pooling};
use mmembed::datapack::{generate_corpus, SynthSpec};
use mmembed::eval::evaluate;

fn report(state: &ClState<f32>, corpus: &mmembed::datapack::SynthCorpus) -> mmembed::Result<()> {
    for task in &corpus.eval {
        let (r, _) = evaluate(task, &state.backbone, &state.store, Pooling::BidirectionalMean)?;
        println!("  {:<9} P@1 {:.3}  NDCG@5 {:.3}", r.task, r.p_at_1, r.ndcg_at_5);
    }
    Ok(())
}

fn main() -> mmembed::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let corpus = generate_corpus(&SynthSpec::default())?;
    let data: Vec<_> = [&corpus.caption, &corpus.longform, &corpus.text].into_iter().flatten().cloned().collect();
    let cl = ClConfig {
        steps,
        lr: 1e-3,
        ..ClConfig::default()
    };
    let mut state = ClState::<f32>::new(&BackboneConfig::default(), &cl, 0)?;
    println!("random init:");
    report(&state, &corpus)?;
    finetune(&mut state, &data, &cl, |m| {
        if m.step % 50 == 0 {
            println!(
                "step {:>4} [{}] loss {:.4}  pos {:.3}  neg {:.3}",
                m.step,
                m.task_id.as_deref().unwrap_or("mixed"),
                m.loss,
                m.mean_pos_cos,
                m.mean_neg_cos
            );
        }
    })?;
    println!("after {steps} steps:");
    report(&state, &corpus)
}
