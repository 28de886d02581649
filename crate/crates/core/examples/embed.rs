//! Embeds held-out caption queries and images with a briefly fine-tuned model
//! and prints their cosine similarities.

use mmembed::backbone::BackboneConfig;
use mmembed::contrastive::{cosine, embed_batch, finetune, ClConfig, ClState, Pooling};
use mmembed::datapack::{generate_corpus, SynthSpec};

fn main() -> mmembed::Result<()> {
    let corpus = generate_corpus(&SynthSpec::default())?;
    let cl = ClConfig {
        lr: 1e-3,
        steps: 150,
        ..ClConfig::default()
    };
    let mut state = ClState::<f32>::new(&BackboneConfig::default(), &cl, 0)?;
    finetune(&mut state, &corpus.caption, &cl, |_| {})?;

    let task = &corpus.eval[0];
    let queries: Vec<_> = task.queries.iter().step_by(2).take(4).collect();
    let docs: Vec<_> = task.pool.iter().take(4).collect();
    let embed = |items: &[&mmembed::eval::Item]| {
        let seqs: Vec<_> = items.iter().map(|i| &i.sequence).collect();
        embed_batch(&state.backbone, &state.store, &seqs, Pooling::BidirectionalMean, None)
    };
    let (q, d) = (embed(&queries)?, embed(&docs)?);
    print!("{:>22}", "");
    for doc in &docs {
        print!("{:>18}", doc.id);
    }
    println!();
    for (item, qv) in queries.iter().zip(&q) {
        print!("{:>22}", item.id);
        for dv in &d {
            print!("{:>18.3}", cosine(&qv.vector, &dv.vector)?);
        }
        println!();
    }
    Ok(())
}
