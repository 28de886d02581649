//! Generates the synthetic corpus and prints one instance of each task.
//!
//! cargo run --release --example gen_corpus [out_dir]

use mmembed::datapack::{generate_corpus, SynthSpec};

fn main() -> mmembed::Result<()> {
    let spec = SynthSpec::default();
    let corpus = generate_corpus(&spec)?;
    println!(
        "{} caption, {} long-form, {} text-only instances; {} CPT sequences",
        corpus.caption.len(),
        corpus.longform.len(),
        corpus.text.len(),
        corpus.cpt.len()
    );
    for task in &corpus.eval {
        println!("eval task {:<9} {} queries over a pool of {}", task.name, task.queries.len(), task.pool.len());
    }
    for inst in [&corpus.caption[0], &corpus.longform[0], &corpus.text[0]] {
        let key = corpus.answer_key.iter().find(|e| e.instance_id == inst.ids.instance).unwrap();
        println!(
            "\n[{}] {}: query {} elements, positive {} elements ({} images), {} hard negatives",
            inst.task_id,
            inst.ids.instance,
            inst.query.len(),
            inst.positive.len(),
            inst.positive.num_images(),
            inst.negatives.len()
        );
        println!("  attributes {:?}", key.attributes);
        for (id, attrs) in inst.ids.negatives.iter().zip(&key.negatives) {
            println!("  negative {id}: {attrs:?}");
        }
    }
    if let Some(dir) = std::env::args().nth(1) {
        corpus.save(&dir)?;
        println!("\nwritten to {dir}");
    }
    Ok(())
}
