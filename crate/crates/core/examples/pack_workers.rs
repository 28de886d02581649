//! Cost-balanced assignment of the CPT corpus to logical workers, compared
//! with dealing sequences out round-robin.

use mmembed::datapack::{compute_cost, generate_corpus, pack, CostModel, SynthSpec};

fn main() -> mmembed::Result<()> {
    let corpus = generate_corpus(&SynthSpec::default())?;
    // A strided sample mixes captions, long-form documents and text pairs.
    let batch: Vec<_> = corpus.cpt.iter().step_by(17).take(31).collect();
    // Quadratic cost, as for attention-dominated sequences.
    let model = CostModel { gamma: 2.0 };
    let costs = batch.iter().map(|s| compute_cost(s, &model)).collect::<mmembed::Result<Vec<_>>>()?;
    let total: f64 = costs.iter().sum();
    for workers in [2, 4, 8] {
        let lpt = pack(&costs, workers)?;
        let mut rr = vec![0.0; workers];
        for (i, c) in costs.iter().enumerate() {
            rr[i % workers] += c;
        }
        let rr_max = rr.iter().copied().fold(0.0, f64::max);
        println!(
            "{workers} workers: ideal {:>8.0}  LPT max {:>8.0}  round-robin max {:>8.0}",
            total / workers as f64,
            lpt.max_load(),
            rr_max
        );
    }
    Ok(())
}
