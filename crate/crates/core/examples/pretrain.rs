//! Masked denoising pre-training on the synthetic corpus, with either term
//! switchable from the command line.
//!
//! cargo run --release --example pretrain [steps] [--no-mlm] [--no-mae]

use mmembed::backbone::BackboneConfig;
use mmembed::cpt::{pretrain, CptConfig, CptState};
use mmembed::datapack::{generate_corpus, CostModel, SynthSpec};

fn main() -> mmembed::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps = args.iter().find_map(|a| a.parse().ok()).unwrap_or(200);
    let corpus = generate_corpus(&SynthSpec::default())?;
    let cfg = CptConfig {
        steps,
        // The default rate suits a pretrained backbone; this one starts random.
        lr: 1e-3,
        mlm_on: !args.iter().any(|a| a == "--no-mlm"),
        mae_on: !args.iter().any(|a| a == "--no-mae"),
        ..CptConfig::default()
    };
    let mut state = CptState::<f32>::new(&BackboneConfig::default(), &cfg, 0)?;
    pretrain(&mut state, &corpus.cpt, &cfg, &CostModel::default(), |m| {
        if m.step == 1 || m.step % 25 == 0 {
            println!(
                "step {:>4}  loss {:.4}  mlm {:.4}  mae {:.4}  |g| {:.3}",
                m.step, m.loss, m.loss_mlm, m.loss_mae, m.grad_norm
            );
        }
    })?;
    Ok(())
}
