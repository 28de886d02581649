//! The whole recipe through the command layer: generate data, pre-train,
//! fine-tune from the pre-trained weights, evaluate.
//!
//! cargo run --release --example two_stage [out_dir]

use mmembed::pipeline::{cmd_cpt, cmd_eval, cmd_finetune, cmd_gen_data, RunConfig, CHECKPOINT_FILE};

fn main() -> mmembed::Result<()> {
    let root = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "two_stage_run".into()));
    let mut cfg = RunConfig::default();
    // Short budgets keep the example to about a minute.
    cfg.cpt.steps = 100;
    cfg.finetune.steps = 300;
    cfg.finetune.lr = 1e-3;
    cfg.paths.data_dir = Some(root.join("data"));

    let stage = |out: &str| {
        let mut c = cfg.clone();
        c.paths.out_dir = Some(root.join(out));
        c
    };
    cmd_gen_data(&stage("data").resolve()?)?;
    let cpt = cmd_cpt(&stage("cpt").resolve()?)?;
    println!("cpt: final loss {:.4}", cpt.last().map_or(f64::NAN, |m| m.loss));

    let mut ft = stage("finetune");
    ft.paths.init_from = Some(root.join("cpt").join(CHECKPOINT_FILE));
    let metrics = cmd_finetune(&ft.resolve()?)?;
    println!("finetune: final loss {:.4}", metrics.last().map_or(f64::NAN, |m| m.loss));

    let mut ev = stage("eval");
    ev.paths.checkpoint = Some(root.join("finetune").join(CHECKPOINT_FILE));
    for r in cmd_eval(&ev.resolve()?)? {
        println!("{:<9} P@1 {:.3}  NDCG@5 {:.3}  ({} queries)", r.task, r.p_at_1, r.ndcg_at_5, r.n_queries);
    }
    println!("outputs under {}", root.display());
    Ok(())
}
