use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mmembed::backbone::{AttentionMode, Precision};
use mmembed::pipeline::{self, Overrides, RunConfig, Stage};
use mmembed::Error;

#[derive(Parser, Debug)]
#[command(name = "mmembed", version, about = "Train and evaluate interleaved text/image embedding models")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory written by gen-data.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Attention mode: causal (EOS pooling) or bidirectional (mean pooling).
    #[arg(long, global = true)]
    mode: Option<AttentionMode>,
    #[arg(long, global = true)]
    precision: Option<Precision>,
    /// Training steps for cpt or finetune.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Disable the masked-token term.
    #[arg(long, global = true)]
    no_mlm: bool,
    /// Disable the masked-patch term.
    #[arg(long, global = true)]
    no_mae: bool,
    /// Leave text-only pairs out of fine-tuning.
    #[arg(long, global = true)]
    no_text_pairs: bool,
    /// Leave long-form document pairs out of fine-tuning.
    #[arg(long, global = true)]
    no_longform_pairs: bool,
    /// Mix tasks within fine-tuning batches.
    #[arg(long, global = true)]
    no_task_batching: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus.
    GenData,
    /// Masked denoising pre-training.
    Cpt,
    /// Contrastive fine-tuning.
    Finetune {
        /// Stage-one checkpoint to start from.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Retrieval metrics on held-out tasks.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Task directory; repeatable. Defaults to every task under <data>/eval.
        #[arg(long)]
        task: Vec<PathBuf>,
    },
    /// Embed {id, sequence} lines.
    Embed {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
    },
}

fn run(cli: Cli) -> mmembed::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut o = Overrides {
        seed: cli.seed,
        mode: cli.mode,
        precision: cli.precision,
        steps: cli.steps,
        out_dir: cli.out,
        data_dir: cli.data,
        no_mlm: cli.no_mlm,
        no_mae: cli.no_mae,
        no_text_pairs: cli.no_text_pairs,
        no_longform_pairs: cli.no_longform_pairs,
        no_task_batching: cli.no_task_batching,
        ..Default::default()
    };
    let stage = match &cli.command {
        Command::Cpt => Stage::Cpt,
        Command::Finetune { init_from } => {
            o.init_from = init_from.clone();
            Stage::Finetune
        }
        Command::Eval { checkpoint, task } => {
            o.checkpoint = checkpoint.clone();
            o.eval_tasks = task.clone();
            Stage::Other
        }
        Command::Embed { checkpoint, .. } => {
            o.checkpoint = checkpoint.clone();
            Stage::Other
        }
        Command::GenData => Stage::Other,
    };
    cfg.apply(&o, stage);
    let cfg = cfg.resolve()?;
    match cli.command {
        Command::GenData => {
            pipeline::cmd_gen_data(&cfg)?;
        }
        Command::Cpt => {
            if let Some(m) = pipeline::cmd_cpt(&cfg)?.last() {
                println!("cpt: {} steps, final loss {:.4}", m.step, m.loss);
            }
        }
        Command::Finetune { .. } => {
            if let Some(m) = pipeline::cmd_finetune(&cfg)?.last() {
                println!("finetune: {} steps, final loss {:.4}", m.step, m.loss);
            }
        }
        Command::Eval { .. } => {
            for r in pipeline::cmd_eval(&cfg)? {
                println!("{}", serde_json::to_string(&r)?);
            }
        }
        Command::Embed { input, .. } => {
            let report = pipeline::cmd_embed(&cfg, &input)?;
            if !report.rejected.is_empty() {
                let lines: Vec<String> = report.rejected.iter().map(|(l, _)| l.to_string()).collect();
                return Err(Error::Data(format!(
                    "{} embeddings written; rejected input lines {}",
                    report.written,
                    lines.join(", ")
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
