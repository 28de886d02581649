//! Run configuration and the end-to-end commands behind the CLI.

mod commands;
mod config;

pub use commands::{
    cmd_cpt, cmd_embed, cmd_eval, cmd_finetune, cmd_gen_data, eval_task_dirs, EmbedReport, EmbeddingRecord,
    CHECKPOINT_FILE, CONFIG_FILE, DETAILS_DIR, EMBEDDINGS_FILE, METRICS_FILE, RESULTS_FILE,
};
pub use config::{Overrides, Paths, RunConfig, Stage, Toggles};
