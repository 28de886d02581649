#![allow(dead_code)]

use std::path::Path;

/// A model and corpus small enough for a few training steps per test.
pub const TINY: &str = r#"
seed = 1
[backbone]
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
[data]
caption_pairs = 24
longform_pairs = 12
text_pairs = 20
[cpt]
steps = 3
batch_size = 8
lr = 1e-3
[finetune]
steps = 4
batch_size = 8
lr = 1e-3
"#;

pub fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, TINY).unwrap();
    path
}
