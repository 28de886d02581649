//! Synthetic corpus generation and cost-balanced packing.

mod pack;
mod synth;

pub use pack::{compute_cost, pack, pack_sequences, CostModel, PackAssignment};
pub use synth::{
    generate_corpus, load_instances, AnswerKeyEntry, Attributes, Combo, SynthCorpus, SynthSpec, ANSWER_KEY_FILE,
    CAPTION_FILE, CAPTION_TASK, CPT_FILE, EVAL_DIR, LONGFORM_FILE, LONGFORM_TASK, TEXT_FILE, TEXT_TASK,
};
