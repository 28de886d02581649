use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::autograd::Real;
use crate::backbone::{Backbone, Checkpoint, InterleavedSequence, Precision};
use crate::contrastive::{embed_batch, finetune, ClMetrics, ClState, Pooling};
use crate::cpt::{pretrain, CptMetrics, CptState};
use crate::datapack::{generate_corpus, load_instances, CostModel, SynthCorpus, CPT_FILE, EVAL_DIR};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Item, QueryDetail, RetrievalTask, TaskResult};
use crate::jsonl::{self, Sink};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const DETAILS_DIR: &str = "details";
pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join(CONFIG_FILE);
    std::fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Data(format!("{what} not found: {}", path.display())))
    }
}

/// Writes the synthetic corpus into the output directory.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<SynthCorpus> {
    let out = cfg.out_dir()?;
    let corpus = generate_corpus(&cfg.data)?;
    corpus.save(out)?;
    write_config(cfg, out)?;
    log::info!(
        "wrote {} caption, {} long-form, {} text instances to {}",
        corpus.caption.len(),
        corpus.longform.len(),
        corpus.text.len(),
        out.display()
    );
    Ok(corpus)
}

fn run_cpt<F: Real>(cfg: &RunConfig, corpus: &[InterleavedSequence], out: &Path) -> Result<Vec<CptMetrics>> {
    let mut state = CptState::<F>::new(&cfg.backbone, &cfg.cpt, cfg.init_seed())?;
    let mut sink = Sink::create(out.join(METRICS_FILE))?;
    let mut history = Vec::with_capacity(cfg.cpt.steps);
    let mut sink_err = None;
    pretrain(&mut state, corpus, &cfg.cpt, &CostModel::default(), |m| {
        if m.step % 50 == 0 || m.step == 1 {
            log::info!("cpt step {} loss {:.4} mlm {:.4} mae {:.4}", m.step, m.loss, m.loss_mlm, m.loss_mae);
        }
        if let Err(e) = sink.push(m) {
            sink_err.get_or_insert(e);
        }
        history.push(m.clone());
    })?;
    if let Some(e) = sink_err {
        return Err(e);
    }
    sink.finish()?;
    state.checkpoint().save(out.join(CHECKPOINT_FILE))?;
    Ok(history)
}

/// Stage one on `<data_dir>/cpt_corpus.jsonl`; writes checkpoint and metrics.
pub fn cmd_cpt(cfg: &RunConfig) -> Result<Vec<CptMetrics>> {
    let path = cfg.data_dir()?.join(CPT_FILE);
    require_file(&path, "CPT corpus")?;
    let corpus: Vec<InterleavedSequence> = jsonl::read(&path)?;
    for (i, s) in corpus.iter().enumerate() {
        s.validate(cfg.backbone.vocab_size, cfg.backbone.patch_dim)
            .map_err(|e| Error::Data(format!("{} sequence {}: {e}", path.display(), i + 1)))?;
    }
    let out = cfg.out_dir()?;
    create_dir(out)?;
    write_config(cfg, out)?;
    match cfg.backbone.precision {
        Precision::F32 => run_cpt::<f32>(cfg, &corpus, out),
        Precision::F64 => run_cpt::<f64>(cfg, &corpus, out),
    }
}

fn run_finetune<F: Real>(
    cfg: &RunConfig,
    data: &[crate::contrastive::ContrastiveInstance],
    init: Option<&Checkpoint>,
    out: &Path,
) -> Result<Vec<ClMetrics>> {
    let mut state = match init {
        Some(ckpt) => ClState::<F>::from_checkpoint(ckpt, &cfg.backbone, &cfg.finetune)?,
        None => ClState::<F>::new(&cfg.backbone, &cfg.finetune, cfg.init_seed())?,
    };
    let mut sink = Sink::create(out.join(METRICS_FILE))?;
    let mut history = Vec::with_capacity(cfg.finetune.steps);
    let mut sink_err = None;
    finetune(&mut state, data, &cfg.finetune, |m| {
        if m.step % 50 == 0 || m.step == 1 {
            log::info!("finetune step {} loss {:.4} margin {:.4}", m.step, m.loss, m.margin());
        }
        if let Err(e) = sink.push(m) {
            sink_err.get_or_insert(e);
        }
        history.push(m.clone());
    })?;
    if let Some(e) = sink_err {
        return Err(e);
    }
    sink.finish()?;
    state.checkpoint().save(out.join(CHECKPOINT_FILE))?;
    Ok(history)
}

/// Stage two on the enabled task files, optionally starting from a stage-one
/// checkpoint given as `paths.init_from`.
pub fn cmd_finetune(cfg: &RunConfig) -> Result<Vec<ClMetrics>> {
    let data = load_instances(cfg.data_dir()?, &cfg.finetune_tasks())?;
    let init = match &cfg.paths.init_from {
        Some(p) => {
            require_file(p, "initial checkpoint")?;
            Some(Checkpoint::load(p)?)
        }
        None => None,
    };
    let out = cfg.out_dir()?;
    create_dir(out)?;
    write_config(cfg, out)?;
    match cfg.backbone.precision {
        Precision::F32 => run_finetune::<f32>(cfg, &data, init.as_ref(), out),
        Precision::F64 => run_finetune::<f64>(cfg, &data, init.as_ref(), out),
    }
}

fn load_model<F: Real>(ckpt: &Checkpoint) -> Result<(Backbone, crate::autograd::ParamStore<F>)> {
    let config = ckpt.config()?;
    let store = ckpt.to_store::<F>();
    let backbone = Backbone::bind(&config, &store)?;
    Ok((backbone, store))
}

fn checkpoint_path(cfg: &RunConfig) -> Result<&Path> {
    let p = cfg
        .paths
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("no checkpoint given (use --checkpoint)".into()))?;
    require_file(p, "checkpoint")?;
    Ok(p)
}

/// Task directories to evaluate: the configured list, or every directory
/// under `<data_dir>/eval` in name order.
pub fn eval_task_dirs(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    if !cfg.paths.eval_tasks.is_empty() {
        return Ok(cfg.paths.eval_tasks.clone());
    }
    let root = cfg.data_dir()?.join(EVAL_DIR);
    let entries = std::fs::read_dir(&root).map_err(|e| Error::io(&root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("no evaluation tasks under {}", root.display())));
    }
    Ok(dirs)
}

fn run_eval<F: Real>(ckpt: &Checkpoint, tasks: &[RetrievalTask], pooling: Pooling) -> Result<Vec<(TaskResult, Vec<QueryDetail>)>> {
    let (backbone, store) = load_model::<F>(ckpt)?;
    tasks.iter().map(|t| evaluate(t, &backbone, &store, pooling)).collect()
}

/// Ranks every evaluation task with the checkpoint and writes
/// `results.jsonl` plus one detail file per task.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Vec<TaskResult>> {
    let ckpt = Checkpoint::load(checkpoint_path(cfg)?)?;
    let tasks: Vec<RetrievalTask> = eval_task_dirs(cfg)?
        .iter()
        .map(RetrievalTask::load)
        .collect::<Result<_>>()?;
    let scored = match cfg.backbone.precision {
        Precision::F32 => run_eval::<f32>(&ckpt, &tasks, cfg.pooling())?,
        Precision::F64 => run_eval::<f64>(&ckpt, &tasks, cfg.pooling())?,
    };
    let out = cfg.out_dir()?;
    create_dir(&out.join(DETAILS_DIR))?;
    for (result, details) in &scored {
        jsonl::write(out.join(DETAILS_DIR).join(format!("{}.jsonl", result.task)), details)?;
    }
    let results: Vec<TaskResult> = scored.into_iter().map(|(r, _)| r).collect();
    jsonl::write(out.join(RESULTS_FILE), &results)?;
    Ok(results)
}

/// One line of the embeddings file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedReport {
    pub written: usize,
    /// Line number and message of every rejected input line.
    pub rejected: Vec<(usize, String)>,
}

fn run_embed<F: Real>(ckpt: &Checkpoint, items: &[Item], pooling: Pooling) -> Result<Vec<EmbeddingRecord>> {
    let (backbone, store) = load_model::<F>(ckpt)?;
    let seqs: Vec<&InterleavedSequence> = items.iter().map(|i| &i.sequence).collect();
    let vecs = embed_batch(&backbone, &store, &seqs, pooling, None)?;
    Ok(items
        .iter()
        .zip(vecs)
        .map(|(i, e)| EmbeddingRecord {
            id: i.id.clone(),
            vector: e.vector,
        })
        .collect())
}

/// Embeds every valid `{id, sequence}` line of the input file. Invalid lines
/// are logged and skipped; the report lists them so the caller can fail
/// after the output is written.
pub fn cmd_embed(cfg: &RunConfig, input: &Path) -> Result<EmbedReport> {
    let ckpt = Checkpoint::load(checkpoint_path(cfg)?)?;
    let model_cfg = ckpt.config()?;
    require_file(input, "input file")?;
    let mut items = Vec::new();
    let mut rejected = Vec::new();
    for (line, parsed) in jsonl::read_lenient::<Item>(input)? {
        let checked = parsed.and_then(|item| {
            let mut probe = item.sequence.clone();
            if cfg.pooling() == Pooling::CausalEos {
                probe = crate::contrastive::with_eos(&probe);
            }
            if probe.len() > model_cfg.max_len {
                return Err(Error::input(format!("length {} exceeds max_len {}", probe.len(), model_cfg.max_len)));
            }
            item.sequence.validate(model_cfg.vocab_size, model_cfg.patch_dim)?;
            Ok(item)
        });
        match checked {
            Ok(item) => items.push(item),
            Err(e) => {
                log::error!("{} line {line}: {e}", input.display());
                rejected.push((line, e.to_string()));
            }
        }
    }
    let records = match cfg.backbone.precision {
        Precision::F32 => run_embed::<f32>(&ckpt, &items, cfg.pooling())?,
        Precision::F64 => run_embed::<f64>(&ckpt, &items, cfg.pooling())?,
    };
    let out = cfg.out_dir()?;
    create_dir(out)?;
    jsonl::write(out.join(EMBEDDINGS_FILE), &records)?;
    Ok(EmbedReport {
        written: records.len(),
        rejected,
    })
}
