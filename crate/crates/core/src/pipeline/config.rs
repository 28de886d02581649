use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{AttentionMode, BackboneConfig, Precision};
use crate::contrastive::{ClConfig, Pooling};
use crate::cpt::CptConfig;
use crate::datapack::{SynthSpec, CAPTION_TASK, LONGFORM_TASK, TEXT_TASK};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

/// Ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub mlm_on: bool,
    pub mae_on: bool,
    pub text_pairs_on: bool,
    pub longform_pairs_on: bool,
    pub task_batching_on: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            mlm_on: true,
            mae_on: true,
            text_pairs_on: true,
            longform_pairs_on: true,
            task_batching_on: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_from: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluation task directories; empty means every task under
    /// `<data_dir>/eval`.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub eval_tasks: Vec<PathBuf>,
}

/// Everything one invocation needs, read from a TOML file with
/// `[backbone]`, `[data]`, `[cpt]`, `[finetune]`, `[toggles]` and `[paths]`
/// sections.
///
/// Per-stage seeds are not configurable: each stage's seed is derived from
/// the top-level `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub data: SynthSpec,
    pub cpt: CptConfig,
    pub finetune: ClConfig,
    pub toggles: Toggles,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            backbone: BackboneConfig::default(),
            data: SynthSpec::default(),
            cpt: CptConfig::default(),
            finetune: ClConfig::default(),
            toggles: Toggles::default(),
            paths: Paths::default(),
        }
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<AttentionMode>,
    pub precision: Option<Precision>,
    pub steps: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub init_from: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub eval_tasks: Vec<PathBuf>,
    pub no_mlm: bool,
    pub no_mae: bool,
    pub no_text_pairs: bool,
    pub no_longform_pairs: bool,
    pub no_task_batching: bool,
}

/// Which stage a step-count override applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Cpt,
    Finetune,
    Other,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides, stage: Stage) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(m) = o.mode {
            self.backbone.attention_mode = m;
        }
        if let Some(p) = o.precision {
            self.backbone.precision = p;
        }
        match (o.steps, stage) {
            (Some(n), Stage::Cpt) => self.cpt.steps = n,
            (Some(n), Stage::Finetune) => self.finetune.steps = n,
            _ => {}
        }
        let paths = &mut self.paths;
        for (dst, src) in [
            (&mut paths.out_dir, &o.out_dir),
            (&mut paths.data_dir, &o.data_dir),
            (&mut paths.init_from, &o.init_from),
            (&mut paths.checkpoint, &o.checkpoint),
        ] {
            if src.is_some() {
                *dst = src.clone();
            }
        }
        if !o.eval_tasks.is_empty() {
            paths.eval_tasks = o.eval_tasks.clone();
        }
        let t = &mut self.toggles;
        t.mlm_on &= !o.no_mlm;
        t.mae_on &= !o.no_mae;
        t.text_pairs_on &= !o.no_text_pairs;
        t.longform_pairs_on &= !o.no_longform_pairs;
        t.task_batching_on &= !o.no_task_batching;
    }

    /// Copies toggles, derived seeds and the pooling mode into the stage
    /// configs and checks them.
    pub fn resolve(mut self) -> Result<Self> {
        self.backbone.validate()?;
        self.data.seed = derive_seed(self.seed, "data");
        self.cpt.seed = derive_seed(self.seed, "cpt");
        self.cpt.mlm_on = self.toggles.mlm_on;
        self.cpt.mae_on = self.toggles.mae_on;
        self.finetune.seed = derive_seed(self.seed, "finetune");
        self.finetune.task_batching = self.toggles.task_batching_on;
        self.finetune.pooling = self.pooling();
        self.cpt.validate()?;
        self.finetune.validate()?;
        Ok(self)
    }

    pub fn pooling(&self) -> Pooling {
        Pooling::from(self.backbone.attention_mode)
    }

    /// Task ids consumed by fine-tuning.
    pub fn finetune_tasks(&self) -> Vec<&'static str> {
        let mut t = vec![CAPTION_TASK];
        if self.toggles.longform_pairs_on {
            t.push(LONGFORM_TASK);
        }
        if self.toggles.text_pairs_on {
            t.push(TEXT_TASK);
        }
        t
    }

    /// Seed used to initialise backbone weights in both stages.
    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, "model")
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.paths
            .out_dir
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory (use --out)".into()))
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.paths
            .data_dir
            .as_deref()
            .ok_or_else(|| Error::Config("no data directory (use --data)".into()))
    }
}
