use serde::{Deserialize, Serialize};

use super::batching::{shuffled_batches, task_aware_batches, Batch};
use super::embed::Pooling;
use super::instance::ContrastiveInstance;
use super::loss::contrastive_loss;
use crate::autograd::{ParamStore, Real, Tape};
use crate::backbone::{Backbone, BackboneConfig, Checkpoint, BACKBONE_PREFIX};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::component_rng;

/// Stage-two hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClConfig {
    pub tau: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Drop documents sharing the anchor's positive id from in-batch negatives.
    pub dedup: bool,
    /// Set from the run-level toggles, not from config files.
    #[serde(skip, default = "on")]
    pub task_batching: bool,
    pub drop_last: bool,
    /// Follows the backbone's attention mode.
    #[serde(skip, default = "mean_pooling")]
    pub pooling: Pooling,
    /// Derived from the master seed.
    #[serde(skip)]
    pub seed: u64,
}

fn on() -> bool {
    true
}

fn mean_pooling() -> Pooling {
    Pooling::BidirectionalMean
}

impl Default for ClConfig {
    fn default() -> Self {
        Self {
            tau: 0.03,
            lr: 1e-5,
            batch_size: 32,
            steps: 2000,
            dedup: true,
            task_batching: true,
            drop_last: false,
            pooling: Pooling::BidirectionalMean,
            seed: 0,
        }
    }
}

impl ClConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau {} must be positive", self.tau)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("lr {} must be non-negative", self.lr)));
        }
        Ok(())
    }

    /// One epoch of batches under the configured batching policy.
    pub fn epoch(&self, data: &[ContrastiveInstance], rng: &mut impl rand::Rng) -> Result<Vec<Batch>> {
        if self.task_batching {
            task_aware_batches(data, self.batch_size, self.drop_last, rng)
        } else {
            shuffled_batches(data, self.batch_size, self.drop_last, rng)
        }
    }
}

/// One line of the stage-two metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClMetrics {
    pub step: u64,
    pub loss: f64,
    pub mean_pos_cos: f64,
    pub mean_neg_cos: f64,
    pub batch_size: usize,
    pub task_id: Option<String>,
    pub lr: f64,
}

impl ClMetrics {
    pub fn margin(&self) -> f64 {
        self.mean_pos_cos - self.mean_neg_cos
    }
}

/// Backbone parameters and optimiser moments for stage two.
#[derive(Clone, Debug)]
pub struct ClState<F: Real> {
    pub store: ParamStore<F>,
    pub backbone: Backbone,
    pub adam: Adam<F>,
    pub step: u64,
}

impl<F: Real> ClState<F> {
    /// Fresh backbone. Uses the same init stream as stage one, so with equal
    /// seeds the two stages start from identical backbone weights.
    pub fn new(config: &BackboneConfig, cl: &ClConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let backbone = Backbone::init(config, &mut store, &mut component_rng(seed, "init"))?;
        let adam = Adam::new(&store, cl.lr);
        Ok(Self {
            store,
            backbone,
            adam,
            step: 0,
        })
    }

    /// Backbone tensors of `ckpt`; stage-one heads are discarded. The
    /// checkpoint's shapes must match `config`.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: &BackboneConfig, cl: &ClConfig) -> Result<Self> {
        let saved = ckpt.config()?;
        let diff = saved.shape_diff(config);
        if !diff.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint shape does not match config: {}",
                diff.join(", ")
            )));
        }
        let prefix = format!("{BACKBONE_PREFIX}.");
        let mut store = ParamStore::new();
        for (name, t) in &ckpt.tensors {
            if name.starts_with(&prefix) {
                store.add(name.clone(), t.mapv(|x| F::of(x as f64)));
            }
        }
        let backbone = Backbone::bind(config, &store)?;
        let adam = Adam::new(&store, cl.lr);
        Ok(Self {
            store,
            backbone,
            adam,
            step: 0,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(self.backbone.config(), &self.store)
            .with_section("finetune", vec![("steps".into(), self.step.to_string())])
    }
}

/// One optimiser step on the contrastive loss of `batch`.
pub fn cl_train_step<F: Real>(
    state: &mut ClState<F>,
    batch: &[&ContrastiveInstance],
    cfg: &ClConfig,
) -> Result<ClMetrics> {
    let mut tape = Tape::new(&state.store);
    let out = contrastive_loss(&mut tape, &state.backbone, batch, cfg.tau, cfg.dedup, cfg.pooling)?;
    let loss = tape.scalar(out.loss).as_f64();
    if !loss.is_finite() {
        let ids: Vec<&str> = batch.iter().map(|i| i.ids.instance.as_str()).collect();
        return Err(Error::numeric(
            state.backbone.config().n_layers,
            format!("non-finite contrastive loss on batch [{}]", ids.join(", ")),
        ));
    }
    let (mean_pos_cos, mean_neg_cos) = out.cosine_summary(&tape);
    let grads = tape.backward(out.loss)?;
    drop(tape);
    state.adam.step(&mut state.store, &grads);
    state.step += 1;
    let first = &batch[0].task_id;
    Ok(ClMetrics {
        step: state.step,
        loss,
        mean_pos_cos,
        mean_neg_cos,
        batch_size: batch.len(),
        task_id: batch.iter().all(|i| &i.task_id == first).then(|| first.clone()),
        lr: state.adam.lr,
    })
}

/// Runs `cfg.steps` steps, drawing a fresh epoch of batches whenever the
/// previous one is exhausted.
pub fn finetune<F: Real>(
    state: &mut ClState<F>,
    data: &[ContrastiveInstance],
    cfg: &ClConfig,
    mut on_step: impl FnMut(&ClMetrics),
) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("contrastive dataset is empty".into()));
    }
    for inst in data {
        inst.validate()?;
    }
    let mut rng = component_rng(cfg.seed, "finetune.batches");
    let mut epoch: Vec<Batch> = Vec::new();
    let mut cursor = 0;
    for _ in 0..cfg.steps {
        if cursor == epoch.len() {
            epoch = cfg.epoch(data, &mut rng)?;
            cursor = 0;
            if epoch.is_empty() {
                return Err(Error::Data(format!(
                    "no batch of size {} can be formed (drop_last is set)",
                    cfg.batch_size
                )));
            }
        }
        let batch: Vec<&ContrastiveInstance> = epoch[cursor].indices.iter().map(|&i| &data[i]).collect();
        cursor += 1;
        let metrics = cl_train_step(state, &batch, cfg)?;
        on_step(&metrics);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::InterleavedSequence;
    use crate::contrastive::instance::InstanceIds;

    fn cfg() -> BackboneConfig {
        BackboneConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 16,
            patch_dim: 4,
            max_len: 16,
            ..Default::default()
        }
    }

    fn data() -> Vec<ContrastiveInstance> {
        (0..6u32)
            .map(|i| {
                let mut pos = InterleavedSequence::default();
                pos.push_image((0..3).map(|k| vec![(i as f32 - 2.5) * 0.3 + k as f32 * 0.05; 4]).collect());
                ContrastiveInstance {
                    task_id: if i % 2 == 0 { "even" } else { "odd" }.into(),
                    query: InterleavedSequence::from_tokens(&[3 + i, 10 + i % 3]),
                    positive: pos,
                    negatives: vec![InterleavedSequence::from_tokens(&[3 + (i + 1) % 6])],
                    ids: InstanceIds {
                        instance: format!("i{i}"),
                        query: format!("q{i}"),
                        positive: format!("p{i}"),
                        negatives: vec![format!("n{i}")],
                    },
                }
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let cl = ClConfig {
            lr: 0.0,
            steps: 3,
            batch_size: 3,
            ..Default::default()
        };
        let mut state = ClState::<f64>::new(&cfg(), &cl, 1).unwrap();
        let before = state.store.clone();
        finetune(&mut state, &data(), &cl, |_| {}).unwrap();
        for id in before.ids() {
            assert_eq!(before.get(id), state.store.get(id));
        }
    }

    #[test]
    fn same_seed_same_metrics() {
        let cl = ClConfig {
            lr: 1e-3,
            steps: 4,
            batch_size: 3,
            ..Default::default()
        };
        let run = || {
            let mut state = ClState::<f32>::new(&cfg(), &cl, 9).unwrap();
            let mut out = Vec::new();
            finetune(&mut state, &data(), &cl, |m| out.push(m.clone())).unwrap();
            out
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.iter().all(|m| m.task_id.is_some()));
    }

    #[test]
    fn checkpoint_init_keeps_backbone_only() {
        use crate::cpt::{CptConfig, CptState};
        let cpt = CptState::<f32>::new(&cfg(), &CptConfig::default(), 2).unwrap();
        let ckpt = cpt.checkpoint();
        let cl = ClState::<f32>::from_checkpoint(&ckpt, &cfg(), &ClConfig::default()).unwrap();
        assert!(cl.store.len() < cpt.store.len());
        assert!(cl.store.iter().all(|(_, n, _)| n.starts_with("backbone.")));
        let raw = ClState::<f32>::new(&cfg(), &ClConfig::default(), 2).unwrap();
        for (id, name, v) in raw.store.iter() {
            assert_eq!(cl.store.get(cl.store.find(name).unwrap()), v, "{name} {id:?}");
        }

        let other = BackboneConfig { d_model: 8, ..cfg() };
        let err = ClState::<f32>::from_checkpoint(&ckpt, &other, &ClConfig::default()).unwrap_err();
        assert!(err.to_string().contains("d_model"));
    }

    #[test]
    fn invalid_temperature_rejected() {
        let cl = ClConfig { tau: 0.0, ..Default::default() };
        let mut state = ClState::<f64>::new(&cfg(), &cl, 0).unwrap();
        assert!(matches!(finetune(&mut state, &data(), &cl, |_| {}), Err(Error::Config(_))));
    }
}
