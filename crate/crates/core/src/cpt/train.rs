use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{cpt_loss, CptModel, Objective};
use super::masking::{mask_sequence, MaskedSequence, MlmSampling};
use crate::autograd::{Gradients, ParamStore, Real, Tape};
use crate::backbone::{BackboneConfig, Checkpoint, InterleavedSequence};
use crate::datapack::{pack_sequences, CostModel};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::{component_rng, derive_seed};

/// Stage-one hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CptConfig {
    pub p_mlm: f64,
    pub r_mae: f64,
    /// Weight of the patch-reconstruction term.
    pub w: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Logical data-parallel workers that share each batch.
    pub workers: usize,
    pub tie_mlm_head: bool,
    /// Set from the run-level toggles, not from config files.
    #[serde(skip, default = "on")]
    pub mlm_on: bool,
    #[serde(skip, default = "on")]
    pub mae_on: bool,
    /// Derived from the master seed.
    #[serde(skip)]
    pub seed: u64,
}

fn on() -> bool {
    true
}

impl Default for CptConfig {
    fn default() -> Self {
        Self {
            p_mlm: 0.4,
            r_mae: 0.5,
            w: 0.5,
            lr: 2e-6,
            steps: 500,
            batch_size: 32,
            workers: 4,
            tie_mlm_head: false,
            mlm_on: true,
            mae_on: true,
            seed: 0,
        }
    }
}

impl CptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_mlm > 0.0 && self.p_mlm < 1.0) {
            return Err(Error::Config(format!("p_mlm {} must lie in (0, 1)", self.p_mlm)));
        }
        if !(0.0..1.0).contains(&self.r_mae) {
            return Err(Error::Config(format!("r_mae {} must lie in [0, 1)", self.r_mae)));
        }
        if !(self.w >= 0.0) {
            return Err(Error::Config(format!("w {} must be non-negative", self.w)));
        }
        if self.batch_size == 0 || self.workers == 0 {
            return Err(Error::Config("batch_size and workers must be positive".into()));
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        Objective {
            w: self.w,
            mlm: self.mlm_on,
            mae: self.mae_on,
        }
    }
}

/// One line of the stage-one metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CptMetrics {
    pub step: u64,
    pub loss: f64,
    pub loss_mlm: f64,
    pub loss_mae: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Parameters, model layout and optimiser moments for stage one.
#[derive(Clone, Debug)]
pub struct CptState<F: Real> {
    pub config: BackboneConfig,
    pub store: ParamStore<F>,
    pub model: CptModel,
    pub adam: Adam<F>,
    pub step: u64,
    pub tied_head: bool,
}

impl<F: Real> CptState<F> {
    pub fn new(config: &BackboneConfig, cpt: &CptConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = component_rng(seed, "init");
        let model = CptModel::init(config, cpt.tie_mlm_head, &mut store, &mut rng)?;
        let adam = Adam::new(&store, cpt.lr);
        Ok(Self {
            config: config.clone(),
            store,
            model,
            adam,
            step: 0,
            tied_head: cpt.tie_mlm_head,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.config, &self.store).with_section(
            "cpt",
            vec![
                ("tied_head".into(), self.tied_head.to_string()),
                ("steps".into(), self.step.to_string()),
            ],
        )
    }
}

/// One optimiser step on the mean loss of `batch`.
///
/// The batch is split over `workers` logical workers by cost-balanced
/// packing; each worker's micro-batch is differentiated separately and the
/// gradients are summed in worker order.
pub fn cpt_train_step<F: Real>(
    state: &mut CptState<F>,
    batch: &[MaskedSequence],
    objective: Objective,
    workers: usize,
    cost: &CostModel,
) -> Result<CptMetrics> {
    if batch.is_empty() {
        return Err(Error::input("empty CPT batch"));
    }
    let inputs: Vec<&InterleavedSequence> = batch.iter().map(|m| &m.corrupted).collect();
    let assignment = pack_sequences(&inputs, workers, cost)?;
    let denom = batch.len();
    let mut grads = Gradients::zeros_like(&state.store);
    let (mut loss, mut loss_mlm, mut loss_mae) = (0.0, 0.0, 0.0);
    for members in assignment.members() {
        if members.is_empty() {
            continue;
        }
        let micro: Vec<&MaskedSequence> = members.iter().map(|&i| &batch[i]).collect();
        let mut tape = Tape::new(&state.store);
        let out = cpt_loss(&mut tape, &state.model, &micro, objective, denom)?;
        let (l, lm, la) = out.values(&tape);
        if !l.is_finite() {
            let culprit = find_non_finite(state, batch, objective)?;
            return Err(Error::numeric(
                state.model.backbone.config().n_layers,
                format!("non-finite CPT loss at sequence {culprit}"),
            ));
        }
        loss += l;
        loss_mlm += lm;
        loss_mae += la;
        if let Some(total) = out.total {
            grads.accumulate(&tape.backward(total)?);
        }
    }
    let grad_norm = grads.global_norm();
    state.adam.step(&mut state.store, &grads);
    state.step += 1;
    Ok(CptMetrics {
        step: state.step,
        loss,
        loss_mlm,
        loss_mae,
        grad_norm,
        lr: state.adam.lr,
    })
}

fn find_non_finite<F: Real>(state: &CptState<F>, batch: &[MaskedSequence], objective: Objective) -> Result<usize> {
    for (i, m) in batch.iter().enumerate() {
        let mut tape = Tape::new(&state.store);
        let out = cpt_loss(&mut tape, &state.model, &[m], objective, 1)?;
        if !out.values(&tape).0.is_finite() {
            return Ok(i);
        }
    }
    Ok(0)
}

/// Runs `cfg.steps` steps over `corpus`, drawing batches epoch by epoch and
/// re-masking every sequence each time it is drawn.
pub fn pretrain<F: Real>(
    state: &mut CptState<F>,
    corpus: &[InterleavedSequence],
    cfg: &CptConfig,
    cost: &CostModel,
    mut on_step: impl FnMut(&CptMetrics),
) -> Result<()> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("CPT corpus is empty".into()));
    }
    let mut order_rng = component_rng(cfg.seed, "cpt.batches");
    let mask_base = derive_seed(cfg.seed, "cpt.masking");
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let opts = MlmSampling::default();
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for k in 0..cfg.batch_size.min(corpus.len()) {
            if cursor == order.len() {
                order = (0..corpus.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            let seed = derive_seed(mask_base, &format!("{step}:{k}"));
            batch.push(mask_sequence(&corpus[idx], cfg.p_mlm, cfg.r_mae, seed, opts)?);
        }
        let metrics = cpt_train_step(state, &batch, cfg.objective(), cfg.workers, cost)?;
        on_step(&metrics);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::InterleavedSequence;

    fn cfg() -> BackboneConfig {
        BackboneConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 12,
            patch_dim: 4,
            max_len: 16,
            ..Default::default()
        }
    }

    fn corpus() -> Vec<InterleavedSequence> {
        (0..8)
            .map(|i| {
                let mut s = InterleavedSequence::default();
                s.push_image((0..4).map(|k| vec![(i + k) as f32 * 0.1; 4]).collect());
                s.push_tokens(&[3 + (i % 5) as u32, 4, 5]);
                s
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let cpt = CptConfig {
            lr: 0.0,
            steps: 2,
            batch_size: 4,
            ..Default::default()
        };
        let mut state = CptState::<f32>::new(&cfg(), &cpt, 1).unwrap();
        let before = state.store.clone();
        pretrain(&mut state, &corpus(), &cpt, &CostModel::default(), |_| {}).unwrap();
        assert_eq!(state.store, before);
        assert_eq!(state.step, 2);
    }

    #[test]
    fn packing_does_not_change_the_step() {
        let cpt = CptConfig {
            lr: 1e-3,
            batch_size: 8,
            ..Default::default()
        };
        let batch: Vec<MaskedSequence> = corpus()
            .iter()
            .enumerate()
            .map(|(i, s)| mask_sequence(s, 0.4, 0.5, i as u64, MlmSampling::default()).unwrap())
            .collect();
        let mut one = CptState::<f64>::new(&cfg(), &cpt, 3).unwrap();
        let mut many = one.clone();
        let a = cpt_train_step(&mut one, &batch, cpt.objective(), 1, &CostModel::default()).unwrap();
        let b = cpt_train_step(&mut many, &batch, cpt.objective(), 3, &CostModel::default()).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
        assert!((a.grad_norm - b.grad_norm).abs() < 1e-10);
    }

    #[test]
    fn disabled_terms_report_zero_and_skip_their_head() {
        let cpt = CptConfig {
            lr: 1e-3,
            steps: 3,
            batch_size: 4,
            mae_on: false,
            ..Default::default()
        };
        let mut state = CptState::<f32>::new(&cfg(), &cpt, 1).unwrap();
        let decoder_before = state.store.get(state.model.decoder.out_weight()).clone();
        let mut seen = Vec::new();
        pretrain(&mut state, &corpus(), &cpt, &CostModel::default(), |m| seen.push(m.clone())).unwrap();
        assert!(seen.iter().all(|m| m.loss_mae == 0.0 && m.loss_mlm > 0.0));
        assert_eq!(state.store.get(state.model.decoder.out_weight()), &decoder_before);
    }

    #[test]
    fn same_seed_same_metrics() {
        let cpt = CptConfig {
            lr: 1e-3,
            steps: 3,
            batch_size: 4,
            seed: 5,
            ..Default::default()
        };
        let run = || {
            let mut state = CptState::<f32>::new(&cfg(), &cpt, 9).unwrap();
            let mut seen = Vec::new();
            pretrain(&mut state, &corpus(), &cpt, &CostModel::default(), |m| seen.push(m.clone())).unwrap();
            seen
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn invalid_configs() {
        for bad in [
            CptConfig { p_mlm: 0.0, ..Default::default() },
            CptConfig { r_mae: 1.0, ..Default::default() },
            CptConfig { w: -1.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn non_finite_loss_names_the_sequence() {
        let cpt = CptConfig::default();
        let mut state = CptState::<f32>::new(&cfg(), &cpt, 1).unwrap();
        let mut batch: Vec<MaskedSequence> = corpus()
            .iter()
            .take(3)
            .enumerate()
            .map(|(i, s)| mask_sequence(s, 0.4, 0.5, i as u64, MlmSampling::default()).unwrap())
            .collect();
        // An infinite clean target poisons only the MAE term of sequence 1.
        let pos = batch[1].plan.mae[0];
        if let crate::backbone::Element::Patch { values, .. } = &mut batch[1].original.elements_mut()[pos] {
            values[0] = f32::INFINITY;
        }
        let err = cpt_train_step(&mut state, &batch, cpt.objective(), 1, &CostModel::default()).unwrap_err();
        assert!(err.to_string().contains("sequence 1"), "{err}");
    }
}
