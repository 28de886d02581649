use ndarray::Array2;
use rand::Rng;

use super::heads::{MaeDecoder, MlmHead};
use super::masking::MaskedSequence;
use crate::autograd::{ParamStore, Real, Tape, Var};
use crate::backbone::{AttentionMode, Backbone, BackboneConfig, PackedBatch};
use crate::error::{Error, Result};

/// Backbone with both reconstruction heads.
#[derive(Clone, Debug)]
pub struct CptModel {
    pub backbone: Backbone,
    pub head: MlmHead,
    pub decoder: MaeDecoder,
}

impl CptModel {
    pub fn init<F: Real>(
        cfg: &BackboneConfig,
        tie_head: bool,
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let backbone = Backbone::init(cfg, store, rng)?;
        let head = MlmHead::init(&backbone, tie_head, store, rng);
        let decoder = MaeDecoder::init(cfg, store, rng);
        Ok(Self {
            backbone,
            head,
            decoder,
        })
    }

    pub fn bind<F: Real>(cfg: &BackboneConfig, tie_head: bool, store: &ParamStore<F>) -> Result<Self> {
        let backbone = Backbone::bind(cfg, store)?;
        let head = MlmHead::bind(&backbone, tie_head, store)?;
        let decoder = MaeDecoder::bind(cfg, store)?;
        Ok(Self {
            backbone,
            head,
            decoder,
        })
    }
}

/// One reconstruction term: the scalar loss and the rows it was computed
/// from (MLM logits or MAE predictions, one row per masked position).
#[derive(Clone, Copy, Debug)]
pub struct LossTerm {
    pub loss: Var,
    pub rows: Var,
    pub count: usize,
}

/// Per-row weights giving `mean over sequences of (mean over that
/// sequence's masked positions)`, with `denom` sequences in the mean.
fn row_weights<F: Real>(counts: &[usize], denom: usize) -> Vec<F> {
    counts
        .iter()
        .flat_map(|&n| std::iter::repeat_n(F::of(1.0 / (n as f64 * denom as f64)), n))
        .collect()
}

/// Shifted-label cross-entropy: the token at masked position `i` is
/// predicted from hidden row `i - 1`.
///
/// Returns `None` when no sequence has a masked token.
pub fn mlm_loss<F: Real>(
    tape: &mut Tape<'_, F>,
    hidden: Var,
    batch: &PackedBatch,
    masked: &[&MaskedSequence],
    head: &MlmHead,
    denom: usize,
) -> Option<LossTerm> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut counts = Vec::new();
    for (s, m) in masked.iter().enumerate() {
        for &i in &m.plan.mlm {
            debug_assert!(i > 0);
            rows.push(batch.row(s, i - 1));
            let id = m.original.elements()[i]
                .token()
                .expect("MLM positions are text");
            targets.push(id as usize);
        }
        if !m.plan.mlm.is_empty() {
            counts.push(m.plan.mlm.len());
        }
    }
    if rows.is_empty() {
        return None;
    }
    let picked = tape.gather_rows(hidden, &rows);
    let logits = head.logits(tape, picked);
    let weights = row_weights(&counts, denom);
    let loss = tape.cross_entropy(logits, &targets, &weights);
    Some(LossTerm {
        loss,
        rows: logits,
        count: rows.len(),
    })
}

/// Mean-square error of decoded patches against the clean patches at the
/// noised positions. Returns `None` when no patch was masked.
pub fn mae_loss<F: Real>(
    tape: &mut Tape<'_, F>,
    hidden: Var,
    batch: &PackedBatch,
    masked: &[&MaskedSequence],
    decoder: &MaeDecoder,
    denom: usize,
) -> Result<Option<LossTerm>> {
    let mut rows = Vec::new();
    let mut targets: Vec<F> = Vec::new();
    let mut counts = Vec::new();
    for (s, m) in masked.iter().enumerate() {
        for &i in &m.plan.mae {
            rows.push(batch.row(s, i));
            let patch = m.original.elements()[i]
                .patch()
                .expect("MAE positions are patches");
            targets.extend(patch.iter().map(|&x| F::of(x as f64)));
        }
        if !m.plan.mae.is_empty() {
            counts.push(m.plan.mae.len());
        }
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let dim = targets.len() / rows.len();
    let decoded = decoder.forward(tape, hidden, batch.segments())?;
    let picked = tape.gather_rows(decoded, &rows);
    let target = Array2::from_shape_vec((rows.len(), dim), targets).expect("target shape");
    let weights = row_weights(&counts, denom);
    let loss = tape.weighted_mse(picked, target, &weights);
    Ok(Some(LossTerm {
        loss,
        rows: picked,
        count: rows.len(),
    }))
}

/// Which reconstruction terms enter the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub w: f64,
    pub mlm: bool,
    pub mae: bool,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            w: 0.5,
            mlm: true,
            mae: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CptLoss {
    /// `L_MLM + w · L_MAE`; `None` when neither term is present.
    pub total: Option<Var>,
    pub mlm: Option<LossTerm>,
    pub mae: Option<LossTerm>,
    pub hidden: Var,
}

impl CptLoss {
    pub fn values<F: Real>(&self, tape: &Tape<'_, F>) -> (f64, f64, f64) {
        let v = |t: Option<Var>| t.map(|v| tape.scalar(v).as_f64()).unwrap_or(0.0);
        (
            v(self.total),
            v(self.mlm.map(|t| t.loss)),
            v(self.mae.map(|t| t.loss)),
        )
    }
}

/// Joint objective over one bidirectional pass of the corrupted inputs.
///
/// Losses are averaged over `denom` sequences so that micro-batches of one
/// batch can be summed.
pub fn cpt_loss<F: Real>(
    tape: &mut Tape<'_, F>,
    model: &CptModel,
    masked: &[&MaskedSequence],
    objective: Objective,
    denom: usize,
) -> Result<CptLoss> {
    if masked.is_empty() {
        return Err(Error::input("empty CPT batch"));
    }
    let inputs: Vec<_> = masked.iter().map(|m| &m.corrupted).collect();
    let batch = model.backbone.pack(&inputs, None)?;
    let hidden = model.backbone.forward(tape, &batch, AttentionMode::Bidirectional)?;
    let mlm = if objective.mlm {
        mlm_loss(tape, hidden, &batch, masked, &model.head, denom)
    } else {
        None
    };
    let mae = if objective.mae {
        mae_loss(tape, hidden, &batch, masked, &model.decoder, denom)?
    } else {
        None
    };
    let total = match (mlm, mae) {
        (Some(a), Some(b)) => {
            let wb = tape.scale(b.loss, F::of(objective.w));
            Some(tape.sum(&[a.loss, wb]))
        }
        (Some(a), None) => Some(a.loss),
        (None, Some(b)) => Some(tape.scale(b.loss, F::of(objective.w))),
        (None, None) => None,
    };
    Ok(CptLoss {
        total,
        mlm,
        mae,
        hidden,
    })
}
