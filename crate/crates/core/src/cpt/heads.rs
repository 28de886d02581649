use ndarray::Array2;
use rand::Rng;

use crate::autograd::{ParamId, ParamStore, Real, Segment, Tape, Var};
use crate::backbone::{bind_param, normal_matrix, Backbone, BackboneConfig, TransformerStack, INIT_STD};
use crate::error::Result;

pub const MLM_PREFIX: &str = "mlm_head";
pub const MAE_PREFIX: &str = "mae_decoder";
/// Depth of the patch decoder.
pub const MAE_DECODER_LAYERS: usize = 2;

#[derive(Clone, Copy, Debug)]
enum HeadWeight {
    Own(ParamId),
    /// Transposed token-embedding table.
    Tied(ParamId),
}

/// Linear projection from hidden states to vocabulary logits.
#[derive(Clone, Debug)]
pub struct MlmHead {
    weight: HeadWeight,
    bias: ParamId,
}

impl MlmHead {
    pub fn init<F: Real>(
        backbone: &Backbone,
        tied: bool,
        store: &mut ParamStore<F>,
        rng: &mut impl Rng,
    ) -> Self {
        let cfg = backbone.config();
        let weight = if tied {
            HeadWeight::Tied(backbone.token_table())
        } else {
            HeadWeight::Own(store.add(
                format!("{MLM_PREFIX}.w"),
                normal_matrix(cfg.d_model, cfg.vocab_size, INIT_STD, rng),
            ))
        };
        let bias = store.add(format!("{MLM_PREFIX}.b"), Array2::zeros((1, cfg.vocab_size)));
        Self { weight, bias }
    }

    pub fn bind<F: Real>(backbone: &Backbone, tied: bool, store: &ParamStore<F>) -> Result<Self> {
        let cfg = backbone.config();
        let weight = if tied {
            HeadWeight::Tied(backbone.token_table())
        } else {
            HeadWeight::Own(bind_param(store, &format!("{MLM_PREFIX}.w"), (cfg.d_model, cfg.vocab_size))?)
        };
        Ok(Self {
            weight,
            bias: bind_param(store, &format!("{MLM_PREFIX}.b"), (1, cfg.vocab_size))?,
        })
    }

    pub fn is_tied(&self) -> bool {
        matches!(self.weight, HeadWeight::Tied(_))
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn logits<F: Real>(&self, tape: &mut Tape<'_, F>, rows: Var) -> Var {
        let z = match self.weight {
            HeadWeight::Own(w) => {
                let w = tape.param(w);
                tape.matmul(rows, w)
            }
            HeadWeight::Tied(table) => {
                let t = tape.param(table);
                tape.matmul_nt(rows, t)
            }
        };
        let b = tape.param(self.bias);
        tape.add_row(z, b)
    }
}

/// Shallow bidirectional transformer plus a linear read-out to patch space.
#[derive(Clone, Debug)]
pub struct MaeDecoder {
    stack: TransformerStack,
    out_w: ParamId,
    out_b: ParamId,
}

impl MaeDecoder {
    pub fn init<F: Real>(cfg: &BackboneConfig, store: &mut ParamStore<F>, rng: &mut impl Rng) -> Self {
        let stack = TransformerStack::init(
            store,
            MAE_PREFIX,
            MAE_DECODER_LAYERS,
            cfg.d_model,
            cfg.n_heads,
            cfg.d_ff,
            rng,
        );
        let out_w = store.add(
            format!("{MAE_PREFIX}.out.w"),
            normal_matrix(cfg.d_model, cfg.patch_dim, INIT_STD, rng),
        );
        let out_b = store.add(format!("{MAE_PREFIX}.out.b"), Array2::zeros((1, cfg.patch_dim)));
        Self { stack, out_w, out_b }
    }

    pub fn bind<F: Real>(cfg: &BackboneConfig, store: &ParamStore<F>) -> Result<Self> {
        Ok(Self {
            stack: TransformerStack::bind(
                store,
                MAE_PREFIX,
                MAE_DECODER_LAYERS,
                cfg.d_model,
                cfg.n_heads,
                cfg.d_ff,
            )?,
            out_w: bind_param(store, &format!("{MAE_PREFIX}.out.w"), (cfg.d_model, cfg.patch_dim))?,
            out_b: bind_param(store, &format!("{MAE_PREFIX}.out.b"), (1, cfg.patch_dim))?,
        })
    }

    pub fn out_weight(&self) -> ParamId {
        self.out_w
    }

    /// Patch predictions for every row of `hidden`.
    pub fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, hidden: Var, segments: &[Segment]) -> Result<Var> {
        let h = self.stack.forward(tape, hidden, segments, false)?;
        let w = tape.param(self.out_w);
        let b = tape.param(self.out_b);
        let p = tape.matmul(h, w);
        Ok(tape.add_row(p, b))
    }
}
