//! Stage one: joint masked-token and masked-patch reconstruction.

mod heads;
mod loss;
mod masking;
mod train;

pub use heads::{MaeDecoder, MlmHead, MAE_DECODER_LAYERS, MAE_PREFIX, MLM_PREFIX};
pub use loss::{cpt_loss, mae_loss, mlm_loss, CptLoss, CptModel, LossTerm, Objective};
pub use masking::{
    apply_masks, mask_sequence, mlm_eligible, sample_mae_mask, sample_mlm_mask, MaskPlan, MaskedSequence,
    MlmSampling,
};
pub use train::{cpt_train_step, pretrain, CptConfig, CptMetrics, CptState};
