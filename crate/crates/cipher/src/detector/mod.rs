//! Real/fake detection built on the reused adversarial discriminator:
//! fine-tuning with smoothed binary cross-entropy, thresholded sigmoid
//! scoring, probability ensembling, and multi-depth feature export.

pub mod features;
pub mod finetune;
pub mod score;

pub use features::{
    extract_disc_features, extract_unet_features, write_features_csv, FeatureBundle,
};
pub use finetune::{
    bce_with_logits, bce_with_logits_grad, compute_ref_std, finetune, ref_std_from_meta,
    smooth_labels, targets_from_labels, FinetuneConfig, FinetuneStats,
};
pub use score::{detect, ensemble_score, Decision, DetectionScore};
