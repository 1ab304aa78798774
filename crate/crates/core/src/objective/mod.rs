//! Training losses, evaluation metrics and two-stream late fusion.

mod late_fusion;
mod loss;
mod metrics;

pub use late_fusion::{fit_late_fusion, late_fuse, LateFusionFit, LateFusionWeights};
pub use loss::{
    ce_label_smooth, cos_loss, mse_loss, total_loss, LossConfig, LossMode, LossParts, PROB_FLOOR,
};
pub use metrics::{
    in_top_k, marginalize, mean_top5_recall, rank_desc, top5_accuracy, top_k_accuracy,
    ActionComponent, EvalReport, HorizonResult, OneSecondReport, VerbNounAction, TOP_K,
};
