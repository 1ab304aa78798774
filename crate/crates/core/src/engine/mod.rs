//! Training, evaluation, checkpoints and ablation grids.

mod ablate;
mod checkpoint;
mod config;
mod evaluate;
mod train;

pub use ablate::{ablate, merge_json, AblationCell, AblationGrid, AblationRow, AblationTable};
pub use checkpoint::{Checkpoint, MANIFEST_FILE};
pub use config::{one_second_step, HorizonPolicy, TrainConfig};
pub use evaluate::{evaluate, evaluate_late_fusion, fit_late_fusion_on, score_split, SplitScores};
pub use train::{build_model, train, EpochStats, TrainOutcome};
