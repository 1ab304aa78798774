//! Observation timing, feature files, dataset indexes and the synthetic
//! benchmark generator.

mod dataset;
pub mod feature_file;
mod protocol;
mod synth;

pub(crate) use dataset::{read_json, write_json};
pub use dataset::{
    read_index, write_index, ActionParts, Dataset, DatasetMeta, FeatureSequence, IndexRecord,
    Sample, Split,
};
pub use feature_file::{read_feature_file, write_feature_file};
pub use protocol::AnticipationProtocol;
pub use synth::{
    bayes_ceiling, generate_synthetic, generate_with_truth, observed_class_posterior,
    BayesCeiling, SynthConfig, SynthMeta, SynthTruth, TransitionRule,
};
