use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::feature_file::{read_feature_file, write_feature_file};
use super::protocol::AnticipationProtocol;
use super::synth::SynthMeta;
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::semantics::SemanticMatrix;

/// Per-time-step visual features of one stored observation window.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    /// `[T × d_v]`, earliest step first.
    pub steps: Tensor,
    pub segment_id: String,
    /// Start time of the target action, seconds.
    pub target_start_s: f64,
}

impl FeatureSequence {
    pub fn new(steps: Tensor, segment_id: impl Into<String>, target_start_s: f64) -> Result<Self> {
        if steps.shape().len() != 2 {
            return Err(Error::Shape {
                op: "feature_sequence",
                lhs: steps.shape().to_vec(),
                rhs: vec![2],
            });
        }
        Ok(Self {
            steps,
            segment_id: segment_id.into(),
            target_start_s,
        })
    }

    pub fn len(&self) -> usize {
        self.steps.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.steps.cols()
    }

    /// The observation visible when anticipating `n` steps ahead: the
    /// earliest `observed_steps(n)` stored steps.
    pub fn observe(&self, protocol: &AnticipationProtocol, n: usize) -> Result<Tensor> {
        let t = protocol.observed_steps(n)?;
        if self.len() < t {
            return Err(Error::Protocol(format!(
                "segment {} has {} steps, {} needed for step {n}",
                self.segment_id,
                self.len(),
                t
            )));
        }
        self.steps.slice_rows(0, t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// One sequence per modality name (e.g. `"rgb"`, `"flow"`).
    pub features: BTreeMap<String, FeatureSequence>,
    pub obs_label: usize,
    pub target_label: usize,
    pub verb_id: Option<usize>,
    pub noun_id: Option<usize>,
}

impl Sample {
    pub fn segment_id(&self) -> &str {
        self.features
            .values()
            .next()
            .map(|f| f.segment_id.as_str())
            .unwrap_or("")
    }

    pub fn modality(&self, name: &str) -> Result<&FeatureSequence> {
        self.features
            .get(name)
            .ok_or_else(|| Error::Config(format!("sample {} has no modality {name:?}", self.segment_id())))
    }
}

/// One line of a `<split>.jsonl` index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub segment_id: String,
    /// Modality name to feature-file path, relative to the dataset root.
    pub features: BTreeMap<String, String>,
    pub obs_label: usize,
    pub target_label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verb_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noun_id: Option<usize>,
    pub target_start_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Verb and noun making up an action class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionParts {
    pub verb: usize,
    pub noun: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(default)]
    pub protocol: AnticipationProtocol,
    /// Action id to (verb, noun); derived from the indexes when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actions: Option<Vec<ActionParts>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub semantic: SemanticMatrix,
    pub meta: DatasetMeta,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub const CLASSES_FILE: &str = "classes.json";
pub const SEMANTIC_FILE: &str = "semantic.vstg";
pub const META_FILE: &str = "meta.json";
pub const FEATURE_DIR: &str = "features";

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.semantic.n_classes()
    }

    pub fn protocol(&self) -> &AnticipationProtocol {
        &self.meta.protocol
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Feature dimension of `modality`, taken from the first sample found.
    pub fn feature_dim(&self, modality: &str) -> Result<usize> {
        Split::ALL
            .iter()
            .flat_map(|&s| self.split(s).iter())
            .next()
            .ok_or_else(|| Error::Config("dataset has no samples".into()))?
            .modality(modality)
            .map(FeatureSequence::dim)
    }

    /// Action-to-(verb, noun) table: the stored one, or the one implied by
    /// the per-sample target verb/noun ids.
    pub fn action_parts(&self) -> Option<Vec<ActionParts>> {
        if let Some(a) = &self.meta.actions {
            return Some(a.clone());
        }
        let mut table: Vec<Option<ActionParts>> = vec![None; self.n_classes()];
        for s in Split::ALL.iter().flat_map(|&s| self.split(s)) {
            if let (Some(verb), Some(noun)) = (s.verb_id, s.noun_id) {
                table[s.target_label] = Some(ActionParts { verb, noun });
            }
        }
        table.into_iter().collect()
    }

    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        let feat_dir = root.join(FEATURE_DIR);
        fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
        self.semantic.save(root.join(SEMANTIC_FILE), root.join(CLASSES_FILE))?;
        write_json(root.join(META_FILE), &self.meta)?;

        for split in Split::ALL {
            let samples = self.split(split);
            let records: Vec<IndexRecord> = samples
                .par_iter()
                .map(|s| -> Result<IndexRecord> {
                    let mut paths = BTreeMap::new();
                    let mut target_start_s = 0.0;
                    for (modality, seq) in &s.features {
                        let rel = format!("{FEATURE_DIR}/{}.{modality}.vstg", seq.segment_id);
                        write_feature_file(root.join(&rel), &seq.steps)?;
                        paths.insert(modality.clone(), rel);
                        target_start_s = seq.target_start_s;
                    }
                    Ok(IndexRecord {
                        segment_id: s.segment_id().to_string(),
                        features: paths,
                        obs_label: s.obs_label,
                        target_label: s.target_label,
                        verb_id: s.verb_id,
                        noun_id: s.noun_id,
                        target_start_s,
                    })
                })
                .collect::<Result<_>>()?;
            write_index(root.join(format!("{}.jsonl", split.name())), &records)?;
        }
        Ok(())
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let semantic = SemanticMatrix::load(root.join(SEMANTIC_FILE), root.join(CLASSES_FILE))?;
        let meta_path = root.join(META_FILE);
        let meta: DatasetMeta = if meta_path.exists() {
            read_json(&meta_path)?
        } else {
            DatasetMeta::default()
        };
        meta.protocol.validate()?;
        let mut splits = Vec::new();
        for split in Split::ALL {
            let path = root.join(format!("{}.jsonl", split.name()));
            let samples = if path.exists() {
                let records = read_index(&path)?;
                load_samples(root, &records, &meta.protocol, semantic.n_classes(), split)?
            } else {
                Vec::new()
            };
            splits.push(samples);
        }
        let test = splits.pop().unwrap();
        let val = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        Ok(Self {
            semantic,
            meta,
            train,
            val,
            test,
        })
    }
}

fn load_samples(
    root: &Path,
    records: &[IndexRecord],
    protocol: &AnticipationProtocol,
    n_classes: usize,
    split: Split,
) -> Result<Vec<Sample>> {
    let want = protocol.total_steps();
    let loaded: Vec<Option<Sample>> = records
        .par_iter()
        .map(|r| -> Result<Option<Sample>> {
            for (what, label) in [("obs_label", r.obs_label), ("target_label", r.target_label)] {
                if label >= n_classes {
                    return Err(Error::Index {
                        what,
                        index: label,
                        len: n_classes,
                    });
                }
            }
            let mut features = BTreeMap::new();
            for (modality, rel) in &r.features {
                let steps = read_feature_file(root.join(rel))?;
                if steps.rows() < want {
                    return Ok(None);
                }
                // keep the steps that end at the target start
                let steps = steps.slice_rows(steps.rows() - want, want)?;
                features.insert(
                    modality.clone(),
                    FeatureSequence::new(steps, r.segment_id.clone(), r.target_start_s)?,
                );
            }
            Ok(Some(Sample {
                features,
                obs_label: r.obs_label,
                target_label: r.target_label,
                verb_id: r.verb_id,
                noun_id: r.noun_id,
            }))
        })
        .collect::<Result<_>>()?;
    let total = loaded.len();
    let kept: Vec<Sample> = loaded.into_iter().flatten().collect();
    if kept.len() < total {
        log::warn!(
            "{} split: rejected {} of {total} samples shorter than {want} steps",
            split.name(),
            total - kept.len()
        );
    }
    Ok(kept)
}

pub fn read_index(path: impl AsRef<Path>) -> Result<Vec<IndexRecord>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::json(path, e))?);
    }
    Ok(out)
}

pub fn write_index(path: impl AsRef<Path>, records: &[IndexRecord]) -> Result<()> {
    let path = path.as_ref();
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::json(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: impl Into<PathBuf>, value: &T) -> Result<()> {
    let path = path.into();
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, s + "\n").map_err(|e| Error::io(&path, e))
}
