use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::datamodel::{read_feature_file, read_json, write_feature_file, write_json};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::semantics::SemanticMatrix;

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;
const PARAM_DIR: &str = "params";
const SEMANTIC_FILE: &str = "semantic.vstg";
const CLASSES_FILE: &str = "classes.json";

/// A trained model with the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    /// Selected epoch (0 when no epoch ran).
    pub epoch: usize,
    pub val_top5: f64,
    pub val_top1: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    val_top5: f64,
    val_top1: f64,
    params: Vec<ParamEntry>,
}

impl Checkpoint {
    /// Writes `dir/manifest.json`, `dir/semantic.vstg`, `dir/classes.json`
    /// and one feature file per parameter tensor under `dir/params/`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let pdir = dir.join(PARAM_DIR);
        fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        let mut params = Vec::new();
        for (_, name, t) in self.model.params.iter() {
            if t.data().iter().any(|&v| v != v as f32 as f64) {
                return Err(Error::Config(format!("parameter {name} is not single-precision exact")));
            }
            let file = format!("{PARAM_DIR}/{name}.vstg");
            write_feature_file(dir.join(&file), &as_matrix(t))?;
            params.push(ParamEntry {
                name: name.to_string(),
                file,
                shape: t.shape().to_vec(),
            });
        }
        self.model.semantics.save(dir.join(SEMANTIC_FILE), dir.join(CLASSES_FILE))?;
        write_json(
            dir.join(MANIFEST_FILE),
            &Manifest {
                format_version: FORMAT_VERSION,
                model: self.model.cfg.clone(),
                train: self.train.clone(),
                epoch: self.epoch,
                val_top5: self.val_top5,
                val_top1: self.val_top1,
                params,
            },
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = read_json(dir.join(MANIFEST_FILE))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint format {} is not supported",
                manifest.format_version
            )));
        }
        let semantics = SemanticMatrix::load(dir.join(SEMANTIC_FILE), dir.join(CLASSES_FILE))?;
        let mut model = Model::new(manifest.model, semantics, 0)?;
        if manifest.params.len() != model.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, architecture has {}",
                manifest.params.len(),
                model.params.len()
            )));
        }
        for entry in &manifest.params {
            let id = model
                .params
                .id(&entry.name)
                .ok_or_else(|| Error::Config(format!("unknown parameter {}", entry.name)))?;
            let m = read_feature_file(dir.join(&entry.file))?;
            let t = crate::numcore::Tensor::new(entry.shape.clone(), m.into_data())?;
            model.params.set(id, t)?;
        }
        Ok(Self {
            model,
            train: manifest.train,
            epoch: manifest.epoch,
            val_top5: manifest.val_top5,
            val_top1: manifest.val_top1,
        })
    }
}

fn as_matrix(t: &crate::numcore::Tensor) -> crate::numcore::Tensor {
    let (rows, cols) = match t.shape() {
        [r, c] => (*r, *c),
        [c] => (1, *c),
        s => (1, s.iter().product()),
    };
    crate::numcore::Tensor::new(vec![rows, cols], t.data().to_vec()).expect("same element count")
}
