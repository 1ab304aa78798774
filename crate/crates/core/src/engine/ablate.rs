use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::TrainConfig;
use super::train::train;
use crate::datamodel::Dataset;
use crate::error::{Error, Result};

/// One configuration of a grid: `overrides` is merged into the base
/// training config's JSON form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    #[serde(default)]
    pub overrides: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    #[serde(default)]
    pub base: TrainConfig,
    pub cells: Vec<AblationCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    /// Validation Top-5 at the 1 s step of the selected epoch.
    pub top5_1s: Option<f64>,
    pub top1_1s: Option<f64>,
    pub best_epoch: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(13);
        let mut s = format!("{:<width$}  Top-5 @ 1s (%)\n", "configuration");
        for r in &self.rows {
            match (r.top5_1s, &r.error) {
                (Some(v), _) => s.push_str(&format!("{:<width$}  {:>6.2}\n", r.name, 100.0 * v)),
                (None, Some(e)) => s.push_str(&format!("{:<width$}  failed: {e}\n", r.name)),
                (None, None) => s.push_str(&format!("{:<width$}  -\n", r.name)),
            }
        }
        s
    }
}

/// Recursive object merge; non-object values in `patch` replace `base`.
pub fn merge_json(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge_json(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn cell_config(base: &TrainConfig, cell: &AblationCell) -> Result<TrainConfig> {
    let mut v = serde_json::to_value(base).map_err(|e| Error::Config(e.to_string()))?;
    if !cell.overrides.is_null() {
        merge_json(&mut v, &cell.overrides);
    }
    serde_json::from_value(v).map_err(|e| Error::Config(format!("cell {}: {e}", cell.name)))
}

/// Trains one model per cell with the same seed and budget. A failing
/// cell is recorded in its row and the grid continues.
pub fn ablate(grid: &AblationGrid, data: &Dataset) -> AblationTable {
    let rows = grid
        .cells
        .iter()
        .map(|cell| {
            let run = cell_config(&grid.base, cell).and_then(|cfg| train(&cfg, data));
            match run {
                Ok(out) => AblationRow {
                    name: cell.name.clone(),
                    top5_1s: Some(out.checkpoint.val_top5),
                    top1_1s: Some(out.checkpoint.val_top1),
                    best_epoch: Some(out.checkpoint.epoch),
                    error: None,
                },
                Err(e) => {
                    log::warn!("ablation cell {} failed: {e}", cell.name);
                    AblationRow {
                        name: cell.name.clone(),
                        top5_1s: None,
                        top1_1s: None,
                        best_epoch: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    AblationTable { rows }
}
