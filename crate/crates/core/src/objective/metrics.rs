use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datamodel::ActionParts;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const TOP_K: usize = 5;

/// Indices ordered by decreasing value; equal values keep ascending index
/// order, so a tie at the cut-off rank goes to the lowest class id.
pub fn rank_desc(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let key = |i: usize| if values[i] == 0.0 { 0.0 } else { values[i] };
    idx.sort_by(|&a, &b| key(b).total_cmp(&key(a)));
    idx
}

/// Whether `label` is among the `k` best-ranked entries of `row`.
pub fn in_top_k(row: &[f64], label: usize, k: usize) -> bool {
    let target = row[label];
    // rank = #(strictly better) + #(equal with lower id)
    let mut rank = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > target || (v == target && i < label) {
            rank += 1;
        }
    }
    rank < k
}

fn check_batch(scores: &Tensor, labels: &[usize]) -> Result<()> {
    if scores.shape().len() != 2 || scores.rows() != labels.len() {
        return Err(Error::Shape {
            op: "metrics",
            lhs: scores.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= scores.cols()) {
        return Err(Error::Index {
            what: "classes",
            index: bad,
            len: scores.cols(),
        });
    }
    Ok(())
}

/// Fraction of rows whose label ranks within the top `min(k, N)`.
pub fn top_k_accuracy(scores: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    check_batch(scores, labels)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let k = k.min(scores.cols());
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| in_top_k(scores.row(r), l, k))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn top5_accuracy(scores: &Tensor, labels: &[usize]) -> Result<f64> {
    top_k_accuracy(scores, labels, TOP_K)
}

/// Top-5 recall per class present in `labels`, averaged with equal class
/// weight.
pub fn mean_top5_recall(scores: &Tensor, labels: &[usize]) -> Result<f64> {
    check_batch(scores, labels)?;
    if labels.is_empty() {
        return Err(Error::Config("mean top-5 recall of an empty batch".into()));
    }
    let k = TOP_K.min(scores.cols());
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (r, &l) in labels.iter().enumerate() {
        let e = per_class.entry(l).or_default();
        e.1 += 1;
        if in_top_k(scores.row(r), l, k) {
            e.0 += 1;
        }
    }
    let sum: f64 = per_class.values().map(|&(h, n)| h as f64 / n as f64).sum();
    Ok(sum / per_class.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionComponent {
    Verb,
    Noun,
}

/// Verb or noun scores from action scores: each group's score is the max
/// over the actions that share it.
pub fn marginalize(scores: &Tensor, parts: &[ActionParts], which: ActionComponent) -> Result<Tensor> {
    if parts.len() != scores.cols() {
        return Err(Error::Shape {
            op: "marginalize",
            lhs: scores.shape().to_vec(),
            rhs: vec![parts.len()],
        });
    }
    let group = |p: &ActionParts| match which {
        ActionComponent::Verb => p.verb,
        ActionComponent::Noun => p.noun,
    };
    let groups = parts.iter().map(group).max().map_or(0, |m| m + 1);
    let mut out = Tensor::full(&[scores.rows(), groups], f64::NEG_INFINITY);
    for r in 0..scores.rows() {
        for (a, p) in parts.iter().enumerate() {
            let slot = &mut out.data_mut()[r * groups + group(p)];
            *slot = slot.max(scores.get(r, a));
        }
    }
    // groups no action maps to stay at -inf; give them the row minimum
    // so rankings stay finite
    for r in 0..scores.rows() {
        let lo = scores.row(r).iter().copied().fold(f64::INFINITY, f64::min);
        for v in &mut out.data_mut()[r * groups..(r + 1) * groups] {
            if *v == f64::NEG_INFINITY {
                *v = lo - 1.0;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerbNounAction {
    pub verb: Option<f64>,
    pub noun: Option<f64>,
    pub action: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonResult {
    pub step: usize,
    pub anticipation_time_s: f64,
    pub observed_steps: usize,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneSecondReport {
    pub step: usize,
    pub top5: VerbNounAction,
    pub mean_top5_recall: VerbNounAction,
}

/// Per-horizon Top-5 accuracy plus verb/noun/action Top-5 accuracy and
/// Mean Top-5 Recall at the 1 s horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub n_samples: usize,
    /// Ordered from the longest anticipation time to the shortest.
    pub horizons: Vec<HorizonResult>,
    pub at_1s: OneSecondReport,
}

impl EvalReport {
    pub fn horizon(&self, step: usize) -> Option<&HorizonResult> {
        self.horizons.iter().find(|h| h.step == step)
    }

    pub fn validate(&self) -> Result<()> {
        let mut all = Vec::new();
        for h in &self.horizons {
            all.extend([h.top1, h.top5]);
        }
        for vna in [self.at_1s.top5, self.at_1s.mean_top5_recall] {
            all.extend(vna.verb);
            all.extend(vna.noun);
            all.push(vna.action);
        }
        if all.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("metric outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Plain-text table in the layout of the usual results table.
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str("Top-5 action accuracy (%) by anticipation time (s)\n");
        for h in &self.horizons {
            s.push_str(&format!("{:>7.2}", h.anticipation_time_s));
        }
        s.push('\n');
        for h in &self.horizons {
            s.push_str(&format!("{:>7.2}", 100.0 * h.top5));
        }
        s.push('\n');
        let fmt = |v: Option<f64>| v.map_or("   /  ".to_string(), |v| format!("{:>6.2}", 100.0 * v));
        s.push_str("@1s         Verb   Noun Action\n");
        let t = self.at_1s.top5;
        s.push_str(&format!("Top-5     {} {} {}\n", fmt(t.verb), fmt(t.noun), fmt(Some(t.action))));
        let m = self.at_1s.mean_top5_recall;
        s.push_str(&format!("MT5R      {} {} {}\n", fmt(m.verb), fmt(m.noun), fmt(Some(m.action))));
        s
    }
}
