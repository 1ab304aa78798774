use rayon::prelude::*;

use super::config::one_second_step;
use crate::datamodel::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, Model, ModelInput};
use crate::numcore::Tensor;
use crate::objective::{
    fit_late_fusion, late_fuse, marginalize, mean_top5_recall, top5_accuracy, top_k_accuracy, ActionComponent,
    EvalReport, HorizonResult, LateFusionFit, LateFusionWeights, OneSecondReport, VerbNounAction,
};

/// Target scores of a whole split at one anticipation step.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitScores {
    /// `[B × N]`.
    pub scores: Tensor,
    pub labels: Vec<usize>,
    pub traces: Vec<ForwardTrace>,
}

pub(crate) fn check_compatible(model: &Model, data: &Dataset) -> Result<()> {
    let cfg = &model.cfg;
    let d_v = data.feature_dim(&cfg.modality)?;
    if d_v != cfg.d_v || data.n_classes() != cfg.n_classes || data.semantic.dim() != cfg.d_s {
        return Err(Error::Config(format!(
            "model expects d_v={} N={} d_s={}, dataset has d_v={d_v} N={} d_s={}",
            cfg.d_v,
            cfg.n_classes,
            cfg.d_s,
            data.n_classes(),
            data.semantic.dim()
        )));
    }
    if data.protocol() != &cfg.protocol {
        return Err(Error::Config("model and dataset protocols differ".into()));
    }
    Ok(())
}

pub(crate) fn sample_input(model: &Model, s: &Sample, n: usize) -> Result<ModelInput> {
    let seq = s.modality(&model.cfg.modality)?;
    Ok(ModelInput {
        visual: seq.observe(&model.cfg.protocol, n)?,
        obs_label: Some(s.obs_label),
        n,
    })
}

/// Scores every sample at step `n`. The observed-action label is passed
/// along, so ground-truth-semantic models see it as an oracle input.
pub fn score_split(model: &Model, samples: &[Sample], n: usize) -> Result<SplitScores> {
    let expect_len = model.cfg.protocol.observed_steps(n)?;
    let outs: Vec<_> = samples
        .par_iter()
        .map(|s| model.forward(&sample_input(model, s, n)?))
        .collect::<Result<_>>()?;
    let n_cls = model.cfg.n_classes;
    let mut data = Vec::with_capacity(samples.len() * n_cls);
    let mut traces = Vec::with_capacity(samples.len());
    for o in outs {
        if o.trace.gru_steps != n || o.trace.observed_len != expect_len {
            return Err(Error::Protocol(format!(
                "step {n}: decoded {} steps on {} observed, expected {n} on {expect_len}",
                o.trace.gru_steps, o.trace.observed_len
            )));
        }
        data.extend_from_slice(o.logits.data());
        traces.push(o.trace);
    }
    Ok(SplitScores {
        scores: Tensor::new(vec![samples.len(), n_cls], data)?,
        labels: samples.iter().map(|s| s.target_label).collect(),
        traces,
    })
}

fn build_report(
    data: &Dataset,
    split: Split,
    mut scores_at: impl FnMut(usize) -> Result<(Tensor, Vec<usize>)>,
) -> Result<EvalReport> {
    let protocol = data.protocol();
    let samples = data.split(split);
    if samples.is_empty() {
        return Err(Error::Config(format!("split {} is empty", split.name())));
    }
    let one_s = one_second_step(protocol);
    let mut horizons = Vec::new();
    let mut at_1s = None;
    for n in protocol.steps().rev() {
        let (scores, labels) = scores_at(n)?;
        horizons.push(HorizonResult {
            step: n,
            anticipation_time_s: protocol.anticipation_time(n)?,
            observed_steps: protocol.observed_steps(n)?,
            top1: top_k_accuracy(&scores, &labels, 1)?,
            top5: top5_accuracy(&scores, &labels)?,
        });
        if n == one_s {
            at_1s = Some(one_second(data, samples, &scores, &labels, n)?);
        }
    }
    let report = EvalReport {
        split: split.name().to_string(),
        n_samples: samples.len(),
        horizons,
        at_1s: at_1s.expect("one-second step is in range"),
    };
    report.validate()?;
    Ok(report)
}

fn one_second(data: &Dataset, samples: &[Sample], scores: &Tensor, labels: &[usize], n: usize) -> Result<OneSecondReport> {
    let mut top5 = VerbNounAction {
        verb: None,
        noun: None,
        action: top5_accuracy(scores, labels)?,
    };
    let mut mt5r = VerbNounAction {
        verb: None,
        noun: None,
        action: mean_top5_recall(scores, labels)?,
    };
    if let Some(parts) = data.action_parts() {
        for which in [ActionComponent::Verb, ActionComponent::Noun] {
            let m = marginalize(scores, &parts, which)?;
            let lab: Vec<usize> = samples
                .iter()
                .map(|s| {
                    let p = parts[s.target_label];
                    match which {
                        ActionComponent::Verb => p.verb,
                        ActionComponent::Noun => p.noun,
                    }
                })
                .collect();
            let (a, r) = (top5_accuracy(&m, &lab)?, mean_top5_recall(&m, &lab)?);
            match which {
                ActionComponent::Verb => (top5.verb, mt5r.verb) = (Some(a), Some(r)),
                ActionComponent::Noun => (top5.noun, mt5r.noun) = (Some(a), Some(r)),
            }
        }
    }
    Ok(OneSecondReport {
        step: n,
        top5,
        mean_top5_recall: mt5r,
    })
}

/// Top-1/Top-5 at every step, plus verb/noun/action Top-5 and Mean Top-5
/// Recall at the 1 s step.
pub fn evaluate(model: &Model, data: &Dataset, split: Split) -> Result<EvalReport> {
    check_compatible(model, data)?;
    let samples = data.split(split);
    build_report(data, split, |n| {
        let s = score_split(model, samples, n)?;
        Ok((s.scores, s.labels))
    })
}

/// Fusion weights for two frozen models, fitted on validation scores at
/// the 1 s step.
pub fn fit_late_fusion_on(a: &Model, b: &Model, data: &Dataset, fit: &LateFusionFit) -> Result<LateFusionWeights> {
    check_compatible(a, data)?;
    check_compatible(b, data)?;
    let n = one_second_step(data.protocol());
    let sa = score_split(a, &data.val, n)?;
    let sb = score_split(b, &data.val, n)?;
    fit_late_fusion(&sa.scores, &sb.scores, &sa.labels, fit)
}

/// Report for `w_a · scores_a + w_b · scores_b`.
pub fn evaluate_late_fusion(
    a: &Model,
    b: &Model,
    data: &Dataset,
    split: Split,
    w: LateFusionWeights,
) -> Result<EvalReport> {
    check_compatible(a, data)?;
    check_compatible(b, data)?;
    let samples = data.split(split);
    build_report(data, split, |n| {
        let sa = score_split(a, samples, n)?;
        let sb = score_split(b, samples, n)?;
        Ok((late_fuse(&sa.scores, &sb.scores, w)?, sa.labels))
    })
}
