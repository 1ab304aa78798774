//! Synthetic action-grammar benchmark.
//!
//! Every sample draws an observed class `c` uniformly. With probability `λ`
//! (the informativeness) the target follows the transition rule from `c`;
//! otherwise it is uniform over all classes. Every stored step of every
//! modality is `prototype(c) + N(0, σ²)`. Class semantics are
//! `λ·P[c] + (1 − λ)·b` for class-specific Gaussian rows `P` and a shared
//! Gaussian row `b`, so `λ = 0` makes every semantic row identical.
//!
//! Draw order from `Rng::new(seed)`: successor permutation (successor rule
//! only), per-modality prototypes in modality order, `P`, `b`, then the
//! train, val and test samples in turn.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::dataset::{ActionParts, Dataset, DatasetMeta, FeatureSequence, Sample, Split};
use super::protocol::AnticipationProtocol;
use crate::error::{Error, Result};
use crate::numcore::{Rng, Tensor};
use crate::semantics::SemanticMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransitionRule {
    /// Target is `successor[c]` for a seeded random permutation.
    Successor,
    /// Target drawn from row `c` of a row-stochastic `N × N` matrix.
    Markov { matrix: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub d_v: usize,
    pub d_s: usize,
    pub noise_sigma: f64,
    /// λ in `[0, 1]`.
    pub informativeness: f64,
    pub transition: TransitionRule,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    pub seed: u64,
    pub modalities: Vec<String>,
    /// Action `c` decomposes into verb `c % n_verbs` and noun `c / n_verbs`.
    pub n_verbs: usize,
    pub protocol: AnticipationProtocol,
    /// Anticipation step at which the Bayes ceiling is evaluated.
    pub ceiling_step: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 10,
            d_v: 32,
            d_s: 16,
            noise_sigma: 0.1,
            informativeness: 1.0,
            transition: TransitionRule::Successor,
            train_samples: 2000,
            val_samples: 500,
            test_samples: 500,
            seed: 0,
            modalities: vec!["rgb".to_string()],
            n_verbs: 5,
            protocol: AnticipationProtocol::default(),
            ceiling_step: 4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 {
            return bad(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.d_v == 0 || self.d_s == 0 {
            return bad("feature dimensions must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.informativeness) {
            return bad(format!("informativeness must be in [0, 1], got {}", self.informativeness));
        }
        if self.modalities.is_empty() {
            return bad("at least one modality is required".into());
        }
        if self.n_verbs == 0 || self.n_verbs > self.n_classes {
            return bad(format!("n_verbs must be in [1, n_classes], got {}", self.n_verbs));
        }
        self.protocol.validate()?;
        self.protocol.observed_steps(self.ceiling_step)?;
        if let TransitionRule::Markov { matrix } = &self.transition {
            if matrix.len() != self.n_classes {
                return bad(format!("markov matrix has {} rows, expected {}", matrix.len(), self.n_classes));
            }
            for (i, row) in matrix.iter().enumerate() {
                let sum: f64 = row.iter().sum();
                if row.len() != self.n_classes || row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                    return bad(format!("markov row {i} is not a probability vector"));
                }
            }
        }
        Ok(())
    }

    /// `R[c][t]`, the rule-implied target distribution before λ-mixing.
    fn rule_matrix(&self, successor: Option<&[usize]>) -> Vec<Vec<f64>> {
        match &self.transition {
            TransitionRule::Markov { matrix } => matrix.clone(),
            TransitionRule::Successor => {
                let succ = successor.expect("successor map");
                (0..self.n_classes)
                    .map(|c| {
                        let mut row = vec![0.0; self.n_classes];
                        row[succ[c]] = 1.0;
                        row
                    })
                    .collect()
            }
        }
    }

    /// `P(target = t | obs = c) = λ R[c][t] + (1 − λ)/N`.
    pub fn transition_matrix(&self, successor: Option<&[usize]>) -> Vec<Vec<f64>> {
        let lam = self.informativeness;
        let uniform = (1.0 - lam) / self.n_classes as f64;
        self.rule_matrix(successor)
            .into_iter()
            .map(|row| row.into_iter().map(|p| lam * p + uniform).collect())
            .collect()
    }

    pub fn class_name(&self, c: usize) -> String {
        format!("verb{} noun{}", c % self.n_verbs, c / self.n_verbs)
    }
}

/// Accuracy of the Bayes-optimal predictor that knows the generative
/// model, measured on a realized split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BayesCeiling {
    pub step: usize,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub config: SynthConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub successor: Option<Vec<usize>>,
    pub val_ceiling: Option<BayesCeiling>,
    pub test_ceiling: Option<BayesCeiling>,
}

/// Hidden generative quantities, returned alongside the dataset for
/// oracles and tests. Not persisted.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    pub successor: Option<Vec<usize>>,
    /// Modality name to `[N × d_v]` prototypes.
    pub prototypes: BTreeMap<String, Tensor>,
    pub transition: Vec<Vec<f64>>,
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    generate_with_truth(cfg).map(|(d, _)| d)
}

pub fn generate_with_truth(cfg: &SynthConfig) -> Result<(Dataset, SynthTruth)> {
    cfg.validate()?;
    let n = cfg.n_classes;
    let mut rng = Rng::new(cfg.seed);

    let successor = match cfg.transition {
        TransitionRule::Successor => Some(rng.permutation(n)),
        TransitionRule::Markov { .. } => None,
    };
    let mut prototypes = BTreeMap::new();
    for m in &cfg.modalities {
        prototypes.insert(m.clone(), rng.normal_tensor(&[n, cfg.d_v], 1.0));
    }
    let class_part = rng.normal_tensor(&[n, cfg.d_s], 1.0);
    let shared = rng.normal_tensor(&[1, cfg.d_s], 1.0);
    let lam = cfg.informativeness;
    let mut s = Tensor::zeros(&[n, cfg.d_s]);
    for c in 0..n {
        for j in 0..cfg.d_s {
            s.data_mut()[c * cfg.d_s + j] = lam * class_part.get(c, j) + (1.0 - lam) * shared.get(0, j);
        }
    }
    s.round_to_f32();
    let semantic = SemanticMatrix::new(s, (0..n).map(|c| cfg.class_name(c)).collect())?;
    let rule = cfg.rule_matrix(successor.as_deref());

    let steps = cfg.protocol.total_steps();
    let target_start_s = steps as f64 * cfg.protocol.alpha_s;
    let mut draw_split = |split: Split, count: usize| -> Result<Vec<Sample>> {
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let obs = rng.below(n);
            let target = if rng.uniform() < lam {
                match &successor {
                    Some(succ) => succ[obs],
                    None => rng.categorical(&rule[obs]),
                }
            } else {
                rng.below(n)
            };
            let segment_id = format!("{}_{i:05}", split.name());
            let mut features = BTreeMap::new();
            for m in &cfg.modalities {
                let proto = prototypes[m].row(obs);
                let mut t = Tensor::zeros(&[steps, cfg.d_v]);
                for (k, v) in t.data_mut().iter_mut().enumerate() {
                    *v = proto[k % cfg.d_v] + cfg.noise_sigma * rng.normal();
                }
                t.round_to_f32();
                features.insert(m.clone(), FeatureSequence::new(t, segment_id.clone(), target_start_s)?);
            }
            out.push(Sample {
                features,
                obs_label: obs,
                target_label: target,
                verb_id: Some(target % cfg.n_verbs),
                noun_id: Some(target / cfg.n_verbs),
            });
        }
        Ok(out)
    };
    let train = draw_split(Split::Train, cfg.train_samples)?;
    let val = draw_split(Split::Val, cfg.val_samples)?;
    let test = draw_split(Split::Test, cfg.test_samples)?;

    let truth = SynthTruth {
        transition: cfg.transition_matrix(successor.as_deref()),
        successor: successor.clone(),
        prototypes,
    };
    let ceiling = |samples: &[Sample]| {
        (!samples.is_empty())
            .then(|| bayes_ceiling(cfg, &truth, samples, cfg.ceiling_step))
            .transpose()
    };
    let meta = DatasetMeta {
        protocol: cfg.protocol,
        actions: Some(
            (0..n)
                .map(|c| ActionParts {
                    verb: c % cfg.n_verbs,
                    noun: c / cfg.n_verbs,
                })
                .collect(),
        ),
        synth: Some(SynthMeta {
            config: cfg.clone(),
            successor,
            val_ceiling: ceiling(&val)?,
            test_ceiling: ceiling(&test)?,
        }),
    };
    let dataset = Dataset {
        semantic,
        meta,
        train,
        val,
        test,
    };
    Ok((dataset, truth))
}

/// Posterior over the observed class given the mean of the observed
/// steps of every modality, under the known prototypes and noise level.
pub fn observed_class_posterior(
    cfg: &SynthConfig,
    truth: &SynthTruth,
    sample: &Sample,
    step: usize,
) -> Result<Vec<f64>> {
    let n = cfg.n_classes;
    let k = cfg.protocol.observed_steps(step)?;
    let mut dist2 = vec![0.0; n];
    for (m, protos) in &truth.prototypes {
        let obs = sample.modality(m)?.observe(&cfg.protocol, step)?;
        let mut mean = vec![0.0; obs.cols()];
        for r in 0..k {
            for (acc, v) in mean.iter_mut().zip(obs.row(r)) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= k as f64);
        for (c, d) in dist2.iter_mut().enumerate() {
            *d += protos.row(c).iter().zip(&mean).map(|(p, x)| (p - x) * (p - x)).sum::<f64>();
        }
    }
    let sigma2 = cfg.noise_sigma * cfg.noise_sigma;
    if sigma2 == 0.0 {
        // point mass on the nearest prototype, lowest id on ties
        let best = argmin(&dist2);
        let mut post = vec![0.0; n];
        post[best] = 1.0;
        return Ok(post);
    }
    // mean of k iid steps has variance σ²/k per dimension
    let mut logp: Vec<f64> = dist2.iter().map(|d| -(k as f64) * d / (2.0 * sigma2)).collect();
    crate::numcore::softmax_slice(&mut logp);
    Ok(logp)
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// Top-1/top-5 accuracy of `argmax_t Σ_c P(c | observation) T[c][t]`.
pub fn bayes_ceiling(cfg: &SynthConfig, truth: &SynthTruth, samples: &[Sample], step: usize) -> Result<BayesCeiling> {
    let n = cfg.n_classes;
    let mut hit1 = 0usize;
    let mut hit5 = 0usize;
    for s in samples {
        let post = observed_class_posterior(cfg, truth, s, step)?;
        let mut pred = vec![0.0; n];
        for (c, &pc) in post.iter().enumerate() {
            if pc == 0.0 {
                continue;
            }
            for (t, p) in pred.iter_mut().enumerate() {
                *p += pc * truth.transition[c][t];
            }
        }
        let ranked = crate::objective::rank_desc(&pred);
        if ranked[0] == s.target_label {
            hit1 += 1;
        }
        if ranked.iter().take(5).any(|&t| t == s.target_label) {
            hit5 += 1;
        }
    }
    let total = samples.len().max(1) as f64;
    Ok(BayesCeiling {
        step,
        top1: hit1 as f64 / total,
        top5: hit5 as f64 / total,
    })
}
