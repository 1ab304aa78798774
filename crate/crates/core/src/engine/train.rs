use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{one_second_step, HorizonPolicy, TrainConfig};
use super::evaluate::{check_compatible, sample_input, score_split};
use crate::datamodel::Dataset;
use crate::error::{Error, Result};
use crate::model::{LossValues, Model, ModelConfig};
use crate::numcore::{Graph, Rng, Tensor};
use crate::objective::{top5_accuracy, top_k_accuracy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean over the epoch's examples.
    pub train_loss: LossValues,
    pub val_top1: f64,
    pub val_top5: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the selected epoch.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
}

/// Model architecture for `cfg` sized to `data`, with fresh parameters.
pub fn build_model(cfg: &TrainConfig, data: &Dataset) -> Result<Model> {
    let model_cfg = ModelConfig {
        n_classes: data.n_classes(),
        d_v: data.feature_dim(&cfg.modality)?,
        d_s: data.semantic.dim(),
        modality: cfg.modality.clone(),
        protocol: *data.protocol(),
        fusion: cfg.fusion,
        encoder: cfg.encoder,
        semantic: cfg.semantic.clone(),
    };
    model_cfg.check_loss(&cfg.loss)?;
    Model::new(model_cfg, data.semantic.clone(), cfg.seed)
}

// stream ids for Rng::derive
const ORDER_STREAM: u64 = 1;
const DROPOUT_STREAM_BASE: u64 = 1 << 32;

/// SGD with momentum. After every epoch the validation split is scored at
/// the 1 s step; the epoch with the best Top-5 there is kept (ties go to
/// the higher Top-1, then to the earlier epoch).
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let mut model = build_model(cfg, data)?;
    check_compatible(&model, data)?;
    let protocol = *data.protocol();
    let sel_step = one_second_step(&protocol);
    let mut order_rng = Rng::derive(cfg.seed, ORDER_STREAM);
    let mut velocity: Vec<Tensor> = model.params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, f64, usize, Model)> = None;
    let mut example_counter: u64 = 0;

    for epoch in 1..=cfg.epochs {
        let order = order_rng.permutation(data.train.len());
        let jobs: Vec<(usize, usize)> = match cfg.horizon_policy {
            HorizonPolicy::Uniform => order
                .into_iter()
                .map(|i| (i, 1 + order_rng.below(protocol.s_ant)))
                .collect(),
            HorizonPolicy::All => order
                .into_iter()
                .flat_map(|i| protocol.steps().map(move |n| (i, n)))
                .collect(),
        };
        let mut epoch_loss = LossValues::default();
        for (batch_idx, batch) in jobs.chunks(cfg.batch_size).enumerate() {
            let base = example_counter;
            example_counter += batch.len() as u64;
            let results: Vec<(Vec<Tensor>, LossValues)> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &(i, n))| -> Result<_> {
                    let sample = &data.train[i];
                    let input = sample_input(&model, sample, n)?;
                    let mut g = Graph::new();
                    let mut drop_rng = Rng::derive(cfg.seed, DROPOUT_STREAM_BASE + base + k as u64);
                    let dropout = (cfg.encoder.dropout > 0.0).then_some(&mut drop_rng);
                    let (loss, values) =
                        model.loss_graph(&mut g, &model.params, &input, sample.target_label, &cfg.loss, dropout)?;
                    let grads = g.backward(loss);
                    let mut dense: Vec<Tensor> =
                        model.params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
                    for (id, grad) in g.param_grads(&grads) {
                        dense[id.0] = grad;
                    }
                    Ok((dense, values))
                })
                .collect::<Result<_>>()?;

            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = LossValues::default();
            let mut sum: Vec<Tensor> = model.params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
            for (grads, values) in &results {
                batch_loss.add(values);
                for (acc, g) in sum.iter_mut().zip(grads) {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
            }
            let mean = batch_loss.scaled(scale);
            let grads_finite = sum.iter().all(Tensor::is_finite);
            if !mean.is_finite() || !grads_finite {
                let es = cfg.loss.mode == crate::objective::LossMode::Es;
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    tgt: mean.tgt,
                    obs: es.then_some(mean.obs),
                    cos: es.then_some(mean.cos),
                    mse: es.then_some(mean.mse),
                });
            }
            epoch_loss.add(&batch_loss);

            let ids: Vec<_> = model.params.ids().collect();
            for (k, id) in ids.into_iter().enumerate() {
                let v = velocity[k].data_mut();
                let p = model.params.value_mut(id).data_mut();
                for ((vi, pi), gi) in v.iter_mut().zip(p.iter_mut()).zip(sum[k].data()) {
                    *vi = cfg.momentum * *vi + gi * scale;
                    *pi = (*pi - cfg.lr * *vi) as f32 as f64;
                }
            }
        }
        let train_loss = epoch_loss.scaled(1.0 / jobs.len() as f64);

        let (val_top1, val_top5) = if data.val.is_empty() {
            (0.0, 0.0)
        } else {
            let s = score_split(&model, &data.val, sel_step)?;
            (top_k_accuracy(&s.scores, &s.labels, 1)?, top5_accuracy(&s.scores, &s.labels)?)
        };
        log::info!(
            "epoch {epoch}: loss {:.5} (tgt {:.5}), val top1 {:.4} top5 {:.4}",
            train_loss.total,
            train_loss.tgt,
            val_top1,
            val_top5
        );
        history.push(EpochStats {
            epoch,
            train_loss,
            val_top1,
            val_top5,
        });
        let better = match &best {
            None => true,
            Some((b5, b1, _, _)) => val_top5 > *b5 || (val_top5 == *b5 && val_top1 > *b1),
        };
        if better {
            best = Some((val_top5, val_top1, epoch, model.clone()));
        }
    }

    let (val_top5, val_top1, epoch, model) = match best {
        Some(b) => b,
        None => (0.0, 0.0, 0, model),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            train: cfg.clone(),
            epoch,
            val_top5,
            val_top1,
        },
        history,
    })
}
