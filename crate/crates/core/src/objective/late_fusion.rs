use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LateFusionWeights {
    pub w_a: f64,
    pub w_b: f64,
}

impl Default for LateFusionWeights {
    fn default() -> Self {
        Self { w_a: 0.5, w_b: 0.5 }
    }
}

/// `w_a · scores_a + w_b · scores_b`.
pub fn late_fuse(scores_a: &Tensor, scores_b: &Tensor, w: LateFusionWeights) -> Result<Tensor> {
    if scores_a.shape() != scores_b.shape() {
        return Err(Error::Shape {
            op: "late_fuse",
            lhs: scores_a.shape().to_vec(),
            rhs: scores_b.shape().to_vec(),
        });
    }
    let data = scores_a
        .data()
        .iter()
        .zip(scores_b.data())
        .map(|(a, b)| w.w_a * a + w.w_b * b)
        .collect();
    Tensor::new(scores_a.shape().to_vec(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LateFusionFit {
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    pub init: LateFusionWeights,
}

impl Default for LateFusionFit {
    fn default() -> Self {
        Self {
            iterations: 300,
            lr: 0.05,
            momentum: 0.9,
            init: LateFusionWeights::default(),
        }
    }
}

/// Mean cross-entropy of `softmax(w_a A + w_b B)` against `labels`.
pub(crate) fn fused_ce(
    g: &mut Graph,
    store: &ParamStore,
    ids: (ParamId, ParamId),
    a: &Tensor,
    b: &Tensor,
    labels: &[usize],
) -> Result<Var> {
    let (n_rows, n_cls) = (a.rows(), a.cols());
    let wa = g.param(store, ids.0);
    let wb = g.param(store, ids.1);
    let av = g.constant(a.clone());
    let bv = g.constant(b.clone());
    let sa = g.scale_by(av, wa)?;
    let sb = g.scale_by(bv, wb)?;
    let fused = g.add(sa, sb)?;
    let p = g.softmax(fused);
    let logp = g.log_clamp(p, super::loss::PROB_FLOOR);
    let mut w = vec![0.0; n_rows * n_cls];
    for (r, &l) in labels.iter().enumerate() {
        w[r * n_cls + l] = -1.0 / n_rows as f64;
    }
    g.weighted_sum(logp, w)
}

/// Learns the two fusion weights on held-out scores of frozen
/// per-modality models by full-batch gradient descent with momentum.
pub fn fit_late_fusion(
    scores_a: &Tensor,
    scores_b: &Tensor,
    labels: &[usize],
    fit: &LateFusionFit,
) -> Result<LateFusionWeights> {
    if scores_a.shape() != scores_b.shape() || scores_a.rows() != labels.len() {
        return Err(Error::Shape {
            op: "fit_late_fusion",
            lhs: scores_a.shape().to_vec(),
            rhs: scores_b.shape().to_vec(),
        });
    }
    if labels.is_empty() {
        return Ok(fit.init);
    }
    let mut store = ParamStore::new();
    let ids = (
        store.add("w_a", Tensor::scalar(fit.init.w_a)),
        store.add("w_b", Tensor::scalar(fit.init.w_b)),
    );
    let mut vel = [0.0; 2];
    for _ in 0..fit.iterations {
        let mut g = Graph::new();
        let loss = fused_ce(&mut g, &store, ids, scores_a, scores_b, labels)?;
        if !g.value(loss).item().is_finite() {
            return Err(Error::NonFinite("late fusion loss".into()));
        }
        let grads = g.backward(loss);
        for (k, (id, grad)) in g.param_grads(&grads).into_iter().enumerate() {
            vel[k] = fit.momentum * vel[k] + grad.item();
            store.value_mut(id).data_mut()[0] -= fit.lr * vel[k];
        }
    }
    Ok(LateFusionWeights {
        w_a: store.value(ids.0).item(),
        w_b: store.value(ids.1).item(),
    })
}
