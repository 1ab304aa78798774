//! Visual-semantic fusion: combines the observed visual sequence `F`
//! (`T × d_v`) with one semantic vector `s` (`1 × d_s`) into the sequence
//! `X` the encoder consumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Graph, Linear, ParamId, ParamStore, Rng, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    /// Visual features only; the semantic path is not built.
    None,
    Concat,
    WeightedSum,
    Mlp,
    Attention,
}

/// Which side is mapped into the other's feature space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    ProjectSemantic,
    ProjectVisual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub strategy: FusionStrategy,
    /// Used by WeightedSum and Attention.
    pub projection: Projection,
    pub mlp_hidden: usize,
    pub init_w_vis: f64,
    pub init_w_sem: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            strategy: FusionStrategy::WeightedSum,
            projection: Projection::ProjectSemantic,
            mlp_hidden: 64,
            init_w_vis: 1.0,
            init_w_sem: 1.0,
        }
    }
}

impl FusionConfig {
    pub fn visual_only() -> Self {
        Self {
            strategy: FusionStrategy::None,
            ..Self::default()
        }
    }

    pub fn with_strategy(strategy: FusionStrategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn uses_semantics(&self) -> bool {
        self.strategy != FusionStrategy::None
    }

    /// Width of the shared space for projected strategies.
    fn common_dim(&self, d_v: usize, d_s: usize) -> usize {
        match self.projection {
            Projection::ProjectSemantic => d_v,
            Projection::ProjectVisual => d_s,
        }
    }

    /// Token width `d_x` of the fused sequence.
    pub fn output_dim(&self, d_v: usize, d_s: usize) -> usize {
        match self.strategy {
            FusionStrategy::None | FusionStrategy::Mlp => d_v,
            FusionStrategy::Concat => d_v + d_s,
            FusionStrategy::WeightedSum | FusionStrategy::Attention => self.common_dim(d_v, d_s),
        }
    }

    /// Tokens added on top of the observed steps.
    pub fn extra_tokens(&self) -> usize {
        usize::from(self.strategy == FusionStrategy::Attention)
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategy == FusionStrategy::Mlp && self.mlp_hidden == 0 {
            return Err(Error::Config("fusion mlp_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Trainable fusion parameters for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    cfg: FusionConfig,
    d_v: usize,
    d_s: usize,
    pub proj: Option<Linear>,
    pub w_vis: Option<ParamId>,
    pub w_sem: Option<ParamId>,
    pub mlp: Option<(Linear, Linear)>,
    pub attn_out: Option<Linear>,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, cfg: FusionConfig, d_v: usize, d_s: usize) -> Result<Self> {
        cfg.validate()?;
        let mut f = Self {
            cfg,
            d_v,
            d_s,
            proj: None,
            w_vis: None,
            w_sem: None,
            mlp: None,
            attn_out: None,
        };
        let projected = matches!(cfg.strategy, FusionStrategy::WeightedSum | FusionStrategy::Attention);
        if projected {
            f.proj = Some(match cfg.projection {
                Projection::ProjectSemantic => Linear::new(store, rng, "fusion.proj", d_s, d_v),
                Projection::ProjectVisual => Linear::new(store, rng, "fusion.proj", d_v, d_s),
            });
        }
        match cfg.strategy {
            FusionStrategy::WeightedSum => {
                f.w_vis = Some(store.add("fusion.w_vis", Tensor::scalar(cfg.init_w_vis)));
                f.w_sem = Some(store.add("fusion.w_sem", Tensor::scalar(cfg.init_w_sem)));
            }
            FusionStrategy::Mlp => {
                let h = Linear::new(store, rng, "fusion.mlp.hidden", d_v + d_s, cfg.mlp_hidden);
                let o = Linear::new(store, rng, "fusion.mlp.out", cfg.mlp_hidden, d_v);
                f.mlp = Some((h, o));
            }
            FusionStrategy::Attention => {
                let d_c = cfg.common_dim(d_v, d_s);
                f.attn_out = Some(Linear::new(store, rng, "fusion.attn_out", d_c + d_s, d_c));
            }
            FusionStrategy::None | FusionStrategy::Concat => {}
        }
        Ok(f)
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn output_dim(&self) -> usize {
        self.cfg.output_dim(self.d_v, self.d_s)
    }

    /// `X = Θ(s, F)`. `s` may be `None` only for the visual-only strategy.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, s: Option<Var>, f: Var) -> Result<Var> {
        if self.cfg.strategy == FusionStrategy::None {
            return Ok(f);
        }
        let s = s.ok_or_else(|| Error::Config("fusion strategy needs a semantic feature".into()))?;
        match self.cfg.strategy {
            FusionStrategy::None => unreachable!(),
            FusionStrategy::Concat => fuse_concat(g, s, f),
            FusionStrategy::WeightedSum => {
                let (s_c, f_c) = self.project(g, store, s, f)?;
                let w_vis = g.param(store, self.w_vis.expect("weighted-sum params"));
                let w_sem = g.param(store, self.w_sem.expect("weighted-sum params"));
                fuse_weighted_sum(g, s_c, f_c, w_vis, w_sem)
            }
            FusionStrategy::Mlp => {
                let (h, o) = self.mlp.as_ref().expect("mlp params");
                fuse_mlp(g, store, s, f, h, o)
            }
            FusionStrategy::Attention => {
                let (q, kv) = self.project(g, store, s, f)?;
                let out = self.attn_out.as_ref().expect("attention params");
                Ok(fuse_attention(g, store, q, kv, s, out)?.0)
            }
        }
    }

    /// Maps `(s, F)` into the common space per the projection direction.
    pub fn project(&self, g: &mut Graph, store: &ParamStore, s: Var, f: Var) -> Result<(Var, Var)> {
        let proj = self.proj.as_ref().ok_or_else(|| Error::Config("strategy has no projection".into()))?;
        match self.cfg.projection {
            Projection::ProjectSemantic => Ok((proj.forward(g, store, s)?, f)),
            Projection::ProjectVisual => Ok((s, proj.forward(g, store, f)?)),
        }
    }
}

/// `[f_t ‖ s]` for every step.
pub fn fuse_concat(g: &mut Graph, s: Var, f: Var) -> Result<Var> {
    let t = g.value(f).rows();
    let tiled = g.broadcast_rows(s, t)?;
    g.concat_cols(&[f, tiled])
}

/// `x_t = w_vis f_t + w_sem s` with `s` already in the visual space.
pub fn fuse_weighted_sum(g: &mut Graph, s: Var, f: Var, w_vis: Var, w_sem: Var) -> Result<Var> {
    let fv = g.scale_by(f, w_vis)?;
    let sv = g.scale_by(s, w_sem)?;
    g.add_row(fv, sv)
}

/// Two-layer ReLU perceptron applied to `[f_t ‖ s]` at every step.
pub fn fuse_mlp(g: &mut Graph, store: &ParamStore, s: Var, f: Var, hidden: &Linear, out: &Linear) -> Result<Var> {
    let x = fuse_concat(g, s, f)?;
    let h = hidden.forward(g, store, x)?;
    let h = g.relu(h);
    out.forward(g, store, h)
}

/// Single-query attention of `q` over `kv`: returns `(attn, weights)`.
pub fn attend(g: &mut Graph, q: Var, kv: Var) -> Result<(Var, Var)> {
    let d = g.value(kv).cols() as f64;
    let kt = g.transpose(kv);
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / d.sqrt());
    let w = g.softmax(scores);
    Ok((g.matmul(w, kv)?, w))
}

/// `F` with the token `linear([attn ‖ s])` appended. Returns the sequence
/// and the attention weights.
pub fn fuse_attention(
    g: &mut Graph,
    store: &ParamStore,
    q: Var,
    kv: Var,
    s: Var,
    out: &Linear,
) -> Result<(Var, Var)> {
    let (attn, w) = attend(g, q, kv)?;
    let cat = g.concat_cols(&[attn, s])?;
    let token = out.forward(g, store, cat)?;
    Ok((g.concat_rows(&[kv, token])?, w))
}
