//! The full anticipation network: semantic feature, fusion, encoder, GRU
//! decoder and classifier, with the training loss on top.

use serde::{Deserialize, Serialize};

use crate::datamodel::AnticipationProtocol;
use crate::decoder::{anticipate, GruCell};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionConfig};
use crate::numcore::{Graph, Linear, ParamStore, Rng, Tensor, Var};
use crate::objective::{ce_label_smooth, cos_loss, mse_loss, total_loss, LossConfig, LossMode, LossParts};
use crate::semantics::{
    estimate_fw, estimate_nei, estimate_pw, ObsClassifier, SemGenConfig, SemanticMatrix, SemanticMlp,
    SemanticVariant,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub d_v: usize,
    pub d_s: usize,
    pub modality: String,
    pub protocol: AnticipationProtocol,
    pub fusion: FusionConfig,
    pub encoder: EncoderConfig,
    pub semantic: SemGenConfig,
}

impl ModelConfig {
    /// Width of the fused tokens, known before any parameter exists.
    pub fn d_x(&self) -> usize {
        self.fusion.output_dim(self.d_v, self.d_s)
    }

    pub fn uses_semantics(&self) -> bool {
        self.fusion.uses_semantics()
    }

    pub fn estimates_semantics(&self) -> bool {
        self.uses_semantics() && self.semantic.variant.is_estimated()
    }

    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        self.fusion.validate()?;
        let d_x = self.d_x();
        self.encoder.validate(d_x)?;
        if self.n_classes < 2 || self.d_v == 0 || self.d_s == 0 {
            return Err(Error::Config(format!(
                "need n_classes >= 2 and positive dims, got N={} d_v={} d_s={}",
                self.n_classes, self.d_v, self.d_s
            )));
        }
        let tokens = self.protocol.total_steps() + self.fusion.extra_tokens();
        if self.encoder.positional == crate::encoder::PositionalKind::Learned && self.encoder.max_len < tokens {
            return Err(Error::Config(format!(
                "learned positions need max_len >= {tokens}, got {}",
                self.encoder.max_len
            )));
        }
        Ok(())
    }

    /// Loss modes this architecture can produce.
    pub fn check_loss(&self, loss: &LossConfig) -> Result<()> {
        loss.validate()?;
        if loss.mode == LossMode::Es && !self.estimates_semantics() {
            return Err(Error::Config(
                "loss mode es needs an estimated semantic variant and a fusion strategy".into(),
            ));
        }
        Ok(())
    }
}

/// One observation to score.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// Observed steps, `observed_steps(n) × d_v`.
    pub visual: Tensor,
    /// Observed-action label; read only by the ground-truth semantic path.
    pub obs_label: Option<usize>,
    /// Anticipation step.
    pub n: usize,
}

/// What the forward pass touched, for protocol assertions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardTrace {
    /// Row of `S` read by the ground-truth or nearest-row path.
    pub semantic_row: Option<usize>,
    pub gru_steps: usize,
    pub observed_len: usize,
    pub encoder_tokens: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GraphOutput {
    pub logits: Var,
    pub s_hat: Option<Var>,
    pub obs_logits: Option<Var>,
    pub trace: ForwardTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub trace: ForwardTrace,
}

/// Scalar values of the loss terms for one sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub tgt: f64,
    pub obs: f64,
    pub cos: f64,
    pub mse: f64,
}

impl LossValues {
    pub fn add(&mut self, o: &LossValues) {
        self.total += o.total;
        self.tgt += o.tgt;
        self.obs += o.obs;
        self.cos += o.cos;
        self.mse += o.mse;
    }

    pub fn scaled(&self, k: f64) -> LossValues {
        LossValues {
            total: self.total * k,
            tgt: self.tgt * k,
            obs: self.obs * k,
            cos: self.cos * k,
            mse: self.mse * k,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.tgt, self.obs, self.cos, self.mse].iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub semantics: SemanticMatrix,
    pub fusion: Fusion,
    pub encoder: Encoder,
    pub gru: GruCell,
    pub classifier: Linear,
    pub obs_classifier: Option<ObsClassifier>,
    pub semantic_mlp: Option<SemanticMlp>,
}

impl Model {
    /// Fresh parameters drawn from `seed`, rounded to single precision so
    /// that checkpoints hold them exactly.
    pub fn new(cfg: ModelConfig, semantics: SemanticMatrix, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if semantics.n_classes() != cfg.n_classes || semantics.dim() != cfg.d_s {
            return Err(Error::Config(format!(
                "semantic matrix is {}x{}, model expects {}x{}",
                semantics.n_classes(),
                semantics.dim(),
                cfg.n_classes,
                cfg.d_s
            )));
        }
        let mut rng = Rng::new(seed);
        let mut params = ParamStore::new();
        let d_x = cfg.d_x();
        let fusion = Fusion::new(&mut params, &mut rng, cfg.fusion, cfg.d_v, cfg.d_s)?;
        let encoder = Encoder::new(&mut params, &mut rng, cfg.encoder, d_x)?;
        let gru = GruCell::new(&mut params, &mut rng, "decoder.gru", d_x, d_x);
        let classifier = Linear::new(&mut params, &mut rng, "decoder.classifier", d_x, cfg.n_classes);
        let (mut obs_classifier, mut semantic_mlp) = (None, None);
        if cfg.estimates_semantics() {
            obs_classifier = Some(ObsClassifier::new(
                &mut params,
                &mut rng,
                "semantic.obs_classifier",
                cfg.d_v,
                cfg.n_classes,
            ));
            if cfg.semantic.variant == SemanticVariant::Mlp {
                semantic_mlp = Some(SemanticMlp::new(
                    &mut params,
                    &mut rng,
                    "semantic.mlp",
                    cfg.d_v,
                    cfg.semantic.mlp_hidden,
                    cfg.d_s,
                ));
            }
        }
        params.round_to_f32();
        Ok(Self {
            cfg,
            params,
            semantics,
            fusion,
            encoder,
            gru,
            classifier,
            obs_classifier,
            semantic_mlp,
        })
    }

    fn check_input(&self, input: &ModelInput) -> Result<usize> {
        let expect = self.cfg.protocol.observed_steps(input.n)?;
        let shape = input.visual.shape();
        if shape != [expect, self.cfg.d_v] {
            return Err(Error::Shape {
                op: "model input",
                lhs: shape.to_vec(),
                rhs: vec![expect, self.cfg.d_v],
            });
        }
        Ok(expect)
    }

    /// Builds the forward pass on `g` using parameters from `store`.
    /// Dropout is active only when `rng` is supplied.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: &ModelInput,
        rng: Option<&mut Rng>,
    ) -> Result<GraphOutput> {
        let observed_len = self.check_input(input)?;
        let f = g.input(input.visual.clone());
        let mut semantic_row = None;
        let (mut s_hat, mut obs_logits, mut s_fused) = (None, None, None);
        if self.cfg.uses_semantics() {
            let s_const = g.constant(self.semantics.matrix().clone());
            match self.cfg.semantic.variant {
                SemanticVariant::Gts => {
                    let label = input
                        .obs_label
                        .ok_or_else(|| Error::Config("ground-truth semantics need obs_label".into()))?;
                    let row = crate::semantics::gts_lookup(&self.semantics, label)?;
                    semantic_row = Some(label);
                    s_fused = Some(g.constant(row));
                }
                variant => {
                    let oc = self.obs_classifier.as_ref().expect("observation classifier");
                    let (logits, omega) = oc.forward(g, store, f)?;
                    obs_logits = Some(logits);
                    let est = match variant {
                        SemanticVariant::Fw => estimate_fw(g, omega, s_const)?,
                        SemanticVariant::Pw => {
                            let k = self.cfg.semantic.effective_top_k(self.cfg.n_classes);
                            estimate_pw(g, logits, s_const, k)?
                        }
                        SemanticVariant::Nei => {
                            let (row, idx) = estimate_nei(g, logits, s_const)?;
                            semantic_row = Some(idx);
                            row
                        }
                        SemanticVariant::Mlp => {
                            let mlp = self.semantic_mlp.as_ref().expect("semantic mlp");
                            mlp.forward(g, store, f)?
                        }
                        SemanticVariant::Gts => unreachable!(),
                    };
                    s_hat = Some(est);
                    s_fused = Some(if self.cfg.semantic.backprop_through_estimate {
                        est
                    } else {
                        let v = g.value(est).clone();
                        g.constant(v)
                    });
                }
            }
        }
        let x = self.fusion.forward(g, store, s_fused, f)?;
        let tokens = g.value(x).rows();
        let x_last = g.slice_rows(x, tokens - 1, 1)?;
        let enc = self.encoder.forward(g, store, x, rng)?;
        let out = anticipate(
            g,
            store,
            &self.gru,
            &self.classifier,
            enc.h,
            x_last,
            input.n,
            self.cfg.protocol.s_ant,
        )?;
        Ok(GraphOutput {
            logits: out.logits,
            s_hat,
            obs_logits,
            trace: ForwardTrace {
                semantic_row,
                gru_steps: out.steps,
                observed_len,
                encoder_tokens: tokens + usize::from(self.encoder.class_token.is_some()),
            },
        })
    }

    /// Target scores for one input with the model's own parameters.
    pub fn forward(&self, input: &ModelInput) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, &self.params, input, None)?;
        let logits = g.value(out.logits).clone();
        if !logits.is_finite() {
            return Err(Error::NonFinite("model output".into()));
        }
        Ok(ForwardOutput {
            logits,
            trace: out.trace,
        })
    }

    /// Scalar training loss on `g`, plus the value of each term.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: &ModelInput,
        target: usize,
        loss: &LossConfig,
        rng: Option<&mut Rng>,
    ) -> Result<(Var, LossValues)> {
        let out = self.forward_graph(g, store, input, rng)?;
        let probs = g.softmax(out.logits);
        let tgt = ce_label_smooth(g, probs, target, loss.theta)?;
        let mut parts = LossParts {
            tgt,
            obs: None,
            cos: None,
            mse: None,
        };
        if loss.mode == LossMode::Es {
            let obs_label = input
                .obs_label
                .ok_or_else(|| Error::Config("estimated-semantic training needs obs_label".into()))?;
            let obs_logits = out.obs_logits.ok_or(Error::MissingLoss("obs"))?;
            let s_hat = out.s_hat.ok_or(Error::MissingLoss("cos"))?;
            let obs_probs = g.softmax(obs_logits);
            parts.obs = Some(ce_label_smooth(g, obs_probs, obs_label, loss.theta)?);
            let s = g.constant(crate::semantics::gts_lookup(&self.semantics, obs_label)?);
            parts.cos = Some(cos_loss(g, s_hat, s)?);
            parts.mse = Some(mse_loss(g, s_hat, s)?);
        }
        let total = total_loss(g, loss, &parts)?;
        let val = |v: Option<Var>, g: &Graph| v.map_or(0.0, |v| g.value(v).item());
        let values = LossValues {
            total: g.value(total).item(),
            tgt: g.value(tgt).item(),
            obs: val(parts.obs, g),
            cos: val(parts.cos, g),
            mse: val(parts.mse, g),
        };
        Ok((total, values))
    }
}
