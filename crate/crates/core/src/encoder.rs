//! Sinusoidal positional encoding, Transformer blocks and pooling of the
//! encoded sequence into a single summary row.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Graph, Linear, ParamId, ParamStore, Rng, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    ClassToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormOrder {
    /// Sublayer, residual add, then LayerNorm.
    PostNorm,
    /// LayerNorm, sublayer, then residual add.
    PreNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalKind {
    Sinusoidal,
    Learned,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub m_blocks: usize,
    pub n_heads: usize,
    /// FFN hidden width; `None` means `4 · d_x`.
    pub ffn_hidden: Option<usize>,
    pub pooling: Pooling,
    pub dropout: f64,
    pub norm: NormOrder,
    pub positional: PositionalKind,
    /// Rows of the learned positional table.
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            m_blocks: 1,
            n_heads: 4,
            ffn_hidden: None,
            pooling: Pooling::Mean,
            dropout: 0.0,
            norm: NormOrder::PostNorm,
            positional: PositionalKind::Sinusoidal,
            max_len: 16,
        }
    }
}

impl EncoderConfig {
    pub fn ffn_width(&self, d_x: usize) -> usize {
        self.ffn_hidden.unwrap_or(4 * d_x)
    }

    pub fn validate(&self, d_x: usize) -> Result<()> {
        if self.n_heads == 0 || d_x % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_x = {d_x} is not divisible by n_heads = {}",
                self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.ffn_width(d_x) == 0 {
            return Err(Error::Config("ffn_hidden must be positive".into()));
        }
        if self.positional == PositionalKind::Sinusoidal && d_x < 2 {
            return Err(Error::Config("sinusoidal encoding needs d_x >= 2".into()));
        }
        Ok(())
    }
}

/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(...)`.
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    let mut out = Tensor::zeros(&[t, d]);
    for pos in 0..t {
        for j in 0..d {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
            out.data_mut()[pos * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[1, d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layernorm(x, gain, bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d: usize, n_heads: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d),
            out: Linear::new(store, rng, &format!("{name}.out"), d, d),
            n_heads,
        }
    }

    /// Returns the output and the per-head attention matrices.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Vec<Var>)> {
        let d = g.value(x).cols();
        let dh = d / self.n_heads;
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, x)?;
        let v = self.v.forward(g, store, x)?;
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let a = g.softmax(scores);
            heads.push(g.matmul(a, vh)?);
            weights.push(a);
        }
        let cat = g.concat_cols(&heads)?;
        Ok((self.out.forward(g, store, cat)?, weights))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNormParams,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub ln2: LayerNormParams,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d: usize, cfg: &EncoderConfig) -> Self {
        let hidden = cfg.ffn_width(d);
        Self {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, cfg.n_heads),
            ln1: LayerNormParams::new(store, &format!("{name}.ln1"), d),
            ffn1: Linear::new(store, rng, &format!("{name}.ffn1"), d, hidden),
            ffn2: Linear::new(store, rng, &format!("{name}.ffn2"), hidden, d),
            ln2: LayerNormParams::new(store, &format!("{name}.ln2"), d),
        }
    }

    fn ffn(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.ffn1.forward(g, store, x)?;
        let h = g.relu(h);
        self.ffn2.forward(g, store, h)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        norm: NormOrder,
        mut dropout: Option<(&mut Rng, f64)>,
    ) -> Result<(Var, Vec<Var>)> {
        match norm {
            NormOrder::PostNorm => {
                let (a, w) = self.attn.forward(g, store, x)?;
                let a = apply_dropout(g, a, dropout.as_mut())?;
                let r = g.add(x, a)?;
                let x1 = self.ln1.forward(g, store, r)?;
                let f = self.ffn(g, store, x1)?;
                let f = apply_dropout(g, f, dropout.as_mut())?;
                let r = g.add(x1, f)?;
                Ok((self.ln2.forward(g, store, r)?, w))
            }
            NormOrder::PreNorm => {
                let n = self.ln1.forward(g, store, x)?;
                let (a, w) = self.attn.forward(g, store, n)?;
                let a = apply_dropout(g, a, dropout.as_mut())?;
                let x1 = g.add(x, a)?;
                let n = self.ln2.forward(g, store, x1)?;
                let f = self.ffn(g, store, n)?;
                let f = apply_dropout(g, f, dropout.as_mut())?;
                Ok((g.add(x1, f)?, w))
            }
        }
    }
}

/// Inverted dropout; identity when `rate` is 0 or no RNG is supplied.
fn apply_dropout(g: &mut Graph, x: Var, dropout: Option<&mut (&mut Rng, f64)>) -> Result<Var> {
    match dropout {
        Some((rng, rate)) if *rate > 0.0 => {
            let keep = 1.0 / (1.0 - *rate);
            let mask = (0..g.value(x).numel())
                .map(|_| if rng.uniform() < *rate { 0.0 } else { keep })
                .collect();
            g.mask_mul(x, mask)
        }
        _ => Ok(x),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// Encoded sequence, same shape as the input.
    pub e: Var,
    /// Summary row `h`.
    pub h: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub d: usize,
    pub blocks: Vec<TransformerBlock>,
    pub class_token: Option<ParamId>,
    pub learned_pe: Option<ParamId>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, cfg: EncoderConfig, d: usize) -> Result<Self> {
        cfg.validate(d)?;
        let blocks = (0..cfg.m_blocks)
            .map(|m| TransformerBlock::new(store, rng, &format!("encoder.block{m}"), d, &cfg))
            .collect();
        let class_token = (cfg.pooling == Pooling::ClassToken)
            .then(|| store.add("encoder.class_token", rng.normal_tensor(&[1, d], 0.02)));
        let learned_pe = (cfg.positional == PositionalKind::Learned)
            .then(|| store.add("encoder.pos_embedding", rng.normal_tensor(&[cfg.max_len, d], 0.02)));
        Ok(Self {
            cfg,
            d,
            blocks,
            class_token,
            learned_pe,
        })
    }

    /// Adds positions, runs the blocks and pools. Dropout is active only
    /// when an RNG is supplied.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, rng: Option<&mut Rng>) -> Result<EncoderOutput> {
        Ok(self.forward_traced(g, store, x, rng)?.0)
    }

    /// As [`Encoder::forward`], also returning every attention matrix.
    pub fn forward_traced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mut rng: Option<&mut Rng>,
    ) -> Result<(EncoderOutput, Vec<Var>)> {
        let (t, d) = (g.value(x).rows(), g.value(x).cols());
        if t == 0 {
            return Err(Error::Protocol("encoder input has no tokens".into()));
        }
        if d != self.d {
            return Err(Error::Shape {
                op: "encoder",
                lhs: vec![t, d],
                rhs: vec![t, self.d],
            });
        }
        let mut x = match self.cfg.positional {
            PositionalKind::Sinusoidal => {
                let pe = g.constant(positional_encoding(t, d));
                g.add(x, pe)?
            }
            PositionalKind::Learned => {
                if t > self.cfg.max_len {
                    return Err(Error::Config(format!(
                        "sequence of {t} tokens exceeds max_len {}",
                        self.cfg.max_len
                    )));
                }
                let table = g.param(store, self.learned_pe.expect("learned table"));
                let pe = g.slice_rows(table, 0, t)?;
                g.add(x, pe)?
            }
            PositionalKind::None => x,
        };
        if let Some(id) = self.class_token {
            let cls = g.param(store, id);
            x = g.concat_rows(&[cls, x])?;
        }
        let mut attn = Vec::new();
        for block in &self.blocks {
            let dropout = rng.as_deref_mut().map(|r| (r, self.cfg.dropout));
            let (y, w) = block.forward(g, store, x, self.cfg.norm, dropout)?;
            x = y;
            attn.extend(w);
        }
        let out = match self.cfg.pooling {
            Pooling::Mean => EncoderOutput { e: x, h: g.mean_rows(x) },
            Pooling::ClassToken => EncoderOutput {
                e: g.slice_rows(x, 1, t)?,
                h: g.slice_rows(x, 0, 1)?,
            },
        };
        Ok((out, attn))
    }
}
