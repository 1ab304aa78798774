//! GRU decoding: the encoder summary seeds the hidden state, the last fused
//! token is fed once per anticipation step, and a linear head scores the
//! target action.

use crate::error::{Error, Result};
use crate::numcore::{Graph, Linear, ParamId, ParamStore, Rng, Tensor, Var};

/// Gate parameters in the order update `z`, reset `r`, candidate `h̃`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GruCell {
    pub w: [ParamId; 3],
    pub u: [ParamId; 3],
    pub b: [ParamId; 3],
    pub d_x: usize,
    pub d_h: usize,
}

const GATES: [&str; 3] = ["z", "r", "h"];

impl GruCell {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_x: usize, d_h: usize) -> Self {
        let bound = 1.0 / (d_h as f64).sqrt();
        let w = GATES.map(|k| store.add(format!("{name}.w_{k}"), rng.uniform_tensor(&[d_x, d_h], bound)));
        let u = GATES.map(|k| store.add(format!("{name}.u_{k}"), rng.uniform_tensor(&[d_h, d_h], bound)));
        let b = GATES.map(|k| store.add(format!("{name}.b_{k}"), Tensor::zeros(&[1, d_h])));
        Self { w, u, b, d_x, d_h }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, d_x: usize, d_h: usize) -> Self {
        let w = GATES.map(|k| store.add(format!("{name}.w_{k}"), Tensor::zeros(&[d_x, d_h])));
        let u = GATES.map(|k| store.add(format!("{name}.u_{k}"), Tensor::zeros(&[d_h, d_h])));
        let b = GATES.map(|k| store.add(format!("{name}.b_{k}"), Tensor::zeros(&[1, d_h])));
        Self { w, u, b, d_x, d_h }
    }

    fn affine(&self, g: &mut Graph, store: &ParamStore, gate: usize, x: Var, h: Var) -> Result<Var> {
        let w = g.param(store, self.w[gate]);
        let u = g.param(store, self.u[gate]);
        let b = g.param(store, self.b[gate]);
        let xw = g.matmul(x, w)?;
        let hu = g.matmul(h, u)?;
        let s = g.add(xw, hu)?;
        g.add(s, b)
    }

    /// `h' = (1 - z) ⊙ h + z ⊙ h̃`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let (xs, hs) = (g.value(x).shape().to_vec(), g.value(h).shape().to_vec());
        if xs != [1, self.d_x] || hs != [1, self.d_h] {
            return Err(Error::Shape {
                op: "gru_step",
                lhs: xs,
                rhs: hs,
            });
        }
        let z = self.affine(g, store, 0, x, h)?;
        let z = g.sigmoid(z);
        let r = self.affine(g, store, 1, x, h)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h)?;
        let cand = self.affine(g, store, 2, x, rh)?;
        let cand = g.tanh(cand);
        let delta = g.sub(cand, h)?;
        let step = g.mul(z, delta)?;
        g.add(h, step)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Anticipation {
    pub h: Var,
    /// Target scores before the softmax.
    pub logits: Var,
    /// GRU steps actually applied.
    pub steps: usize,
}

/// `n` GRU steps from `h_summary` with constant input `x_last`, then the
/// classifier.
pub fn anticipate(
    g: &mut Graph,
    store: &ParamStore,
    cell: &GruCell,
    classifier: &Linear,
    h_summary: Var,
    x_last: Var,
    n: usize,
    s_ant: usize,
) -> Result<Anticipation> {
    if n < 1 || n > s_ant {
        return Err(Error::Protocol(format!("anticipation step {n} outside [1, {s_ant}]")));
    }
    let mut h = h_summary;
    let mut steps = 0;
    for _ in 0..n {
        h = cell.step(g, store, x_last, h)?;
        steps += 1;
    }
    let logits = classifier.forward(g, store, h)?;
    Ok(Anticipation { h, logits, steps })
}
