use super::{Graph, ParamId, ParamStore, Rng, Tensor, Var};
use crate::error::Result;

/// Affine map `x W + b` on row vectors; `W` is `[d_in × d_out]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Uniform `±1/sqrt(d_in)` weights, zero bias.
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = store.add_linear_weight(format!("{name}.weight"), rng, d_in, d_out);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, d_out]));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[d_in, d_out]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, d_out]));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }
}
