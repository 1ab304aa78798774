use serde::Serialize;

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Magnitude below which errors are measured absolutely rather than
/// relatively: `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tol
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

fn eval_scalar<F>(f: &F, store: &ParamStore) -> Result<(Graph, Var, f64)>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::Shape {
            op: "grad_check",
            lhs: v.shape().to_vec(),
            rhs: vec![1],
        });
    }
    let value = v.item();
    Ok((g, out, value))
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences for every scalar in `params`.
pub fn grad_check<F>(f: F, params: &ParamStore, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let (graph, out, value) = eval_scalar(&f, params)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let grads = graph.backward(out);
    let analytic: Vec<_> = graph.param_grads(&grads);

    let mut store = params.clone();
    let mut report = GradCheckReport {
        tol,
        params: Vec::with_capacity(params.len()),
    };
    for id in params.ids() {
        let name = params.name(id).to_string();
        let numel = params.value(id).numel();
        let grad = analytic
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|(_, g)| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; numel]);
        let mut entry = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for i in 0..numel {
            let orig = params.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + FD_STEP;
            let (_, _, plus) = eval_scalar(&f, &store)?;
            store.value_mut(id).data_mut()[i] = orig - FD_STEP;
            let (_, _, minus) = eval_scalar(&f, &store)?;
            store.value_mut(id).data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = grad[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}[{i}]")));
            }
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            entry.max_abs_error = entry.max_abs_error.max(abs);
            entry.max_rel_error = entry.max_rel_error.max(rel);
        }
        report.params.push(entry);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{Rng, Tensor};

    #[test]
    fn constant_function_has_zero_error() {
        let mut rng = Rng::new(1);
        let mut store = ParamStore::new();
        store.add("x", rng.normal_tensor(&[1, 5], 1.0));
        let r = grad_check(|g, _| Ok(g.constant(Tensor::scalar(3.0))), &store, 1e-6).unwrap();
        assert_eq!(r.max_rel_error(), 0.0);
        assert!(r.passed());
    }

    #[test]
    fn squared_norm_gradient() {
        let mut rng = Rng::new(2);
        let mut store = ParamStore::new();
        let x = store.add("x", rng.normal_tensor(&[4, 1], 1.0));
        let f = move |g: &mut Graph, s: &ParamStore| {
            let v = g.param(s, x);
            let vt = g.transpose(v);
            g.matmul(vt, v)
        };
        let mut g = Graph::new();
        let out = f(&mut g, &store).unwrap();
        let xv = g.param(&store, x);
        let grads = g.backward(out);
        let dx = grads.get(&g, xv).unwrap();
        for (d, v) in dx.data().iter().zip(store.value(x).data()) {
            assert!((d - 2.0 * v).abs() < 1e-12);
        }
        let r = grad_check(f, &store, 1e-6).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn non_finite_is_reported_with_name() {
        let mut store = ParamStore::new();
        let x = store.add("weights", Tensor::row_vector(vec![1e-6, 1.0]));
        let err = grad_check(
            move |g, s| {
                let v = g.param(s, x);
                // the backward probe of weights[0] crosses zero
                let l = g.log_clamp(v, 0.0);
                Ok(g.sum(l))
            },
            &store,
            1e-4,
        )
        .unwrap_err();
        match err {
            Error::NonFinite(msg) => assert!(msg.contains("weights[0]"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
