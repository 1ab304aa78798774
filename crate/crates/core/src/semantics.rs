//! Semantic features of the observed action: the ground-truth row of the
//! class-embedding matrix, or one of four estimates computed from the
//! visual observation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::feature_file::{read_feature_file, write_feature_file};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Linear, ParamStore, Rng, Tensor, Var};

/// Per-class semantic embeddings `S` (`N × d_s`), row `i` for class `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMatrix {
    matrix: Tensor,
    class_names: Vec<String>,
}

impl SemanticMatrix {
    pub fn new(matrix: Tensor, class_names: Vec<String>) -> Result<Self> {
        if matrix.shape().len() != 2 || matrix.rows() < 2 {
            return Err(Error::Config(format!(
                "semantic matrix needs at least 2 rows, got shape {:?}",
                matrix.shape()
            )));
        }
        if class_names.len() != matrix.rows() {
            return Err(Error::Config(format!(
                "{} class names for {} semantic rows",
                class_names.len(),
                matrix.rows()
            )));
        }
        if !matrix.is_finite() {
            return Err(Error::NonFinite("semantic matrix".into()));
        }
        Ok(Self {
            matrix,
            class_names,
        })
    }

    pub fn load(matrix_path: impl AsRef<Path>, names_path: impl AsRef<Path>) -> Result<Self> {
        let matrix = read_feature_file(matrix_path)?;
        let names: Vec<String> = crate::datamodel::read_json(names_path)?;
        Self::new(matrix, names)
    }

    pub fn save(&self, matrix_path: impl AsRef<Path>, names_path: impl AsRef<Path>) -> Result<()> {
        write_feature_file(matrix_path, &self.matrix)?;
        crate::datamodel::write_json(names_path.as_ref(), &self.class_names)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn n_classes(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }
}

/// Ground-truth semantic feature of class `label`, `[1 × d_s]`.
pub fn gts_lookup(s: &SemanticMatrix, label: usize) -> Result<Tensor> {
    if label >= s.n_classes() {
        return Err(Error::Index {
            what: "semantic classes",
            index: label,
            len: s.n_classes(),
        });
    }
    Ok(Tensor::row_vector(s.matrix.row(label).to_vec()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticVariant {
    /// Ground-truth row for the observed label.
    Gts,
    /// Full softmax weights times `S`.
    Fw,
    /// Softmax over the top-K logits only, times `S`.
    Pw,
    /// Row of `S` at the argmax logit.
    Nei,
    /// Two-layer perceptron on pooled visual features.
    Mlp,
}

impl SemanticVariant {
    pub fn is_estimated(self) -> bool {
        self != SemanticVariant::Gts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemGenConfig {
    pub variant: SemanticVariant,
    /// K for the partial-weights variant; clamped to N when N < K.
    pub top_k: usize,
    pub mlp_hidden: usize,
    /// Let the target loss train the observation classifier through ŝ.
    pub backprop_through_estimate: bool,
}

impl Default for SemGenConfig {
    fn default() -> Self {
        Self {
            variant: SemanticVariant::Fw,
            top_k: 500,
            mlp_hidden: 64,
            backprop_through_estimate: true,
        }
    }
}

impl SemGenConfig {
    pub fn gts() -> Self {
        Self {
            variant: SemanticVariant::Gts,
            ..Self::default()
        }
    }

    pub fn estimated(variant: SemanticVariant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn effective_top_k(&self, n_classes: usize) -> usize {
        self.top_k.clamp(1, n_classes)
    }
}

/// Linear observation classifier on the mean-pooled visual sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObsClassifier {
    pub linear: Linear,
}

impl ObsClassifier {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_v: usize, n_classes: usize) -> Self {
        Self {
            linear: Linear::new(store, rng, name, d_v, n_classes),
        }
    }

    /// Returns `(logits, ω)` with `ω = softmax(logits)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, visual: Var) -> Result<(Var, Var)> {
        if g.value(visual).rows() == 0 {
            return Err(Error::Protocol("empty observation sequence".into()));
        }
        let pooled = g.mean_rows(visual);
        let logits = self.linear.forward(g, store, pooled)?;
        let omega = g.softmax(logits);
        Ok((logits, omega))
    }
}

/// `ŝ = ω S`.
pub fn estimate_fw(g: &mut Graph, omega: Var, s: Var) -> Result<Var> {
    g.matmul(omega, s)
}

/// Indices of the `k` largest entries, ties toward the lower index,
/// returned in ascending index order.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order = crate::objective::rank_desc(values);
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Softmax over the `top_k` largest logits, zeros elsewhere, times `S`.
pub fn estimate_pw(g: &mut Graph, logits: Var, s: Var, top_k: usize) -> Result<Var> {
    let n = g.value(logits).cols();
    if top_k < 1 || top_k > n {
        return Err(Error::Config(format!("top_k {top_k} outside [1, {n}]")));
    }
    let idx = top_k_indices(g.value(logits).data(), top_k);
    let picked = g.pick_cols(logits, &idx)?;
    let w = g.softmax(picked);
    let omega = g.scatter_cols(w, &idx, n)?;
    g.matmul(omega, s)
}

/// Row of `S` at the argmax logit (lowest id on ties). No gradient flows
/// back into the logits. Returns the estimate and the selected row.
pub fn estimate_nei(g: &mut Graph, logits: Var, s: Var) -> Result<(Var, usize)> {
    let l = g.value(logits);
    let st = g.value(s);
    if l.cols() != st.rows() {
        return Err(Error::Shape {
            op: "estimate_nei",
            lhs: l.shape().to_vec(),
            rhs: st.shape().to_vec(),
        });
    }
    let best = argmax(l.data());
    let row = g.slice_rows(s, best, 1)?;
    Ok((row, best))
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Two-layer perceptron (ReLU hidden) from pooled visual features to `d_s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemanticMlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl SemanticMlp {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_v: usize, hidden: usize, d_s: usize) -> Self {
        Self {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), d_v, hidden),
            out: Linear::new(store, rng, &format!("{name}.out"), hidden, d_s),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, visual: Var) -> Result<Var> {
        if g.value(visual).rows() == 0 {
            return Err(Error::Protocol("empty observation sequence".into()));
        }
        let pooled = g.mean_rows(visual);
        let h = self.hidden.forward(g, store, pooled)?;
        let h = g.relu(h);
        self.out.forward(g, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{matmul, softmax};

    fn eye_semantics(n: usize) -> SemanticMatrix {
        SemanticMatrix::new(Tensor::eye(n), (0..n).map(|i| format!("c{i}")).collect()).unwrap()
    }

    fn fw(omega: &Tensor, s: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let o = g.constant(omega.clone());
        let sv = g.constant(s.clone());
        let out = estimate_fw(&mut g, o, sv).unwrap();
        g.value(out).clone()
    }

    fn pw(logits: &Tensor, s: &Tensor, k: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        let sv = g.constant(s.clone());
        let out = estimate_pw(&mut g, l, sv, k)?;
        Ok(g.value(out).clone())
    }

    fn nei(logits: &Tensor, s: &Tensor) -> (Tensor, usize) {
        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        let sv = g.constant(s.clone());
        let (out, idx) = estimate_nei(&mut g, l, sv).unwrap();
        (g.value(out).clone(), idx)
    }

    #[test]
    fn gts_lookup_rows() {
        let s = eye_semantics(3);
        assert_eq!(gts_lookup(&s, 0).unwrap().data(), &[1.0, 0.0, 0.0]);
        assert_eq!(gts_lookup(&s, 2).unwrap().data(), s.matrix().row(2));
        assert!(matches!(gts_lookup(&s, 3), Err(Error::Index { .. })));
    }

    #[test]
    fn gts_lookup_from_file_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(12);
        let mut m = rng.normal_tensor(&[10, 4], 1.0);
        m.round_to_f32();
        let names: Vec<String> = (0..10).map(|i| format!("c{i}")).collect();
        SemanticMatrix::new(m, names)
            .unwrap()
            .save(dir.path().join("s.vstg"), dir.path().join("c.json"))
            .unwrap();
        let bytes = std::fs::read(dir.path().join("s.vstg")).unwrap();
        let s = SemanticMatrix::load(dir.path().join("s.vstg"), dir.path().join("c.json")).unwrap();
        for label in 0..10 {
            let row = gts_lookup(&s, label).unwrap();
            for (j, v) in row.data().iter().enumerate() {
                let at = 16 + 4 * (label * 4 + j);
                let raw = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
                assert_eq!(*v, raw as f64);
            }
        }
    }

    #[test]
    fn semantic_matrix_validation() {
        assert!(SemanticMatrix::new(Tensor::zeros(&[1, 3]), vec!["a".into()]).is_err());
        assert!(SemanticMatrix::new(Tensor::zeros(&[2, 3]), vec!["a".into()]).is_err());
        let bad = Tensor::from_rows(&[vec![f64::NAN], vec![0.0]]).unwrap();
        assert!(SemanticMatrix::new(bad, vec!["a".into(), "b".into()]).is_err());
    }

    fn classify(weight: Tensor, bias: Tensor, f: &Tensor) -> (Tensor, Tensor) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let c = ObsClassifier::new(&mut store, &mut rng, "obs", weight.rows(), weight.cols());
        store.set(c.linear.weight, weight).unwrap();
        store.set(c.linear.bias, bias).unwrap();
        let mut g = Graph::new();
        let x = g.constant(f.clone());
        let (l, o) = c.forward(&mut g, &store, x).unwrap();
        (g.value(l).clone(), g.value(o).clone())
    }

    #[test]
    fn classify_observation_examples() {
        let mut rng = Rng::new(4);
        let f = rng.normal_tensor(&[3, 5], 1.0);
        let (_, omega) = classify(Tensor::zeros(&[5, 4]), Tensor::zeros(&[1, 4]), &f);
        assert!(omega.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let mut bias = Tensor::zeros(&[1, 4]);
        bias.data_mut()[2] = 100.0;
        let (_, omega) = classify(Tensor::zeros(&[5, 4]), bias, &f);
        assert!((omega.data()[2] - 1.0).abs() < 1e-12);

        // hand oracle: mean rows, x W + b, softmax
        let w = rng.normal_tensor(&[5, 4], 1.0);
        let b = rng.normal_tensor(&[1, 4], 1.0);
        let (logits, omega) = classify(w.clone(), b.clone(), &f);
        let mut mean = vec![0.0; 5];
        for r in 0..3 {
            for j in 0..5 {
                mean[j] += f.get(r, j) / 3.0;
            }
        }
        let mut expect = vec![0.0; 4];
        for c in 0..4 {
            expect[c] = b.data()[c] + (0..5).map(|j| mean[j] * w.get(j, c)).sum::<f64>();
        }
        for c in 0..4 {
            assert!((logits.data()[c] - expect[c]).abs() < 1e-12);
        }
        let sm = softmax(&Tensor::row_vector(expect));
        assert!(omega.max_abs_diff(&sm) < 1e-12);
        assert!((omega.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classify_rejects_empty_sequence() {
        let mut store = ParamStore::new();
        let c = ObsClassifier::new(&mut store, &mut Rng::new(0), "obs", 3, 2);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[0, 3]));
        assert!(matches!(c.forward(&mut g, &store, x), Err(Error::Protocol(_))));
    }

    #[test]
    fn fw_examples() {
        let mut rng = Rng::new(5);
        let s = rng.normal_tensor(&[3, 2], 1.0);
        let mut one_hot = Tensor::zeros(&[1, 3]);
        one_hot.data_mut()[1] = 1.0;
        assert_eq!(fw(&one_hot, &s).data(), s.row(1));

        let uniform = Tensor::full(&[1, 3], 1.0 / 3.0);
        let out = fw(&uniform, &s);
        for j in 0..2 {
            let mean = (s.get(0, j) + s.get(1, j) + s.get(2, j)) / 3.0;
            assert!((out.data()[j] - mean).abs() < 1e-12);
        }

        let omega = Tensor::row_vector(vec![0.2, 0.3, 0.5]);
        let out = fw(&omega, &s);
        for j in 0..2 {
            let expect = 0.2 * s.get(0, j) + 0.3 * s.get(1, j) + 0.5 * s.get(2, j);
            assert!((out.data()[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn pw_closed_form() {
        let logits = Tensor::row_vector(vec![3.0, 1.0, 2.0]);
        let out = pw(&logits, &Tensor::eye(3), 2).unwrap();
        let sigma = 3f64.exp() / (3f64.exp() + 2f64.exp());
        assert!((sigma - 0.7311).abs() < 1e-4);
        assert!((out.data()[0] - sigma).abs() < 1e-12);
        assert_eq!(out.data()[1], 0.0);
        assert!((out.data()[2] - (1.0 - sigma)).abs() < 1e-12);
        assert!(pw(&logits, &Tensor::eye(3), 0).is_err());
        assert!(pw(&logits, &Tensor::eye(3), 4).is_err());
    }

    #[test]
    fn nei_examples() {
        let mut rng = Rng::new(6);
        let s = rng.normal_tensor(&[3, 4], 1.0);
        let (row, idx) = nei(&Tensor::row_vector(vec![0.0, 5.0, 1.0]), &s);
        assert_eq!(idx, 1);
        assert_eq!(row.data(), s.row(1));
        let (row, idx) = nei(&Tensor::row_vector(vec![2.0; 3]), &s);
        assert_eq!(idx, 0);
        assert_eq!(row.data(), s.row(0));

        for seed in 0..20 {
            let mut rng = Rng::new(100 + seed);
            let logits = rng.normal_tensor(&[1, 9], 1.0);
            let s = rng.normal_tensor(&[9, 3], 1.0);
            let mut best = 0;
            for i in 1..9 {
                if logits.data()[i] > logits.data()[best] {
                    best = i;
                }
            }
            assert_eq!(nei(&logits, &s).1, best);
        }
    }

    #[test]
    fn nei_stops_gradient() {
        let mut g = Graph::new();
        let l = g.input(Tensor::row_vector(vec![0.0, 1.0]));
        let s = g.constant(Tensor::eye(2));
        let (row, _) = estimate_nei(&mut g, l, s).unwrap();
        assert!(!g.requires_grad(row));
    }

    #[test]
    fn mlp_examples() {
        let mut rng = Rng::new(8);
        let f = rng.normal_tensor(&[4, 3], 1.0);
        let mut store = ParamStore::new();
        let mlp = SemanticMlp::new(&mut store, &mut rng, "mlp", 3, 5, 3);
        let run = |store: &ParamStore| {
            let mut g = Graph::new();
            let x = g.constant(f.clone());
            let out = mlp.forward(&mut g, store, x).unwrap();
            g.value(out).clone()
        };
        let out = run(&store);
        // layer-by-layer oracle
        let mut mean = Tensor::zeros(&[1, 3]);
        for r in 0..4 {
            for j in 0..3 {
                mean.data_mut()[j] += f.get(r, j) / 4.0;
            }
        }
        let mut h = matmul(&mean, store.value(mlp.hidden.weight)).unwrap();
        for (v, b) in h.data_mut().iter_mut().zip(store.value(mlp.hidden.bias).data()) {
            *v = (*v + b).max(0.0);
        }
        let mut o = matmul(&h, store.value(mlp.out.weight)).unwrap();
        for (v, b) in o.data_mut().iter_mut().zip(store.value(mlp.out.bias).data()) {
            *v += b;
        }
        assert!(out.max_abs_diff(&o) < 1e-12);

        // zero params
        let mut zero = store.clone();
        for id in zero.ids().collect::<Vec<_>>() {
            let shape = zero.value(id).shape().to_vec();
            zero.set(id, Tensor::zeros(&shape)).unwrap();
        }
        assert!(run(&zero).data().iter().all(|&v| v == 0.0));

        // identity path: hidden = I (inputs kept positive), out = I
        let fpos = f.map(f64::abs);
        let mut ident = zero.clone();
        let mlp_id = SemanticMlp::new(&mut ident, &mut rng, "id", 3, 3, 3);
        ident.set(mlp_id.hidden.weight, Tensor::eye(3)).unwrap();
        ident.set(mlp_id.out.weight, Tensor::eye(3)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(fpos.clone());
        let out = mlp_id.forward(&mut g, &ident, x).unwrap();
        let pooled = g.mean_rows(x);
        assert!(g.value(out).max_abs_diff(g.value(pooled)) < 1e-15);
    }
}
