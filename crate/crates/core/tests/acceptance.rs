//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use transgru::datamodel::feature_file::{decode, encode};
use transgru::datamodel::{generate_synthetic, AnticipationProtocol, Dataset, Split, SynthConfig};
use transgru::decoder::{anticipate, GruCell};
use transgru::encoder::{Encoder, EncoderConfig};
use transgru::engine::{evaluate, score_split, train, Checkpoint, TrainConfig};
use transgru::fusion::{fuse_weighted_sum, Fusion, FusionConfig, FusionStrategy};
use transgru::model::{Model, ModelConfig, ModelInput};
use transgru::numcore::{grad_check, Graph, Linear, ParamStore, Rng, Tensor, Var};
use transgru::objective::{
    ce_label_smooth, cos_loss, mean_top5_recall, mse_loss, top5_accuracy, total_loss, LossConfig, LossMode,
    LossParts,
};
use transgru::semantics::{
    estimate_fw, estimate_nei, estimate_pw, ObsClassifier, SemGenConfig, SemanticMatrix, SemanticMlp,
    SemanticVariant,
};
use transgru::Result;

const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const REDUCTION_INSTANCES: u64 = 200;
const METRIC_BATCHES: u64 = 100;
const CHANCE_CLASSES: usize = 100;
const CHANCE_SAMPLES: usize = 4000;
const CHANCE_SDS: f64 = 3.0;
const LEARN_TOP1: f64 = 0.90;
const LEARN_EPOCHS: usize = 30;
const LEARN_BUDGET: Duration = Duration::from_secs(300);
const ORDER_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const ORDER_EPOCHS: usize = 10;
const ORDER_TRAIN: usize = 250;
const ORDER_VAL: usize = 500;
const ORDER_MIN_STRICT: usize = 4;
const GRU_TOL: f64 = 1e-12;

type Outcome = Result<(bool, String)>;

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("1 gradient suite", gradient_suite),
        ("2 reduction identities", reduction_identities),
        ("3 protocol conformance", protocol_conformance),
        ("4 metric oracles and chance level", metric_oracles),
        ("5 synthetic learning", synthetic_learning),
        ("6 semantic benefit ordering", semantic_benefit),
        ("7 loss ablation ordering", loss_ablation),
        ("8 determinism and persistence", determinism),
        ("9 closed-form decoder", closed_form_decoder),
        ("10 default hyperparameters", config_snapshot),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let (pass, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(p) => (false, format!("panic: {}", panic_message(&p))),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {name}: {} ({detail}) [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_default()
}

// ---------------------------------------------------------------- 1

struct GradTally {
    checks: usize,
    worst: f64,
    worst_name: String,
    failures: Vec<String>,
}

impl GradTally {
    fn record(&mut self, name: &str, seed: u64, store: &ParamStore, f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>) -> Result<()> {
        let r = grad_check(f, store, GRAD_TOL)?;
        self.checks += 1;
        let e = r.max_rel_error();
        if e > self.worst {
            self.worst = e;
            self.worst_name = format!("{name}#{seed}");
        }
        if !r.passed() {
            self.failures.push(format!("{name}#{seed} ({e:.2e} at {:?})", r.worst().map(|w| &w.name)));
        }
        Ok(())
    }
}

/// Random probe weights turn any tensor output into a scalar.
fn probe(g: &mut Graph, v: Var, rng: &mut Rng) -> Result<Var> {
    let n = g.value(v).numel();
    let w = rng.normal_tensor(&[n], 1.0).into_data();
    g.weighted_sum(v, w)
}

fn dims(rng: &mut Rng) -> (usize, usize) {
    (1 + rng.below(3), 2 + rng.below(3))
}

fn op_checks(t: &mut GradTally, seed: u64) -> Result<()> {
    let mut rng = Rng::new(1000 + seed);
    let (r, c) = dims(&mut rng);
    let k = 2 + rng.below(3);
    let mut st = ParamStore::new();
    let a = st.add("a", rng.normal_tensor(&[r, c], 1.0));
    let b = st.add("b", rng.normal_tensor(&[r, c], 1.0));
    let m = st.add("m", rng.normal_tensor(&[c, k], 1.0));
    let row = st.add("row", rng.normal_tensor(&[1, c], 1.0));
    let row2 = st.add("row2", rng.normal_tensor(&[1, c], 1.0));
    let sc = st.add("scalar", rng.normal_tensor(&[1, 1], 1.0));
    let pos = st.add("pos", rng.uniform_tensor(&[r, c], 1.0).map(|v| v.abs() + 0.1));
    let pseed = rng.next_u64();

    type Op = Box<dyn Fn(&mut Graph, &ParamStore) -> Result<Var>>;
    let p = move |g: &mut Graph, v: Var| probe(g, v, &mut Rng::new(pseed));
    let ops: Vec<(&str, Op)> = vec![
        ("matmul", Box::new(move |g, s| { let (x, y) = (g.param(s, a), g.param(s, m)); let o = g.matmul(x, y)?; p(g, o) })),
        ("add", Box::new(move |g, s| { let (x, y) = (g.param(s, a), g.param(s, b)); let o = g.add(x, y)?; p(g, o) })),
        ("sub", Box::new(move |g, s| { let (x, y) = (g.param(s, a), g.param(s, b)); let o = g.sub(x, y)?; p(g, o) })),
        ("mul", Box::new(move |g, s| { let (x, y) = (g.param(s, a), g.param(s, b)); let o = g.mul(x, y)?; p(g, o) })),
        ("add_row", Box::new(move |g, s| { let (x, y) = (g.param(s, a), g.param(s, row)); let o = g.add_row(x, y)?; p(g, o) })),
        ("scale", Box::new(move |g, s| { let x = g.param(s, a); let o = g.scale(x, -1.7); p(g, o) })),
        ("scale_by", Box::new(move |g, s| { let (x, y) = (g.param(s, a), g.param(s, sc)); let o = g.scale_by(x, y)?; p(g, o) })),
        ("sigmoid", Box::new(move |g, s| { let x = g.param(s, a); let o = g.sigmoid(x); p(g, o) })),
        ("tanh", Box::new(move |g, s| { let x = g.param(s, a); let o = g.tanh(x); p(g, o) })),
        ("relu", Box::new(move |g, s| { let x = g.param(s, a); let o = g.relu(x); p(g, o) })),
        ("softmax", Box::new(move |g, s| { let x = g.param(s, a); let o = g.softmax(x); p(g, o) })),
        ("layernorm", Box::new(move |g, s| { let (x, gn, bs) = (g.param(s, a), g.param(s, row), g.param(s, row2)); let o = g.layernorm(x, gn, bs)?; p(g, o) })),
        ("transpose", Box::new(move |g, s| { let x = g.param(s, a); let o = g.transpose(x); p(g, o) })),
        ("concat_cols", Box::new(move |g, s| { let (x, y) = (g.param(s, a), g.param(s, b)); let o = g.concat_cols(&[x, y])?; p(g, o) })),
        ("concat_rows", Box::new(move |g, s| { let (x, y) = (g.param(s, a), g.param(s, row)); let o = g.concat_rows(&[x, y])?; p(g, o) })),
        ("slice_rows", Box::new(move |g, s| { let x = g.param(s, a); let o = g.slice_rows(x, r - 1, 1)?; p(g, o) })),
        ("slice_cols", Box::new(move |g, s| { let x = g.param(s, a); let o = g.slice_cols(x, 1, c - 1)?; p(g, o) })),
        ("mean_rows", Box::new(move |g, s| { let x = g.param(s, a); let o = g.mean_rows(x); p(g, o) })),
        ("broadcast_rows", Box::new(move |g, s| { let x = g.param(s, row); let o = g.broadcast_rows(x, 3)?; p(g, o) })),
        ("pick_cols", Box::new(move |g, s| { let x = g.param(s, row); let o = g.pick_cols(x, &[c - 1, 0])?; p(g, o) })),
        ("scatter_cols", Box::new(move |g, s| { let x = g.param(s, row); let idx: Vec<usize> = (0..c).rev().map(|i| i + 1).collect(); let o = g.scatter_cols(x, &idx, c + 2)?; p(g, o) })),
        ("log_clamp", Box::new(move |g, s| { let x = g.param(s, pos); let o = g.log_clamp(x, 1e-12); p(g, o) })),
        ("weighted_sum", Box::new(move |g, s| { let x = g.param(s, a); p(g, x) })),
        ("sum", Box::new(move |g, s| { let x = g.param(s, a); let x = g.tanh(x); Ok(g.sum(x)) })),
        ("mask_mul", Box::new(move |g, s| { let x = g.param(s, a); let mask = (0..r * c).map(|i| (i % 3) as f64 * 0.7).collect(); let o = g.mask_mul(x, mask)?; p(g, o) })),
        ("cosine_distance", Box::new(move |g, s| { let (x, y) = (g.param(s, row), g.param(s, row2)); g.cosine_distance(x, y) })),
    ];
    for (name, f) in &ops {
        t.record(name, seed, &st, f)?;
    }

    Ok(())
}

fn module_checks(t: &mut GradTally, seed: u64) -> Result<()> {
    let mut rng = Rng::new(2000 + seed);
    let (n_cls, d_v, d_s, steps) = (3 + rng.below(3), 4, 2, 2 + rng.below(3));
    let mut st = ParamStore::new();
    let visual = st.add("visual", rng.normal_tensor(&[steps, d_v], 1.0));
    let sem = st.add("semantic", rng.normal_tensor(&[n_cls, d_s], 1.0));
    let logits = st.add("logits", rng.normal_tensor(&[1, n_cls], 1.0));
    let oc = ObsClassifier::new(&mut st, &mut rng, "obs", d_v, n_cls);
    let mlp = SemanticMlp::new(&mut st, &mut rng, "mlp", d_v, 3, d_s);
    let k = 1 + rng.below(n_cls);
    let label = rng.below(n_cls);
    let pseed = rng.next_u64();
    let p = move |g: &mut Graph, v: Var| probe(g, v, &mut Rng::new(pseed));

    t.record("obs_classifier", seed, &st, |g, s| { let f = g.param(s, visual); let (_, w) = oc.forward(g, s, f)?; p(g, w) })?;
    t.record("estimate_fw", seed, &st, |g, s| { let (l, sm) = (g.param(s, logits), g.param(s, sem)); let w = g.softmax(l); let o = estimate_fw(g, w, sm)?; p(g, o) })?;
    t.record("estimate_pw", seed, &st, |g, s| { let (l, sm) = (g.param(s, logits), g.param(s, sem)); let o = estimate_pw(g, l, sm, k)?; p(g, o) })?;
    t.record("estimate_nei", seed, &st, |g, s| { let (l, sm) = (g.param(s, logits), g.param(s, sem)); let (o, _) = estimate_nei(g, l, sm)?; p(g, o) })?;
    t.record("semantic_mlp", seed, &st, |g, s| { let f = g.param(s, visual); let o = mlp.forward(g, s, f)?; p(g, o) })?;
    t.record("ce_label_smooth", seed, &st, |g, s| { let l = g.param(s, logits); let pr = g.softmax(l); ce_label_smooth(g, pr, label, 0.1) })?;
    t.record("cos_loss", seed, &st, |g, s| { let sm = g.param(s, sem); let a = g.slice_rows(sm, 0, 1)?; let b = g.slice_rows(sm, 1, 1)?; cos_loss(g, a, b) })?;
    t.record("mse_loss", seed, &st, |g, s| { let sm = g.param(s, sem); let a = g.slice_rows(sm, 0, 1)?; let b = g.slice_rows(sm, 1, 1)?; mse_loss(g, a, b) })?;
    t.record("total_loss", seed, &st, |g, s| {
        let l = g.param(s, logits);
        let pr = g.softmax(l);
        let tgt = ce_label_smooth(g, pr, label, 0.1)?;
        let sm = g.param(s, sem);
        let a = g.slice_rows(sm, 0, 1)?;
        let b = g.slice_rows(sm, 1, 1)?;
        let parts = LossParts { tgt, obs: Some(tgt), cos: Some(cos_loss(g, a, b)?), mse: Some(mse_loss(g, a, b)?) };
        total_loss(g, &LossConfig::epic_kitchens(), &parts)
    })?;

    // fusion strategies, both projection directions
    for strategy in [FusionStrategy::Concat, FusionStrategy::WeightedSum, FusionStrategy::Mlp, FusionStrategy::Attention] {
        for projection in [transgru::fusion::Projection::ProjectSemantic, transgru::fusion::Projection::ProjectVisual] {
            let mut fs = st.clone();
            let cfg = FusionConfig { strategy, projection, mlp_hidden: 3, ..FusionConfig::default() };
            let fusion = Fusion::new(&mut fs, &mut rng, cfg, d_v, d_s)?;
            t.record(&format!("fusion {strategy:?}/{projection:?}"), seed, &fs, |g, s| {
                let f = g.param(s, visual);
                let sm = g.param(s, sem);
                let sv = g.slice_rows(sm, label, 1)?;
                let x = fusion.forward(g, s, Some(sv), f)?;
                p(g, x)
            })?;
        }
    }

    // encoder at depth 1 and 2, both poolings
    for (m, pooling) in [(1, transgru::encoder::Pooling::Mean), (2, transgru::encoder::Pooling::ClassToken)] {
        let mut es = st.clone();
        let cfg = EncoderConfig { m_blocks: m, n_heads: 2, ffn_hidden: Some(5), pooling, ..EncoderConfig::default() };
        let enc = Encoder::new(&mut es, &mut rng, cfg, d_v)?;
        t.record(&format!("encoder m={m}"), seed, &es, |g, s| {
            let f = g.param(s, visual);
            let out = enc.forward(g, s, f, None)?;
            p(g, out.h)
        })?;
    }

    // GRU decoder at n = 1 and n = 8
    let mut ds = st.clone();
    let cell = GruCell::new(&mut ds, &mut rng, "gru", d_v, d_v);
    let head = Linear::new(&mut ds, &mut rng, "head", d_v, n_cls);
    for n in [1, 8] {
        t.record(&format!("anticipate n={n}"), seed, &ds, |g, s| {
            let f = g.param(s, visual);
            let h0 = g.mean_rows(f);
            let x = g.slice_rows(f, steps - 1, 1)?;
            let out = anticipate(g, s, &cell, &head, h0, x, n, 8)?;
            p(g, out.logits)
        })?;
    }
    Ok(())
}

/// 3-class, 4-step toy instance of the whole network.
fn toy_model(fusion: FusionStrategy, variant: SemanticVariant, seed: u64) -> Result<Model> {
    let mut rng = Rng::new(3000 + seed);
    let cfg = ModelConfig {
        n_classes: 3,
        d_v: 4,
        d_s: 2,
        modality: "rgb".into(),
        protocol: AnticipationProtocol::new(2, 2, 0.25)?,
        fusion: FusionConfig { strategy: fusion, mlp_hidden: 3, ..FusionConfig::default() },
        encoder: EncoderConfig { n_heads: 2, ffn_hidden: Some(4), ..EncoderConfig::default() },
        semantic: SemGenConfig::estimated(variant),
    };
    let names = (0..3).map(|i| format!("c{i}")).collect();
    let s = SemanticMatrix::new(rng.normal_tensor(&[3, 2], 1.0), names)?;
    Model::new(cfg, s, seed)
}

fn pipeline_checks(t: &mut GradTally, seed: u64) -> Result<()> {
    for fusion in [FusionStrategy::Concat, FusionStrategy::WeightedSum, FusionStrategy::Mlp, FusionStrategy::Attention] {
        for (variant, mode) in [(SemanticVariant::Gts, LossMode::Gts), (SemanticVariant::Fw, LossMode::Es)] {
            let model = toy_model(fusion, variant, seed)?;
            let mut rng = Rng::new(4000 + seed);
            let n = 1 + rng.below(2);
            let input = ModelInput {
                visual: rng.normal_tensor(&[model.cfg.protocol.observed_steps(n)?, 4], 1.0),
                obs_label: Some(rng.below(3)),
                n,
            };
            let target = rng.below(3);
            let loss = LossConfig { mode, ..LossConfig::epic_kitchens() };
            t.record(&format!("pipeline {fusion:?}/{variant:?}"), seed, &model.params, |g, s| {
                Ok(model.loss_graph(g, s, &input, target, &loss, None)?.0)
            })?;
        }
    }
    Ok(())
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut t = GradTally { checks: 0, worst: 0.0, worst_name: String::new(), failures: vec![] };
    for seed in 0..GRAD_SEEDS {
        op_checks(&mut t, seed)?;
        module_checks(&mut t, seed)?;
        pipeline_checks(&mut t, seed)?;
    }
    let elapsed = start.elapsed();
    let pass = t.failures.is_empty() && elapsed < GRAD_BUDGET;
    let mut detail = format!(
        "{} checks over {GRAD_SEEDS} seeds, worst rel err {:.2e} ({}), {:.1}s",
        t.checks,
        t.worst,
        t.worst_name,
        elapsed.as_secs_f64()
    );
    if !t.failures.is_empty() {
        detail.push_str(&format!("; failures: {}", t.failures.join(", ")));
    }
    Ok((pass, detail))
}

// ---------------------------------------------------------------- 2

fn reduction_identities() -> Outcome {
    let mut bad = Vec::new();
    for i in 0..REDUCTION_INSTANCES {
        let mut rng = Rng::new(5000 + i);
        let n = 2 + rng.below(30);
        let d_s = 1 + rng.below(8);
        let logits = rng.normal_tensor(&[1, n], 2.0);
        let s = rng.normal_tensor(&[n, d_s], 1.0);
        let mut g = Graph::new();
        let (l, sm) = (g.input(logits), g.input(s));
        let w = g.softmax(l);
        let fw = estimate_fw(&mut g, w, sm)?;
        let pw_n = estimate_pw(&mut g, l, sm, n)?;
        let pw_1 = estimate_pw(&mut g, l, sm, 1)?;
        let (nei, _) = estimate_nei(&mut g, l, sm)?;
        if g.value(fw) != g.value(pw_n) {
            bad.push(format!("pw(N)!=fw #{i}"));
        }
        if g.value(pw_1) != g.value(nei) {
            bad.push(format!("pw(1)!=nei #{i}"));
        }

        let t_len = 1 + rng.below(14);
        let f = rng.normal_tensor(&[t_len, n], 1.0);
        let s_row = rng.normal_tensor(&[1, n], 1.0);
        let mut g = Graph::new();
        let (fv, sv) = (g.input(f.clone()), g.input(s_row));
        let (one, zero) = (g.constant(Tensor::scalar(1.0)), g.constant(Tensor::scalar(0.0)));
        let x = fuse_weighted_sum(&mut g, sv, fv, one, zero)?;
        if g.value(x) != &f {
            bad.push(format!("weighted_sum(1,0) #{i}"));
        }

        let mut g = Graph::new();
        let probs = g.input(transgru::numcore::softmax(&rng.normal_tensor(&[1, n], 1.0)));
        let tgt = ce_label_smooth(&mut g, probs, rng.below(n), 0.1)?;
        let parts = LossParts {
            tgt,
            obs: Some(g.constant(Tensor::scalar(rng.uniform() * 5.0))),
            cos: Some(g.constant(Tensor::scalar(rng.uniform() * 2.0))),
            mse: Some(g.constant(Tensor::scalar(rng.uniform() * 9.0))),
        };
        let cfg = LossConfig { a: 0.0, b: 0.0, c: 0.0, ..LossConfig::epic_kitchens() };
        let total = total_loss(&mut g, &cfg, &parts)?;
        if g.value(total) != g.value(tgt) {
            bad.push(format!("total_loss(0,0,0) #{i}"));
        }
    }
    Ok((bad.is_empty(), format!("{REDUCTION_INSTANCES} instances, {} mismatches {:?}", bad.len(), bad.iter().take(3).collect::<Vec<_>>())))
}

// ---------------------------------------------------------------- 3

fn protocol_conformance() -> Outcome {
    let p = AnticipationProtocol::default();
    let mut ok = (1..=8).all(|n| p.observed_steps(n).unwrap() + n == 14);
    ok &= p.observed_steps(5)? == 9 && p.observed_steps(8)? == 6;

    let synth = SynthConfig { train_samples: 4, val_samples: 4, test_samples: 6, seed: 7, ..SynthConfig::default() };
    let data = generate_synthetic(&synth)?;
    let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
    let model = transgru::engine::build_model(&cfg, &data)?;
    let mut counts = Vec::new();
    for n in 1..=8 {
        let s = score_split(&model, &data.test, n)?;
        for tr in &s.traces {
            ok &= tr.gru_steps == n && tr.observed_len == p.observed_steps(n)?;
        }
        counts.push(s.traces[0].gru_steps);
    }
    let report = evaluate(&model, &data, Split::Test)?;
    ok &= report.horizons.len() == 8;
    Ok((ok, format!("gru steps per n = {counts:?}; n=5 -> 9, n=8 -> 6 observed")))
}

// ---------------------------------------------------------------- 4

fn oracle_top5(scores: &Tensor, labels: &[usize]) -> f64 {
    let mut hits = 0;
    for (r, &l) in labels.iter().enumerate() {
        let mut order: Vec<(f64, usize)> = scores.row(r).iter().copied().zip(0..).collect();
        order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        if order.iter().take(5).any(|&(_, i)| i == l) {
            hits += 1;
        }
    }
    hits as f64 / labels.len() as f64
}

fn oracle_recall(scores: &Tensor, labels: &[usize]) -> f64 {
    let n = scores.cols();
    let (mut hit, mut tot) = (vec![0usize; n], vec![0usize; n]);
    for (r, &l) in labels.iter().enumerate() {
        tot[l] += 1;
        let better = scores.row(r).iter().enumerate().filter(|&(i, &v)| v > scores.get(r, l) || (v == scores.get(r, l) && i < l)).count();
        if better < 5 {
            hit[l] += 1;
        }
    }
    let present: Vec<f64> = (0..n).filter(|&c| tot[c] > 0).map(|c| hit[c] as f64 / tot[c] as f64).collect();
    present.iter().sum::<f64>() / present.len() as f64
}

fn metric_oracles() -> Outcome {
    let mut mismatches = 0;
    for b in 0..METRIC_BATCHES {
        let mut rng = Rng::new(6000 + b);
        let (rows, n) = (1 + rng.below(60), 2 + rng.below(20));
        // integer scores make ties common
        let scores = if b % 2 == 0 {
            rng.normal_tensor(&[rows, n], 1.0)
        } else {
            rng.uniform_tensor(&[rows, n], 3.0).map(f64::round)
        };
        let labels: Vec<usize> = (0..rows).map(|_| rng.below(n)).collect();
        if top5_accuracy(&scores, &labels)? != oracle_top5(&scores, &labels) {
            mismatches += 1;
        }
        if mean_top5_recall(&scores, &labels)? != oracle_recall(&scores, &labels) {
            mismatches += 1;
        }
    }

    let synth = SynthConfig {
        n_classes: CHANCE_CLASSES,
        informativeness: 0.0,
        train_samples: 1,
        val_samples: 1,
        test_samples: CHANCE_SAMPLES,
        n_verbs: 10,
        seed: 11,
        ..SynthConfig::default()
    };
    let data = generate_synthetic(&synth)?;
    let cfg = TrainConfig { fusion: FusionConfig::visual_only(), loss: LossConfig::gts(), seed: 12, ..TrainConfig::default() };
    let model = transgru::engine::build_model(&cfg, &data)?;
    let report = evaluate(&model, &data, Split::Test)?;
    let acc = report.at_1s.top5.action;
    let p = 5.0 / CHANCE_CLASSES as f64;
    let sd = (p * (1.0 - p) / CHANCE_SAMPLES as f64).sqrt();
    let z = (acc - p) / sd;
    let pass = mismatches == 0 && z.abs() <= CHANCE_SDS;
    Ok((pass, format!("{METRIC_BATCHES} batches, {mismatches} oracle mismatches; random model top5 {acc:.4} (z = {z:+.2})")))
}

// ---------------------------------------------------------------- 5

fn synthetic_learning() -> Outcome {
    let data = generate_synthetic(&SynthConfig::default())?;
    let ceiling = data.meta.synth.as_ref().and_then(|m| m.val_ceiling).expect("synthetic ceiling");
    let cfg = TrainConfig {
        epochs: LEARN_EPOCHS,
        fusion: FusionConfig::visual_only(),
        semantic: SemGenConfig::gts(),
        loss: LossConfig::gts(),
        ..TrainConfig::desk_scale()
    };
    let start = Instant::now();
    let out = train(&cfg, &data)?;
    let elapsed = start.elapsed();
    let top1 = out.checkpoint.val_top1;
    let losses: Vec<f64> = out.history.iter().take(5).map(|h| h.train_loss.total).collect();
    let decreasing = losses.windows(2).all(|w| w[1] < w[0]) && losses.len() == 5;
    let pass = top1 >= LEARN_TOP1 && top1 <= ceiling.top1 && decreasing && elapsed < LEARN_BUDGET;
    Ok((
        pass,
        format!(
            "val top1 {top1:.4} at epoch {} (ceiling {:.4}), first losses {:?}, {:.1}s",
            out.checkpoint.epoch,
            ceiling.top1,
            losses.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            elapsed.as_secs_f64()
        ),
    ))
}

// ---------------------------------------------------------------- 6, 7

fn harder_task(seed: u64) -> Result<Dataset> {
    generate_synthetic(&SynthConfig {
        n_classes: 50,
        noise_sigma: 0.8,
        train_samples: ORDER_TRAIN,
        val_samples: ORDER_VAL,
        test_samples: 1,
        seed,
        ..SynthConfig::default()
    })
}

fn order_run(data: &Dataset, seed: u64, fusion: FusionConfig, semantic: SemGenConfig, loss: LossConfig) -> Result<f64> {
    let cfg = TrainConfig { epochs: ORDER_EPOCHS, seed, fusion, semantic, loss, ..TrainConfig::desk_scale() };
    Ok(train(&cfg, data)?.checkpoint.val_top5)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

fn semantic_benefit() -> Outcome {
    let (mut vis, mut gts) = (Vec::new(), Vec::new());
    for seed in ORDER_SEEDS {
        let data = harder_task(seed)?;
        vis.push(order_run(&data, seed, FusionConfig::visual_only(), SemGenConfig::gts(), LossConfig::gts())?);
        gts.push(order_run(
            &data,
            seed,
            FusionConfig::with_strategy(FusionStrategy::WeightedSum),
            SemGenConfig::gts(),
            LossConfig::gts(),
        )?);
    }
    let strict = vis.iter().zip(&gts).filter(|(v, g)| g > v).count();
    let pass = median(&gts) >= median(&vis) && strict >= ORDER_MIN_STRICT;
    Ok((pass, format!("median top5 visual {:.4} vs gts-weighted-sum {:.4}; strict wins {strict}/5; visual {vis:?} gts {gts:?}", median(&vis), median(&gts))))
}

fn loss_ablation() -> Outcome {
    let (mut tgt_only, mut all) = (Vec::new(), Vec::new());
    let fusion = FusionConfig::with_strategy(FusionStrategy::WeightedSum);
    let semantic = SemGenConfig::estimated(SemanticVariant::Fw);
    for seed in ORDER_SEEDS {
        let data = harder_task(seed)?;
        let only = LossConfig { a: 0.0, b: 0.0, c: 0.0, ..LossConfig::epic_kitchens() };
        tgt_only.push(order_run(&data, seed, fusion, semantic.clone(), only)?);
        all.push(order_run(&data, seed, fusion, semantic.clone(), LossConfig::epic_kitchens())?);
    }
    let pass = median(&all) >= median(&tgt_only);
    Ok((pass, format!("median top5 tgt-only {:.4} vs all terms {:.4}; tgt-only {tgt_only:?} all {all:?}", median(&tgt_only), median(&all))))
}

// ---------------------------------------------------------------- 8

fn dir_bytes(dir: &std::path::Path) -> std::io::Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn determinism() -> Outcome {
    let synth = SynthConfig { train_samples: 120, val_samples: 40, test_samples: 40, noise_sigma: 0.5, seed: 21, ..SynthConfig::default() };
    let data = generate_synthetic(&synth)?;
    let cfg = TrainConfig { epochs: 2, seed: 22, ..TrainConfig::desk_scale() };
    let tmp = tempfile::tempdir().map_err(|e| transgru::Error::Config(e.to_string()))?;
    let mut reports = Vec::new();
    let mut trees = Vec::new();
    let mut ckpts = Vec::new();
    for run in 0..2 {
        let out = train(&cfg, &data)?;
        let dir = tmp.path().join(format!("run{run}"));
        out.checkpoint.save(&dir)?;
        trees.push(dir_bytes(&dir).map_err(|e| transgru::Error::Config(e.to_string()))?);
        reports.push(serde_json::to_string(&evaluate(&out.checkpoint.model, &data, Split::Test)?).unwrap());
        ckpts.push(out.checkpoint);
    }
    let same_ckpt = trees[0] == trees[1];
    let same_report = reports[0] == reports[1];

    let loaded = Checkpoint::load(tmp.path().join("run0"))?;
    let mut same_forward = true;
    for s in &data.test {
        for n in 1..=8 {
            let input = ModelInput {
                visual: s.modality("rgb")?.observe(data.protocol(), n)?,
                obs_label: Some(s.obs_label),
                n,
            };
            let a = ckpts[0].model.forward(&input)?.logits;
            let b = loaded.model.forward(&input)?.logits;
            same_forward &= a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        }
    }

    let mut same_file = true;
    for i in 0..50u64 {
        let mut rng = Rng::new(7000 + i);
        let shape = [rng.below(20), 1 + rng.below(40)];
        let t = rng.normal_tensor(&shape, 10.0).map(|v| v as f32 as f64);
        let back = decode(&encode(&t)?)?;
        same_file &= back.shape() == t.shape() && back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    let pass = same_ckpt && same_report && same_forward && same_file;
    Ok((pass, format!("checkpoints identical {same_ckpt}, reports identical {same_report}, reload forward bit-exact {same_forward}, feature files bit-exact {same_file}")))
}

// ---------------------------------------------------------------- 9

fn closed_form_decoder() -> Outcome {
    let mut store = ParamStore::new();
    let cell = GruCell::zeroed(&mut store, "gru", 5, 6);
    let head = Linear::zeroed(&mut store, "head", 6, 3);
    let v = Rng::new(8000).normal_tensor(&[1, 6], 2.0);
    let mut worst: f64 = 0.0;
    let mut steps_ok = true;
    for n in [1usize, 3, 8] {
        let mut g = Graph::new();
        let h0 = g.input(v.clone());
        let x = g.input(Rng::new(8001).normal_tensor(&[1, 5], 1.0));
        let out = anticipate(&mut g, &store, &cell, &head, h0, x, n, 8)?;
        steps_ok &= out.steps == n;
        let k = 0.5f64.powi(n as i32);
        for (a, b) in g.value(out.h).data().iter().zip(v.data()) {
            worst = worst.max((a - b * k).abs());
        }
    }
    Ok((worst <= GRU_TOL && steps_ok, format!("max |h_n - v 2^-n| = {worst:.1e} for n in {{1, 3, 8}}")))
}

// ---------------------------------------------------------------- 10

fn config_snapshot() -> Outcome {
    let train = TrainConfig::default();
    let snapshot = serde_json::json!({
        "m_blocks": train.encoder.m_blocks,
        "lr": train.lr,
        "momentum": train.momentum,
        "batch_size": train.batch_size,
        "epic_kitchens": [LossConfig::epic_kitchens().a, LossConfig::epic_kitchens().b, LossConfig::epic_kitchens().c],
        "egtea_gaze": [LossConfig::egtea_gaze().a, LossConfig::egtea_gaze().b, LossConfig::egtea_gaze().c],
        "default_loss": [train.loss.a, train.loss.b, train.loss.c],
        "horizons_s": AnticipationProtocol::default().steps().map(|n| AnticipationProtocol::default().anticipation_time(n).unwrap()).collect::<Vec<_>>(),
        "pw_top_k": SemGenConfig::default().top_k,
    });
    let expected = serde_json::json!({
        "m_blocks": 1,
        "lr": 0.01,
        "momentum": 0.9,
        "batch_size": 128,
        "epic_kitchens": [2.1, 1.0, 1.0],
        "egtea_gaze": [2.9, 1.0, 1.1],
        "default_loss": [2.1, 1.0, 1.0],
        "horizons_s": [0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0],
        "pw_top_k": 500,
    });
    let pass = snapshot == expected;
    Ok((pass, if pass { "defaults match".into() } else { format!("got {snapshot}") }))
}
