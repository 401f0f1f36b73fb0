#![allow(dead_code)]

use lightkd::arch::{LayerKind, LayerSpec, NetworkSpec};
use lightkd::distill::loss::{combine, guide_terms, student_upstream, Branch, GuideSignals, LossParts};
use lightkd::distill::Lambdas;
use lightkd::engine::{cross_entropy_grad, Gradients, MaskedModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const RECURRENT: [LayerKind; 4] = [LayerKind::Lstm, LayerKind::CoupledLstm, LayerKind::Gru, LayerKind::Mgu];

fn dense<R: Rng>(rng: &mut R, i: usize, o: usize) -> LayerSpec {
    let threshold = (i * o).saturating_sub(1) / (i + o);
    if threshold >= 1 && rng.random_bool(0.4) {
        LayerSpec::factorized_fc(i, o, rng.random_range(1..=threshold))
    } else {
        LayerSpec::fc(i, o)
    }
}

/// Small random network over all layer kinds. Optional conv block, up to two
/// dense layers, an optional recurrent layer, and a dense output layer.
pub fn random_spec<R: Rng>(rng: &mut R, classes: usize) -> NetworkSpec {
    let mut layers = Vec::new();
    let recurrent = rng.random_bool(0.5).then(|| {
        let kind = RECURRENT[rng.random_range(0..4)];
        (kind, rng.random_range(2..=4), rng.random_range(2..=4), rng.random_range(2..=4))
    });
    let mut width;
    if rng.random_bool(0.5) {
        let (h, w) = (rng.random_range(2..=4), rng.random_range(1..=3));
        let mut ch: usize = rng.random_range(1..=2);
        for _ in 0..rng.random_range(1..=2) {
            let o: usize = rng.random_range(2..=3);
            let f = (rng.random_range(1..=3), rng.random_range(1..=2));
            let threshold = (ch * f.0 * f.1 * o).saturating_sub(1) / (ch * f.0 * f.1 + o);
            layers.push(if threshold >= 1 && rng.random_bool(0.4) {
                LayerSpec::factorized_conv(ch, o, f, (h, w), rng.random_range(1..=threshold))
            } else {
                LayerSpec::conv(ch, o, f, (h, w))
            });
            ch = o;
        }
        width = ch * h * w;
    } else if let (Some((kind, i, o, s)), true) = (recurrent, rng.random_bool(0.5)) {
        layers.push(LayerSpec::recurrent(kind, i, o, s));
        width = o;
    } else {
        width = rng.random_range(3..=6);
    }
    for _ in 0..rng.random_range(0..=1) {
        let o = rng.random_range(3..=6);
        layers.push(dense(rng, width, o));
        width = o;
    }
    if let Some((kind, i, o, s)) = recurrent {
        if !layers.iter().any(|l| l.kind.is_recurrent()) {
            layers.push(dense(rng, width, i * s));
            layers.push(LayerSpec::recurrent(kind, i, o, s));
            width = o;
        }
    }
    layers.push(dense(rng, width, classes));
    let n = layers.len();
    NetworkSpec::new("random", classes, layers).with_shared_prefix(rng.random_range(0..n))
}

/// Plain FC guide network reading `width` inputs.
pub fn guide_spec<R: Rng>(rng: &mut R, width: usize, classes: usize) -> NetworkSpec {
    let mut layers = Vec::new();
    let mut w = width;
    for _ in 0..rng.random_range(1..=3) {
        let o = rng.random_range(2..=7);
        layers.push(LayerSpec::fc(w, o));
        w = o;
    }
    layers.push(LayerSpec::fc(w, classes));
    NetworkSpec::new("guide", classes, layers).with_shared_prefix(0)
}

pub fn random_rows<R: Rng>(rng: &mut R, n: usize, width: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..width).map(|_| rng.random_range(-1.5..1.5)).collect()).collect()
}

pub fn as_refs(rows: &[Vec<f64>]) -> Vec<&[f64]> {
    rows.iter().map(Vec::as_slice).collect()
}

/// Nudges every parameter so biases are not all zero.
pub fn jitter(model: &mut MaskedModel, rng: &mut ChaCha8Rng, scale: f64) {
    for p in model.params.iter_mut().flatten() {
        for v in &mut p.values {
            *v += rng.random_range(-scale..scale);
        }
    }
}

/// Loss components of the student against fixed guides.
pub fn parts(student: &MaskedModel, rows: &[&[f64]], labels: &[usize], guides: &[&GuideSignals]) -> LossParts {
    let trace = student.forward(rows).unwrap();
    let (ce, _) = cross_entropy_grad(&trace.logits(), labels);
    let terms = guide_terms(&student.spec.layers, &trace, guides).unwrap();
    LossParts { ce_student: ce, ce_trainee: 0.0, attention: terms.attention, distillation: terms.distillation }
}

pub fn weighted_loss(student: &MaskedModel, rows: &[&[f64]], labels: &[usize], guides: &[&GuideSignals], lam: &Lambdas) -> f64 {
    combine(&parts(student, rows, labels, guides), lam, Branch::PostHalt)
}

pub fn weighted_grad(student: &MaskedModel, rows: &[&[f64]], labels: &[usize], guides: &[&GuideSignals], lam: &Lambdas) -> Gradients {
    let trace = student.forward(rows).unwrap();
    let (_, d_ce) = cross_entropy_grad(&trace.logits(), labels);
    let terms = guide_terms(&student.spec.layers, &trace, guides).unwrap();
    student.backward(&trace, &student_upstream(&d_ce, &terms, lam))
}

pub const FD_STEP: f64 = 1e-5;
/// Magnitude below which relative error is measured against this floor.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Largest relative error between `analytic` and central differences of
/// `loss` over every live parameter entry.
pub fn max_fd_error<F: Fn(&MaskedModel) -> f64>(model: &MaskedModel, analytic: &Gradients, loss: F) -> (f64, String) {
    let mut worst = (0.0, String::new());
    let mut m = model.clone();
    for li in 0..model.params.len() {
        for pi in 0..model.params[li].len() {
            for k in 0..model.params[li][pi].values.len() {
                if !model.params[li][pi].is_live(k) {
                    continue;
                }
                let orig = m.params[li][pi].values[k];
                m.params[li][pi].values[k] = orig + FD_STEP;
                let up = loss(&m);
                m.params[li][pi].values[k] = orig - FD_STEP;
                let down = loss(&m);
                m.params[li][pi].values[k] = orig;
                let numeric = (up - down) / (2.0 * FD_STEP);
                let a = analytic.layers[li][pi][k];
                let e = rel_err(a, numeric);
                if e > worst.0 {
                    worst = (e, format!("layer {li} ({}) tensor {pi} entry {k}: analytic {a:e} numeric {numeric:e}", model.spec.layers[li].kind));
                }
            }
        }
    }
    worst
}

pub const MIN_MARGIN: f64 = 1e-3;

pub struct Case {
    student: MaskedModel,
    rows: Vec<Vec<f64>>,
    labels: Vec<usize>,
    guides: Vec<GuideSignals>,
}

pub fn case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(2..=4);
    let spec = random_spec(&mut rng, k);
    let mut student = MaskedModel::new(spec, seed).unwrap();
    jitter(&mut student, &mut rng, 0.1);
    let width = student.spec.input_width();
    let n = rng.random_range(2..=4);
    // Resample the batch until no ReLU pre-activation sits near its kink.
    let rows = loop {
        let rows = random_rows(&mut rng, n, width);
        if student.forward(&as_refs(&rows)).unwrap().relu_margin() >= MIN_MARGIN {
            break rows;
        }
    };
    let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
    let guides = (0..rng.random_range(1..=2))
        .map(|g| {
            let mut t = MaskedModel::new(guide_spec(&mut rng, width, k), seed ^ (g + 99)).unwrap();
            jitter(&mut t, &mut rng, 0.3);
            GuideSignals::from_trace(&t.spec.layers, &t.forward(&as_refs(&rows)).unwrap())
        })
        .collect();
    Case { student, rows, labels, guides }
}

/// Largest finite-difference relative error over `models` random cases,
/// with the loss weights drawn per case by `lam`.
pub fn gradient_worst(models: usize, lam: impl Fn(&mut ChaCha8Rng) -> Lambdas) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for seed in 0..models as u64 {
        let c = case(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let lam = lam(&mut rng);
        let rows = as_refs(&c.rows);
        let guides: Vec<&GuideSignals> = c.guides.iter().collect();
        let grad = weighted_grad(&c.student, &rows, &c.labels, &guides, &lam);
        let (e, at) = max_fd_error(&c.student, &grad, |m| weighted_loss(m, &rows, &c.labels, &guides, &lam));
        if e > worst.0 {
            worst = (e, format!("seed {seed}: {at}"));
        }
    }
    worst
}

pub fn unit_lambdas(l1: f64, l2: f64, l3: f64) -> Lambdas {
    Lambdas { l1, l2, l3, l4: 1.0 }
}

/// Random interior loss weights.
pub fn random_lambdas(rng: &mut ChaCha8Rng) -> Lambdas {
    let a: f64 = rng.random_range(0.05..1.0);
    let b: f64 = rng.random_range(0.05..1.0);
    let c: f64 = rng.random_range(0.05..1.0);
    let s = a + b + c;
    unit_lambdas(a / s, b / s, c / s)
}
