//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with a
//! non-zero status when any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::*;
use lightkd::arch::{reduce_gates, rewrite_layer, LayerKind, LayerRewrite, LayerSpec, NetworkSpec};
use lightkd::compress::{self, factorization_threshold, reconstruction_errors, reduce_gates_in_model, CompressConfig};
use lightkd::dataset::{generate, Dataset, SyntheticSpec};
use lightkd::distill::{
    convexity_probe, determine_halting_epoch, optimize_lambdas, prepare_models, probe_value, train, DeConfig,
    DistillPlan, HaltingConfig, LambdaMode, Lambdas, ProbeLoss, ProbePoint, Scheme, TrainOutcome, DEFAULT_GRAD_CLIP,
};
use lightkd::dropout::{self, update_rate, DropoutConfig, DropoutState};
use lightkd::engine::{softmax, MaskedModel};
use lightkd::metrics::{self, evaluate, leave_one_out, ConfusionCounts};
use lightkd::par::{self, Execution};
use lightkd::pipeline::{self, pretrain_teacher, PipelineConfig, PretrainConfig, Selection};
use lightkd::resource::{estimate_layer, DeviceProfile, DeviceProfileFile, LayerCost};
use lightkd::training::{dataset_loss, fit, SgdConfig};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("took {t:.1?}, limit {limit:?}"))
}

fn workspace_file(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

// ---------------------------------------------------------------------------
// 1. cost formulas

/// Parameter and FLOP counts per kind, written out independently of the
/// library.
fn table_fixture(l: &LayerSpec) -> (u128, u128) {
    let c = |v: Option<usize>| v.unwrap() as u128;
    let (i, o) = (l.input_dim as u128, l.output_dim as u128);
    match l.kind {
        LayerKind::Conv => {
            let (f, g, h, w) = (c(l.filter_h), c(l.filter_w), c(l.feature_h), c(l.feature_w));
            (i * f * g * o + o, f * g * i * o * h * w)
        }
        LayerKind::FactorizedConv => {
            let (f, g, h, w, r) = (c(l.filter_h), c(l.filter_w), c(l.feature_h), c(l.feature_w), c(l.rank));
            (i * f * g * r + r, (f * g * h * w + 1 + o) * r)
        }
        LayerKind::Fc => (i * o + o, (2 * i - 1) * o),
        LayerKind::FactorizedFc => {
            let r = c(l.rank);
            (i * r + r, ((2 * i - 1) + o) * r)
        }
        LayerKind::Lstm => (4 * o * (i + o + 1), (8 * o * (i + o) + 4 * o) * c(l.steps)),
        LayerKind::CoupledLstm => (3 * o * (i + o + 1), (6 * o * (i + o) + 4 * o) * c(l.steps)),
        LayerKind::Gru => (3 * o * (i + o + 1), (6 * o * (i + o) + 5 * o) * c(l.steps)),
        LayerKind::Mgu => (2 * o * (i + o + 1), (4 * o * (i + o) + 5 * o) * c(l.steps)),
    }
}

fn random_layer(rng: &mut ChaCha8Rng, kind: LayerKind) -> LayerSpec {
    let i = rng.random_range(1..=300);
    let o = rng.random_range(1..=300);
    let mut filter = || (rng.random_range(1..=7), rng.random_range(1..=7));
    let (f, g) = filter();
    let feature = (rng.random_range(1..=64), rng.random_range(1..=64));
    let rank = rng.random_range(1..=128);
    match kind {
        LayerKind::Conv => LayerSpec::conv(i, o, (f, g), feature),
        LayerKind::FactorizedConv => LayerSpec::factorized_conv(i, o, (f, g), feature, rank),
        LayerKind::Fc => LayerSpec::fc(i, o),
        LayerKind::FactorizedFc => LayerSpec::factorized_fc(i, o, rank),
        k => LayerSpec::recurrent(k, i, o, rng.random_range(1..=100)),
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let fixed = [
        (LayerSpec::fc(100, 50), (5050, 9950)),
        (LayerSpec::conv(3, 8, (3, 3), (10, 10)), (224, 21600)),
        (LayerSpec::lstm(10, 20, 5), (2480, 24400)),
        (LayerSpec::factorized_fc(100, 50, 20), (2020, 4980)),
    ];
    for (layer, (p, f)) in &fixed {
        let got = estimate_layer(layer);
        ensure(got == LayerCost { params: *p, flops: *f }, || format!("{}: {got:?}", layer.describe()))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    for kind in LayerKind::ALL {
        for _ in 0..100 {
            let layer = random_layer(&mut rng, kind);
            let got = estimate_layer(&layer);
            let (p, f) = table_fixture(&layer);
            ensure(got.params == p && got.flops == f, || {
                format!("{}: library {got:?}, fixture ({p}, {f})", layer.describe())
            })?;
            checked += 1;
        }
    }
    within(Duration::from_secs(1), start)?;
    Ok(format!("{checked} random layers over {} kinds match the fixture table", LayerKind::ALL.len()))
}

// ---------------------------------------------------------------------------
// 2. gradients

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut report = Vec::new();
    let losses: [(&str, fn(&mut ChaCha8Rng) -> Lambdas); 4] = [
        ("CE", |_| unit_lambdas(1.0, 0.0, 0.0)),
        ("AL", |_| unit_lambdas(0.0, 1.0, 0.0)),
        ("DL", |_| unit_lambdas(0.0, 0.0, 1.0)),
        ("combined", random_lambdas),
    ];
    for (name, lam) in losses {
        let (worst, at) = gradient_worst(120, lam);
        ensure(worst <= 1e-4, || format!("{name}: relative error {worst:.2e} at {at}"))?;
        report.push(format!("{name} {worst:.1e}"));
    }
    within(Duration::from_secs(120), start)?;
    Ok(format!("120 models, max relative error: {}", report.join(", ")))
}

// ---------------------------------------------------------------------------
// 3. convexity probe

/// Closed-form diagonal second derivatives of each term for a linear logit
/// layer, with the student norm held at its value at the point.
fn curvature_oracle(p: &ProbePoint, i: usize, l: usize) -> [f64; 3] {
    let d = p.width();
    let n = p.inputs.len() as f64;
    let s: Vec<f64> = (0..p.classes)
        .map(|j| p.bias[j] + (0..d).map(|m| p.weight[j * d + m] * p.inputs[i][m]).sum::<f64>())
        .collect();
    let col: Vec<f64> = (0..p.classes).map(|j| p.weight[j * d + l]).collect();
    let prob = softmax(&s);
    let mean: f64 = prob.iter().zip(&col).map(|(a, w)| a * w).sum();
    let ce = (prob.iter().zip(&col).map(|(a, w)| a * w * w).sum::<f64>() - mean * mean) / n;
    let sq: f64 = col.iter().map(|w| w * w).sum();
    let c2: f64 = s.iter().map(|v| v * v).sum();
    [ce, 2.0 * sq / (c2 * n), 2.0 * sq / n]
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut min = f64::INFINITY;
    let mut samples = 0;
    let mut points = 0;
    while samples < 1000 {
        let (n, d, k) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(2..=5));
        let p = ProbePoint::random(&mut rng, n, d, k);
        let lam = random_lambdas(&mut rng);
        let per_term = [ProbeLoss::CrossEntropy, ProbeLoss::Attention, ProbeLoss::Distillation]
            .map(|loss| convexity_probe(&p, loss).unwrap());
        let combined = convexity_probe(&p, ProbeLoss::combined(&lam)).unwrap();
        for i in 0..n {
            for l in 0..d {
                let oracle = curvature_oracle(&p, i, l);
                for (t, name) in ["CE", "AL", "DL"].iter().enumerate() {
                    let got = per_term[t].second_derivatives[i][l];
                    ensure(close(got, oracle[t], 1e-8), || {
                        format!("{name} at point {points}, sample {i}, feature {l}: probe {got}, closed form {}", oracle[t])
                    })?;
                }
                let want = lam.l1 * oracle[0] + lam.l2 * oracle[1] + lam.l3 * oracle[2];
                let got = combined.second_derivatives[i][l];
                ensure(close(got, want, 1e-8), || format!("combined: probe {got}, closed form {want}"))?;
                min = min.min(got).min(per_term.iter().map(|r| r.second_derivatives[i][l]).fold(f64::INFINITY, f64::min));
                samples += 1;
            }
        }
        // Central differences of the loss itself for the terms that do not
        // involve the frozen student norm.
        if points % 10 == 0 {
            for (t, loss) in [(0, ProbeLoss::CrossEntropy), (2, ProbeLoss::Distillation)] {
                let (i, l) = (rng.random_range(0..n), rng.random_range(0..d));
                let h = 1e-4;
                let at = |delta: f64| {
                    let mut q = p.clone();
                    q.inputs[i][l] += delta;
                    probe_value(&q, loss).unwrap()
                };
                let fd = (at(h) - 2.0 * at(0.0) + at(-h)) / (h * h);
                let got = per_term[t].second_derivatives[i][l];
                ensure((fd - got).abs() <= 1e-4 * got.abs().max(1.0), || {
                    format!("finite-difference curvature {fd} vs probe {got}")
                })?;
            }
        }
        points += 1;
    }
    ensure(min >= -1e-9, || format!("negative second derivative {min}"))?;

    let scalar = ProbePoint {
        classes: 1,
        weight: vec![3.0],
        bias: vec![0.0],
        inputs: vec![vec![0.7]],
        labels: vec![0],
        teacher_logits: vec![vec![-1.0]],
        teacher_maps: vec![vec![1.0]],
    };
    let dl = convexity_probe(&scalar, ProbeLoss::Distillation).unwrap().second_derivatives[0][0];
    ensure((dl - 18.0).abs() <= 1e-8, || format!("scalar distillation curvature {dl}, expected 18"))?;
    for _ in 0..200 {
        let (n, d, k) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
        let p = ProbePoint::random(&mut rng, n, d, k);
        let r = convexity_probe(&p, ProbeLoss::Distillation).unwrap();
        for (i, row) in r.second_derivatives.iter().enumerate() {
            for (l, &v) in row.iter().enumerate() {
                let want: f64 = (0..k).map(|j| 2.0 * p.weight[j * d + l].powi(2) / n as f64).sum();
                ensure((v - want).abs() <= 1e-8, || format!("distillation curvature {v} at ({i},{l}), expected {want}"))?;
            }
        }
    }
    within(Duration::from_secs(60), start)?;
    Ok(format!("{samples} sampled second derivatives over {points} points, min {min:.3e}; DL curvature (2/n)w^2 exact"))
}

// ---------------------------------------------------------------------------
// 4. dropout

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let q_a = rng.random_range(1..=100_000);
        let max_iteration = rng.random_range(1..=50);
        let s = DropoutState {
            d: rng.random_range(0.001..=1.0),
            q_a,
            q_b: rng.random_range(1..=q_a),
            iteration: rng.random_range(0..=max_iteration),
            max_iteration,
            c: rng.random_range(0.1..3.0),
        };
        let kept = (s.q_b as f64 / s.q_a as f64).sqrt();
        let schedule = 1.0 - s.iteration as f64 / (s.c * s.max_iteration as f64);
        let want = s.d * if kept > schedule { kept } else { schedule };
        let got = update_rate(&s).unwrap();
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() <= 1e-12, || format!("{s:?}: {got} vs {want}"))?;
    }

    let mut runs = 0;
    let mut total_rounds = 0;
    for seed in 0..6u64 {
        let data = generate(&SyntheticSpec {
            classes: 3,
            sensors: 6,
            instances: 150,
            seed,
            separation: 2.0,
            components: 1,
            noise: 0.8,
        })
        .unwrap();
        let spec = NetworkSpec::new("dr", 3, vec![LayerSpec::fc(6, 32), LayerSpec::fc(32, 32), LayerSpec::fc(32, 3)])
            .with_shared_prefix(1);
        let mut model = MaskedModel::new(spec, seed).unwrap();
        fit(&mut model, &data, &data.head(0), 8, &SgdConfig::default(), seed).unwrap();
        let reference = dataset_loss(&model, &data).unwrap();
        // Lenient, tight and impossible reference losses.
        for (factor, l) in [(3.0, 2), (1.05, 1), (0.0, 2)] {
            let cfg = DropoutConfig { max_iteration: 6, seed, ..Default::default() };
            let out = dropout::run(&model, &data, reference * factor, l, &cfg).unwrap();
            ensure(!out.rounds.is_empty(), || "no dropout round executed".into())?;
            if factor == 0.0 {
                ensure(out.rounds.len() == 1 && out.kept_round == 1, || "rejected first round did not stop the loop".into())?;
            }
            let mut prev = out.initial_connections;
            for r in &out.rounds {
                ensure(r.q_a == prev && r.q_b <= r.q_a, || format!("round {}: Q_a {} Q_b {} after {prev}", r.round, r.q_a, r.q_b))?;
                prev = r.q_b;
            }
            ensure(out.q_b <= out.initial_connections, || "returned model grew".into())?;
            runs += 1;
            total_rounds += out.rounds.len();
        }
    }
    Ok(format!(
        "1000 rate updates within {worst:.1e}; {runs} runs, {total_rounds} rounds, connections never increase"
    ))
}

// ---------------------------------------------------------------------------
// 5. compression

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rewrites = 0;
    for _ in 0..300 {
        let conv = rng.random_bool(0.5);
        let layer = random_layer(&mut rng, if conv { LayerKind::Conv } else { LayerKind::Fc });
        let Some(limit) = factorization_threshold(layer.input_dim, layer.output_dim) else {
            continue;
        };
        ensure(
            ((limit * (layer.input_dim + layer.output_dim)) as u128) < ((layer.input_dim * layer.output_dim) as u128),
            || format!("threshold {limit} not below I*O/(I+O) for {}", layer.describe()),
        )?;
        let before = estimate_layer(&layer);
        for r in 1..=limit {
            let after = estimate_layer(&rewrite_layer(&layer, &LayerRewrite::Factorize { index: 0, rank: r }).unwrap());
            ensure(after.params < before.params && after.flops < before.flops, || {
                format!("{} at R={r}: {before:?} -> {after:?}", layer.describe())
            })?;
            rewrites += 1;
        }
    }
    // The in-model rewrite as well.
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (i, o) = (rng.random_range(4..=24), rng.random_range(4..=24));
        let spec = NetworkSpec::new("f", 2, vec![LayerSpec::fc(i, o), LayerSpec::fc(o, 2)]).with_shared_prefix(0);
        let mut m = MaskedModel::new(spec, seed).unwrap();
        let before = estimate_layer(&m.spec.layers[0]);
        compress::factorize_in_model(&mut m, 0, rng.random_range(1..=24), 0.0).unwrap().ok_or("no rewrite")?;
        let after = estimate_layer(&m.spec.layers[0]);
        ensure(after.params < before.params && after.flops < before.flops, || "in-model rewrite did not shrink".into())?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for t in 0..100 {
        let (r, c) = (rng.random_range(2..=12), rng.random_range(2..=12));
        let w = DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let errors = reconstruction_errors(&w);
        let slack = 1e-12 * w.norm();
        ensure(errors.windows(2).all(|e| e[1] <= e[0] + slack), || format!("matrix {t}: errors {errors:?}"))?;
    }

    for _ in 0..100 {
        let (i, o, s) = (rng.random_range(1..=64), rng.random_range(1..=64), rng.random_range(1..=20));
        for (kind, from, to) in [(LayerKind::Lstm, 4u128, 3u128), (LayerKind::Gru, 3, 2)] {
            let layer = LayerSpec::recurrent(kind, i, o, s);
            let (p0, p1) = (estimate_layer(&layer).params, estimate_layer(&reduce_gates(&layer).unwrap()).params);
            ensure(p1 * from == p0 * to, || format!("{}: {p0} -> {p1}", layer.describe()))?;
        }
    }
    for kind in [LayerKind::Lstm, LayerKind::Gru] {
        let spec = NetworkSpec::new("g", 2, vec![LayerSpec::recurrent(kind, 3, 5, 4), LayerSpec::fc(5, 2)]).with_shared_prefix(0);
        let mut m = MaskedModel::new(spec, 1).unwrap();
        reduce_gates_in_model(&mut m, 0).unwrap();
        let stored: usize = m.params[0].iter().map(|p| p.values.len()).sum();
        ensure(stored as u128 == estimate_layer(&m.spec.layers[0]).params, || "stored tensors disagree with the count".into())?;
    }
    Ok(format!(
        "{rewrites} legal factorizations shrink params and FLOPs; SVD error monotone on 100 matrices; gate ratios 3/4 and 2/3 exact"
    ))
}

// ---------------------------------------------------------------------------
// 6. feasibility

/// Random teacher with dense layers and optionally one recurrent cell.
fn scenario_spec(rng: &mut ChaCha8Rng, inputs: usize, classes: usize) -> NetworkSpec {
    let mut layers = vec![LayerSpec::fc(inputs, rng.random_range(8..=24))];
    let mut width = layers[0].output_dim;
    if rng.random_bool(0.5) {
        let kind = if rng.random_bool(0.5) { LayerKind::Lstm } else { LayerKind::Gru };
        let (i, o, s) = (rng.random_range(2..=5), rng.random_range(4..=10), rng.random_range(2..=4));
        layers.push(LayerSpec::fc(width, i * s));
        layers.push(LayerSpec::recurrent(kind, i, o, s));
        width = o;
    }
    for _ in 0..rng.random_range(1..=2) {
        let o = rng.random_range(6..=24);
        layers.push(LayerSpec::fc(width, o));
        width = o;
    }
    layers.push(LayerSpec::fc(width, classes));
    NetworkSpec::new("scenario", classes, layers).with_shared_prefix(1)
}

/// FLOPs of the cheapest network the compressor can reach: every
/// factorizable layer outside the prefix at rank 1, every cell gate-reduced.
fn cheapest_flops(spec: &NetworkSpec) -> u128 {
    spec.layers
        .iter()
        .enumerate()
        .map(|(idx, l)| {
            let reduced = if idx < spec.shared() {
                l.clone()
            } else if l.kind.is_recurrent() {
                reduce_gates(l).unwrap()
            } else if factorization_threshold(l.input_dim, l.output_dim).is_some() {
                rewrite_layer(l, &LayerRewrite::Factorize { index: idx, rank: 1 }).unwrap()
            } else {
                l.clone()
            };
            table_fixture(&reduced).1
        })
        .sum()
}

fn small_pipeline_config(seed: u64) -> PipelineConfig {
    PipelineConfig {
        seed,
        epochs: 2,
        dropout_max_iteration: 2,
        de_epochs: 1,
        lambda_mode: LambdaMode::Fixed { l1: 0.6, l2: 0.2, l3: 0.2 },
        ..Default::default()
    }
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut feasible_runs, mut infeasible_runs) = (0, 0);
    for scenario in 0..30u64 {
        let classes = rng.random_range(2..=4);
        let sensors = rng.random_range(4..=10);
        let data = generate(&SyntheticSpec {
            classes,
            sensors,
            instances: 120,
            seed: scenario,
            separation: 2.0,
            components: 1,
            noise: 0.8,
        })
        .unwrap();
        let spec = scenario_spec(&mut rng, sensors, classes);
        let teacher = pretrain_teacher(&spec, &data, &PretrainConfig { epochs: 3, seed: scenario, ..Default::default() })
            .map_err(|e| e.to_string())?;
        let full = table_fixture_total(&spec);
        let min = cheapest_flops(&spec);
        let (b_e, e_m) = (rng.random_range(1.0..8.0), rng.random_range(1e-10..1e-8));
        let reachable = scenario < 20;
        let (alpha, beta) = if reachable {
            let span = full as f64 / min as f64;
            let mem = 1.0 + rng.random::<f64>() * (span - 1.0) * 0.8;
            let time = 1.0 + rng.random::<f64>() * (span - 1.0) * 0.8;
            (b_e * min as f64 * mem, e_m * min as f64 * time)
        } else if rng.random_bool(0.5) {
            (b_e * min as f64 * 0.9, e_m * full as f64 * 2.0)
        } else {
            (b_e * full as f64 * 2.0, e_m * min as f64 * 0.9)
        };
        let device = DeviceProfile::new("scenario", b_e, e_m, alpha, beta, 1.0 / e_m).unwrap();
        let out = pipeline::run(&teacher, &data, &device, &small_pipeline_config(scenario)).map_err(|e| e.to_string())?;
        let m = &out.manifest;
        if reachable {
            let Selection::Best { index, .. } = m.selection else {
                return Err(format!("scenario {scenario}: reachable budget reported as all-infeasible"));
            };
            let best = &m.candidates[index];
            let flops = table_fixture_total(&best.student) as f64;
            ensure(b_e * flops <= alpha && e_m * flops <= beta, || {
                format!("scenario {scenario}: selected student uses {flops} FLOPs, over budget")
            })?;
            ensure(best.resource.t_mem <= alpha && best.resource.t_exec <= beta, || {
                format!("scenario {scenario}: report {:?}", best.resource)
            })?;
            for c in m.candidates.iter().filter(|c| c.eligible()) {
                ensure(c.resource.feasible, || "an infeasible candidate was eligible".into())?;
            }
            feasible_runs += 1;
        } else {
            ensure(m.selection == Selection::AllInfeasible, || format!("scenario {scenario}: {:?}", m.selection))?;
            ensure(m.candidates.iter().all(|c| !c.resource.feasible), || "feasible candidate below the floor".into())?;
            ensure(
                matches!(out.into_result(), Err(lightkd::Error::AllInfeasible(_))),
                || "AllInfeasible not surfaced as an error".into(),
            )?;
            infeasible_runs += 1;
        }
    }
    within(Duration::from_secs(300), start)?;
    Ok(format!(
        "{feasible_runs} reachable budgets met (t_mem <= alpha, t_exec <= beta); {infeasible_runs} unreachable budgets reported AllInfeasible"
    ))
}

fn table_fixture_total(spec: &NetworkSpec) -> u128 {
    spec.layers.iter().map(|l| table_fixture(l).1).sum()
}

// ---------------------------------------------------------------------------
// 7 and 8. early halting trend and the frozen trainee

struct TrendRun {
    scheme: Scheme,
    seed: u64,
    outcome: TrainOutcome,
}

struct Trend {
    lambdas: Lambdas,
    halting_epoch: usize,
    runs: Vec<TrendRun>,
    elapsed: Duration,
}

const TREND_EPOCHS: usize = 20;
const TREND_SEEDS: [u64; 2] = [1, 2];

fn trend() -> Result<Trend, String> {
    let start = Instant::now();
    let err = |e: lightkd::Error| e.to_string();
    let data = generate(&SyntheticSpec {
        classes: 4,
        sensors: 48,
        instances: 2000,
        seed: 11,
        separation: 0.7,
        components: 2,
        noise: 1.0,
    })
    .map_err(err)?;
    let spec = NetworkSpec::load(workspace_file("architectures/minizero.json")).map_err(err)?;
    let teacher = pretrain_teacher(&spec, &data, &PretrainConfig { epochs: 30, ..Default::default() }).map_err(err)?;
    let cfg = PipelineConfig::default();
    let (train_set, validation) = cfg.split(&data).map_err(err)?;
    let device = DeviceProfileFile::load(workspace_file("devices/d3.json"))
        .and_then(|f| f.resolve(&spec))
        .map_err(err)?;
    // The student of the longest sweep step: every layer after the shared
    // prefix is eligible for rewriting.
    let shared = spec.shared();
    let student = compress::run(&teacher.model, &device, shared..spec.layers.len(), &CompressConfig::default())
        .and_then(|c| c.into_result())
        .map_err(err)?
        .model;
    let halting_epoch =
        determine_halting_epoch(&teacher.meta.validation_accuracy, &HaltingConfig::default()).min(TREND_EPOCHS - 1);

    let plan = |scheme: Scheme, lambdas: Lambdas, epochs: usize, seed: u64| DistillPlan {
        lambdas,
        halting_epoch: halting_epoch.min(epochs - 1),
        total_epochs: epochs,
        scheme,
        shared_prefix: shared,
        eta: cfg.sgd.eta,
        batch_size: cfg.sgd.batch_size,
        seed,
        grad_clip: DEFAULT_GRAD_CLIP,
    };
    let run = |p: &DistillPlan| -> lightkd::Result<TrainOutcome> {
        let models = prepare_models(p.scheme, &student.spec, Some(&student), &spec, shared, p.seed)?;
        train(models, &teacher.model, &train_set, &validation, p)
    };

    // One loss weighting for every scheme, searched on short S6 runs.
    let search = optimize_lambdas(
        |l| match run(&plan(Scheme::S6, *l, 12, 100)) {
            Ok(o) if o.diverged.is_none() => o.final_accuracy(),
            _ => f64::NEG_INFINITY,
        },
        &DeConfig { population: 8, generations: 3, seed: 7, ..Default::default() },
    );

    let mut runs = Vec::new();
    for scheme in [Scheme::S1, Scheme::S5, Scheme::S6] {
        for seed in TREND_SEEDS {
            let outcome = run(&plan(scheme, search.lambdas, TREND_EPOCHS, seed)).map_err(err)?;
            if let Some(msg) = &outcome.diverged {
                return Err(format!("{scheme} seed {seed} diverged: {msg}"));
            }
            runs.push(TrendRun { scheme, seed, outcome });
        }
    }
    Ok(Trend {
        lambdas: search.lambdas,
        halting_epoch,
        runs,
        elapsed: start.elapsed(),
    })
}

fn criterion_7(t: &Trend) -> Outcome {
    let find = |s: Scheme, seed: u64| t.runs.iter().find(|r| r.scheme == s && r.seed == seed).map(|r| &r.outcome).unwrap();
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for seed in TREND_SEEDS {
        let (s1, s5, s6) = (find(Scheme::S1, seed), find(Scheme::S5, seed), find(Scheme::S6, seed));
        let saving = 1.0 - s6.total_flops() as f64 / s5.total_flops() as f64;
        let pts = |o: &TrainOutcome| o.final_accuracy() * 100.0;
        let micro = |o: &TrainOutcome| o.final_record().map_or(0.0, |r| r.validation_micro_accuracy) * 100.0;
        lines.push(format!(
            "seed {seed}: S1 {:.2} S5 {:.2} S6 {:.2} (micro {:.2}/{:.2}/{:.2}), S6 saves {:.1}% FLOPs",
            pts(s1),
            pts(s5),
            pts(s6),
            micro(s1),
            micro(s5),
            micro(s6),
            saving * 100.0
        ));
        if saving < 0.10 {
            failures.push(format!("seed {seed}: FLOP saving {:.1}% < 10%", saving * 100.0));
        }
        if (pts(s6) - pts(s5)).abs() > 1.5 {
            failures.push(format!("seed {seed}: S6 {:.2} vs S5 {:.2}", pts(s6), pts(s5)));
        }
        if pts(s6) - pts(s1) < 2.0 {
            failures.push(format!("seed {seed}: S6 {:.2} vs S1 {:.2}", pts(s6), pts(s1)));
        }
    }
    let summary = format!(
        "lambda ({:.3}, {:.3}, {:.3}), h={}; {}; {:.0?}",
        t.lambdas.l1,
        t.lambdas.l2,
        t.lambdas.l3,
        t.halting_epoch,
        lines.join("; "),
        t.elapsed
    );
    if t.elapsed > Duration::from_secs(600) {
        failures.push(format!("took {:.0?}", t.elapsed));
    }
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{} [{summary}]", failures.join("; ")))
    }
}

fn criterion_8(t: &Trend) -> Outcome {
    let mut checked = 0;
    for r in t.runs.iter().filter(|r| r.scheme == Scheme::S6) {
        let at_halt = r.outcome.trainee_at_halt.as_ref().ok_or("no trainee snapshot at h")?;
        let last = r.outcome.trainee.as_ref().ok_or("no final trainee")?;
        ensure(at_halt.bit_identical(last), || format!("seed {}: trainee changed after epoch h", r.seed))?;
        checked += 1;
    }
    ensure(checked > 0, || "no S6 runs".into())?;
    Ok(format!("{checked} S6 runs: trainee at epoch {} equals trainee at epoch {TREND_EPOCHS} bit for bit", t.halting_epoch))
}

// ---------------------------------------------------------------------------
// 9. loss-weight search

/// Uniform draw from the open simplex.
fn random_interior(rng: &mut ChaCha8Rng) -> Lambdas {
    let e: [f64; 3] = std::array::from_fn(|_| -(1.0 - rng.random::<f64>()).ln());
    let s: f64 = e.iter().sum();
    Lambdas { l1: e[0] / s, l2: e[1] / s, l3: 1.0 - e[0] / s - e[1] / s, l4: 1.0 }
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut margins = Vec::new();
    for case in 0..20u64 {
        let target = random_interior(&mut rng);
        let freq = rng.random_range(1.0..6.0);
        let bump = rng.random_range(0.0..0.05);
        let fitness = move |l: &Lambdas| {
            let d = (l.l1 - target.l1).powi(2) + (l.l2 - target.l2).powi(2) + (l.l3 - target.l3).powi(2);
            -d + bump * (freq * l.l1).sin() * (freq * l.l3).cos()
        };
        let de = DeConfig { seed: case, ..Default::default() };
        let found = optimize_lambdas(fitness, &de);
        let l = found.lambdas;
        ensure(l.as_array().iter().all(|&v| v > 0.0 && v < 1.0), || format!("case {case}: {l:?} not interior"))?;
        ensure((l.l1 + l.l2 + l.l3 - 1.0).abs() <= 1e-9, || format!("case {case}: sum {}", l.l1 + l.l2 + l.l3))?;
        ensure(fitness(&l) == found.fitness, || "reported fitness does not match the weights".into())?;
        let mut sampler = ChaCha8Rng::seed_from_u64(case);
        let best_random = (0..50).map(|_| fitness(&random_interior(&mut sampler))).fold(f64::NEG_INFINITY, f64::max);
        ensure(found.fitness >= best_random, || {
            format!("case {case}: DE {} < random {best_random}", found.fitness)
        })?;
        margins.push(found.fitness - best_random);
    }
    let min_margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(format!("20 landscapes: DE interior, sum within 1e-9, beats 50 random points (min margin {min_margin:.2e})"))
}

// ---------------------------------------------------------------------------
// 10. metrics

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for set in 0..1000 {
        let k = rng.random_range(2..=6);
        let n = rng.random_range(1..=200);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let skew = rng.random_range(0.0..1.0);
        let preds: Vec<usize> =
            labels.iter().map(|&y| if rng.random_bool(skew) { y } else { rng.random_range(0..k) }).collect();
        let (mut acc, mut f1, mut prec) = (0.0, 0.0, 0.0);
        for c in 0..k {
            let (mut tp, mut tn, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
            for (&p, &y) in preds.iter().zip(&labels) {
                match (p == c, y == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => tn += 1,
                }
            }
            let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
            acc += ratio(tp + tn, tp + tn + fp + fn_);
            f1 += ratio(2 * tp, 2 * tp + fp + fn_);
            prec += ratio(tp, tp + fp);
        }
        let kf = k as f64;
        let counts = ConfusionCounts::from_predictions(&preds, &labels, k).unwrap();
        for (name, got, want) in [
            ("accuracy", metrics::accuracy(&counts), acc / kf),
            ("F1", metrics::f1(&counts), f1 / kf),
            ("precision", metrics::precision(&counts), prec / kf),
        ] {
            ensure((got - want).abs() <= 1e-12, || format!("set {set}: {name} {got} vs brute force {want}"))?;
        }
    }

    let data = generate(&SyntheticSpec {
        classes: 4,
        sensors: 8,
        instances: 600,
        seed: 10,
        separation: 1.2,
        components: 1,
        noise: 1.0,
    })
    .unwrap();
    let (train_set, test) = data.split(0.7, 3).unwrap();
    let spec = NetworkSpec::new("loo", 4, vec![LayerSpec::fc(8, 24), LayerSpec::fc(24, 4)]).with_shared_prefix(0);
    let harness = |d: &Dataset| -> lightkd::Result<MaskedModel> {
        let mut m = MaskedModel::new(spec.clone(), 6)?;
        fit(&mut m, d, &d.head(0), 12, &SgdConfig::default(), 6)?;
        Ok(m)
    };
    let full = evaluate(&harness(&train_set).unwrap(), &test).unwrap().accuracy;
    let mut loo = Vec::new();
    for class in 0..4 {
        let a = leave_one_out(&train_set, &test, class, harness).unwrap().accuracy;
        ensure(a < full, || format!("leaving out class {} gives {a}, all classes {full}", class + 1))?;
        loo.push(format!("{:.3}", a));
    }
    Ok(format!("1000 sets match brute force; leave-one-out [{}] < all-class {full:.3}", loo.join(", ")))
}

// ---------------------------------------------------------------------------
// 11. determinism

fn criterion_11() -> Outcome {
    let data = generate(&SyntheticSpec {
        classes: 3,
        sensors: 8,
        instances: 240,
        seed: 4,
        separation: 1.5,
        components: 2,
        noise: 1.0,
    })
    .unwrap();
    let spec = NetworkSpec::load(workspace_file("architectures/mlp.json")).map_err(|e| e.to_string())?;
    let spec = NetworkSpec {
        class_count: 3,
        layers: {
            let mut l = spec.layers.clone();
            l[0] = LayerSpec::fc(8, l[0].output_dim);
            let last = l.len() - 1;
            l[last] = LayerSpec::fc(l[last].input_dim, 3);
            l
        },
        ..spec
    };
    let device = DeviceProfile::new("det", 4.0, 1e-9, 4.0 * table_fixture_total(&spec) as f64 * 0.7, 1.0, 1e9).unwrap();
    let cfg = PipelineConfig {
        epochs: 4,
        dropout_max_iteration: 3,
        de: DeConfig { population: 4, generations: 1, seed: 3, ..Default::default() },
        de_epochs: 1,
        ..Default::default()
    };
    let manifest = |mode: Execution| -> Result<String, String> {
        par::set_execution(mode);
        let teacher = pretrain_teacher(&spec, &data, &PretrainConfig { epochs: 4, ..Default::default() })
            .map_err(|e| e.to_string())?;
        let out = pipeline::run(&teacher, &data, &device, &cfg).map_err(|e| e.to_string())?;
        Ok(out.manifest.to_json())
    };
    let first = manifest(Execution::Parallel);
    let second = manifest(Execution::Parallel);
    let sequential = manifest(Execution::Sequential);
    par::set_execution(Execution::Parallel);
    let (first, second, sequential) = (first?, second?, sequential?);
    ensure(first == second, || "two runs produced different manifests".into())?;
    ensure(first == sequential, || "sequential execution changed the manifest".into())?;
    Ok(format!("manifest of {} bytes identical across two runs and sequential execution", first.len()))
}

// ---------------------------------------------------------------------------

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(panic) => Err(format!(
            "panicked: {}",
            panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default()
        )),
    }
}

fn main() {
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| filter.is_empty() || filter.contains(&n);
    let names = [
        "formula oracle",
        "gradient suite",
        "convexity probe",
        "dropout properties",
        "compression properties",
        "feasibility guarantee",
        "early-halting trend",
        "frozen trainee",
        "lambda optimization",
        "metrics oracle",
        "determinism",
    ];
    let trend = if wanted(7) || wanted(8) { Some(guarded(trend)) } else { None };
    let mut failed = 0;
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let result = guarded(|| match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(),
            7 | 8 => match trend.as_ref().unwrap() {
                Ok(t) if n == 7 => criterion_7(t),
                Ok(t) => criterion_8(t),
                Err(e) => Err(format!("trend runs failed: {e}")),
            },
            9 => criterion_9(),
            10 => criterion_10(),
            _ => criterion_11(),
        });
        let took = start.elapsed();
        match result {
            Ok(detail) => println!("PASS [{n:>2}] {name}: {detail} ({took:.1?})"),
            Err(reason) => {
                failed += 1;
                println!("FAIL [{n:>2}] {name}: {reason} ({took:.1?})");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
