use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use lightkd::arch::NetworkSpec;
use lightkd::dataset::{generate, SyntheticSpec};
use lightkd::engine::MaskedModel;
use lightkd::par::{self, Execution};

fn bench(c: &mut Criterion) {
    let spec = NetworkSpec::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../architectures/minizero.json"))
        .expect("minizero architecture");
    let data = generate(&SyntheticSpec {
        sensors: 48,
        instances: 256,
        ..Default::default()
    })
    .expect("synthetic data");
    let model = MaskedModel::new(spec, 3).expect("model");
    let rows = data.rows();
    let labels = data.labels().to_vec();

    let mut group = c.benchmark_group("ce_gradients_256");
    for mode in [Execution::Sequential, Execution::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &mode| {
            par::set_execution(mode);
            b.iter(|| black_box(model.ce_gradients(&rows, &labels).expect("gradients")));
        });
    }
    group.finish();

    let mut group = c.benchmark_group("forward_256");
    for mode in [Execution::Sequential, Execution::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &mode| {
            par::set_execution(mode);
            b.iter(|| black_box(model.logits(&rows).expect("logits")));
        });
    }
    group.finish();
    par::set_execution(Execution::Parallel);
}

criterion_group!(benches, bench);
criterion_main!(benches);
