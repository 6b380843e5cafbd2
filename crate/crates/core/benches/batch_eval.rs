use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use spnn::config::ExperimentConfig;
use spnn::data::generate;
use spnn::nlbp::nlbp_gentle;
use spnn::nn::Rng;
use spnn::par::Exec;
use spnn::spnn::{PinvMode, SpnnModel};

fn batch_eval(c: &mut Criterion) {
    let cfg = ExperimentConfig::desk();
    let m = SpnnModel::new(&cfg.topology(), &mut Rng::new(1)).unwrap();
    let xs = generate(&cfg.data.spec, 1024, 3).unwrap().samples;
    let ys = m.forward_batch(&xs, Exec::Sequential).unwrap();

    let mut g = c.benchmark_group("batch_eval");
    for exec in [Exec::Sequential, Exec::Parallel] {
        let tag = format!("{exec:?}");
        g.bench_with_input(BenchmarkId::new("forward", &tag), &exec, |b, &e| {
            b.iter(|| m.forward_batch(black_box(&xs), e).unwrap())
        });
        for (name, mode) in [("pinv_natural", PinvMode::Natural), ("pinv_learned_r", PinvMode::LearnedR)] {
            g.bench_with_input(BenchmarkId::new(name, &tag), &exec, |b, &e| {
                b.iter(|| m.pinv_batch(black_box(&ys), &mode, e).unwrap())
            });
        }
    }
    g.finish();

    let (x, y) = (&xs[0], &ys[1]);
    c.bench_function("nlbp_gentle_single", |b| {
        b.iter(|| nlbp_gentle(&m, black_box(x), black_box(y), 0.5, &PinvMode::Natural).unwrap())
    });
}

criterion_group!(benches, batch_eval);
criterion_main!(benches);
