use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dfenet::autograd::Graph;
use dfenet::loss::{total_loss, LossConfig};
use dfenet::model::{Model, ModelConfig, Variant};
use dfenet_bench::{binary_target, slice_batch};

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    let input = slice_batch(8, 96, 5, 1);
    let mask = binary_target(8, 96, 96, 0.02, 2);
    let edge = binary_target(8, 48, 48, 0.02, 3);
    for v in Variant::ALL {
        let model = Model::<f32>::build(&ModelConfig { variant: v, ..ModelConfig::default() }).unwrap();
        group.bench_with_input(BenchmarkId::new("predict", v.name()), &(), |b, _| b.iter(|| model.predict(&input).unwrap()));
        group.bench_with_input(BenchmarkId::new("train_step", v.name()), &(), |b, _| {
            b.iter(|| {
                let mut g = Graph::<f32>::train();
                let out = model.forward(&mut g, &input).unwrap();
                let (l, _) = total_loss(&mut g, out.seg, &mask, out.edge.map(|e| (e, &edge)), &LossConfig::default()).unwrap();
                g.backward(l)
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward);
criterion_main!(benches);
