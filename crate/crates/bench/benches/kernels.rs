use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use multiquant::engine::kernels::{gemm_new, im2col, ConvGeom, MatRef};
use multiquant::quant::{QuantSpec, QuantizerParams};
use multiquant::topology::ArchSpec;
use multiquant::trainer::{build_model, train_step, Optimizers, TrainConfig};
use multiquant::Tensor;
use multiquant_bench::{image_batch, values};

fn gemm(c: &mut Criterion) {
    let mut g = c.benchmark_group("gemm");
    for n in [64usize, 256] {
        let a = values(n * n, 1);
        let b = values(n * n, 2);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| gemm_new(MatRef::new(&a, n, n), MatRef::new(&b, n, n)))
        });
    }
    g.finish();
}

fn conv_lowering(c: &mut Criterion) {
    let geom = ConvGeom {
        batch: 64,
        in_channels: 8,
        height: 14,
        width: 14,
        out_channels: 16,
        kernel: 3,
        stride: 1,
        padding: 1,
    };
    let x = values(64 * 8 * 14 * 14, 3);
    c.bench_function("im2col 64x8x14x14 k3", |b| b.iter(|| im2col(black_box(&x), &geom)));
}

fn fake_quantize(c: &mut Criterion) {
    let x = Tensor::from_vec(values(100_000, 4));
    let q = QuantizerParams::new(-0.8, 0.8, QuantSpec::weight(4)).unwrap();
    c.bench_function("fake_quantize 1e5", |b| {
        b.iter(|| q.fake_quantize(black_box(&x)).unwrap())
    });
}

fn step(c: &mut Criterion) {
    let cfg = TrainConfig::default();
    let mut model = build_model(&ArchSpec::tiny(), &cfg).unwrap();
    let mut opt = Optimizers::new(&cfg);
    let x = image_batch(64);
    let y: Vec<usize> = (0..64).map(|i| i % 10).collect();
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.bench_function("step tiny {2,4,8} batch 64", |b| {
        b.iter(|| train_step(&mut model, &mut opt, &x, &y, true, 1.0).unwrap())
    });
    g.bench_function("predict tiny 8b batch 64", |b| b.iter(|| model.predict(&x, 8).unwrap()));
    g.finish();
}

criterion_group!(benches, gemm, conv_lowering, fake_quantize, step);
criterion_main!(benches);
