use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use refseg_core::Tensor;

fn filled(shape: &[usize], phase: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| (i as f64 * 0.37 + phase).sin()).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [16, 64, 256] {
        let a = filled(&[n, n], 0.1);
        let b = filled(&[n, n], 0.7);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(a.matmul(&b).unwrap()))
        });
    }
    g.finish();
}

fn convolutions(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv");
    for (hw, ch) in [(16, 64), (32, 32)] {
        let x = filled(&[hw, hw, ch], 0.3);
        let k = filled(&[3, 3, ch, ch], 0.5);
        let kt = filled(&[ch, 2, 2, ch], 0.9);
        let b = filled(&[ch], 0.2);
        let id = format!("{hw}x{hw}x{ch}");
        g.bench_function(BenchmarkId::new("conv3x3", &id), |bench| {
            bench.iter(|| black_box(x.conv3x3(&k, &b).unwrap()))
        });
        g.bench_function(BenchmarkId::new("transposed_conv2x", &id), |bench| {
            bench.iter(|| black_box(x.transposed_conv2x(&kt, &b).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, matmul, convolutions);
criterion_main!(benches);
