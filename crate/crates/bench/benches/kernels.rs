use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use iccr_bench::small_transformer;
use iccr_core::models::{forward_batch, init_model};
use iccr_core::{Tape, Tensor};
use std::hint::black_box;

fn filled(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [32usize, 128, 256] {
        let (a, b) = (filled(&[n, n]), filled(&[n, n]));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut t = Tape::new();
                let (x, y) = (t.leaf(a.clone()), t.leaf(b.clone()));
                black_box(t.matmul(x, y).unwrap());
            })
        });
    }
    g.finish();
}

fn forward(c: &mut Criterion) {
    let state = init_model(&small_transformer(40), 1).unwrap();
    let tokens: Vec<Tensor> = (0..32).map(|_| filled(&[82, 1])).collect();
    let refs: Vec<&Tensor> = tokens.iter().collect();
    let read: Vec<usize> = (0..32).map(|b| b * 82 + 81).collect();
    c.bench_function("forward/l2_d32_b32_t82", |bench| {
        bench.iter(|| black_box(forward_batch(&state, &refs, Some(&read)).unwrap()))
    });
}

criterion_group!(benches, matmul, forward);
criterion_main!(benches);
