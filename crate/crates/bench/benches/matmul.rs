use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gcrl_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `[n, d] × [d, d]` forward and backward; small sizes take the hand-written
/// kernel, large ones go through `matrixmultiply`.
fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul_fwd_bwd");
    for (n, d) in [(16, 16), (64, 32), (256, 64), (1024, 64)] {
        let (x, w) = (random(&[n, d], &mut rng), random(&[d, d], &mut rng));
        group.bench_function(BenchmarkId::from_parameter(format!("{n}x{d}")), |b| {
            b.iter(|| {
                let mut tape = Tape::<f32>::new();
                let (xv, wv) = (tape.param(x.clone()), tape.param(w.clone()));
                let y = tape.matmul(xv, wv).unwrap();
                let loss = tape.sum(y);
                tape.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, matmul);
criterion_main!(benches);
