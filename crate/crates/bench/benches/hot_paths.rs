//! Benchmarks for the three hot paths: the convolution/GEMM kernel, the
//! InfoNCE objective against a full queue, and k-center greedy selection.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mobyal_core::contrastive::{info_nce, KeyQueue, LossWeights};
use mobyal_core::select::{coreset_select, FeatureMatrix};
use mobyal_core::tape::Tape;
use mobyal_core::tensor::Tensor;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0f32)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        data.extend(v.iter().map(|x| x / norm));
    }
    Tensor::new(vec![rows, dim], data).unwrap()
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, vec![64, 32, 16, 16]);
    let w = rand_tensor(&mut rng, vec![64, 32, 3, 3]);
    c.bench_function("conv2d_forward_backward_64x32x16x16", |b| {
        b.iter(|| {
            let mut tape = Tape::<f32>::new();
            let xv = tape.leaf(&x, true);
            let wv = tape.leaf(&w, true);
            let y = tape.conv2d(xv, wv, 1).unwrap();
            let loss = tape.sum_all(y);
            tape.backward(loss).unwrap();
            black_box(tape.grad(wv).unwrap()[0])
        })
    });
}

fn bench_infonce(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = unit_rows(&mut rng, 64, 64);
    let k = unit_rows(&mut rng, 64, 64);
    let mut queue = KeyQueue::<f32>::new(64, 256);
    queue.enqueue(&unit_rows(&mut rng, 256, 64)).unwrap();
    let weights = LossWeights::default();
    c.bench_function("info_nce_batch64_queue256", |b| {
        b.iter(|| {
            let mut tape = Tape::<f32>::new();
            let qv = tape.leaf(&q, true);
            let loss = info_nce(&mut tape, qv, &k, &queue, &weights).unwrap();
            tape.backward(loss).unwrap();
            black_box(tape.scalar_value(loss))
        })
    });
}

fn bench_kcenter(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 2000;
    let dim = 64;
    let feats: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let pool =
        FeatureMatrix::new((0..n).collect(), Tensor::new(vec![n, dim], feats).unwrap()).unwrap();
    let lab_feats: Vec<f64> = (0..200 * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labelled = FeatureMatrix::new(
        (n..n + 200).collect(),
        Tensor::new(vec![200, dim], lab_feats).unwrap(),
    )
    .unwrap();
    c.bench_function("kcenter_greedy_2000x64_b100", |b| {
        b.iter(|| black_box(coreset_select(&pool, &labelled, 100).unwrap().chosen.len()))
    });
}

criterion_group!(benches, bench_conv, bench_infonce, bench_kcenter);
criterion_main!(benches);
