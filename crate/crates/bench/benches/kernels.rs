use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xcdiff_core::actstore::stream_batches;
use xcdiff_core::coder::{encode, loss_and_grad, Batch, CoderShape, SparsityKind};
use xcdiff_core::geometry::{geometry_report, parallelogram_loss, synthetic_parallelograms, GeometryOptions};
use xcdiff_core::linalg::Matrix;
use xcdiff_core::toymodel::{plant_world, sample_shards, WorldConfig};
use xcdiff_core::CrosscoderParams;

fn random_batch(rows: usize, dims: [usize; 2], seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sides = dims
        .iter()
        .map(|&d| Matrix::from_vec(rows, d, (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    Batch::new(sides).unwrap()
}

fn coder(c: &mut Criterion) {
    let mut group = c.benchmark_group("coder");
    let sparsity = SparsityKind::WeightedL1 { coefficient: 1.0 };
    for &f in &[96usize, 384] {
        let shape = CoderShape::crosscoder(64, 64, f).unwrap();
        let params = CrosscoderParams::init(&shape, 1).unwrap();
        let batch = random_batch(256, [64, 64], 2);
        group.throughput(Throughput::Elements(256));
        group.bench_with_input(BenchmarkId::new("encode", f), &f, |b, _| {
            b.iter(|| encode(black_box(&params), black_box(&batch), &sparsity).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("loss_and_grad", f), &f, |b, _| {
            b.iter(|| loss_and_grad(black_box(&params), black_box(&batch), &sparsity).unwrap())
        });
    }
    group.finish();
}

fn geometry(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..20).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    c.bench_function("parallelogram_loss/20", |b| {
        b.iter(|| parallelogram_loss(black_box(&v[0]), &v[1], &v[2], &v[3]).unwrap())
    });
    let (dataset, table) = synthetic_parallelograms(6, 12, 32, 0.05, 4);
    let options = GeometryOptions::default();
    c.bench_function("geometry_report/6x12", |b| {
        b.iter(|| geometry_report(black_box(&dataset), &table, &options).unwrap())
    });
}

fn streaming(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let world = Arc::new(plant_world(&WorldConfig::default()).unwrap());
    let n_tokens = 20_000;
    let (_, paths) = sample_shards(world, n_tokens, 5, dir.path(), 5_000).unwrap();
    let mut group = c.benchmark_group("actstore");
    group.throughput(Throughput::Elements(n_tokens as u64));
    group.bench_function("stream_epoch", |b| {
        b.iter(|| {
            let mut rows = 0;
            for batch in stream_batches(&paths, 256, 4096, 6).unwrap() {
                rows += batch.unwrap().rows();
            }
            rows
        })
    });
    group.finish();
}

criterion_group!(benches, coder, geometry, streaming);
criterion_main!(benches);
