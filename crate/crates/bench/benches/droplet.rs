use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use droplet_core::crypto::{random_bytes, SigningKey};
use droplet_core::keyregression::{compact_token, ChainParams, CompactChain};
use droplet_core::keytree::{compute_cover, derive_dek, TreeParams};
use droplet_core::perf::ChunkBench;
use droplet_core::types::{EpochInterval, StreamId};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn rng() -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(11)
}

fn key_tree(c: &mut Criterion) {
    let mut rng = rng();
    let sid = StreamId(random_bytes(&mut rng));
    let tree = TreeParams::new(sid, 30, random_bytes(&mut rng)).unwrap();
    c.bench_function("keytree/derive_dek depth 30", |b| b.iter(|| derive_dek(&tree, black_box(123_456_789))));
    let mut g = c.benchmark_group("keytree/compute_cover");
    for span in [10u64, 1000, 100_000] {
        let iv = [EpochInterval::new(17, 17 + span - 1)];
        g.bench_with_input(BenchmarkId::from_parameter(span), &iv, |b, iv| b.iter(|| compute_cover(&tree, iv)));
    }
    g.finish();
}

fn key_regression(c: &mut Criterion) {
    let mut rng = rng();
    let params = ChainParams::new(StreamId(random_bytes(&mut rng)), 9000, random_bytes(&mut rng), random_bytes(&mut rng))
        .unwrap();
    let compact = CompactChain::new(&params, None).unwrap();
    let mut g = c.benchmark_group("keyregression/main token, N=9000");
    g.bench_function("flat worst case", |b| b.iter(|| params.flat_token(black_box(0))));
    g.bench_function("checkpointed worst case", |b| b.iter(|| compact_token(&compact, black_box(compact.spacing() - 1))));
    g.finish();
    c.bench_function("keyregression/checkpoint build N=9000", |b| b.iter(|| CompactChain::new(&params, None)));
}

fn chunk(c: &mut Criterion) {
    let mut bench = ChunkBench::new(5);
    let records = bench.records(42);
    let sealed = bench.seal(42, &records);
    c.bench_function("chunk/seal 8KiB", |b| b.iter(|| bench.seal(black_box(42), &records)));
    c.bench_function("chunk/open 8KiB", |b| b.iter(|| bench.open(black_box(&sealed), 42)));
}

fn signatures(c: &mut Criterion) {
    let key = SigningKey::generate(&mut rng());
    let msg = [7u8; 64];
    let sig = key.sign(&msg);
    let public = key.public_key();
    c.bench_function("ecdsa/sign", |b| b.iter(|| key.sign(black_box(&msg))));
    c.bench_function("ecdsa/verify", |b| b.iter(|| public.verify(black_box(&msg), &sig)));
    c.bench_function("ecdsa/keygen", |b| {
        b.iter_batched(rng, |mut r| SigningKey::generate(&mut r), BatchSize::SmallInput)
    });
}

criterion_group!(benches, key_tree, key_regression, chunk, signatures);
criterion_main!(benches);
