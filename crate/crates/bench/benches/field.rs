use cacheshuffle::field::Fp;
use cacheshuffle::poly::lagrange_interpolate;
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn field_mul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs: Vec<Fp> = (0..1024).map(|_| Fp::random(&mut rng)).collect();
    c.bench_function("fp/mul_1024", |b| {
        b.iter(|| xs.iter().fold(Fp::ONE, |acc, &x| acc * black_box(x)))
    });
    c.bench_function("fp/inv", |b| b.iter(|| black_box(xs[7]).inv()));
}

fn lagrange(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = c.benchmark_group("lagrange");
    for points in [16usize, 64, 160] {
        // Ciphertexts of a 16-byte block span 7 lanes.
        let pts: Vec<(Fp, Vec<Fp>)> =
            (0..points).map(|i| (Fp::new(i as u64), (0..7).map(|_| Fp::random(&mut rng)).collect())).collect();
        g.bench_with_input(BenchmarkId::from_parameter(points), &pts, |b, pts| {
            b.iter(|| lagrange_interpolate(pts).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, field_mul, lagrange);
criterion_main!(benches);
