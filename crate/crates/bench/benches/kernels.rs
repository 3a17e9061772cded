use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use dklvae_core::gp::{gp_nll_grad, GpHyperparams};
use dklvae_core::metrics::ssim;
use dklvae_core::tensor::{cholesky, matmul, matmul_nt, Matrix};
use dklvae_core::{Rng, VaeArchitecture, VaeModel};

fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.standard_normal()).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn spd(n: usize, rng: &mut Rng) -> Matrix {
    let a = random(n, n, rng);
    let mut k = matmul_nt(&a, &a).unwrap();
    k.add_diagonal(n as f64);
    k
}

fn bench_matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    let mut rng = Rng::new(1);
    for n in [64, 256, 512] {
        let a = random(n, n, &mut rng);
        let b = random(n, n, &mut rng);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    g.finish();
}

fn bench_cholesky(c: &mut Criterion) {
    let mut g = c.benchmark_group("cholesky");
    let mut rng = Rng::new(2);
    for n in [100, 500, 1000] {
        let k = spd(n, &mut rng);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| cholesky(black_box(&k)).unwrap())
        });
    }
    g.finish();
}

fn bench_gp_grad(c: &mut Criterion) {
    let mut g = c.benchmark_group("gp_nll_grad");
    g.sample_size(10);
    let mut rng = Rng::new(3);
    let h = GpHyperparams {
        lengthscale: 1.0,
        lengthscale_bound: 10.0,
        output_scale: 1.0,
        noise_variance: 0.1,
        jitter: 1e-6,
    };
    for n in [256, 1024] {
        let z = random(n, 2, &mut rng);
        let y: Vec<f64> = (0..n).map(|i| (z.get(i, 0) + z.get(i, 1)).sin()).collect();
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| gp_nll_grad(black_box(&z), black_box(&y), &h).unwrap())
        });
    }
    g.finish();
}

fn bench_elbo(c: &mut Criterion) {
    let mut g = c.benchmark_group("elbo_batch");
    let mut rng = Rng::new(4);
    let cards = VaeArchitecture {
        data_dim: 48 * 48,
        hidden: vec![128, 128],
        latent_dim: 2,
    };
    let model = VaeModel::new(&cards, &mut rng).unwrap();
    let x = random(100, 48 * 48, &mut rng).map(|v| (v > 0.0) as u8 as f64);
    g.bench_function("cards_100", |bench| {
        bench.iter(|| model.elbo_loss(black_box(&x), &mut Rng::new(5)).unwrap())
    });
    g.finish();
}

fn bench_ssim(c: &mut Criterion) {
    let mut rng = Rng::new(6);
    let a: Vec<f64> = (0..48 * 48).map(|_| rng.uniform()).collect();
    let b: Vec<f64> = (0..48 * 48).map(|_| rng.uniform()).collect();
    c.bench_function("ssim_48x48", |bench| {
        bench.iter(|| ssim(black_box(&a), black_box(&b), 48).unwrap())
    });
}

criterion_group!(benches, bench_matmul, bench_cholesky, bench_gp_grad, bench_elbo, bench_ssim);
criterion_main!(benches);
