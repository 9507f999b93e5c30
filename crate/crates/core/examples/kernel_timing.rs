//! Wall-clock timings of the dense kernels at MNIST-sized shapes.
//!
//! `cargo run --release -p elm-lda --example kernel_timing -- 784 20000`

use std::time::Instant;

use elm_lda::linalg::{gram, matmul, spd_solve};
use elm_lda::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer")).collect();
    let m = args.first().copied().unwrap_or(784);
    let k = args.get(1).copied().unwrap_or(20_000);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Matrix::from_fn(m, k, |_, _| rng.random::<f64>());
    let w = Matrix::from_fn(m, 784, |_, _| rng.random::<f64>() - 0.5);
    let x = Matrix::from_fn(784, k, |_, _| rng.random::<f64>());

    let t = Instant::now();
    let _ = matmul(&w, &x).unwrap();
    let s = t.elapsed().as_secs_f64();
    println!(
        "matmul {m}x784x{k}: {s:.2}s ({:.1} GFLOP/s)",
        2.0 * (m * 784 * k) as f64 / s / 1e9
    );

    let t = Instant::now();
    let g = gram(&a);
    let s = t.elapsed().as_secs_f64();
    println!(
        "gram {m}x{k}: {s:.2}s ({:.1} GFLOP/s useful)",
        (m * m * k) as f64 / s / 1e9
    );

    let b = Matrix::filled(m, 10, 1.0);
    let t = Instant::now();
    let sol = spd_solve(&g, &b, 0.0).unwrap();
    let s = t.elapsed().as_secs_f64();
    println!(
        "spd_solve {m} (jitter {:e}): {s:.2}s ({:.1} GFLOP/s)",
        sol.jitter,
        (m * m * m) as f64 / 3.0 / s / 1e9
    );
}
