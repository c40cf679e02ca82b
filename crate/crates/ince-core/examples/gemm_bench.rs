use ince_core::mat::{matmul_nn, Mat};
use std::time::Instant;

fn main() {
    for (m, k, n) in [(18432, 128, 64), (18432, 64, 64), (2304, 128, 64), (1024, 1024, 1024)] {
        let a = Mat::from_vec(m, k, (0..m * k).map(|i| (i as f64 * 0.001).sin()).collect());
        let b = Mat::from_vec(k, n, (0..k * n).map(|i| (i as f64 * 0.002).cos()).collect());
        let _ = matmul_nn(&a, &b);
        let t = Instant::now();
        let reps = 5;
        for _ in 0..reps {
            std::hint::black_box(matmul_nn(&a, &b));
        }
        let dt = t.elapsed().as_secs_f64() / reps as f64;
        let gflops = 2.0 * m as f64 * k as f64 * n as f64 / dt / 1e9;
        println!("{}x{}x{}: {:.3} s -> {:.1} GFLOP/s", m, k, n, dt, gflops);
    }
}
