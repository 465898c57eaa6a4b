use std::time::Instant;
use xlab_core::kernel::matmul_acc;

fn bench(m: usize, k: usize, n: usize, reps: usize) {
    let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
    let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.21).cos()).collect();
    let mut c = vec![0.0; m * n];
    let t0 = Instant::now();
    for _ in 0..reps {
        c.fill(0.0);
        matmul_acc(&mut c, &a, &b, m, k, n);
    }
    let dt = t0.elapsed().as_secs_f64();
    let gflops = (2.0 * (m * k * n * reps) as f64) / dt / 1e9;
    println!("{m}x{k}x{n}: {gflops:.2} GF/s  (checksum {:.3})", c.iter().sum::<f64>());
}

fn main() {
    bench(128, 128, 128, 2000);
    bench(128, 128, 512, 800);
    bench(128, 512, 128, 800);
    bench(128, 32, 128, 4000);
    bench(128, 128, 32, 4000);
    bench(128, 128, 256, 1000);
    bench(1, 128, 512, 20000);
}
