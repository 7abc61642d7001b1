use ifc_core::Graph;
use std::time::Instant;

fn main() {
    for &(n, k, m, reps) in &[(152usize, 64usize, 64usize, 2000usize), (152, 64, 256, 800), (240, 240, 64, 500), (512, 512, 512, 20)] {
        let g = Graph::eval();
        let a = g.tensor(&[n, k], (0..n*k).map(|i| (i as f64).sin()).collect()).unwrap();
        let b = g.tensor(&[k, m], (0..k*m).map(|i| (i as f64).cos()).collect()).unwrap();
        let t0 = Instant::now();
        let mut acc = 0.0;
        for _ in 0..reps {
            let c = a.matmul(&b).unwrap();
            acc += c.with_data(|d| d[0]);
        }
        let dt = t0.elapsed().as_secs_f64();
        let flops = 2.0 * (n*k*m*reps) as f64;
        println!("{}x{}x{} -> {:.2} GFLOP/s (acc {:.3})", n, k, m, flops/dt/1e9, acc);
    }
}
