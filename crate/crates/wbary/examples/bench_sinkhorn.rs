use std::time::Instant;
use wbary::entropic_map::theta_schedule;
use wbary::measures::{sample, Gaussian, Measure};
use wbary::rng::RngStream;
use wbary::sinkhorn::{sinkhorn_solve, SinkhornConfig};

fn main() {
    let g1 = Measure::truncated(Measure::Gaussian(Gaussian::standard(2)), vec![0.0, 0.0], 6.0).unwrap();
    let g2 = Measure::truncated(
        Measure::Gaussian(Gaussian::new(vec![1.0, 1.0], vec![vec![2.0, 0.3], vec![0.3, 0.5]]).unwrap()),
        vec![1.0, 1.0],
        6.0,
    )
    .unwrap();
    for &n in &[500usize, 2000, 4000] {
        let mut s = RngStream::from_seed(9).child(1);
        let x = sample(&g1, n, &mut s).unwrap();
        let y = sample(&g2, n, &mut s).unwrap();
        let theta = theta_schedule(n, n, 3.0, 2);
        let t0 = Instant::now();
        let d = sinkhorn_solve(&x, &y, theta, SinkhornConfig { tol: 1e-7, max_iter: 100_000 }).unwrap();
        println!(
            "n={n} theta={theta:.4}: {} sweeps, residual {:.2e}, {:?}",
            d.iterations, d.residual, t0.elapsed()
        );
    }
}
