use std::time::Instant;
fn main() {
    for &n in &[1000usize, 2000, 5000] {
        let g = wbary::measures::Measure::Gaussian(wbary::measures::Gaussian::standard(2));
        let mut s = wbary::rng::RngStream::from_seed(1).child(1);
        let x = wbary::measures::sample(&g, n, &mut s).unwrap();
        let y = wbary::measures::sample(&g, n, &mut s).unwrap();
        let t0 = Instant::now();
        let w = wbary::eval::empirical_w2(&x, &y).unwrap();
        println!("n={n}: W2 = {w:.4}, {:.2?}", t0.elapsed());
    }
}
