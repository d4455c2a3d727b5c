use wbary::instance::{Instance, InstanceConfig};
use wbary::manifest::{GaussianRecord, MeasureRecord, MixtureRecord};
use wbary::rng::RngStream;

fn gm_record(means: &[(f64, f64)], spread: f64) -> MeasureRecord {
    let k = means.len();
    MeasureRecord::Mixture(MixtureRecord {
        weights: vec![1.0 / k as f64; k],
        components: means
            .iter()
            .map(|&(a, b)| GaussianRecord {
                mean: vec![a, b],
                covariance: vec![vec![spread, 0.0], vec![0.0, spread]],
            })
            .collect(),
    })
}

fn small_config(truncate: bool, seed: u64) -> InstanceConfig {
    InstanceConfig {
        mu_bar: gm_record(&[(-1.5, 0.0), (1.5, 1.0)], 0.5),
        weights: vec![0.25; 4],
        aux_measures: vec![
            gm_record(&[(2.0, 2.0), (-1.0, 3.0)], 0.6),
            gm_record(&[(-2.5, -1.0), (0.5, -2.0)], 0.7),
        ],
        n_per: 200,
        thetas: vec![0.6, 0.6],
        lambda_lbs: vec![0.3, 0.35],
        alphas: vec![1.0, 1.0],
        phi: None,
        linear: None,
        b_scale: 4.0,
        gamma_mix: 0.3,
        truncate,
        radii: None,
        radius_factor: 1.35,
        seed,
        solver_tol: 1e-7,
        solver_max_iter: 20_000,
    }
}

fn main() {
    let instance = Instance::generate(&small_config(false, 12)).unwrap();
    let mut s = RngStream::from_seed(95).child(1);
    for k in 0..2usize {
        for trial in 0..10 {
            let x0: Vec<f64> = (0..2).map(|_| (s.next_f64() - 0.5) * 6.0).collect();
            let y = instance.map_eval(k, &x0);
            match instance.invert_map(k, &y, 1e-10) {
                Ok(back) => {
                    let err: f64 = back.iter().zip(&x0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                    if err > 1e-8 { println!("k={k} trial={trial} round-trip err {err:.3e}"); }
                }
                Err(e) => println!("k={k} trial={trial} INVERT ERR: {e}"),
            }
        }
    }
    let far = Instance::generate(&small_config(false, 13)).unwrap();
    match far.invert_map(0, &[80.0, -55.0], 1e-8) {
        Ok(x) => {
            let img = far.map_eval(0, &x);
            let res: f64 = img.iter().zip(&[80.0, -55.0]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            println!("far point residual {res:.3e} at x = {x:?}");
        }
        Err(e) => println!("far INVERT ERR: {e}"),
    }
}
