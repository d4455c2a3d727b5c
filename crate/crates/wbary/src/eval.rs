//! Empirical Wasserstein-2 distance, the barycenter functional estimate
//! `V_hat`, closed-form Gaussian oracles, and summary statistics.
//!
//! `empirical_w2` solves the discrete transport problem *exactly* by optimal
//! assignment, not by regularization: the evaluation metric must not carry
//! entropic bias or it would confound decrement checks.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::assignment::{brute_force_assignment, solve_assignment, CostMatrix};
use crate::error::{Error, Result};
use crate::linalg;
use crate::measures::SampleBatch;

/// Hard cap on the dense cost matrix: n = 20_000 means 3.2 GB of f64.
pub const MAX_ASSIGNMENT_SIZE: usize = 20_000;

/// Exact optimal transport between two equal-size empirical measures.
#[derive(Debug, Clone)]
pub struct TransportPlanDiscrete {
    /// `assignment[i] = j` pairs `X_i` with `Y_j`.
    pub assignment: Vec<usize>,
    /// Average squared distance under the optimal permutation.
    pub cost: f64,
}

fn squared_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_pair(x: &SampleBatch, y: &SampleBatch) -> Result<usize> {
    if x.len() != y.len() {
        return Err(Error::shape(format!(
            "empirical W2 needs equal sizes, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.dimension() != y.dimension() {
        return Err(Error::shape("dimension mismatch"));
    }
    if x.len() > MAX_ASSIGNMENT_SIZE {
        return Err(Error::SizeLimit(format!(
            "n = {} exceeds the dense assignment budget of {MAX_ASSIGNMENT_SIZE}",
            x.len()
        )));
    }
    Ok(x.len())
}

/// Optimal discrete plan on the squared-distance cost.
pub fn optimal_plan(x: &SampleBatch, y: &SampleBatch) -> Result<TransportPlanDiscrete> {
    let n = check_pair(x, y)?;
    let mut costs = vec![0.0f64; n * n];
    costs
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| {
            let xi = x.row(i);
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = squared_dist(xi, y.row(j));
            }
        });
    let matrix = CostMatrix::new(n, &costs)?;
    let (assignment, total) = solve_assignment(&matrix);
    Ok(TransportPlanDiscrete { assignment, cost: total / n as f64 })
}

/// `W2_hat_n(X, Y)`: square root of the optimal average squared distance.
pub fn empirical_w2(x: &SampleBatch, y: &SampleBatch) -> Result<f64> {
    Ok(optimal_plan(x, y)?.cost.max(0.0).sqrt())
}

/// Exact minimum over all n! pairings, n <= 8. Oracle for `empirical_w2`.
pub fn brute_force_w2(x: &SampleBatch, y: &SampleBatch) -> Result<f64> {
    let n = check_pair(x, y)?;
    let mut costs = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            costs[i * n + j] = squared_dist(x.row(i), y.row(j));
        }
    }
    let matrix = CostMatrix::new(n, &costs)?;
    let (_, total) = brute_force_assignment(&matrix)?;
    Ok((total / n as f64).max(0.0).sqrt())
}

/// `V_hat_n(mu) = sum_k w_k W2_hat_n(mu, nu_k)^2`.
pub fn v_hat(mu: &SampleBatch, nu: &[SampleBatch], weights: &[f64]) -> Result<f64> {
    if nu.len() != weights.len() || nu.is_empty() {
        return Err(Error::shape("v_hat needs one weight per input batch"));
    }
    let terms: Vec<f64> = nu
        .par_iter()
        .map(|batch| empirical_w2(mu, batch).map(|w| w * w))
        .collect::<Result<_>>()?;
    Ok(terms.iter().zip(weights).map(|(t, w)| t * w).sum())
}

/// Closed-form W2 between Gaussians (Bures):
/// `sqrt(||m1-m2||^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2))`.
pub fn gaussian_w2(
    m1: &[f64],
    s1: &DMatrix<f64>,
    m2: &[f64],
    s2: &DMatrix<f64>,
) -> Result<f64> {
    if m1.len() != m2.len() || s1.nrows() != m1.len() || s2.nrows() != m2.len() {
        return Err(Error::shape("gaussian_w2 dimension mismatch"));
    }
    linalg::check_symmetric(s1, "gaussian_w2 S1")?;
    linalg::check_symmetric(s2, "gaussian_w2 S2")?;
    let mean_term: f64 = m1.iter().zip(m2).map(|(a, b)| (a - b) * (a - b)).sum();
    let root1 = linalg::sqrtm_psd(s1)?;
    let cross = linalg::sqrtm_psd(&(&root1 * s2 * &root1))?;
    let bures = s1.trace() + s2.trace() - 2.0 * cross.trace();
    Ok((mean_term + bures.max(0.0)).sqrt())
}

/// Barycenter of Gaussians with the stated weights: mean is the weighted
/// average; covariance is the fixed point of
/// `S <- S^(-1/2) (sum_k w_k (S^(1/2) S_k S^(1/2))^(1/2))^2 S^(-1/2)`.
pub fn gaussian_barycenter_oracle(
    means: &[Vec<f64>],
    covariances: &[DMatrix<f64>],
    weights: &[f64],
    tol: f64,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let k = means.len();
    if k == 0 || covariances.len() != k || weights.len() != k {
        return Err(Error::shape("oracle needs matching means/covariances/weights"));
    }
    let d = means[0].len();
    if means.iter().any(|m| m.len() != d) || covariances.iter().any(|c| c.nrows() != d) {
        return Err(Error::shape("oracle dimension mismatch"));
    }
    for c in covariances {
        if linalg::eigen_min(c) <= 0.0 {
            return Err(Error::invalid("oracle requires positive definite covariances"));
        }
    }

    let mean: Vec<f64> = (0..d)
        .map(|i| means.iter().zip(weights).map(|(m, w)| w * m[i]).sum())
        .collect();

    let mut s: DMatrix<f64> = covariances
        .iter()
        .zip(weights)
        .fold(DMatrix::zeros(d, d), |acc, (c, &w)| acc + c * w);
    for iter in 0..500 {
        let root = linalg::sqrtm_psd(&s)?;
        let mut mixed = DMatrix::zeros(d, d);
        for (c, &w) in covariances.iter().zip(weights) {
            mixed += linalg::sqrtm_psd(&(&root * c * &root))? * w;
        }
        let inv_root = linalg::inv_spd(&linalg::sqrtm_psd(&s)?)?;
        let next = &inv_root * (&mixed * &mixed) * &inv_root;
        // symmetrize float drift
        let next = (&next + next.transpose()) * 0.5;
        let change = linalg::frobenius_norm(&(&next - &s));
        s = next;
        if change <= tol {
            return Ok((mean, s));
        }
        let _ = iter;
    }
    Err(Error::NonConvergence { what: "gaussian barycenter fixed point", residual: f64::NAN, iterations: 500 })
}

/// Summary statistics used by the evaluation protocol.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TrimmedStats {
    pub trimmed_mean: f64,
    pub iqr: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Trimmed mean and interquartile range.
///
/// Drops `floor(trim_frac * n)` smallest and largest values, averages the
/// rest; quartiles use linear interpolation on the full sorted sample at
/// positions `0.25 (n-1)` and `0.75 (n-1)` (the "inclusive" convention).
pub fn trimmed_mean_iqr(values: &[f64], trim_frac: f64) -> Result<TrimmedStats> {
    if values.len() < 4 {
        return Err(Error::invalid(format!(
            "trimmed statistics need >= 4 values, got {}",
            values.len()
        )));
    }
    if !(0.0..=0.25).contains(&trim_frac) {
        return Err(Error::invalid("trim fraction must lie in [0, 0.25]"));
    }
    let mut sorted = values.to_vec();
    if sorted.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("trimmed statistics input".into()));
    }
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let cut = (trim_frac * n as f64).floor() as usize;
    let kept = &sorted[cut..n - cut];
    let trimmed_mean = kept.iter().sum::<f64>() / kept.len() as f64;

    let quantile = |p: f64| -> f64 {
        let pos = p * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    };
    let q1 = quantile(0.25);
    let q3 = quantile(0.75);
    Ok(TrimmedStats { trimmed_mean, iqr: q3 - q1, q1, q3 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{sample, Gaussian, Measure};
    use crate::rng::RngStream;
    use ndarray::{arr2, Array2};

    fn batch(points: Array2<f64>) -> SampleBatch {
        SampleBatch::new(points, RngStream::from_seed(0).provenance()).unwrap()
    }

    fn random_batch(n: usize, d: usize, seed: u64) -> SampleBatch {
        let g = Measure::Gaussian(Gaussian::standard(d));
        let mut s = RngStream::from_seed(seed).child(1);
        sample(&g, n, &mut s).unwrap()
    }

    #[test]
    fn identical_batches_have_zero_distance() {
        let x = random_batch(30, 2, 5);
        // same rows, shuffled
        let mut order: Vec<usize> = (0..30).collect();
        order.reverse();
        let mut data = Vec::new();
        for &i in &order {
            data.extend_from_slice(x.row(i));
        }
        let y = batch(Array2::from_shape_vec((30, 2), data).unwrap());
        let w = empirical_w2(&x, &y).unwrap();
        assert!(w < 1e-12, "w = {w}");
    }

    #[test]
    fn single_pair_is_plain_distance() {
        let x = batch(arr2(&[[0.0, 0.0]]));
        let y = batch(arr2(&[[3.0, 4.0]]));
        assert!((empirical_w2(&x, &y).unwrap() - 5.0).abs() < 1e-14);
        assert!((brute_force_w2(&x, &y).unwrap() - 5.0).abs() < 1e-14);
    }

    #[test]
    fn antisymmetric_swap_matches_to_zero() {
        let x = batch(arr2(&[[0.0, 0.0], [1.0, 0.0]]));
        let y = batch(arr2(&[[1.0, 0.0], [0.0, 0.0]]));
        assert!(brute_force_w2(&x, &y).unwrap() < 1e-15);
        assert!(empirical_w2(&x, &y).unwrap() < 1e-15);
    }

    #[test]
    fn matches_brute_force_on_small_instances() {
        for seed in 0..40 {
            let x = random_batch(6, 2, 100 + seed);
            let y = random_batch(6, 2, 200 + seed);
            let fast = empirical_w2(&x, &y).unwrap();
            let exact = brute_force_w2(&x, &y).unwrap();
            assert!((fast - exact).abs() < 1e-12, "{fast} vs {exact}");
        }
    }

    #[test]
    fn metric_properties() {
        let x = random_batch(24, 3, 11);
        let y = random_batch(24, 3, 12);
        let z = random_batch(24, 3, 13);
        let xy = empirical_w2(&x, &y).unwrap();
        let yx = empirical_w2(&y, &x).unwrap();
        assert!((xy - yx).abs() < 1e-12);
        let xz = empirical_w2(&x, &z).unwrap();
        let yz = empirical_w2(&y, &z).unwrap();
        assert!(xz <= xy + yz + 1e-9);
    }

    #[test]
    fn scaling_homogeneity() {
        let x = random_batch(16, 2, 21);
        let y = random_batch(16, 2, 22);
        let c = 3.5;
        let xs = batch(x.points.mapv(|v| c * v));
        let ys = batch(y.points.mapv(|v| c * v));
        let base = empirical_w2(&x, &y).unwrap();
        let scaled = empirical_w2(&xs, &ys).unwrap();
        assert!((scaled - c * base).abs() < 1e-12 * (1.0 + scaled));
    }

    #[test]
    fn size_mismatch_rejected() {
        let x = random_batch(4, 2, 31);
        let y = random_batch(5, 2, 32);
        assert!(empirical_w2(&x, &y).is_err());
    }

    #[test]
    fn v_hat_zero_for_identical_and_hand_sum_for_point_masses() {
        let x = random_batch(10, 2, 41);
        let v = v_hat(&x, &[x.clone(), x.clone()], &[0.5, 0.5]).unwrap();
        assert!(v < 1e-24);

        let mu = batch(arr2(&[[0.0]]));
        let n1 = batch(arr2(&[[-1.0]]));
        let n2 = batch(arr2(&[[1.0]]));
        let v = v_hat(&mu, &[n1, n2], &[0.5, 0.5]).unwrap();
        assert!((v - 1.0).abs() < 1e-14);
    }

    #[test]
    fn v_hat_matches_componentwise_computation() {
        let mu = random_batch(12, 2, 51);
        let nus: Vec<SampleBatch> = (0..3).map(|i| random_batch(12, 2, 60 + i)).collect();
        let w = [0.2, 0.3, 0.5];
        let combined = v_hat(&mu, &nus, &w).unwrap();
        let manual: f64 = nus
            .iter()
            .zip(&w)
            .map(|(nu, wi)| wi * empirical_w2(&mu, nu).unwrap().powi(2))
            .sum();
        assert!((combined - manual).abs() < 1e-12);
    }

    #[test]
    fn gaussian_w2_cases() {
        let eye = DMatrix::<f64>::identity(2, 2);
        // identical
        let w = gaussian_w2(&[0.3, -0.7], &eye, &[0.3, -0.7], &eye).unwrap();
        assert!(w.abs() < 1e-12);
        // pure mean shift in 1-d
        let one = DMatrix::<f64>::identity(1, 1);
        let w = gaussian_w2(&[0.0], &one, &[2.0], &one).unwrap();
        assert!((w - 2.0).abs() < 1e-12);
        // N(0, I) vs N(0, 4I) in 2-d: sqrt(2 (1 + 4 - 4)) = sqrt(2)
        let four = &eye * 4.0;
        let w = gaussian_w2(&[0.0, 0.0], &eye, &[0.0, 0.0], &four).unwrap();
        assert!((w - 2.0f64.sqrt()).abs() < 1e-12);
        assert!((w - 1.41421).abs() < 1e-5);
    }

    #[test]
    fn oracle_fixed_point_properties() {
        let eye = DMatrix::<f64>::identity(2, 2);
        // all equal inputs -> that Gaussian
        let (m, s) = gaussian_barycenter_oracle(
            &[vec![1.0, 2.0], vec![1.0, 2.0]],
            &[eye.clone(), eye.clone()],
            &[0.5, 0.5],
            1e-12,
        )
        .unwrap();
        assert!((m[0] - 1.0).abs() < 1e-12 && (m[1] - 2.0).abs() < 1e-12);
        assert!(linalg::frobenius_norm(&(&s - &eye)) < 1e-10);

        // 1-d scale family: variance ((s1 + s2)/2)^2
        let s1 = DMatrix::from_element(1, 1, 4.0); // sd 2
        let s2 = DMatrix::from_element(1, 1, 9.0); // sd 3
        let (_, s) = gaussian_barycenter_oracle(
            &[vec![0.0], vec![0.0]],
            &[s1, s2],
            &[0.5, 0.5],
            1e-13,
        )
        .unwrap();
        assert!((s[(0, 0)] - 6.25).abs() < 1e-9, "var {}", s[(0, 0)]);

        // commuting covariances: (sum w sqrt(S_k))^2
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 4.0]));
        let b = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![9.0, 16.0]));
        let (_, s) = gaussian_barycenter_oracle(
            &[vec![0.0, 0.0], vec![0.0, 0.0]],
            &[a, b],
            &[0.25, 0.75],
            1e-13,
        )
        .unwrap();
        // diag entries: (0.25*1 + 0.75*3)^2 = 6.25, (0.25*2 + 0.75*4)^2 = 12.25
        assert!((s[(0, 0)] - 6.25).abs() < 1e-8);
        assert!((s[(1, 1)] - 12.25).abs() < 1e-8);
    }

    #[test]
    fn oracle_satisfies_its_own_fixed_point_equation() {
        let c1 = DMatrix::from_row_slice(2, 2, &[2.0, 0.4, 0.4, 1.0]);
        let c2 = DMatrix::from_row_slice(2, 2, &[0.7, -0.2, -0.2, 1.5]);
        let c3 = DMatrix::from_row_slice(2, 2, &[1.2, 0.0, 0.0, 0.8]);
        let w = [0.3, 0.3, 0.4];
        let tol = 1e-12;
        let (_, s) = gaussian_barycenter_oracle(
            &[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            &[c1.clone(), c2.clone(), c3.clone()],
            &w,
            tol,
        )
        .unwrap();
        let root = linalg::sqrtm_psd(&s).unwrap();
        let inv_root = linalg::inv_spd(&root).unwrap();
        let mut mixed = DMatrix::zeros(2, 2);
        for (c, &wi) in [c1, c2, c3].iter().zip(&w) {
            mixed += linalg::sqrtm_psd(&(&root * c * &root)).unwrap() * wi;
        }
        let image = &inv_root * (&mixed * &mixed) * &inv_root;
        assert!(linalg::frobenius_norm(&(&image - &s)) < 100.0 * tol);
    }

    #[test]
    fn trimmed_mean_hand_case() {
        let vals: Vec<f64> = (1..=10).map(|v| v as f64).collect();
        let stats = trimmed_mean_iqr(&vals, 0.10).unwrap();
        // drop 1 and 10, average 2..9
        assert!((stats.trimmed_mean - 5.5).abs() < 1e-14);
        // inclusive quartiles of 1..10: q1 = 3.25, q3 = 7.75
        assert!((stats.q1 - 3.25).abs() < 1e-14);
        assert!((stats.q3 - 7.75).abs() < 1e-14);
        assert!((stats.iqr - 4.5).abs() < 1e-14);
    }

    #[test]
    fn trimmed_mean_constant_and_shuffle() {
        let stats = trimmed_mean_iqr(&[2.0; 7], 0.1).unwrap();
        assert_eq!(stats.trimmed_mean, 2.0);
        assert_eq!(stats.iqr, 0.0);
        assert_eq!(stats.q1, 2.0);
        assert_eq!(stats.q3, 2.0);

        let a = [3.0f64, 1.0, 7.0, 5.0, 2.0, 9.0];
        let mut b = a;
        b.sort_by(f64::total_cmp);
        let sa = trimmed_mean_iqr(&a, 0.12).unwrap();
        let sb = trimmed_mean_iqr(&b, 0.12).unwrap();
        assert_eq!(sa.trimmed_mean, sb.trimmed_mean);
        assert_eq!(sa.iqr, sb.iqr);
    }

    #[test]
    fn trimmed_mean_needs_four_values() {
        assert!(trimmed_mean_iqr(&[1.0, 2.0, 3.0], 0.1).is_err());
    }
}
