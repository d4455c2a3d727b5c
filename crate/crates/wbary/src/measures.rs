//! Samplable probability measures on R^d.
//!
//! All measure objects are immutable after construction and safe to share
//! across threads; sampling mutates only the caller-owned [`RngStream`].

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{RngStream, SeedProvenance};

/// A batch of `n` points in R^d with the provenance of its draws.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub points: Array2<f64>,
    pub provenance: SeedProvenance,
}

impl SampleBatch {
    pub fn new(points: Array2<f64>, provenance: SeedProvenance) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::invalid("empty sample batch"));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample batch".into()));
        }
        Ok(SampleBatch { points, provenance })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dimension(&self) -> usize {
        self.points.ncols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.points.row(i).to_slice().expect("row-major batch")
    }

    /// CSV with header `x0,...,x{d-1}`, one row per point, 17 significant digits.
    pub fn to_csv(&self) -> String {
        let d = self.dimension();
        let mut out = String::new();
        for j in 0..d {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("x{j}"));
        }
        out.push('\n');
        for i in 0..self.len() {
            for j in 0..d {
                if j > 0 {
                    out.push(',');
                }
                out.push_str(&crate::manifest::fmt_f64(self.points[(i, j)]));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, provenance: SeedProvenance) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::invalid("empty CSV"))?;
        let d = header.split(',').count();
        let mut data = Vec::new();
        let mut n = 0;
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|tok| tok.trim().parse::<f64>().map_err(|e| Error::invalid(format!("bad float in CSV: {e}"))))
                .collect::<Result<_>>()?;
            if row.len() != d {
                return Err(Error::shape(format!("CSV row with {} fields, expected {d}", row.len())));
            }
            data.extend(row);
            n += 1;
        }
        let points = Array2::from_shape_vec((n, d), data)
            .map_err(|e| Error::shape(format!("CSV reshape: {e}")))?;
        SampleBatch::new(points, provenance)
    }
}

fn check_point(x: &[f64], d: usize, context: &str) -> Result<()> {
    if x.len() != d {
        return Err(Error::shape(format!("{context}: point has dim {}, expected {d}", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(context.into()));
    }
    Ok(())
}

pub fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub fn norm(x: &[f64]) -> f64 {
    sq_norm(x).sqrt()
}

/// A single Gaussian with strictly positive definite covariance.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: Vec<f64>,
    covariance: DMatrix<f64>,
    chol_lower: DMatrix<f64>,
    log_norm_const: f64,
    precision: DMatrix<f64>,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, covariance_rows: Vec<Vec<f64>>) -> Result<Self> {
        let d = mean.len();
        check_point(&mean, d, "gaussian mean")?;
        let covariance = linalg::to_dmatrix(&covariance_rows)?;
        if covariance.nrows() != d {
            return Err(Error::shape("gaussian covariance dim != mean dim"));
        }
        let chol_lower = linalg::cholesky_covariance(&covariance)?;
        // log det Sigma = 2 sum log diag(L)
        let log_det: f64 = (0..d).map(|i| chol_lower[(i, i)].ln()).sum::<f64>() * 2.0;
        let log_norm_const = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        let precision = linalg::inv_spd(&covariance)?;
        Ok(Gaussian { mean, covariance, chol_lower, log_norm_const, precision })
    }

    pub fn standard(d: usize) -> Self {
        let eye = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Gaussian::new(vec![0.0; d], eye).expect("identity covariance is valid")
    }

    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.dimension();
        debug_assert_eq!(x.len(), d);
        let diff = DVector::from_iterator(d, x.iter().zip(&self.mean).map(|(a, b)| a - b));
        let quad = (&self.precision * &diff).dot(&diff);
        self.log_norm_const - 0.5 * quad
    }

    fn sample_into(&self, out: &mut [f64], stream: &mut RngStream) {
        let d = self.dimension();
        let z: Vec<f64> = (0..d).map(|_| stream.next_standard_normal()).collect();
        for i in 0..d {
            let mut acc = self.mean[i];
            for j in 0..=i {
                acc += self.chol_lower[(i, j)] * z[j];
            }
            out[i] = acc;
        }
    }
}

/// Mixture of Gaussians with strictly positive weights.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    components: Vec<Gaussian>,
    cumulative: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        if components.is_empty() || weights.len() != components.len() {
            return Err(Error::invalid("mixture needs matching, nonempty weights and components"));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::invalid("mixture weights must be strictly positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("mixture weights sum to {total}, expected 1 within 1e-12")));
        }
        let d = components[0].dimension();
        if components.iter().any(|c| c.dimension() != d) {
            return Err(Error::shape("mixture components of unequal dimension"));
        }
        let mut cumulative = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for &w in &weights {
            acc += w;
            cumulative.push(acc);
        }
        *cumulative.last_mut().unwrap() = 1.0;
        Ok(GaussianMixture { weights, components, cumulative })
    }

    pub fn dimension(&self) -> usize {
        self.components[0].dimension()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let logs: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| w.ln() + c.log_density(x))
            .collect();
        log_sum_exp(&logs)
    }

    fn sample_into(&self, out: &mut [f64], stream: &mut RngStream) {
        let u = stream.next_f64();
        let idx = self.cumulative.partition_point(|&c| c <= u).min(self.components.len() - 1);
        self.components[idx].sample_into(out, stream);
    }
}

/// Mixture density w_i N(x; m_i, S_i). Underflows gracefully to 0 in the far tail.
pub fn gm_density(gm: &GaussianMixture, x: &[f64]) -> Result<f64> {
    check_point(x, gm.dimension(), "gm_density")?;
    Ok(gm.log_density(x).exp())
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let sum: f64 = values.iter().map(|v| (v - m).exp()).sum();
    m + sum.ln()
}

/// A samplable measure. `Truncated` restricts a base measure to a closed ball
/// via rejection; its support radius is known exactly.
#[derive(Debug, Clone)]
pub enum Measure {
    Gaussian(Gaussian),
    Mixture(GaussianMixture),
    Truncated {
        base: Box<Measure>,
        center: Vec<f64>,
        radius: f64,
    },
}

impl Measure {
    pub fn truncated(base: Measure, center: Vec<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::invalid("truncation radius must be positive and finite"));
        }
        check_point(&center, base.dimension(), "truncation center")?;
        Ok(Measure::Truncated { base: Box::new(base), center, radius })
    }

    pub fn dimension(&self) -> usize {
        match self {
            Measure::Gaussian(g) => g.dimension(),
            Measure::Mixture(m) => m.dimension(),
            Measure::Truncated { base, .. } => base.dimension(),
        }
    }

    /// Radius of a ball centered at the origin containing the support
    /// (infinite for untruncated Gaussians and mixtures).
    pub fn support_radius(&self) -> f64 {
        match self {
            Measure::Truncated { center, radius, .. } => norm(center) + radius,
            _ => f64::INFINITY,
        }
    }

    fn sample_one(&self, out: &mut [f64], stream: &mut RngStream) -> Result<()> {
        match self {
            Measure::Gaussian(g) => {
                g.sample_into(out, stream);
                Ok(())
            }
            Measure::Mixture(m) => {
                m.sample_into(out, stream);
                Ok(())
            }
            Measure::Truncated { base, center, radius } => {
                // Radii are chosen to keep most of the base mass, so a plain
                // attempt cap is enough here.
                const MAX_ATTEMPTS: usize = 100_000;
                for _ in 0..MAX_ATTEMPTS {
                    base.sample_one(out, stream)?;
                    let dist2: f64 =
                        out.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                    if dist2 <= radius * radius {
                        return Ok(());
                    }
                }
                Err(Error::RejectionBudget {
                    radius: *radius,
                    accepted: 0,
                    requested: 1,
                    attempts: MAX_ATTEMPTS,
                })
            }
        }
    }
}

/// Draw `n` i.i.d. points. Identical `(measure, n, stream state)` reproduce
/// bit-identical output.
pub fn sample(measure: &Measure, n: usize, stream: &mut RngStream) -> Result<SampleBatch> {
    if n == 0 {
        return Err(Error::invalid("sample size must be >= 1"));
    }
    let d = measure.dimension();
    let provenance = stream.provenance();
    let mut data = vec![0.0; n * d];
    for i in 0..n {
        measure.sample_one(&mut data[i * d..(i + 1) * d], stream)?;
    }
    let points = Array2::from_shape_vec((n, d), data).expect("shape by construction");
    SampleBatch::new(points, provenance)
}

/// Origin-or-offset family of nested closed balls with geometrically growing
/// radii. The grid makes radius searches finite.
#[derive(Debug, Clone)]
pub struct BallFamily {
    center: Vec<f64>,
    radii: Vec<f64>,
}

impl BallFamily {
    /// Geometric grid `base * ratio^i`, `i = 0..count`.
    pub fn geometric(center: Vec<f64>, base: f64, ratio: f64, count: usize) -> Result<Self> {
        if !(base > 0.0) || !(ratio > 1.0) || count == 0 {
            return Err(Error::invalid("ball family needs base > 0, ratio > 1, count >= 1"));
        }
        let radii = (0..count).map(|i| base * ratio.powi(i as i32)).collect();
        Ok(BallFamily { center, radii })
    }

    /// Default family used by the iteration: origin-centered, base 1, ratio 1.25.
    pub fn default_for_dimension(d: usize) -> Self {
        // 1.25^200 ~ 5e19 exhausts anything float-realistic.
        BallFamily::geometric(vec![0.0; d], 1.0, 1.25, 200).unwrap()
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn contains(&self, radius_idx: usize, x: &[f64]) -> bool {
        self.distance_to_center(x) <= self.radii[radius_idx]
    }

    pub fn distance_to_center(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.center)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Smallest grid radius such that the fraction of `points` strictly
    /// outside the ball is at most `tail_mass`. Falls back to the largest
    /// grid radius if even that leaves too much outside.
    pub fn smallest_radius_with_tail(&self, points: &Array2<f64>, tail_mass: f64) -> f64 {
        let n = points.nrows() as f64;
        let mut dists: Vec<f64> = (0..points.nrows())
            .map(|i| self.distance_to_center(points.row(i).to_slice().expect("row-major")))
            .collect();
        dists.sort_by(|a, b| a.total_cmp(b));
        for &r in &self.radii {
            // fraction strictly outside the closed ball
            let outside = dists.len() - dists.partition_point(|&dd| dd <= r);
            if (outside as f64) / n <= tail_mass {
                return r;
            }
        }
        *self.radii.last().unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn eye(d: usize) -> Vec<Vec<f64>> {
        (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    #[test]
    fn gaussian_empirical_mean_near_origin() {
        let g = Measure::Gaussian(Gaussian::standard(2));
        let mut stream = RngStream::from_seed(11).child(1);
        let batch = sample(&g, 100_000, &mut stream).unwrap();
        for j in 0..2 {
            let mean = batch.points.column(j).sum() / batch.len() as f64;
            // CLT width: sd/sqrt(n) ~ 0.0032; 0.02 is > 6 sigma
            assert!(mean.abs() < 0.02, "coordinate {j} mean {mean}");
        }
    }

    #[test]
    fn mixture_symmetric_mean_near_zero() {
        let a = Gaussian::new(vec![-3.0], vec![vec![1.0]]).unwrap();
        let b = Gaussian::new(vec![3.0], vec![vec![1.0]]).unwrap();
        let gm = GaussianMixture::new(vec![0.5, 0.5], vec![a, b]).unwrap();
        let mut stream = RngStream::from_seed(5).child(1);
        let batch = sample(&Measure::Mixture(gm), 100_000, &mut stream).unwrap();
        let mean = batch.points.column(0).sum() / batch.len() as f64;
        // component sd ~ sqrt(1 + 9) = 3.16, CLT width 0.01
        assert!(mean.abs() < 0.07, "mean {mean}");
    }

    #[test]
    fn reproducible_across_streams_with_same_path() {
        let g = Measure::Gaussian(Gaussian::standard(3));
        let root = RngStream::from_seed(99);
        let mut s1 = root.child2(4, 7);
        let mut s2 = root.child(4).child(7);
        let b1 = sample(&g, 50, &mut s1).unwrap();
        let b2 = sample(&g, 50, &mut s2).unwrap();
        assert_eq!(b1.points, b2.points);
    }

    #[test]
    fn second_moments_converge() {
        let cov = vec![vec![2.0, 0.5], vec![0.5, 1.0]];
        let g = Gaussian::new(vec![1.0, -1.0], cov.clone()).unwrap();
        let mut stream = RngStream::from_seed(13).child(2);
        let batch = sample(&Measure::Gaussian(g), 100_000, &mut stream).unwrap();
        let n = batch.len() as f64;
        // empirical E[x x^T] vs Sigma + m m^T, Frobenius
        let m = [1.0, -1.0];
        let mut err2 = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                let emp: f64 = (0..batch.len())
                    .map(|i| batch.points[(i, a)] * batch.points[(i, b)])
                    .sum::<f64>()
                    / n;
                let expect = cov[a][b] + m[a] * m[b];
                err2 += (emp - expect) * (emp - expect);
            }
        }
        assert!(err2.sqrt() < 8.0 / n.sqrt(), "second moment error {}", err2.sqrt());
    }

    #[test]
    fn density_standard_normal_at_origin() {
        let g = Gaussian::new(vec![0.0], vec![vec![1.0]]).unwrap();
        let gm = GaussianMixture::new(vec![1.0], vec![g]).unwrap();
        let v = gm_density(&gm, &[0.0]).unwrap();
        assert!((v - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
        assert!((v - 0.39894).abs() < 1e-5);
    }

    #[test]
    fn density_symmetric_components_equal_contribution() {
        let a = Gaussian::new(vec![-2.0, 0.0], eye(2)).unwrap();
        let b = Gaussian::new(vec![2.0, 0.0], eye(2)).unwrap();
        let gm = GaussianMixture::new(vec![0.5, 0.5], vec![a.clone(), b.clone()]).unwrap();
        let mid = [0.0, 0.0];
        let total = gm_density(&gm, &mid).unwrap();
        let single = 0.5 * a.log_density(&mid).exp();
        assert!((total - 2.0 * single).abs() < 1e-15);
    }

    #[test]
    fn density_far_tail_underflows_quietly() {
        let g = Gaussian::new(vec![0.0, 0.0], eye(2)).unwrap();
        let gm = GaussianMixture::new(vec![1.0], vec![g]).unwrap();
        let v = gm_density(&gm, &[50.0, 0.0]).unwrap();
        assert!(v < 1e-100);
        assert!(v >= 0.0);
    }

    #[test]
    fn density_integrates_to_one_2d() {
        let a = Gaussian::new(vec![-1.0, 0.5], vec![vec![0.8, 0.2], vec![0.2, 0.6]]).unwrap();
        let b = Gaussian::new(vec![1.5, -0.5], eye(2)).unwrap();
        let gm = GaussianMixture::new(vec![0.3, 0.7], vec![a, b]).unwrap();
        // trapezoid quadrature over [-10,10]^2
        let steps = 400;
        let h = 20.0 / steps as f64;
        let mut total = 0.0;
        for i in 0..=steps {
            for j in 0..=steps {
                let x = [-10.0 + i as f64 * h, -10.0 + j as f64 * h];
                let w = if (i == 0 || i == steps) && (j == 0 || j == steps) {
                    0.25
                } else if i == 0 || i == steps || j == 0 || j == steps {
                    0.5
                } else {
                    1.0
                };
                total += w * gm_density(&gm, &x).unwrap();
            }
        }
        total *= h * h;
        assert!((total - 1.0).abs() < 1e-6, "integral {total}");
    }

    #[test]
    fn mixture_weights_must_sum_to_one() {
        let g = Gaussian::standard(1);
        assert!(GaussianMixture::new(vec![0.6, 0.5], vec![g.clone(), g.clone()]).is_err());
        assert!(GaussianMixture::new(vec![1.0, 0.0], vec![g.clone(), g]).is_err());
    }

    #[test]
    fn sample_rejects_zero_n() {
        let g = Measure::Gaussian(Gaussian::standard(1));
        let mut s = RngStream::from_seed(0).child(1);
        assert!(sample(&g, 0, &mut s).is_err());
    }

    #[test]
    fn ball_family_membership_exact() {
        let fam = BallFamily::geometric(vec![0.0, 0.0], 1.0, 1.25, 30).unwrap();
        let r = fam.radii()[3];
        assert!(fam.contains(3, &[r, 0.0]));
        assert!(!fam.contains(3, &[r + 1e-12, 0.0]));
    }

    #[test]
    fn ball_family_grid_strictly_increasing() {
        let fam = BallFamily::default_for_dimension(2);
        for w in fam.radii().windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn truncated_gaussian_stays_inside() {
        let base = Measure::Gaussian(Gaussian::standard(2));
        let t = Measure::truncated(base, vec![1.0, 0.0], 2.0).unwrap();
        let mut s = RngStream::from_seed(21).child(1);
        let batch = sample(&t, 5_000, &mut s).unwrap();
        for i in 0..batch.len() {
            let p = batch.row(i);
            let dist2 = (p[0] - 1.0).powi(2) + p[1].powi(2);
            assert!(dist2 <= 4.0 + 1e-12);
        }
        assert!((t.support_radius() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let g = Measure::Gaussian(Gaussian::standard(2));
        let mut s = RngStream::from_seed(77).child(1);
        let batch = sample(&g, 20, &mut s).unwrap();
        let csv = batch.to_csv();
        let back = SampleBatch::from_csv(&csv, batch.provenance.clone()).unwrap();
        assert_eq!(batch.points, back.points);
    }
}
