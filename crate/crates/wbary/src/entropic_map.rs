//! Modified entropic OT-map estimator: barycentric projection of Sinkhorn
//! duals plus a radial correction term that makes the estimated potential
//! globally strongly convex.
//!
//! The map is `T(x) = sum_j softmax_j((g_j + <Y_j,x> - ||Y_j||^2/2)/theta) Y_j
//! + gamma(||x||^2/2) x`, the gradient of a potential
//! `phi(x) = theta * lse(...) + integral of gamma`. The correction `gamma`
//! vanishes on the source support ball and tends to 1 far out, so inside the
//! ball the map is the pure barycentric projection.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::linalg;
use crate::measures::{log_sum_exp, norm, sq_norm, SampleBatch};
use crate::sinkhorn::{self, SinkhornConfig};

/// Radial correction: zero up to `r0^2/2`, then `exp(-2/(2z - r0^2))`.
/// Continuous, non-decreasing, with values in [0, 1).
pub fn gamma_correction(z: f64, r0_mu: f64) -> f64 {
    let threshold = 0.5 * r0_mu * r0_mu;
    if z <= threshold {
        0.0
    } else {
        (-2.0 / (2.0 * z - r0_mu * r0_mu)).exp()
    }
}

/// Integral of `gamma_correction` over [0, s] by adaptive Simpson.
///
/// The integrand is smooth and bounded by 1; tolerance is kept far below the
/// 1e-10 the potential needs so finite differences of the potential stay
/// clean.
pub fn gamma_integral(s: f64, r0_mu: f64) -> f64 {
    let lo = 0.5 * r0_mu * r0_mu;
    if s <= lo {
        return 0.0;
    }
    adaptive_simpson(|z| gamma_correction(z, r0_mu), lo, s, 1e-12, 40)
}

fn adaptive_simpson<F: Fn(f64) -> f64 + Copy>(f: F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    fn simpson(a: f64, fa: f64, b: f64, fb: f64, fm: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn rec<F: Fn(f64) -> f64 + Copy>(
        f: F,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        m: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(a, fa, m, fm, flm);
        let right = simpson(m, fm, b, fb, frm);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            rec(f, a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1)
                + rec(f, m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1)
        }
    }
    let m = 0.5 * (a + b);
    let (fa, fb, fm) = (f(a), f(b), f(m));
    let whole = simpson(a, fa, b, fb, fm);
    rec(f, a, fa, b, fb, m, fm, whole, tol, depth)
}

/// Log-domain softmax projection onto a fixed target cloud: the shared core
/// of the estimator and of the instance generator's auxiliary maps.
#[derive(Debug, Clone)]
pub struct BarycentricProjection {
    targets: Array2<f64>,
    g: Vec<f64>,
    /// Precomputed `g_j - ||Y_j||^2 / 2`.
    offsets: Vec<f64>,
    theta: f64,
}

impl BarycentricProjection {
    pub fn new(targets: Array2<f64>, g: Vec<f64>, theta: f64) -> Result<Self> {
        if targets.nrows() == 0 || targets.nrows() != g.len() {
            return Err(Error::shape("targets and g must be nonempty and equal length"));
        }
        if !(theta > 0.0) {
            return Err(Error::invalid("theta must be positive"));
        }
        let offsets = (0..targets.nrows())
            .map(|j| g[j] - 0.5 * sq_norm(targets.row(j).to_slice().expect("row-major")))
            .collect();
        Ok(BarycentricProjection { targets, g, offsets, theta })
    }

    pub fn num_targets(&self) -> usize {
        self.targets.nrows()
    }

    pub fn dimension(&self) -> usize {
        self.targets.ncols()
    }

    pub fn targets(&self) -> &Array2<f64> {
        &self.targets
    }

    pub fn g(&self) -> &[f64] {
        &self.g
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Exponentials more than this far below the max fall under the f64
    /// resolution of the softmax normalizer and are skipped.
    const CUTOFF: f64 = 45.0;

    #[inline]
    fn logit(&self, j: usize, x: &[f64]) -> f64 {
        let flat = self.targets.as_slice().expect("row-major targets");
        let d = self.targets.ncols();
        let yj = &flat[j * d..(j + 1) * d];
        let mut dot = 0.0;
        for (a, b) in yj.iter().zip(x) {
            dot += a * b;
        }
        (self.offsets[j] + dot) / self.theta
    }

    fn max_logit(&self, x: &[f64]) -> f64 {
        let mut max = f64::NEG_INFINITY;
        for j in 0..self.targets.nrows() {
            let l = self.logit(j, x);
            if l > max {
                max = l;
            }
        }
        max
    }

    /// Softmax weights at `x` (sum to 1).
    pub fn weights(&self, x: &[f64]) -> Vec<f64> {
        let n = self.targets.nrows();
        let m = self.max_logit(x);
        let mut w = vec![0.0; n];
        let mut total = 0.0;
        for (j, slot) in w.iter_mut().enumerate() {
            let s = self.logit(j, x) - m;
            if s > -Self::CUTOFF {
                let e = s.exp();
                *slot = e;
                total += e;
            }
        }
        for v in &mut w {
            *v /= total;
        }
        w
    }

    /// Softmax-weighted average of the targets; lies in their convex hull.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dimension();
        let flat = self.targets.as_slice().expect("row-major targets");
        let m = self.max_logit(x);
        let mut acc = vec![0.0; d];
        let mut total = 0.0;
        for j in 0..self.targets.nrows() {
            let s = self.logit(j, x) - m;
            if s > -Self::CUTOFF {
                let e = s.exp();
                total += e;
                let yj = &flat[j * d..(j + 1) * d];
                for (a, b) in acc.iter_mut().zip(yj) {
                    *a += e * b;
                }
            }
        }
        for a in &mut acc {
            *a /= total;
        }
        acc
    }

    /// `theta * log sum_j exp(logit_j)` — the smooth part of the potential.
    pub fn potential(&self, x: &[f64]) -> f64 {
        let m = self.max_logit(x);
        if !m.is_finite() {
            return m;
        }
        let mut total = 0.0;
        for j in 0..self.targets.nrows() {
            let s = self.logit(j, x) - m;
            if s > -Self::CUTOFF {
                total += s.exp();
            }
        }
        self.theta * (m + total.ln())
    }

    pub fn max_target_sq_norm(&self) -> f64 {
        (0..self.targets.nrows())
            .map(|j| sq_norm(self.targets.row(j).to_slice().expect("row-major")))
            .fold(0.0, f64::max)
    }

    pub fn max_target_norm(&self) -> f64 {
        self.max_target_sq_norm().sqrt()
    }

    /// Smallest eigenvalue of the biased sample covariance of the targets.
    pub fn target_covariance_emin(&self) -> f64 {
        let (n, d) = (self.targets.nrows(), self.targets.ncols());
        let mut mean = vec![0.0; d];
        for j in 0..n {
            for i in 0..d {
                mean[i] += self.targets[(j, i)];
            }
        }
        for v in &mut mean {
            *v /= n as f64;
        }
        let mut cov = nalgebra::DMatrix::zeros(d, d);
        for j in 0..n {
            for a in 0..d {
                for b in 0..d {
                    cov[(a, b)] +=
                        (self.targets[(j, a)] - mean[a]) * (self.targets[(j, b)] - mean[b]);
                }
            }
        }
        cov /= n as f64;
        linalg::eigen_min(&cov)
    }
}

/// The gamma-corrected estimator with its certified strong-convexity constant.
#[derive(Debug, Clone)]
pub struct EntropicMap {
    projection: BarycentricProjection,
    r0_mu: f64,
    r0_nu: f64,
    lambda_lb: f64,
    degenerate: bool,
    sinkhorn_iterations: usize,
    sinkhorn_residual: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EntropicMapConfig {
    pub solver: SinkhornConfig,
}

/// Two-step construction: Sinkhorn solve, then barycentric projection with
/// the correction. `r0_mu` / `r0_nu` must certify the sample supports.
pub fn build_entropic_map(
    x: &SampleBatch,
    y: &SampleBatch,
    theta: f64,
    r0_mu: f64,
    r0_nu: f64,
    cfg: EntropicMapConfig,
) -> Result<EntropicMap> {
    let d = x.dimension();
    if y.dimension() != d {
        return Err(Error::shape("source/target dimension mismatch"));
    }
    if y.len() < d + 1 {
        return Err(Error::invalid(format!(
            "entropic map needs n >= d+1 target samples (n = {}, d = {d})",
            y.len()
        )));
    }
    let max_x = (0..x.len()).map(|i| norm(x.row(i))).fold(0.0, f64::max);
    let max_y = (0..y.len()).map(|j| norm(y.row(j))).fold(0.0, f64::max);
    if max_x > r0_mu * (1.0 + 1e-12) {
        return Err(Error::invalid(format!(
            "source support radius violated: max ||X_i|| = {max_x:.6} > r0(mu) = {r0_mu:.6}"
        )));
    }
    if max_y > r0_nu * (1.0 + 1e-12) {
        return Err(Error::invalid(format!(
            "target support radius violated: max ||Y_j|| = {max_y:.6} > r0(nu) = {r0_nu:.6}"
        )));
    }

    let duals = sinkhorn::sinkhorn_solve(x, y, theta, cfg.solver)?;
    if duals.hit_iteration_cap {
        return Err(Error::NonConvergence {
            what: "sinkhorn",
            residual: duals.residual,
            iterations: duals.iterations,
        });
    }

    let projection = BarycentricProjection::new(y.points.clone(), duals.g.clone(), theta)?;
    let mut map = EntropicMap {
        projection,
        r0_mu,
        r0_nu,
        lambda_lb: 0.0,
        degenerate: false,
        sinkhorn_iterations: duals.iterations,
        sinkhorn_residual: duals.residual,
    };
    map.lambda_lb = strong_convexity_bound(&map);
    map.degenerate = !(map.lambda_lb > 0.0);
    Ok(map)
}

/// Certified lower bound on the Hessian of the estimated potential:
/// `min{ (1/theta) exp(-(6 r0(mu) + 4 r0(nu)) r0(nu) / theta) e_min(cov[Y]),
///       exp(-2 / (3 r0(mu)^2)) }`.
/// Returns 0 (degenerate) when the covariance term vanishes, e.g. for
/// collinear targets. Degeneracy does not abort anything: the constant is a
/// certificate consumed by tests and manifests, not by the forward pass.
pub fn strong_convexity_bound(map: &EntropicMap) -> f64 {
    let theta = map.projection.theta;
    let emin = map.projection.target_covariance_emin().max(0.0);
    let cov_term =
        (1.0 / theta) * (-(6.0 * map.r0_mu + 4.0 * map.r0_nu) * map.r0_nu / theta).exp() * emin;
    let radial_term = (-2.0 / (3.0 * map.r0_mu * map.r0_mu)).exp();
    cov_term.min(radial_term)
}

/// Consistency schedule `min{m, n}^(-1/(alpha_bar + d))`.
pub fn theta_schedule(m: usize, n: usize, alpha_bar: f64, d: usize) -> f64 {
    debug_assert!((3.0..=4.0).contains(&alpha_bar));
    let base = m.min(n).max(1) as f64;
    base.powf(-1.0 / (alpha_bar + d as f64))
}

impl EntropicMap {
    pub fn projection(&self) -> &BarycentricProjection {
        &self.projection
    }

    pub fn r0_mu(&self) -> f64 {
        self.r0_mu
    }

    pub fn r0_nu(&self) -> f64 {
        self.r0_nu
    }

    pub fn lambda_lb(&self) -> f64 {
        self.lambda_lb
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn theta(&self) -> f64 {
        self.projection.theta
    }

    pub fn dimension(&self) -> usize {
        self.projection.dimension()
    }

    pub fn sinkhorn_iterations(&self) -> usize {
        self.sinkhorn_iterations
    }

    pub fn sinkhorn_residual(&self) -> f64 {
        self.sinkhorn_residual
    }

    /// `T(x)`: softmax part plus the radial correction.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.projection.eval(x);
        let gamma = gamma_correction(0.5 * sq_norm(x), self.r0_mu);
        if gamma > 0.0 {
            for (o, xi) in out.iter_mut().zip(x) {
                *o += gamma * xi;
            }
        }
        out
    }

    /// `phi(x)`: potential whose gradient is `eval`.
    pub fn potential(&self, x: &[f64]) -> f64 {
        self.projection.potential(x) + gamma_integral(0.5 * sq_norm(x), self.r0_mu)
    }

    pub fn to_record(&self) -> crate::manifest::EntropicMapRecord {
        crate::manifest::EntropicMapRecord {
            targets: (0..self.projection.targets.nrows())
                .map(|j| self.projection.targets.row(j).to_vec())
                .collect(),
            g: self.projection.g.clone(),
            theta: self.projection.theta,
            r0_mu: self.r0_mu,
            r0_nu: self.r0_nu,
            lambda_lb: self.lambda_lb,
            degenerate: self.degenerate,
            sinkhorn_iterations: self.sinkhorn_iterations,
            sinkhorn_residual: self.sinkhorn_residual,
        }
    }

    pub fn from_record(rec: &crate::manifest::EntropicMapRecord) -> Result<Self> {
        let n = rec.targets.len();
        if n == 0 {
            return Err(Error::invalid("entropic map record without targets"));
        }
        let d = rec.targets[0].len();
        let mut data = Vec::with_capacity(n * d);
        for row in &rec.targets {
            if row.len() != d {
                return Err(Error::shape("ragged targets in record"));
            }
            data.extend_from_slice(row);
        }
        let targets = Array2::from_shape_vec((n, d), data).expect("shape checked");
        let projection = BarycentricProjection::new(targets, rec.g.clone(), rec.theta)?;
        Ok(EntropicMap {
            projection,
            r0_mu: rec.r0_mu,
            r0_nu: rec.r0_nu,
            lambda_lb: rec.lambda_lb,
            degenerate: rec.degenerate,
            sinkhorn_iterations: rec.sinkhorn_iterations,
            sinkhorn_residual: rec.sinkhorn_residual,
        })
    }
}
