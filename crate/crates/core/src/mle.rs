//! Gaussian maximum likelihood that ignores the sampling mechanism:
//! `Z ~ N(Wβ, σ_Y² R_ν(φ) + σ_e² I)` at the observed locations.
//!
//! β is profiled out by generalised least squares and the total variance
//! `ω = σ_Y² + σ_e²` analytically, leaving a 2-D search over the nugget
//! share `τ = σ_e²/ω` (logit scale) and `log φ`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::covariance::SemivariogramParams;
use crate::error::{Error, Result};
use crate::geometry::{median_pair_distance, PointPattern};
use crate::optimize::NelderMead;
use crate::special::MaternCorrelation;

pub const MAX_POINTS: usize = 5000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleResult {
    pub beta_hat: Vec<f64>,
    /// GLS covariance `ω̂ (Wᵀ V⁻¹ W)⁻¹` at the optimum, row-major.
    pub beta_cov: Vec<Vec<f64>>,
    pub theta: SemivariogramParams,
    pub nu: f64,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Profile evaluation at fixed `(τ, φ)`.
#[derive(Debug, Clone)]
pub struct Profile {
    pub beta: Vec<f64>,
    pub beta_cov: Vec<Vec<f64>>,
    pub omega: f64,
    pub loglik: f64,
}

/// Precomputed distances and design for repeated likelihood evaluations.
pub struct GaussianLikelihood<'a> {
    pattern: &'a PointPattern,
    corr: MaternCorrelation,
    dist: Vec<f64>,
}

fn factor_with_jitter(mut m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = m.nrows();
    let mut added = 0.0;
    let mut jitter = 0.0;
    loop {
        if let Some(c) = m.clone().cholesky() {
            return Ok(c);
        }
        jitter = if jitter == 0.0 { 1e-12 } else { jitter * 10.0 };
        if jitter > 1e-6 * 1.0001 {
            return Err(Error::FactorizationFailure { jitter: 1e-6 });
        }
        for i in 0..n {
            m[(i, i)] += jitter - added;
        }
        added = jitter;
    }
}

impl<'a> GaussianLikelihood<'a> {
    pub fn new(pattern: &'a PointPattern, nu: f64) -> Result<Self> {
        let n = pattern.len();
        if n > MAX_POINTS {
            return Err(Error::InvalidParameter(format!("{n} points exceed the dense likelihood limit {MAX_POINTS}")));
        }
        if n <= pattern.dim() {
            return Err(Error::SingularDesign { rcond: 0.0 });
        }
        let mut dist = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (pattern.locations[i], pattern.locations[j]);
                let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                dist[i * n + j] = d;
                dist[j * n + i] = d;
            }
        }
        Ok(Self { pattern, corr: MaternCorrelation::new(nu)?, dist })
    }

    /// Profile likelihood at nugget share `tau ∈ [0, 1]` and range `phi`.
    pub fn profile(&self, tau: f64, phi: f64) -> Result<Profile> {
        let (n, p) = (self.pattern.len(), self.pattern.dim());
        let scale = self.corr.argument_scale() / phi;
        let mut v = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            v[(i, i)] = 1.0;
            for j in 0..i {
                let c = (1.0 - tau) * self.corr.at_argument(scale * self.dist[i * n + j]);
                v[(i, j)] = c;
                v[(j, i)] = c;
            }
        }
        let chol = factor_with_jitter(v)?;
        let w = DMatrix::from_fn(n, p, |i, k| self.pattern.covariate(i)[k]);
        let z = DVector::from_column_slice(&self.pattern.marks);
        let lw = chol.l().solve_lower_triangular(&w).ok_or(Error::FactorizationFailure { jitter: 0.0 })?;
        let lz = chol.l().solve_lower_triangular(&z).ok_or(Error::FactorizationFailure { jitter: 0.0 })?;
        let gram = lw.transpose() * &lw;
        let gram_chol = gram.cholesky().ok_or(Error::SingularDesign { rcond: 0.0 })?;
        let beta = gram_chol.solve(&(lw.transpose() * &lz));
        let resid = &lz - &lw * &beta;
        let omega = resid.norm_squared() / n as f64;
        let cov = gram_chol.inverse() * omega;
        let beta_cov = (0..p).map(|i| cov.row(i).iter().copied().collect()).collect();
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let nf = n as f64;
        let loglik = -0.5 * nf * ((2.0 * std::f64::consts::PI).ln() + omega.ln() + 1.0) - 0.5 * logdet;
        Ok(Profile { beta: beta.iter().copied().collect(), beta_cov, omega, loglik })
    }
}

fn logit(t: f64) -> f64 {
    (t / (1.0 - t)).ln()
}

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Maximises the Gaussian likelihood with fixed smoothness `nu`. Starts:
/// `init` if given, then `(τ, φ) = (0.1, 0.1·median pair distance)` and
/// `(0.5, 0.02·window side)`.
pub fn mle_fit(pattern: &PointPattern, nu: f64, init: Option<SemivariogramParams>) -> Result<MleResult> {
    let lik = GaussianLikelihood::new(pattern, nu)?;
    let side = pattern.window.min_side();
    let mut starts = Vec::new();
    if let Some(t) = init {
        let tau = (t.sigma_e2 / t.sill()).clamp(1e-4, 1.0 - 1e-4);
        starts.push([logit(tau), t.phi_y.ln()]);
    }
    starts.push([logit(0.1), (0.1 * median_pair_distance(&pattern.locations)).ln()]);
    starts.push([logit(0.5), (0.02 * side).ln()]);
    while starts.len() < 3 {
        starts.push([logit(0.25), (0.05 * side).ln()]);
    }
    let lower = [logit(1e-8), (1e-4 * side).ln()];
    let upper = [logit(1.0 - 1e-8), (10.0 * side).ln()];
    let nm = NelderMead { step: 0.5, ..Default::default() };
    let mut best: Option<(crate::optimize::Minimum, usize)> = None;
    for s in &starts {
        let m = nm.minimize(
            |x| lik.profile(expit(x[0]), x[1].exp()).map_or(f64::INFINITY, |p| -p.loglik),
            s,
            &lower,
            &upper,
        );
        if best.as_ref().is_none_or(|(b, _)| m.value < b.value) {
            best = Some((m.clone(), m.iterations));
        }
    }
    let (m, iterations) = best.expect("at least one start");
    if !m.value.is_finite() {
        return Err(Error::FactorizationFailure { jitter: 1e-6 });
    }
    let (tau, phi) = (expit(m.x[0]), m.x[1].exp());
    let prof = lik.profile(tau, phi)?;
    Ok(MleResult {
        beta_hat: prof.beta,
        beta_cov: prof.beta_cov,
        theta: SemivariogramParams { sigma_y2: (1.0 - tau) * prof.omega, phi_y: phi, sigma_e2: tau * prof.omega },
        nu,
        loglik: prof.loglik,
        iterations,
        converged: m.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::ols_beta;
    use crate::geometry::Window;
    use crate::testutil::random_pattern;

    #[test]
    fn pure_nugget_gls_is_ols() {
        let w = Window::square(1.0);
        let pat = PointPattern::new(w, vec![[0.1, 0.1], [0.8, 0.4]], vec![1.0, 3.0], vec![vec![1.0]; 2]).unwrap();
        let lik = GaussianLikelihood::new(&pat, 0.5).unwrap();
        let p = lik.profile(1.0, 0.1).unwrap();
        assert!((p.beta[0] - 2.0).abs() < 1e-14);
        assert!((p.omega - 1.0).abs() < 1e-14);
    }

    #[test]
    fn profile_matches_direct_likelihood() {
        let pat = random_pattern(15, 3);
        let lik = GaussianLikelihood::new(&pat, 0.5).unwrap();
        let (tau, phi) = (0.3, 0.2);
        let prof = lik.profile(tau, phi).unwrap();
        // Direct Gaussian log-density at (β̂, ω̂).
        let n = pat.len();
        let omega = prof.omega;
        let cov = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                omega
            } else {
                let (a, b) = (pat.locations[i], pat.locations[j]);
                let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                omega * (1.0 - tau) * (-d / phi).exp()
            }
        });
        let r = DVector::from_fn(n, |i, _| {
            pat.marks[i] - pat.covariate(i).iter().zip(&prof.beta).map(|(w, b)| w * b).sum::<f64>()
        });
        let chol = cov.cholesky().unwrap();
        let quad = r.dot(&chol.solve(&r));
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let direct = -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad);
        assert!((direct - prof.loglik).abs() < 1e-10);
    }

    #[test]
    fn fit_improves_on_starts_and_reproduces_gls() {
        let pat = random_pattern(60, 9);
        let res = mle_fit(&pat, 0.5, None).unwrap();
        let lik = GaussianLikelihood::new(&pat, 0.5).unwrap();
        for (tau, phi) in [(0.1, 0.1 * median_pair_distance(&pat.locations)), (0.5, 0.02)] {
            assert!(res.loglik >= lik.profile(tau, phi).unwrap().loglik);
        }
        let t = res.theta;
        let again = lik.profile(t.sigma_e2 / t.sill(), t.phi_y).unwrap();
        for (a, b) in again.beta.iter().zip(&res.beta_hat) {
            assert!((a - b).abs() < 1e-10);
        }
        // Independent uniform noise: the nugget dominates.
        let ols = ols_beta(&pat).unwrap();
        assert!((res.beta_hat[1] - ols[1]).abs() < 0.5);
    }
}
