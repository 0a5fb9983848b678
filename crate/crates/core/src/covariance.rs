//! Isotropic Matérn covariance, parametric semivariogram and cross-covariance
//! families, with analytic parameter gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{bessel_k, gamma, MaternCorrelation};

/// Matérn covariance parameters: variance, range and smoothness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaternParams {
    pub sigma2: f64,
    pub phi: f64,
    pub nu: f64,
}

impl MaternParams {
    pub fn new(sigma2: f64, phi: f64, nu: f64) -> Result<Self> {
        let p = Self { sigma2, phi, nu };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.phi > 0.0 && self.nu > 0.0)
            || !(self.sigma2.is_finite() && self.phi.is_finite() && self.nu.is_finite())
        {
            return Err(Error::InvalidParameter(format!(
                "Matérn parameters must be positive and finite: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Matérn covariance `σ² 2^{1−ν}/Γ(ν) (√(2ν) r/φ)^ν K_ν(√(2ν) r/φ)`.
pub fn matern_cov(r: f64, p: &MaternParams) -> f64 {
    if r <= 0.0 {
        return p.sigma2;
    }
    let u = (2.0 * p.nu).sqrt() * r / p.phi;
    if u > 700.0 {
        return 0.0;
    }
    let k = bessel_k(p.nu, u).expect("validated Matérn parameters");
    p.sigma2 * 2f64.powf(1.0 - p.nu) / gamma(p.nu) * u.powf(p.nu) * k
}

/// Cross-covariance between the log-intensity and mark fields, in Matérn form
/// with a signed cross-sill.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossCovParams {
    pub sigma_xy2: f64,
    pub phi_xy: f64,
    pub nu_xy: f64,
}

impl CrossCovParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.phi_xy > 0.0 && self.nu_xy > 0.0 && self.sigma_xy2.is_finite()) {
            return Err(Error::InvalidParameter(format!("cross-covariance parameters: {self:?}")));
        }
        Ok(())
    }

    pub fn covariance(&self, r: f64) -> f64 {
        if self.sigma_xy2 == 0.0 {
            return 0.0;
        }
        let unit = MaternParams { sigma2: 1.0, phi: self.phi_xy, nu: self.nu_xy };
        self.sigma_xy2 * matern_cov(r, &unit)
    }
}

/// Parameters θ = (σ_Y², φ_Y, σ_e²) of the semivariogram
/// `ζ(r;θ) = σ_e² + σ_Y² [1 − ρ_ν(r/φ_Y)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemivariogramParams {
    pub sigma_y2: f64,
    pub phi_y: f64,
    pub sigma_e2: f64,
}

impl SemivariogramParams {
    pub fn new(sigma_y2: f64, phi_y: f64, sigma_e2: f64) -> Result<Self> {
        let t = Self { sigma_y2, phi_y, sigma_e2 };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_y2 > 0.0 && self.phi_y > 0.0 && self.sigma_e2 >= 0.0)
            || !(self.sigma_y2.is_finite() && self.phi_y.is_finite() && self.sigma_e2.is_finite())
        {
            return Err(Error::InvalidParameter(format!("semivariogram parameters: {self:?}")));
        }
        Ok(())
    }

    /// The sill ω = σ_Y² + σ_e².
    pub fn sill(&self) -> f64 {
        self.sigma_y2 + self.sigma_e2
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.sigma_y2, self.phi_y, self.sigma_e2]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self { sigma_y2: a[0], phi_y: a[1], sigma_e2: a[2] }
    }
}

/// Semivariogram family with a fixed, known smoothness ν.
#[derive(Debug, Clone)]
pub struct SemivariogramModel {
    corr: MaternCorrelation,
}

impl SemivariogramModel {
    pub fn new(nu: f64) -> Result<Self> {
        Ok(Self { corr: MaternCorrelation::new(nu)? })
    }

    /// The exponential family (ν = 1/2).
    pub fn exponential() -> Self {
        Self::new(0.5).expect("nu = 0.5 is valid")
    }

    pub fn nu(&self) -> f64 {
        self.corr.nu()
    }

    pub fn correlation(&self) -> &MaternCorrelation {
        &self.corr
    }

    #[inline]
    pub fn value(&self, r: f64, theta: &SemivariogramParams) -> f64 {
        theta.sigma_e2 + theta.sigma_y2 * (1.0 - self.corr.at(r, theta.phi_y))
    }

    /// Covariance of the detrended marks, `C_Y(r) = ω − ζ(r)` for r > 0.
    pub fn covariance(&self, r: f64, theta: &SemivariogramParams) -> f64 {
        theta.sigma_y2 * self.corr.at(r, theta.phi_y)
    }

    /// Partials `(∂/∂σ_Y², ∂/∂φ_Y, ∂/∂σ_e²)`.
    pub fn gradient(&self, r: f64, theta: &SemivariogramParams) -> [f64; 3] {
        let u = self.corr.argument_scale() * r / theta.phi_y;
        let m = self.corr.at_argument(u);
        let dm = self.corr.derivative_at_argument(u);
        [1.0 - m, theta.sigma_y2 * dm * u / theta.phi_y, 1.0]
    }
}

/// Exponential semivariogram `σ_e² + σ_Y² [1 − exp(−r/φ_Y)]`.
pub fn semivariogram(r: f64, theta: &SemivariogramParams) -> f64 {
    theta.sigma_e2 + theta.sigma_y2 * (1.0 - (-r / theta.phi_y).exp())
}

/// Analytic gradient of [`semivariogram`] in (σ_Y², φ_Y, σ_e²).
pub fn semivariogram_grad(r: f64, theta: &SemivariogramParams) -> [f64; 3] {
    let e = (-r / theta.phi_y).exp();
    [1.0 - e, -theta.sigma_y2 * e * r / (theta.phi_y * theta.phi_y), 1.0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn theta(a: f64, b: f64, c: f64) -> SemivariogramParams {
        SemivariogramParams::new(a, b, c).unwrap()
    }

    #[test]
    fn matern_at_origin_is_variance() {
        let p = MaternParams::new(2.3, 0.1, 1.7).unwrap();
        assert_eq!(matern_cov(0.0, &p), 2.3);
    }

    #[test]
    fn matern_half_is_exponential() {
        let p = MaternParams::new(1.0, 0.05, 0.5).unwrap();
        assert!((matern_cov(0.05, &p) - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn matern_closed_forms() {
        for &(nu, f) in &[
            (0.5, (|u: f64| (-u).exp()) as fn(f64) -> f64),
            (1.5, |u: f64| (1.0 + u) * (-u).exp()),
            (2.5, |u: f64| (1.0 + u + u * u / 3.0) * (-u).exp()),
        ] {
            let p = MaternParams::new(1.3, 0.2, nu).unwrap();
            let mut t = 1e-4;
            while t <= 20.0 {
                let r = t * p.phi;
                let closed = 1.3 * f((2.0 * nu).sqrt() * t);
                let v = matern_cov(r, &p);
                assert!(((v - closed) / closed).abs() < 1e-12, "nu={nu} r/phi={t}");
                t *= 1.1;
            }
        }
    }

    #[test]
    fn matern_nu_one_against_quadrature() {
        let p = MaternParams::new(1.0, 0.1, 1.0).unwrap();
        let u = 2f64.sqrt();
        let oracle = u * crate::special::bessel_k_quadrature(1.0, u).unwrap();
        assert!(((matern_cov(0.1, &p) - oracle) / oracle).abs() < 1e-12);
    }

    #[test]
    fn matern_scale_invariance() {
        let p = MaternParams::new(1.7, 0.3, 1.2).unwrap();
        for &c in &[0.1, 10.0] {
            let q = MaternParams { phi: p.phi * c, ..p };
            for &r in &[0.01, 0.2, 0.9] {
                let a = matern_cov(r, &p) / p.sigma2;
                let b = matern_cov(c * r, &q) / q.sigma2;
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn matern_is_strictly_decreasing() {
        let p = MaternParams::new(1.0, 0.1, 0.75).unwrap();
        let mut prev = matern_cov(0.0, &p);
        for i in 1..200 {
            let v = matern_cov(i as f64 * 0.005, &p);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn semivariogram_values() {
        let t = theta(1.0, 0.1, 0.1);
        assert!((semivariogram(0.1, &t) - (0.1 + 1.0 - (-1f64).exp())).abs() < 1e-15);
        assert!((semivariogram(0.1, &t) - 0.732121).abs() < 1e-6);
        assert!((semivariogram(1e3, &t) - 1.1).abs() < 1e-15);
        let g = semivariogram_grad(0.1, &t);
        assert!((g[0] - 0.632121).abs() < 1e-6);
        assert_eq!(g[2], 1.0);
    }

    #[test]
    fn semivariogram_equals_sill_minus_covariance() {
        let t = theta(0.8, 0.07, 0.2);
        let p = MaternParams::new(0.8, 0.07, 0.5).unwrap();
        for &r in &[0.01, 0.07, 0.3] {
            assert!((semivariogram(r, &t) - (t.sill() - matern_cov(r, &p))).abs() < 1e-14);
        }
    }

    #[test]
    fn model_matches_exponential_functions() {
        let m = SemivariogramModel::exponential();
        let t = theta(1.2, 0.05, 0.3);
        for &r in &[0.001, 0.05, 0.4] {
            assert!((m.value(r, &t) - semivariogram(r, &t)).abs() < 1e-15);
            let (a, b) = (m.gradient(r, &t), semivariogram_grad(r, &t));
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 1e-13 * b[k].abs().max(1e-300));
            }
        }
    }

    #[test]
    fn phi_gradient_against_finite_difference() {
        let t = theta(1.0, 0.1, 0.1);
        let h = 1e-6;
        let up = semivariogram(0.1, &SemivariogramParams { phi_y: 0.1 + h, ..t });
        let dn = semivariogram(0.1, &SemivariogramParams { phi_y: 0.1 - h, ..t });
        let fd = (up - dn) / (2.0 * h);
        let g = semivariogram_grad(0.1, &t)[1];
        assert!(((g - fd) / fd).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn semivariogram_monotone_and_bounded(
            s in 0.05f64..5.0, phi in 0.01f64..1.0, e in 0.0f64..2.0, nu in 0.3f64..2.5,
            r1 in 1e-4f64..3.0, dr in 1e-4f64..1.0,
        ) {
            let m = SemivariogramModel::new(nu).unwrap();
            let t = theta(s, phi, e);
            let (a, b) = (m.value(r1, &t), m.value(r1 + dr, &t));
            prop_assert!(a >= 0.0);
            prop_assert!(b >= a - 1e-12);
            prop_assert!(b <= t.sill() + 1e-12);
            prop_assert!(m.value(1e-12, &t) - e < 1e-6 * (1.0 + s));
        }

        #[test]
        fn model_gradient_matches_finite_differences(
            s in 0.1f64..3.0, phi in 0.02f64..0.5, e in 0.01f64..1.0, nu in 0.3f64..2.5, r in 0.005f64..1.0,
        ) {
            let m = SemivariogramModel::new(nu).unwrap();
            let t = [s, phi, e];
            let g = m.gradient(r, &SemivariogramParams::from_array(t));
            for k in 0..3 {
                let h = 1e-6 * t[k];
                let mut up = t; up[k] += h;
                let mut dn = t; dn[k] -= h;
                let fd = (m.value(r, &SemivariogramParams::from_array(up))
                    - m.value(r, &SemivariogramParams::from_array(dn))) / (2.0 * h);
                // Central differences lose about eps·|V|/h to cancellation.
                let scale = fd.abs().max(1e-3 * (s + e) / t[k]);
                prop_assert!((g[k] - fd).abs() / scale < 1e-6, "k={} g={} fd={}", k, g[k], fd);
            }
        }
    }
}
