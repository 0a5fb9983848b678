//! Plug-in sandwich covariance for the least-squares coefficients under
//! preferential sampling, and normal confidence intervals.
//!
//! `Var(β̂) ≈ Â⁻¹(B̂ + Ĉ)Â⁻¹` with `Â = Σ w wᵀ`, `B̂ = ω̂Â` and
//! `Ĉ = Σ≠_{d ≤ cap} [Ĉ_Y(d) + Ĉ_XY(d)²] w(s) w(t)ᵀ`, where
//! `Ĉ_Y = ω̂ − V̂_Y`. Both curves are clipped to `[−ω̂, ω̂]` before use.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimators::{BetaEstimate, EmpiricalCurve};
use crate::geometry::{pairs_within, PointPattern};

/// Sandwich pieces and the resulting covariance of β̂, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichEstimate {
    pub a_hat: Vec<Vec<f64>>,
    pub b_hat: Vec<Vec<f64>>,
    pub c_hat: Vec<Vec<f64>>,
    pub sigma_hat: Vec<Vec<f64>>,
    /// Negative eigenvalues were clipped to make `sigma_hat` PSD.
    pub psd_clipped: bool,
    pub pairs_used: usize,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn sandwich(
    pattern: &PointPattern,
    omega_hat: f64,
    vy_curve: &EmpiricalCurve,
    cxy_curve: &EmpiricalCurve,
    lag_cap: f64,
) -> Result<SandwichEstimate> {
    let (n, p) = (pattern.len(), pattern.dim());
    if vy_curve.is_empty() || cxy_curve.is_empty() {
        return Err(Error::InvalidParameter("sandwich needs populated curves".into()));
    }
    let mut a = DMatrix::<f64>::zeros(p, p);
    for i in 0..n {
        let w = pattern.covariate(i);
        for r in 0..p {
            for c in 0..p {
                a[(r, c)] += w[r] * w[c];
            }
        }
    }
    let a_inv = a.clone().try_inverse().ok_or(Error::SingularDesign { rcond: 0.0 })?;
    let b = &a * omega_hat;

    let clip = |v: f64| v.clamp(-omega_hat.abs(), omega_hat.abs());
    let mut c = DMatrix::<f64>::zeros(p, p);
    let pairs = pairs_within(&pattern.locations, lag_cap);
    for pair in &pairs {
        let cy = clip(omega_hat - vy_curve.interpolate(pair.dist));
        let cxy = clip(cxy_curve.interpolate(pair.dist));
        let k = cy + cxy * cxy;
        let (wi, wj) = (pattern.covariate(pair.i as usize), pattern.covariate(pair.j as usize));
        for r in 0..p {
            for s in 0..p {
                // Both orderings of the pair.
                c[(r, s)] += k * (wi[r] * wj[s] + wj[r] * wi[s]);
            }
        }
    }
    let c = (&c + c.transpose()) * 0.5;
    let raw = &a_inv * (&b + &c) * &a_inv;
    let sym = (&raw + raw.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let psd_clipped = eig.eigenvalues.iter().any(|&l| l < 0.0);
    let sigma = if psd_clipped {
        log::warn!("sandwich covariance indefinite; clipping negative eigenvalues");
        let lam = eig.eigenvalues.map(|l| l.max(0.0));
        let m = &eig.eigenvectors * DMatrix::from_diagonal(&lam) * eig.eigenvectors.transpose();
        (&m + m.transpose()) * 0.5
    } else {
        sym
    };
    Ok(SandwichEstimate {
        a_hat: to_rows(&a),
        b_hat: to_rows(&b),
        c_hat: to_rows(&c),
        sigma_hat: to_rows(&sigma),
        psd_clipped,
        pairs_used: pairs.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub index: usize,
    /// Centre of the interval: corrected for the intercept, raw otherwise.
    pub estimate: f64,
    pub estimate_raw: f64,
    pub std_error: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

impl Interval {
    pub fn covers(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

/// `β̂_j ± z_{(1+level)/2} √Σ̂_jj`; the intercept interval is centred at the
/// corrected estimate.
pub fn confidence_intervals(beta: &BetaEstimate, sandwich: &SandwichEstimate, level: f64) -> Result<Vec<Interval>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!("confidence level {level} not in (0, 1)")));
    }
    let z = Normal::standard().inverse_cdf(0.5 * (1.0 + level));
    Ok((0..beta.beta_raw.len())
        .map(|j| {
            let se = sandwich.sigma_hat[j][j].max(0.0).sqrt();
            let centre = beta.beta_corrected[j];
            Interval {
                index: j,
                estimate: centre,
                estimate_raw: beta.beta_raw[j],
                std_error: se,
                lower: centre - z * se,
                upper: centre + z * se,
                level,
            }
        })
        .collect())
}

/// JSON report for one coefficient vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub beta: BetaEstimate,
    pub omega_hat: f64,
    pub bandwidth: f64,
    pub lag_cap: f64,
    pub intervals: Vec<Interval>,
    pub psd_clipped: bool,
    pub pairs_used: usize,
}
