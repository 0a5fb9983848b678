//! Weighted minimum-contrast and composite-likelihood fitting of a parametric
//! semivariogram `ζ(r; θ)`, θ = (σ_Y², φ_Y, σ_e²), from pairwise residual
//! differences.
//!
//! Objectives sum over ordered pairs `s ≠ t` with `‖s − t‖ ≤ R`; each
//! unordered pair is stored once and counted twice.
//!
//! Score normalisation: [`PairContrast::score_mc`] returns
//! `Σ≠ w ζ′ {D² − 2ζ}`, which is `−¼ ∇Q_MC`, and
//! [`PairContrast::score_cl`] returns `Σ≠ w ζ′/ζ² {D² − 2ζ}`, which is
//! `−2 ∇Q_CL`. Both vanish at the respective minimisers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::covariance::{SemivariogramModel, SemivariogramParams};
use crate::error::{Error, Result};
use crate::estimators::sill_hat;
use crate::geometry::{median_pair_distance, pairs_within, PointPattern, Window};
use crate::optimize::NelderMead;

/// Truncation radius and window defining the pair weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairWeightSpec {
    pub r: f64,
    pub window: Window,
}

impl PairWeightSpec {
    pub fn new(r: f64, window: Window) -> Result<Self> {
        window.validate()?;
        if !(r > 0.0) || r >= window.min_side() {
            return Err(Error::InvalidParameter(format!(
                "radius R = {r} must be positive and below the shortest window side {}",
                window.min_side()
            )));
        }
        Ok(Self { r, window })
    }
}

/// `w(s,t) = 1(d ≤ R) / (2π d |S ∩ (S − s + t)|)`.
pub fn pair_weight(s: [f64; 2], t: [f64; 2], spec: &PairWeightSpec) -> f64 {
    let (dx, dy) = (s[0] - t[0], s[1] - t[1]);
    let d = (dx * dx + dy * dy).sqrt();
    weight_at(d, dx, dy, spec)
}

#[inline]
fn weight_at(d: f64, dx: f64, dy: f64, spec: &PairWeightSpec) -> f64 {
    if d > spec.r || d <= 0.0 {
        return 0.0;
    }
    let overlap = spec.window.translation_overlap(dx, dy);
    if overlap <= 0.0 {
        return 0.0;
    }
    1.0 / (2.0 * std::f64::consts::PI * d * overlap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "MC")]
    Mc,
    #[serde(rename = "CL")]
    Cl,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Mc => "MC",
            Method::Cl => "CL",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "MC" => Ok(Method::Mc),
            "CL" => Ok(Method::Cl),
            _ => Err(Error::Config(format!("unknown method '{s}' (expected MC or CL)"))),
        }
    }
}

/// Pair distances, weights and squared residual differences for one fit.
#[derive(Debug, Clone)]
pub struct PairContrast {
    model: SemivariogramModel,
    dist: Vec<f64>,
    weight: Vec<f64>,
    sqdiff: Vec<f64>,
}

impl PairContrast {
    /// Residuals against `beta_raw`; unordered pairs with `d ≤ R`.
    pub fn new(pattern: &PointPattern, beta_raw: &[f64], spec: &PairWeightSpec, model: SemivariogramModel) -> Self {
        let res = pattern.residuals(beta_raw);
        let pairs = pairs_within(&pattern.locations, spec.r);
        let mut out = Self::from_parts(model, Vec::new(), Vec::new(), Vec::new());
        for p in pairs {
            let (a, b) = (pattern.locations[p.i as usize], pattern.locations[p.j as usize]);
            let w = weight_at(p.dist, a[0] - b[0], a[1] - b[1], spec);
            if w > 0.0 {
                out.dist.push(p.dist);
                out.weight.push(w);
                out.sqdiff.push((res[p.i as usize] - res[p.j as usize]).powi(2));
            }
        }
        out
    }

    pub fn from_parts(model: SemivariogramModel, dist: Vec<f64>, weight: Vec<f64>, sqdiff: Vec<f64>) -> Self {
        assert!(dist.len() == weight.len() && dist.len() == sqdiff.len());
        Self { model, dist, weight, sqdiff }
    }

    pub fn len(&self) -> usize {
        self.dist.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dist.is_empty()
    }

    pub fn model(&self) -> &SemivariogramModel {
        &self.model
    }

    pub fn q_mc(&self, theta: &SemivariogramParams) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.len() {
            let z = self.model.value(self.dist[k], theta);
            acc += self.weight[k] * (self.sqdiff[k] - 2.0 * z).powi(2);
        }
        2.0 * acc
    }

    pub fn q_cl(&self, theta: &SemivariogramParams) -> Result<f64> {
        let mut acc = 0.0;
        for k in 0..self.len() {
            let z = self.model.value(self.dist[k], theta);
            if !(z > 0.0) {
                return Err(Error::InvalidTheta { distance: self.dist[k], value: z });
            }
            acc += self.weight[k] * (self.sqdiff[k] / (2.0 * z) + z.ln());
        }
        Ok(2.0 * acc)
    }

    pub fn objective(&self, method: Method, theta: &SemivariogramParams) -> f64 {
        match method {
            Method::Mc => self.q_mc(theta),
            Method::Cl => self.q_cl(theta).unwrap_or(f64::INFINITY),
        }
    }

    /// `Σ≠ w ζ′ {D² − 2ζ}` (equals `−¼ ∇Q_MC`).
    pub fn score_mc(&self, theta: &SemivariogramParams) -> [f64; 3] {
        let mut g = [0.0; 3];
        for k in 0..self.len() {
            let z = self.model.value(self.dist[k], theta);
            let dz = self.model.gradient(self.dist[k], theta);
            let f = 2.0 * self.weight[k] * (self.sqdiff[k] - 2.0 * z);
            for a in 0..3 {
                g[a] += f * dz[a];
            }
        }
        g
    }

    /// `Σ≠ w ζ′/ζ² {D² − 2ζ}` (equals `−2 ∇Q_CL`).
    pub fn score_cl(&self, theta: &SemivariogramParams) -> Result<[f64; 3]> {
        let mut g = [0.0; 3];
        for k in 0..self.len() {
            let z = self.model.value(self.dist[k], theta);
            if !(z > 0.0) {
                return Err(Error::InvalidTheta { distance: self.dist[k], value: z });
            }
            let dz = self.model.gradient(self.dist[k], theta);
            let f = 2.0 * self.weight[k] * (self.sqdiff[k] - 2.0 * z) / (z * z);
            for a in 0..3 {
                g[a] += f * dz[a];
            }
        }
        Ok(g)
    }

    /// Kernel semivariogram from the stored pairs (Epanechnikov, bandwidth h).
    fn smoothed_semivariogram(&self, r: f64, h: f64) -> Option<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for k in 0..self.len() {
            let u = (self.dist[k] - r) / h;
            if u.abs() < 1.0 {
                let kw = 1.0 - u * u;
                num += kw * 0.5 * self.sqdiff[k];
                den += kw;
            }
        }
        (den > 0.0).then(|| num / den)
    }
}

pub fn q_mc(
    theta: &SemivariogramParams,
    pattern: &PointPattern,
    beta_raw: &[f64],
    spec: &PairWeightSpec,
    model: &SemivariogramModel,
) -> f64 {
    PairContrast::new(pattern, beta_raw, spec, model.clone()).q_mc(theta)
}

pub fn q_cl(
    theta: &SemivariogramParams,
    pattern: &PointPattern,
    beta_raw: &[f64],
    spec: &PairWeightSpec,
    model: &SemivariogramModel,
) -> Result<f64> {
    PairContrast::new(pattern, beta_raw, spec, model.clone()).q_cl(theta)
}

pub fn score_mc(
    theta: &SemivariogramParams,
    pattern: &PointPattern,
    beta_raw: &[f64],
    spec: &PairWeightSpec,
    model: &SemivariogramModel,
) -> [f64; 3] {
    PairContrast::new(pattern, beta_raw, spec, model.clone()).score_mc(theta)
}

pub fn score_cl(
    theta: &SemivariogramParams,
    pattern: &PointPattern,
    beta_raw: &[f64],
    spec: &PairWeightSpec,
    model: &SemivariogramModel,
) -> Result<[f64; 3]> {
    PairContrast::new(pattern, beta_raw, spec, model.clone()).score_cl(theta)
}

/// Result of a parametric fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub method: Method,
    pub theta: SemivariogramParams,
    pub nu: f64,
    pub r: f64,
    pub objective: f64,
    /// Simplex iterations of the winning start.
    pub iterations: usize,
    pub converged: bool,
    pub n_pairs_used: usize,
    pub start_index: usize,
}

pub const MIN_PAIRS: usize = 10;
const NUGGET_FLOOR: f64 = 1e-10;

/// Box in log space: `[lower, upper]` for `(log σ_Y², log φ, log σ_e²)`.
fn log_box(omega: f64, r: f64) -> ([f64; 3], [f64; 3]) {
    (
        [(1e-6 * omega).ln(), (1e-4 * r).ln(), NUGGET_FLOOR.ln()],
        [(1e3 * omega).ln(), (1e3 * r).ln(), (1e3 * omega).ln()],
    )
}

fn to_log(t: &SemivariogramParams) -> [f64; 3] {
    [t.sigma_y2.ln(), t.phi_y.ln(), t.sigma_e2.max(NUGGET_FLOOR).ln()]
}

fn from_log(x: &[f64]) -> SemivariogramParams {
    SemivariogramParams { sigma_y2: x[0].exp(), phi_y: x[1].exp(), sigma_e2: x[2].exp() }
}

/// Start matched to the smoothed semivariogram at `R/4` and `R/2`: nugget by
/// linear extrapolation to zero, range by solving the correlation at `R/4`.
fn curve_matched_start(contrast: &PairContrast, omega: f64, r: f64) -> SemivariogramParams {
    let fallback = SemivariogramParams { sigma_y2: 0.75 * omega, phi_y: r / 4.0, sigma_e2: 0.25 * omega };
    let (r1, r2, h) = (0.25 * r, 0.5 * r, 0.125 * r);
    let (Some(v1), Some(v2)) = (contrast.smoothed_semivariogram(r1, h), contrast.smoothed_semivariogram(r2, h))
    else {
        return fallback;
    };
    let slope = (v2 - v1) / (r2 - r1);
    let nugget = (v1 - slope * r1).clamp(0.01 * omega, 0.9 * omega);
    let partial = (omega - nugget).max(0.01 * omega);
    let target = (1.0 - (v1 - nugget) / partial).clamp(0.01, 0.99);
    let corr = contrast.model().correlation();
    // corr.at(r1, φ) increases with φ; bisect on log φ.
    let (mut lo, mut hi) = ((1e-4 * r).ln(), (1e3 * r).ln());
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if corr.at(r1, mid.exp()) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    SemivariogramParams { sigma_y2: partial, phi_y: (0.5 * (lo + hi)).exp(), sigma_e2: nugget }
}

/// Multi-start simplex minimisation of a prepared contrast. The lowest
/// objective wins; exact ties go to the earlier start.
pub fn minimize_contrast(
    contrast: &PairContrast,
    method: Method,
    starts: &[SemivariogramParams],
    omega: f64,
    r: f64,
    optimizer: &NelderMead,
) -> Result<FitResult> {
    if contrast.len() < MIN_PAIRS {
        return Err(Error::TooFewPairs { found: contrast.len(), needed: MIN_PAIRS });
    }
    if !(omega > 0.0) || !omega.is_finite() {
        return Err(Error::Domain(format!("sill estimate {omega} is not positive")));
    }
    let (lower, upper) = log_box(omega, r);
    let mut best: Option<FitResult> = None;
    for (idx, start) in starts.iter().enumerate() {
        let m = optimizer.minimize(|x| contrast.objective(method, &from_log(x)), &to_log(start), &lower, &upper);
        let candidate = FitResult {
            method,
            theta: from_log(&m.x),
            nu: contrast.model().nu(),
            r,
            objective: m.value,
            iterations: m.iterations,
            converged: m.converged,
            n_pairs_used: contrast.len(),
            start_index: idx,
        };
        if best.as_ref().is_none_or(|b| candidate.objective < b.objective) {
            best = Some(candidate);
        }
    }
    let best = best.ok_or_else(|| Error::InvalidParameter("no starting values".into()))?;
    if !best.objective.is_finite() {
        return Err(Error::Domain("objective is not finite at any start".into()));
    }
    if !best.converged {
        log::warn!("{} fit hit the iteration cap", best.method);
    }
    Ok(best)
}

/// Fits θ by minimising `Q_MC` or `Q_CL` from three deterministic starts:
/// `(ω̂/2, median pair distance, ω̂/2)`, the supplied pilot (or
/// `(0.75ω̂, R/8, 0.25ω̂)`), and a start matched to the smoothed semivariogram.
pub fn fit(
    pattern: &PointPattern,
    beta_raw: &[f64],
    spec: &PairWeightSpec,
    model: &SemivariogramModel,
    method: Method,
    init: Option<SemivariogramParams>,
) -> Result<FitResult> {
    let contrast = PairContrast::new(pattern, beta_raw, spec, model.clone());
    if contrast.len() < MIN_PAIRS {
        return Err(Error::TooFewPairs { found: contrast.len(), needed: MIN_PAIRS });
    }
    let omega = sill_hat(pattern, beta_raw);
    let starts = [
        SemivariogramParams {
            sigma_y2: 0.5 * omega,
            phi_y: median_pair_distance(&pattern.locations),
            sigma_e2: 0.5 * omega,
        },
        init.unwrap_or(SemivariogramParams { sigma_y2: 0.75 * omega, phi_y: spec.r / 8.0, sigma_e2: 0.25 * omega }),
        curve_matched_start(&contrast, omega, spec.r),
    ];
    minimize_contrast(&contrast, method, &starts, omega, spec.r, &NelderMead::default())
}

/// Fit with `R` chosen from a pilot: a CL fit at `R = ¼·(shortest side)`
/// gives φ̂, and the final fit uses `R = 4φ̂` (capped below half the
/// shortest side) with the pilot as a start.
pub fn fit_with_pilot(
    pattern: &PointPattern,
    beta_raw: &[f64],
    model: &SemivariogramModel,
    method: Method,
) -> Result<FitResult> {
    let side = pattern.window.min_side();
    let pilot_spec = PairWeightSpec::new(0.25 * side, pattern.window)?;
    let pilot = fit(pattern, beta_raw, &pilot_spec, model, Method::Cl, None)?;
    let r = (4.0 * pilot.theta.phi_y).min(0.45 * side);
    let spec = PairWeightSpec::new(r, pattern.window)?;
    fit(pattern, beta_raw, &spec, model, method, Some(pilot.theta))
}
