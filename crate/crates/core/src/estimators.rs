//! Design-unbiased estimators that ignore the sampling mechanism: least
//! squares for the regression coefficients, the moment estimator of the sill,
//! and kernel estimators of the semivariogram and of the cross-covariance
//! between the log-intensity and the marks.
//!
//! Every residual in this module is taken against the RAW least-squares fit.
//! Under preferential sampling the raw intercept estimates `β₀ + C_XY(0)`,
//! and it is exactly this shifted centring that makes the sill and
//! cross-covariance estimators unbiased. The intercept-corrected coefficients
//! in [`BetaEstimate::beta_corrected`] are for reporting only.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pairs_within, Pair, PointPattern};

/// Least-squares coefficients, raw and intercept-corrected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaEstimate {
    /// Raw least-squares fit; the first slot estimates `β₀ + C_XY(0)`.
    pub beta_raw: Vec<f64>,
    /// `beta_raw − Ĉ_XY(0)·(1, 0, …, 0)`.
    pub beta_corrected: Vec<f64>,
    pub cxy0_hat: f64,
}

impl BetaEstimate {
    pub fn new(beta_raw: Vec<f64>, cxy0_hat: f64) -> Self {
        let mut beta_corrected = beta_raw.clone();
        beta_corrected[0] -= cxy0_hat;
        Self { beta_raw, beta_corrected, cxy0_hat }
    }
}

/// Ordinary least squares `[Σ w wᵀ]⁻¹ Σ w Z` over the observed points.
pub fn ols_beta(pattern: &PointPattern) -> Result<Vec<f64>> {
    let (n, p) = (pattern.len(), pattern.dim());
    if n < p {
        return Err(Error::SingularDesign { rcond: 0.0 });
    }
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    for i in 0..n {
        let w = pattern.covariate(i);
        for a in 0..p {
            rhs[a] += w[a] * pattern.marks[i];
            for b in 0..p {
                gram[(a, b)] += w[a] * w[b];
            }
        }
    }
    let sv = gram.clone().singular_values();
    let smax = sv.max();
    let rcond = if smax > 0.0 { sv.min() / smax } else { 0.0 };
    if !(rcond > 1e-12) {
        return Err(Error::SingularDesign { rcond });
    }
    let chol = gram.cholesky().ok_or(Error::SingularDesign { rcond })?;
    Ok(chol.solve(&rhs).iter().copied().collect())
}

/// Moment estimator of the sill, `|N|⁻¹ Σ [Z − wᵀβ̂]²`, with raw β̂.
pub fn sill_hat(pattern: &PointPattern, beta_raw: &[f64]) -> f64 {
    let res = pattern.residuals(beta_raw);
    if res.is_empty() {
        return 0.0;
    }
    res.iter().map(|e| e * e).sum::<f64>() / res.len() as f64
}

/// Smoothing kernel on `[−1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    #[default]
    Epanechnikov,
}

impl Kernel {
    #[inline]
    pub fn eval(self, u: f64) -> f64 {
        match self {
            Kernel::Epanechnikov => {
                if u.abs() < 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
        }
    }

    /// `K_h(x) = K(x/h)/h`.
    #[inline]
    pub fn scaled(self, x: f64, h: f64) -> f64 {
        self.eval(x / h) / h
    }
}

/// Kernel-smoothed function estimate on a lag grid. Lags with no kernel mass
/// are omitted rather than filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalCurve {
    pub lags: Vec<f64>,
    pub values: Vec<f64>,
    pub bandwidth: f64,
    pub kernel: Kernel,
    /// Unordered pairs with positive kernel weight at each reported lag.
    pub pair_count: Vec<usize>,
}

impl EmpiricalCurve {
    pub fn len(&self) -> usize {
        self.lags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lags.is_empty()
    }

    /// Linear interpolation between reported lags, constant beyond the ends.
    pub fn interpolate(&self, r: f64) -> f64 {
        let n = self.lags.len();
        if n == 0 {
            return 0.0;
        }
        if r <= self.lags[0] {
            return self.values[0];
        }
        if r >= self.lags[n - 1] {
            return self.values[n - 1];
        }
        let k = self.lags.partition_point(|&l| l <= r);
        let (l0, l1) = (self.lags[k - 1], self.lags[k]);
        let t = (r - l0) / (l1 - l0);
        self.values[k - 1] * (1.0 - t) + self.values[k] * t
    }
}

/// `count` equispaced lags from `h` to `rmax` inclusive.
pub fn lag_grid(h: f64, rmax: f64, count: usize) -> Vec<f64> {
    if count <= 1 || rmax <= h {
        return vec![h.min(rmax)];
    }
    let step = (rmax - h) / (count - 1) as f64;
    (0..count).map(|k| h + k as f64 * step).collect()
}

/// The default grid: 50 equispaced lags from `h` to `rmax`.
pub fn default_lags(h: f64, rmax: f64) -> Vec<f64> {
    lag_grid(h, rmax, 50)
}

fn validate_lags(lags: &[f64], h: f64) -> Result<()> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidParameter(format!("bandwidth must be positive, got {h}")));
    }
    if lags.is_empty() || lags[0] <= 0.0 || lags.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("lags must be positive and strictly increasing".into()));
    }
    Ok(())
}

/// Accumulates `Σ K_h(d − r)·value(pair)` and `Σ K_h(d − r)` at each lag.
fn kernel_sums(
    pairs: &[Pair],
    lags: &[f64],
    h: f64,
    kernel: Kernel,
    mut value: impl FnMut(&Pair) -> f64,
) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let mut num = vec![0.0; lags.len()];
    let mut den = vec![0.0; lags.len()];
    let mut cnt = vec![0usize; lags.len()];
    for pair in pairs {
        let lo = lags.partition_point(|&l| l <= pair.dist - h);
        let hi = lags.partition_point(|&l| l < pair.dist + h);
        if lo >= hi {
            continue;
        }
        let v = value(pair);
        for k in lo..hi {
            let w = kernel.scaled(pair.dist - lags[k], h);
            if w > 0.0 {
                num[k] += w * v;
                den[k] += w;
                cnt[k] += 1;
            }
        }
    }
    (num, den, cnt)
}

fn assemble_curve(
    lags: &[f64],
    h: f64,
    kernel: Kernel,
    num: Vec<f64>,
    den: Vec<f64>,
    cnt: Vec<usize>,
    scale: f64,
) -> Result<EmpiricalCurve> {
    let mut curve = EmpiricalCurve {
        lags: Vec::new(),
        values: Vec::new(),
        bandwidth: h,
        kernel,
        pair_count: Vec::new(),
    };
    for k in 0..lags.len() {
        if cnt[k] > 0 && den[k] > 0.0 {
            curve.lags.push(lags[k]);
            curve.values.push(num[k] / (scale * den[k]));
            curve.pair_count.push(cnt[k]);
        }
    }
    if curve.is_empty() {
        return Err(Error::EmptyLag { bandwidth: h });
    }
    Ok(curve)
}

/// Kernel estimator of the semivariogram from precomputed residuals and pairs.
pub fn semivariogram_from_pairs(
    residuals: &[f64],
    pairs: &[Pair],
    lags: &[f64],
    h: f64,
) -> Result<EmpiricalCurve> {
    validate_lags(lags, h)?;
    let kernel = Kernel::Epanechnikov;
    let (num, den, cnt) = kernel_sums(pairs, lags, h, kernel, |p| {
        let d = residuals[p.i as usize] - residuals[p.j as usize];
        d * d
    });
    assemble_curve(lags, h, kernel, num, den, cnt, 2.0)
}

/// Kernel estimator of the cross-covariance from precomputed residuals and pairs.
///
/// Each ordered pair attaches the residual of its first point; summing both
/// orientations of every unordered pair gives `(e_i + e_j)` against a doubled
/// denominator.
pub fn crosscov_from_pairs(
    residuals: &[f64],
    pairs: &[Pair],
    lags: &[f64],
    h: f64,
) -> Result<EmpiricalCurve> {
    validate_lags(lags, h)?;
    let kernel = Kernel::Epanechnikov;
    let (num, den, cnt) = kernel_sums(pairs, lags, h, kernel, |p| {
        residuals[p.i as usize] + residuals[p.j as usize]
    });
    assemble_curve(lags, h, kernel, num, den, cnt, 2.0)
}

fn max_lag(lags: &[f64]) -> f64 {
    lags.last().copied().unwrap_or(0.0)
}

/// Kernel estimator `V̂_Y(r)` of the semivariogram at each lag.
pub fn semivariogram_hat(
    pattern: &PointPattern,
    beta_raw: &[f64],
    lags: &[f64],
    h: f64,
) -> Result<EmpiricalCurve> {
    validate_lags(lags, h)?;
    let res = pattern.residuals(beta_raw);
    let pairs = pairs_within(&pattern.locations, max_lag(lags) + h);
    semivariogram_from_pairs(&res, &pairs, lags, h)
}

/// Kernel estimator `Ĉ_XY(r)` of the intensity–mark cross-covariance.
pub fn crosscov_hat(
    pattern: &PointPattern,
    beta_raw: &[f64],
    lags: &[f64],
    h: f64,
) -> Result<EmpiricalCurve> {
    validate_lags(lags, h)?;
    let res = pattern.residuals(beta_raw);
    let pairs = pairs_within(&pattern.locations, max_lag(lags) + h);
    crosscov_from_pairs(&res, &pairs, lags, h)
}

/// `Ĉ_XY(0)` by local-linear extrapolation of the curve from lags in
/// `(0, 3h]`, weighted by pair counts.
pub fn crosscov_at_zero(curve: &EmpiricalCurve) -> Result<f64> {
    crosscov_at_zero_within(curve, 3.0 * curve.bandwidth)
}

pub fn crosscov_at_zero_within(curve: &EmpiricalCurve, r0: f64) -> Result<f64> {
    let idx: Vec<usize> = (0..curve.len()).filter(|&k| curve.lags[k] <= r0 * (1.0 + 1e-12)).collect();
    if idx.len() < 3 {
        return Err(Error::InsufficientPairs { found: idx.len(), needed: 3, r0 });
    }
    Ok(weighted_intercept(
        idx.iter().map(|&k| (curve.lags[k], curve.values[k], curve.pair_count[k] as f64)),
    ))
}

/// Intercept of the weighted least-squares line through `(x, y, weight)`;
/// the weighted mean when all `x` coincide.
fn weighted_intercept(points: impl Iterator<Item = (f64, f64, f64)>) -> f64 {
    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (x, y, w) in points {
        sw += w;
        sx += w * x;
        sy += w * y;
        sxx += w * x * x;
        sxy += w * x * y;
    }
    let (mx, my) = (sx / sw, sy / sw);
    let var = sxx / sw - mx * mx;
    if var <= 1e-300 {
        return my;
    }
    let slope = (sxy / sw - mx * my) / var;
    my - slope * mx
}

/// `Ĉ_XY(0)` by local-linear regression at zero on the individual pairs:
/// the pair mean residual `(e_s + e_t)/2` against the pair distance, with
/// weights `1 − (d/r0)²` on `d < r0`.
///
/// Regressing on actual distances avoids the design bias of extrapolating
/// the smoothed curve from its nominal lags, since the pairs behind the
/// smallest lags sit at larger distances on average.
pub fn crosscov_at_zero_pairs(residuals: &[f64], pairs: &[Pair], r0: f64) -> Result<f64> {
    let used: Vec<&Pair> = pairs.iter().filter(|p| p.dist < r0).collect();
    if used.len() < 3 {
        return Err(Error::InsufficientPairs { found: used.len(), needed: 3, r0 });
    }
    Ok(weighted_intercept(used.iter().map(|p| {
        let y = 0.5 * (residuals[p.i as usize] + residuals[p.j as usize]);
        (p.dist, y, 1.0 - (p.dist / r0).powi(2))
    })))
}

/// Outcome of leave-one-point-out bandwidth selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthChoice {
    pub bandwidth: f64,
    pub candidates: Vec<f64>,
    /// Mean squared prediction error per candidate, `None` if nothing scored.
    pub scores: Vec<Option<f64>>,
    /// True when cross-validation degenerated and the rule of thumb was used.
    pub fallback: bool,
}

/// Eight log-spaced candidates between `0.02` and `0.5` times `max_lag`.
pub fn bandwidth_candidates(max_lag: f64) -> Vec<f64> {
    let (lo, hi) = ((0.02 * max_lag).ln(), (0.5 * max_lag).ln());
    (0..8).map(|k| (lo + (hi - lo) * k as f64 / 7.0).exp()).collect()
}

/// Sorted distances with prefix sums of `x`, `x·d`, `x·d²` for x ∈ {1, a}.
struct SortedMoments {
    dist: Vec<f64>,
    // Each row: [Σ1·d^k for k=0..3, Σa·d^k for k=0..3]
    prefix: Vec<[f64; 6]>,
}

impl SortedMoments {
    fn new(mut items: Vec<(f64, f64)>) -> Self {
        items.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut prefix = Vec::with_capacity(items.len() + 1);
        let mut acc = [0.0; 6];
        prefix.push(acc);
        for &(d, a) in &items {
            acc[0] += 1.0;
            acc[1] += d;
            acc[2] += d * d;
            acc[3] += a;
            acc[4] += a * d;
            acc[5] += a * d * d;
            prefix.push(acc);
        }
        Self { dist: items.into_iter().map(|x| x.0).collect(), prefix }
    }

    /// `(count, Σ K_h(d−r), Σ K_h(d−r)·a)` over the open window |d − r| < h.
    fn window(&self, r: f64, h: f64) -> (usize, f64, f64) {
        let lo = self.dist.partition_point(|&d| d <= r - h);
        let hi = self.dist.partition_point(|&d| d < r + h);
        if hi <= lo {
            return (0, 0.0, 0.0);
        }
        let (a, b) = (&self.prefix[lo], &self.prefix[hi]);
        let s: [f64; 6] = std::array::from_fn(|k| b[k] - a[k]);
        let c = 0.75 / h;
        let h2 = h * h;
        let den = c * (s[0] - (s[2] - 2.0 * r * s[1] + r * r * s[0]) / h2);
        let num = c * (s[3] - (s[5] - 2.0 * r * s[4] + r * r * s[3]) / h2);
        (hi - lo, den, num)
    }
}

/// Leave-one-point-out cross-validation of the semivariogram bandwidth.
///
/// For each candidate `h`, every point `i` is removed together with all pairs
/// touching it, the curve is re-estimated from the remaining pairs, and the
/// half squared residual differences of the removed pairs with distance
/// ≤ `max_lag` are predicted from it at their own distances. The candidate
/// with the smallest mean squared prediction error wins; ties go to the
/// earlier candidate.
pub fn select_bandwidth(
    pattern: &PointPattern,
    beta_raw: &[f64],
    candidates: &[f64],
    max_lag: f64,
) -> Result<BandwidthChoice> {
    if candidates.is_empty() || candidates.iter().any(|&h| !(h > 0.0)) {
        return Err(Error::InvalidParameter("bandwidth candidates must be positive".into()));
    }
    if candidates.len() == 1 {
        return Ok(BandwidthChoice {
            bandwidth: candidates[0],
            candidates: candidates.to_vec(),
            scores: vec![None],
            fallback: false,
        });
    }
    let res = pattern.residuals(beta_raw);
    let hmax = candidates.iter().copied().fold(0.0, f64::max);
    let pairs = pairs_within(&pattern.locations, max_lag + hmax);
    let half_sq = |p: &Pair| 0.5 * (res[p.i as usize] - res[p.j as usize]).powi(2);

    let global = SortedMoments::new(pairs.iter().map(|p| (p.dist, half_sq(p))).collect());
    let mut touching: Vec<Vec<(f64, f64)>> = vec![Vec::new(); pattern.len()];
    for p in &pairs {
        let a = half_sq(p);
        touching[p.i as usize].push((p.dist, a));
        touching[p.j as usize].push((p.dist, a));
    }
    let local: Vec<SortedMoments> = touching.into_iter().map(SortedMoments::new).collect();

    let scores: Vec<Option<f64>> = candidates
        .iter()
        .map(|&h| {
            let (mut total, mut terms) = (0.0, 0usize);
            for moments in &local {
                for (k, &d) in moments.dist.iter().enumerate() {
                    if d > max_lag {
                        break;
                    }
                    let a = moments.prefix[k + 1][3] - moments.prefix[k][3];
                    let (cg, dg, ng) = global.window(d, h);
                    let (cl, dl, nl) = moments.window(d, h);
                    if cg <= cl {
                        continue;
                    }
                    let den = dg - dl;
                    if !(den > 0.0) {
                        continue;
                    }
                    let pred = (ng - nl) / den;
                    total += (a - pred).powi(2);
                    terms += 1;
                }
            }
            (terms > 0).then(|| total / terms as f64)
        })
        .collect();

    let best = scores
        .iter()
        .enumerate()
        .filter_map(|(k, s)| s.filter(|v| v.is_finite()).map(|v| (k, v)))
        .fold(None::<(usize, f64)>, |acc, (k, v)| match acc {
            Some((_, bv)) if bv <= v => acc,
            _ => Some((k, v)),
        });
    let (bandwidth, fallback) = match best {
        Some((k, _)) => (candidates[k], false),
        None => {
            let mut d: Vec<f64> = pairs.iter().map(|p| p.dist).collect();
            d.sort_by(f64::total_cmp);
            let median = d.get(d.len() / 2).copied().unwrap_or(max_lag);
            log::warn!("bandwidth cross-validation degenerated; using rule of thumb");
            (0.1 * median, true)
        }
    };
    Ok(BandwidthChoice { bandwidth, candidates: candidates.to_vec(), scores, fallback })
}
