//! Joint simulation of the log-intensity field X and the mark field Y on a
//! regular grid, log-Gaussian Cox sampling of locations, and mark attachment.
//!
//! Fields are generated by circulant embedding on a torus at least twice the
//! grid in each direction. For two fields the per-frequency 2×2 spectral
//! matrix is factorised; if any of them is indefinite beyond round-off the
//! bivariate model is invalid and generation fails with
//! [`Error::NotPositiveDefinite`]. A dense Cholesky sampler is kept for small
//! grids and for testing.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::covariance::{CrossCovParams, MaternParams};
use crate::error::{Error, Result};
use crate::geometry::{PointPattern, Window};
use crate::special::MaternCorrelation;

/// Independent random streams within one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Covariate = 0,
    Fields = 1,
    Points = 2,
    Nugget = 3,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for `(seed, replicate, purpose)`. `replicate = None` is the
/// replicate-independent stream used for the fixed covariate design.
pub fn stream_rng(seed: u64, replicate: Option<u64>, purpose: Purpose) -> ChaCha8Rng {
    let rep = replicate.map_or(u64::MAX, |r| r);
    let key = splitmix64(splitmix64(seed) ^ splitmix64(rep.wrapping_add(0x5851_F42D_4C95_7F2D)));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(purpose as u64);
    rng
}

/// How the log-intensity X relates to the mark field Y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Coupling {
    /// `X = γ·Y`.
    Proportional { gamma: f64 },
    /// Separate Matérn marginal for X and a Matérn cross-covariance.
    CrossCovariance { x: MaternParams, xy: CrossCovParams },
}

fn default_resolution() -> usize {
    128
}

fn default_covariate_phi() -> f64 {
    0.1
}

/// Simulation settings for one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// `(β₀, β₁)`; a single entry gives an intercept-only model.
    pub beta: Vec<f64>,
    pub sigma_e2: f64,
    pub y: MaternParams,
    pub coupling: Coupling,
    /// Expected points per unit area.
    pub intensity: f64,
    pub window: Window,
    /// Grid cells per unit length.
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    /// Range of the exponential covariance of the fixed covariate surface.
    #[serde(default = "default_covariate_phi")]
    pub covariate_phi: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    /// Proportional coupling `X = γY`, `σ_Y² = 1`, `β = (1, 1)`, `σ_e² = 0.1`,
    /// 400 points per unit area on `[0, side]²`.
    pub fn scenario1(phi_y: f64, nu_y: f64, gamma: f64, side: f64) -> Self {
        Self {
            beta: vec![1.0, 1.0],
            sigma_e2: 0.1,
            y: MaternParams { sigma2: 1.0, phi: phi_y, nu: nu_y },
            coupling: Coupling::Proportional { gamma },
            intensity: 400.0,
            window: Window::square(side),
            resolution: default_resolution(),
            covariate_phi: default_covariate_phi(),
            seed: 0,
        }
    }

    /// Separate X marginal and cross-covariance with the parameters of the
    /// misspecified-coupling study on the unit square.
    pub fn scenario2(side: f64) -> Self {
        Self {
            coupling: Coupling::CrossCovariance {
                x: MaternParams { sigma2: 1.8, phi: 0.05, nu: 0.5 },
                xy: CrossCovParams { sigma_xy2: 1.0, phi_xy: 0.07, nu_xy: 0.75 },
            },
            ..Self::scenario1(0.1, 1.0, 1.0, side)
        }
    }

    pub fn scenario_id(&self) -> u8 {
        match self.coupling {
            Coupling::Proportional { .. } => 1,
            Coupling::CrossCovariance { .. } => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        self.y.validate()?;
        if self.beta.is_empty() || self.beta.len() > 2 {
            return Err(Error::Config("beta must have one or two entries".into()));
        }
        if !(self.sigma_e2 >= 0.0) {
            return Err(Error::Config("sigma_e2 must be non-negative".into()));
        }
        if !(self.intensity >= 0.0) || !self.intensity.is_finite() {
            return Err(Error::Config("intensity must be finite and non-negative".into()));
        }
        if self.resolution < 16 {
            return Err(Error::Config("resolution must be at least 16 cells per unit".into()));
        }
        if !(self.covariate_phi > 0.0) {
            return Err(Error::Config("covariate_phi must be positive".into()));
        }
        match &self.coupling {
            Coupling::Proportional { gamma } if !gamma.is_finite() => {
                Err(Error::Config("gamma must be finite".into()))
            }
            Coupling::CrossCovariance { x, xy } => {
                x.validate()?;
                xy.validate()
            }
            _ => Ok(()),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn sigma_x2(&self) -> f64 {
        match &self.coupling {
            Coupling::Proportional { gamma } => gamma * gamma * self.y.sigma2,
            Coupling::CrossCovariance { x, .. } => x.sigma2,
        }
    }

    /// `C_XY(0)`, the intercept shift induced by preferential sampling.
    pub fn cross_cov_at_zero(&self) -> f64 {
        match &self.coupling {
            Coupling::Proportional { gamma } => gamma * self.y.sigma2,
            Coupling::CrossCovariance { xy, .. } => xy.sigma_xy2,
        }
    }
}

/// `γ₀ = log ρ* − σ_X²/2`, so that `E exp(γ₀ + X) = ρ*`.
pub fn calibrate_gamma0(config: &ScenarioConfig) -> f64 {
    config.intensity.ln() - 0.5 * config.sigma_x2()
}

/// `(E[Y e^X], E[Y² e^X])` for bivariate normal `(X, Y)` with the given
/// mean and covariance: exponential tilting by `X` shifts the mean of `Y` by
/// `Cov(X, Y)` and leaves its variance unchanged.
pub fn tilted_moments(mean: [f64; 2], cov: [[f64; 2]; 2]) -> (f64, f64) {
    let m = (mean[0] + 0.5 * cov[0][0]).exp();
    let shifted = mean[1] + cov[0][1];
    (shifted * m, (cov[1][1] + shifted * shifted) * m)
}

/// Regular grid of cell centres covering a window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub window: Window,
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
}

impl GridSpec {
    pub fn new(window: Window, resolution: usize) -> Result<Self> {
        window.validate()?;
        if resolution == 0 {
            return Err(Error::InvalidParameter("resolution must be positive".into()));
        }
        let cells = |len: f64| ((len * resolution as f64 - 1e-9).ceil() as usize).max(1);
        let (nx, ny) = (cells(window.width()), cells(window.height()));
        Ok(Self { window, nx, ny, dx: window.width() / nx as f64, dy: window.height() / ny as f64 })
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_area(&self) -> f64 {
        self.dx * self.dy
    }

    /// Centre of cell `(ix, iy)`; storage index is `iy * nx + ix`.
    pub fn node(&self, ix: usize, iy: usize) -> [f64; 2] {
        [
            self.window.xmin + (ix as f64 + 0.5) * self.dx,
            self.window.ymin + (iy as f64 + 0.5) * self.dy,
        ]
    }

    /// Bilinear interpolation between cell centres, constant beyond the
    /// outermost centres.
    pub fn interpolate(&self, values: &[f64], s: [f64; 2]) -> f64 {
        let axis = |v: f64, lo: f64, d: f64, n: usize| -> (usize, f64) {
            if n == 1 {
                return (0, 0.0);
            }
            let f = ((v - lo) / d - 0.5).clamp(0.0, (n - 1) as f64);
            let i = (f.floor() as usize).min(n - 2);
            (i, f - i as f64)
        };
        let (ix, tx) = axis(s[0], self.window.xmin, self.dx, self.nx);
        let (iy, ty) = axis(s[1], self.window.ymin, self.dy, self.ny);
        let at = |i: usize, j: usize| values[j.min(self.ny - 1) * self.nx + i.min(self.nx - 1)];
        let lower = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
        let upper = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
        lower * (1.0 - ty) + upper * ty
    }
}

/// Grid realisations of X, Y and the covariate, sharing nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    pub grid: GridSpec,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub covariate: Vec<f64>,
}

/// Smallest `m ≥ n` whose only prime factors are 2, 3 and 5.
fn fft_size(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

/// Negative spectral mass tolerated as round-off, relative to the largest eigenvalue.
const SPECTRAL_TOL: f64 = 1e-8;
const PADDING_FACTORS: [usize; 3] = [2, 3, 4];

enum Factors {
    Single(Vec<f64>),
    /// Lower-triangular `(l11, l21, l22)` per frequency.
    Pair(Vec<[f64; 3]>),
}

/// Circulant-embedding sampler for one or two stationary fields on a grid.
pub struct CirculantSampler {
    grid: GridSpec,
    m1: usize,
    m2: usize,
    factors: Factors,
    row_fft: Arc<dyn Fft<f64>>,
    col_fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for CirculantSampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CirculantSampler").field("grid", &self.grid).field("torus", &(self.m1, self.m2)).finish()
    }
}

struct Torus {
    m1: usize,
    m2: usize,
    row_fft: Arc<dyn Fft<f64>>,
    col_fft: Arc<dyn Fft<f64>>,
}

impl Torus {
    fn new(grid: &GridSpec, factor: usize) -> Self {
        let (m1, m2) = (fft_size(factor * grid.ny), fft_size(factor * grid.nx));
        let mut planner = FftPlanner::new();
        Self { m1, m2, row_fft: planner.plan_fft_forward(m2), col_fft: planner.plan_fft_forward(m1) }
    }

    fn fft2(&self, data: &mut [Complex<f64>]) {
        fft2(data, self.m1, self.m2, &*self.row_fft, &*self.col_fft);
    }

    /// Eigenvalues of the block-circulant embedding of `cov`.
    fn spectrum(&self, grid: &GridSpec, cov: &dyn Fn(f64) -> f64) -> Vec<f64> {
        let (m1, m2) = (self.m1, self.m2);
        let mut c = vec![Complex::new(0.0, 0.0); m1 * m2];
        for i in 0..m1 {
            let dy = i.min(m1 - i) as f64 * grid.dy;
            for j in 0..m2 {
                let dx = j.min(m2 - j) as f64 * grid.dx;
                c[i * m2 + j].re = cov((dx * dx + dy * dy).sqrt());
            }
        }
        self.fft2(&mut c);
        c.into_iter().map(|z| z.re).collect()
    }
}

fn fft2(data: &mut [Complex<f64>], m1: usize, m2: usize, row: &dyn Fft<f64>, col: &dyn Fft<f64>) {
    row.process(data);
    let mut t = vec![Complex::new(0.0, 0.0); m1 * m2];
    for i in 0..m1 {
        for j in 0..m2 {
            t[j * m1 + i] = data[i * m2 + j];
        }
    }
    col.process(&mut t);
    for i in 0..m1 {
        for j in 0..m2 {
            data[i * m2 + j] = t[j * m1 + i];
        }
    }
}

impl CirculantSampler {
    /// Sampler for a single field with covariance `cov(r)`.
    pub fn univariate(grid: GridSpec, cov: &dyn Fn(f64) -> f64) -> Result<Self> {
        let mut worst = 0.0;
        for factor in PADDING_FACTORS {
            let torus = Torus::new(&grid, factor);
            let lambda = torus.spectrum(&grid, cov);
            let max = lambda.iter().copied().fold(0.0, f64::max);
            let min = lambda.iter().copied().fold(f64::INFINITY, f64::min);
            if min >= -SPECTRAL_TOL * max {
                let scale = 1.0 / ((torus.m1 * torus.m2) as f64).sqrt();
                let f = lambda.iter().map(|&l| l.max(0.0).sqrt() * scale).collect();
                return Ok(Self::assemble(grid, torus, Factors::Single(f)));
            }
            worst = min / max;
        }
        Err(Error::NotPositiveDefinite(format!(
            "circulant embedding has relative eigenvalue {worst:.3e} at the largest padding"
        )))
    }

    /// Sampler for two fields with marginal covariances `c11`, `c22` and
    /// cross-covariance `c12`.
    pub fn bivariate(
        grid: GridSpec,
        c11: &dyn Fn(f64) -> f64,
        c12: &dyn Fn(f64) -> f64,
        c22: &dyn Fn(f64) -> f64,
    ) -> Result<Self> {
        let mut worst = 0.0;
        for factor in PADDING_FACTORS {
            let torus = Torus::new(&grid, factor);
            let a = torus.spectrum(&grid, c11);
            let b = torus.spectrum(&grid, c12);
            let d = torus.spectrum(&grid, c22);
            let max = a.iter().chain(&d).copied().fold(0.0, f64::max);
            let tol = SPECTRAL_TOL * max;
            let scale = 1.0 / ((torus.m1 * torus.m2) as f64).sqrt();
            let mut factors = Vec::with_capacity(a.len());
            let mut ok = true;
            for k in 0..a.len() {
                let (akk, bkk, dkk) = (a[k], b[k], d[k]);
                // Schur complement d − b²/a measures the indefinite part.
                if akk < -tol || dkk < -tol {
                    worst = f64::min(worst, akk.min(dkk) / max);
                    ok = false;
                    break;
                }
                let l11 = akk.max(0.0).sqrt();
                let (l21, rem) = if l11 > 0.0 && akk > tol {
                    (bkk / l11, dkk - bkk * bkk / akk)
                } else if bkk.abs() <= tol {
                    (0.0, dkk)
                } else {
                    worst = f64::min(worst, -bkk.abs() / max);
                    ok = false;
                    break;
                };
                if rem < -tol {
                    worst = f64::min(worst, rem / max);
                    ok = false;
                    break;
                }
                factors.push([l11 * scale, l21 * scale, rem.max(0.0).sqrt() * scale]);
            }
            if ok {
                return Ok(Self::assemble(grid, torus, Factors::Pair(factors)));
            }
        }
        Err(Error::NotPositiveDefinite(format!(
            "bivariate spectral matrix indefinite (relative eigenvalue {worst:.3e}); the cross-covariance is not a valid model"
        )))
    }

    fn assemble(grid: GridSpec, torus: Torus, factors: Factors) -> Self {
        Self { grid, m1: torus.m1, m2: torus.m2, factors, row_fft: torus.row_fft, col_fft: torus.col_fft }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// One realisation per field, each of length `grid.len()`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<f64>> {
        let m = self.m1 * self.m2;
        let draw = |rng: &mut R| {
            Complex::new(StandardNormal.sample(&mut *rng), StandardNormal.sample(&mut *rng))
        };
        let mut layers: Vec<Vec<Complex<f64>>> = match &self.factors {
            Factors::Single(f) => vec![f.iter().map(|&s| draw(rng) * s).collect()],
            Factors::Pair(f) => {
                let mut u1 = Vec::with_capacity(m);
                let mut u2 = Vec::with_capacity(m);
                for l in f {
                    let (z1, z2) = (draw(rng), draw(rng));
                    u1.push(z1 * l[0]);
                    u2.push(z1 * l[1] + z2 * l[2]);
                }
                vec![u1, u2]
            }
        };
        layers
            .iter_mut()
            .map(|u| {
                fft2(u, self.m1, self.m2, &*self.row_fft, &*self.col_fft);
                let mut out = Vec::with_capacity(self.grid.len());
                for iy in 0..self.grid.ny {
                    for ix in 0..self.grid.nx {
                        out.push(u[iy * self.m2 + ix].re);
                    }
                }
                out
            })
            .collect()
    }
}

/// Dense Cholesky sampler for small grids: stacks the fields, factorises the
/// joint covariance with diagonal jitter escalation from 1e-12 to 1e-6 (relative
/// to the mean diagonal), and returns one realisation per field.
pub fn sample_cholesky<R: Rng + ?Sized>(
    grid: &GridSpec,
    covs: &[&dyn Fn(f64) -> f64],
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let k = match covs.len() {
        1 => 1,
        3 => 2,
        _ => return Err(Error::InvalidParameter("expected 1 or 3 covariance functions".into())),
    };
    let n = grid.len();
    let nodes: Vec<[f64; 2]> = (0..n).map(|i| grid.node(i % grid.nx, i / grid.nx)).collect();
    let block = |a: usize, b: usize| -> usize {
        match (k, a.min(b), a.max(b)) {
            (1, _, _) => 0,
            (_, 0, 0) => 0,
            (_, 0, 1) => 1,
            _ => 2,
        }
    };
    let mut cov = DMatrix::<f64>::zeros(k * n, k * n);
    for a in 0..k {
        for b in 0..k {
            let f = covs[block(a, b)];
            for i in 0..n {
                for j in 0..n {
                    let d = ((nodes[i][0] - nodes[j][0]).powi(2) + (nodes[i][1] - nodes[j][1]).powi(2)).sqrt();
                    cov[(a * n + i, b * n + j)] = f(d);
                }
            }
        }
    }
    let mean_diag = cov.diagonal().mean();
    let mut jitter = 0.0;
    let chol = loop {
        let mut m = cov.clone();
        for i in 0..k * n {
            m[(i, i)] += jitter * mean_diag;
        }
        if let Some(c) = m.cholesky() {
            break c;
        }
        jitter = if jitter == 0.0 { 1e-12 } else { jitter * 10.0 };
        if jitter > 1e-6 * 1.0001 {
            return Err(Error::NotPositiveDefinite(format!(
                "stacked grid covariance failed factorisation at jitter 1e-6 ({} nodes)",
                k * n
            )));
        }
    };
    let z = DVector::from_fn(k * n, |_, _| StandardNormal.sample(&mut *rng));
    let v = chol.l() * z;
    Ok((0..k).map(|a| v.rows(a * n, n).iter().copied().collect()).collect())
}

fn matern_fn(p: MaternParams) -> Result<impl Fn(f64) -> f64> {
    p.validate()?;
    let corr = MaternCorrelation::new(p.nu)?;
    Ok(move |r: f64| p.sigma2 * corr.at(r, p.phi))
}

fn cross_fn(p: CrossCovParams) -> Result<impl Fn(f64) -> f64> {
    p.validate()?;
    let corr = MaternCorrelation::new(p.nu_xy)?;
    Ok(move |r: f64| p.sigma_xy2 * corr.at(r, p.phi_xy))
}

/// Fixed covariate surface with covariance `exp(−r/φ)`.
pub fn simulate_covariate(window: Window, resolution: usize, phi: f64, seed: u64) -> Result<(GridSpec, Vec<f64>)> {
    let grid = GridSpec::new(window, resolution)?;
    let cov = matern_fn(MaternParams { sigma2: 1.0, phi, nu: 0.5 })?;
    let sampler = CirculantSampler::univariate(grid, &cov)?;
    let mut rng = stream_rng(seed, None, Purpose::Covariate);
    Ok((grid, sampler.sample(&mut rng).swap_remove(0)))
}

enum FieldSampler {
    Proportional { gamma: f64, y: CirculantSampler },
    Joint(CirculantSampler),
}

/// Reusable simulator: the covariate surface and the spectral factors are
/// computed once; each replicate draws fields, locations and marks from its
/// own streams.
pub struct ScenarioSimulator {
    config: ScenarioConfig,
    grid: GridSpec,
    covariate: Vec<f64>,
    fields: FieldSampler,
    gamma0: f64,
}

/// Output of one simulated replicate.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub fields: FieldGrid,
    pub pattern: PointPattern,
}

impl ScenarioSimulator {
    pub fn new(config: &ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let (grid, covariate) =
            simulate_covariate(config.window, config.resolution, config.covariate_phi, config.seed)?;
        let cy = matern_fn(config.y)?;
        let fields = match config.coupling {
            Coupling::Proportional { gamma } => {
                FieldSampler::Proportional { gamma, y: CirculantSampler::univariate(grid, &cy)? }
            }
            Coupling::CrossCovariance { x, xy } => {
                let cx = matern_fn(x)?;
                let cxy = cross_fn(xy)?;
                FieldSampler::Joint(CirculantSampler::bivariate(grid, &cx, &cxy, &cy)?)
            }
        };
        Ok(Self { config: config.clone(), grid, covariate, fields, gamma0: calibrate_gamma0(config) })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn covariate(&self) -> &[f64] {
        &self.covariate
    }

    pub fn gamma0(&self) -> f64 {
        self.gamma0
    }

    /// Joint (X, Y) grid realisation for a replicate.
    pub fn fields(&self, replicate: u64) -> FieldGrid {
        let mut rng = stream_rng(self.config.seed, Some(replicate), Purpose::Fields);
        let (x, y) = match &self.fields {
            FieldSampler::Proportional { gamma, y } => {
                let y = y.sample(&mut rng).swap_remove(0);
                (y.iter().map(|v| gamma * v).collect(), y)
            }
            FieldSampler::Joint(s) => {
                let mut layers = s.sample(&mut rng);
                let y = layers.pop().expect("two layers");
                (layers.pop().expect("two layers"), y)
            }
        };
        FieldGrid { grid: self.grid, x, y, covariate: self.covariate.clone() }
    }

    pub fn replicate(&self, replicate: u64) -> Result<Replicate> {
        let fields = self.fields(replicate);
        let mut rng = stream_rng(self.config.seed, Some(replicate), Purpose::Points);
        let locations = sample_lgcp(&fields, self.gamma0, &mut rng)?;
        let mut rng = stream_rng(self.config.seed, Some(replicate), Purpose::Nugget);
        let pattern = attach_marks(locations, &fields, &self.config.beta, self.config.sigma_e2, &mut rng)?;
        Ok(Replicate { fields, pattern })
    }
}

/// Joint (X, Y) fields and covariate for a configuration and replicate.
pub fn simulate_joint_fields(config: &ScenarioConfig, replicate: u64) -> Result<FieldGrid> {
    Ok(ScenarioSimulator::new(config)?.fields(replicate))
}

/// Per-cell Poisson counts with mean `exp(γ₀ + X(centre))·area`, placed
/// uniformly within each cell.
pub fn sample_lgcp<R: Rng + ?Sized>(fields: &FieldGrid, gamma0: f64, rng: &mut R) -> Result<Vec<[f64; 2]>> {
    let g = &fields.grid;
    if fields.x.len() != g.len() {
        return Err(Error::InvalidParameter("X layer does not match the grid".into()));
    }
    let mut out = Vec::new();
    for iy in 0..g.ny {
        for ix in 0..g.nx {
            let mean = (gamma0 + fields.x[iy * g.nx + ix]).exp() * g.cell_area();
            if !(mean > 0.0) {
                continue;
            }
            if !mean.is_finite() {
                return Err(Error::Domain(format!("cell intensity overflow at ({ix}, {iy})")));
            }
            let count = Poisson::new(mean).map_err(|e| Error::Domain(e.to_string()))?.sample(&mut *rng) as u64;
            let (x0, y0) = (g.window.xmin + ix as f64 * g.dx, g.window.ymin + iy as f64 * g.dy);
            for _ in 0..count {
                let x = (x0 + rng.random::<f64>() * g.dx).min(g.window.xmax);
                let y = (y0 + rng.random::<f64>() * g.dy).min(g.window.ymax);
                out.push([x, y]);
            }
        }
    }
    Ok(out)
}

/// Marks `Z = β₀ + β₁ w(s) + Y(s) + e` with bilinearly interpolated `Y`, `w`
/// and i.i.d. `e ~ N(0, σ_e²)`.
pub fn attach_marks<R: Rng + ?Sized>(
    locations: Vec<[f64; 2]>,
    fields: &FieldGrid,
    beta: &[f64],
    sigma_e2: f64,
    rng: &mut R,
) -> Result<PointPattern> {
    if beta.is_empty() || beta.len() > 2 {
        return Err(Error::InvalidParameter("beta must have one or two entries".into()));
    }
    let g = &fields.grid;
    let sd = sigma_e2.max(0.0).sqrt();
    let mut marks = Vec::with_capacity(locations.len());
    let mut covariates = Vec::with_capacity(locations.len());
    for &s in &locations {
        let mut w = vec![1.0];
        if beta.len() == 2 {
            w.push(g.interpolate(&fields.covariate, s));
        }
        let trend: f64 = w.iter().zip(beta).map(|(a, b)| a * b).sum();
        let e = if sd > 0.0 {
            let z: f64 = StandardNormal.sample(&mut *rng);
            sd * z
        } else {
            0.0
        };
        marks.push(trend + g.interpolate(&fields.y, s) + e);
        covariates.push(w);
    }
    PointPattern::new(g.window, locations, marks, covariates)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid() -> GridSpec {
        GridSpec::new(Window::square(0.25), 16).unwrap()
    }

    #[test]
    fn gamma0_examples() {
        let c = ScenarioConfig::scenario1(0.05, 1.0, 1.0, 1.0);
        assert!((calibrate_gamma0(&c) - (400f64.ln() - 0.5)).abs() < 1e-15);
        assert!((calibrate_gamma0(&c) - 5.4915).abs() < 1e-4);
        let c = ScenarioConfig::scenario2(1.0);
        assert!((calibrate_gamma0(&c) - 5.0915).abs() < 1e-4);
    }

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let a: u64 = stream_rng(7, Some(1), Purpose::Fields).random();
        let b: u64 = stream_rng(7, Some(1), Purpose::Fields).random();
        let c: u64 = stream_rng(7, Some(1), Purpose::Points).random();
        let d: u64 = stream_rng(7, Some(2), Purpose::Fields).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn fft_sizes() {
        assert_eq!(fft_size(128), 128);
        assert_eq!(fft_size(97), 100);
        assert_eq!(fft_size(7), 8);
    }

    #[test]
    fn interpolation_reproduces_nodes_and_planes() {
        let g = GridSpec::new(Window::new(0.0, 1.0, 0.0, 0.5).unwrap(), 16).unwrap();
        let plane: Vec<f64> = (0..g.len())
            .map(|i| {
                let p = g.node(i % g.nx, i / g.nx);
                2.0 + 3.0 * p[0] - p[1]
            })
            .collect();
        for &s in &[[0.3, 0.2], [0.5, 0.25], [0.71, 0.44]] {
            assert!((g.interpolate(&plane, s) - (2.0 + 3.0 * s[0] - s[1])).abs() < 1e-12);
        }
        let n = g.node(3, 2);
        assert!((g.interpolate(&plane, n) - plane[2 * g.nx + 3]).abs() < 1e-12);
    }

    #[test]
    fn proportional_fields_scale_exactly() {
        let mut c = ScenarioConfig::scenario1(0.1, 0.5, 1.0, 0.5);
        c.resolution = 32;
        let f = simulate_joint_fields(&c, 3).unwrap();
        assert_eq!(f.x, f.y);
        c.coupling = Coupling::Proportional { gamma: 2.0 };
        let g = simulate_joint_fields(&c, 3).unwrap();
        for (a, b) in g.x.iter().zip(&g.y) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    /// Empirical covariance of sampler output against the target, both
    /// through the circulant and the dense sampler.
    #[test]
    fn bivariate_sampler_matches_target_covariance() {
        let grid = small_grid();
        let cx = matern_fn(MaternParams { sigma2: 1.8, phi: 0.05, nu: 0.5 }).unwrap();
        let cxy = cross_fn(CrossCovParams { sigma_xy2: 1.0, phi_xy: 0.07, nu_xy: 0.75 }).unwrap();
        let cy = matern_fn(MaternParams { sigma2: 1.0, phi: 0.1, nu: 1.0 }).unwrap();
        let circ = CirculantSampler::bivariate(grid, &cx, &cxy, &cy).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let reps = 3000;
        let (a, b) = (0, 3); // nodes (0,0) and (3,0)
        let d = grid.dx * 3.0;
        let mut acc = [0.0; 5];
        let mut acc_chol = [0.0; 5];
        for _ in 0..reps {
            let l = circ.sample(&mut rng);
            acc[0] += l[0][a] * l[0][a];
            acc[1] += l[1][a] * l[1][a];
            acc[2] += l[0][a] * l[1][a];
            acc[3] += l[0][a] * l[1][b];
            acc[4] += l[1][a] * l[1][b];
        }
        for _ in 0..reps {
            let l = sample_cholesky(&grid, &[&cx, &cxy, &cy], &mut rng).unwrap();
            acc_chol[0] += l[0][a] * l[0][a];
            acc_chol[1] += l[1][a] * l[1][a];
            acc_chol[2] += l[0][a] * l[1][a];
            acc_chol[3] += l[0][a] * l[1][b];
            acc_chol[4] += l[1][a] * l[1][b];
        }
        let target = [cx(0.0), cy(0.0), cxy(0.0), cxy(d), cy(d)];
        for k in 0..5 {
            // Standard error of a product moment is at most ~sqrt(2·1.8²/reps).
            let tol = 4.0 * (2.0 * 1.8f64 * 1.8 / reps as f64).sqrt();
            assert!((acc[k] / reps as f64 - target[k]).abs() < tol, "circulant {k}");
            assert!((acc_chol[k] / reps as f64 - target[k]).abs() < tol, "cholesky {k}");
        }
    }

    #[test]
    fn invalid_cross_structure_is_rejected() {
        let mut c = ScenarioConfig::scenario2(1.0);
        c.coupling = Coupling::CrossCovariance {
            x: MaternParams { sigma2: 1.2, phi: 0.05, nu: 1.0 },
            xy: CrossCovParams { sigma_xy2: 1.0, phi_xy: 0.07, nu_xy: 0.75 },
        };
        c.y = MaternParams { sigma2: 1.0, phi: 0.1, nu: 0.5 };
        assert!(matches!(ScenarioSimulator::new(&c), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn scenario2_is_accepted() {
        assert!(ScenarioSimulator::new(&ScenarioConfig::scenario2(1.0)).is_ok());
    }

    #[test]
    fn cholesky_rejects_invalid_joint_model() {
        let grid = GridSpec::new(Window::square(0.25), 16).unwrap();
        let one = |r: f64| (-r / 0.1).exp();
        let too_strong = |r: f64| 1.5 * (-r / 0.1).exp();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            sample_cholesky(&grid, &[&one, &too_strong, &one], &mut rng),
            Err(Error::NotPositiveDefinite(_))
        ));
    }

    #[test]
    fn homogeneous_poisson_count() {
        let grid = GridSpec::new(Window::square(1.0), 16).unwrap();
        let f = FieldGrid { grid, x: vec![0.0; grid.len()], y: vec![0.0; grid.len()], covariate: vec![0.0; grid.len()] };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let reps = 400;
        let total: usize = (0..reps).map(|_| sample_lgcp(&f, 100f64.ln(), &mut rng).unwrap().len()).sum();
        assert!((total as f64 / reps as f64 - 100.0).abs() < 3.0);
        assert!(sample_lgcp(&f, f64::NEG_INFINITY, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn marks_without_noise_equal_intercept() {
        let grid = GridSpec::new(Window::square(1.0), 16).unwrap();
        let f = FieldGrid { grid, x: vec![0.0; grid.len()], y: vec![0.0; grid.len()], covariate: vec![0.0; grid.len()] };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = attach_marks(vec![[0.1, 0.2], [0.9, 0.5]], &f, &[1.5, 2.0], 0.0, &mut rng).unwrap();
        assert_eq!(p.marks, vec![1.5, 1.5]);
        assert_eq!(p.covariate(1), &[1.0, 0.0]);
    }

    #[test]
    fn config_toml_round_trip() {
        let c = ScenarioConfig::scenario2(2.0);
        let s = c.to_toml_string().unwrap();
        assert_eq!(ScenarioConfig::from_toml_str(&s).unwrap(), c);
        let bad = s.replace(&format!("resolution = {}", c.resolution), "resolution = 8");
        assert_ne!(bad, s);
        assert!(ScenarioConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn replicates_are_deterministic() {
        let mut c = ScenarioConfig::scenario1(0.05, 1.0, 1.0, 0.5);
        c.seed = 42;
        let sim = ScenarioSimulator::new(&c).unwrap();
        let a = sim.replicate(4).unwrap().pattern;
        let b = ScenarioSimulator::new(&c).unwrap().replicate(4).unwrap().pattern;
        assert_eq!(a, b);
        assert_ne!(a, sim.replicate(5).unwrap().pattern);
    }
}
