//! Monte-Carlo harness: per-replicate estimation with the proposed
//! estimators and the likelihood baseline, aggregation into
//! bias / standard-error / RMSE tables, domain-expansion and coverage
//! studies, and ingestion of field data.
//!
//! Replicates run on the current rayon pool; results are collected in
//! replicate order, so outputs do not depend on the number of threads.
//! Wall-clock timings are returned separately from the numerical records.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::covariance::{SemivariogramModel, SemivariogramParams};
use crate::error::{Error, Result};
use crate::estimators::{
    bandwidth_candidates, crosscov_at_zero_pairs, crosscov_from_pairs, default_lags, ols_beta, select_bandwidth,
    semivariogram_from_pairs, sill_hat, BetaEstimate, EmpiricalCurve,
};
use crate::geometry::{pairs_within, PointPattern, Window};
use crate::inference::{confidence_intervals, sandwich, InferenceReport, Interval, SandwichEstimate};
use crate::io::Raster;
use crate::mle::mle_fit;
use crate::parametric::{fit, fit_with_pilot, Method, PairWeightSpec};
use crate::simulation::{Coupling, ScenarioConfig, ScenarioSimulator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "MLE")]
    Mle,
    #[serde(rename = "CL")]
    Cl,
    #[serde(rename = "MC")]
    Mc,
}

impl Estimator {
    pub fn label(self) -> &'static str {
        match self {
            Estimator::Mle => "MLE",
            Estimator::Cl => "CL",
            Estimator::Mc => "MC",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "MLE" => Ok(Estimator::Mle),
            "CL" => Ok(Estimator::Cl),
            "MC" => Ok(Estimator::Mc),
            _ => Err(Error::Config(format!("unknown estimator '{s}'"))),
        }
    }
}

/// What to run on each simulated replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSettings {
    pub scenario: ScenarioConfig,
    pub replicates: usize,
    /// Smoothness of the fitted semivariogram family.
    pub fit_nu: f64,
    /// Pair radius `R = r_factor · φ_Y`.
    pub r_factor: f64,
    pub estimators: Vec<Estimator>,
    /// Fit θ; coverage runs only need the regression part.
    pub fit_theta: bool,
    /// Confidence level for β₁ intervals; `None` skips interval estimation.
    pub ci_level: Option<f64>,
}

impl BenchSettings {
    pub fn new(scenario: ScenarioConfig, replicates: usize) -> Self {
        let fit_nu = scenario.y.nu;
        Self {
            scenario,
            replicates,
            fit_nu,
            r_factor: 4.0,
            estimators: vec![Estimator::Mle, Estimator::Cl, Estimator::Mc],
            fit_theta: true,
            ci_level: None,
        }
    }

    pub fn radius(&self) -> f64 {
        self.r_factor * self.scenario.y.phi
    }

    fn truth(&self) -> [f64; 5] {
        let s = &self.scenario;
        [s.beta[0], s.beta.get(1).copied().unwrap_or(0.0), s.y.sigma2, s.y.phi, s.sigma_e2]
    }
}

pub const PARAMS: [&str; 5] = ["beta0", "beta1", "sigma_y2", "phi_y", "sigma_e2"];

/// Estimates from one method on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub scenario: u8,
    pub window_side: f64,
    pub gamma: Option<f64>,
    pub seed: u64,
    pub replicate: u64,
    pub method: Estimator,
    pub n_points: usize,
    /// Intercept-corrected for CL/MC, GLS for MLE.
    pub beta0: f64,
    pub beta0_raw: f64,
    pub beta1: f64,
    pub sigma_y2: Option<f64>,
    pub phi_y: Option<f64>,
    pub sigma_e2: Option<f64>,
    pub beta1_lower: Option<f64>,
    pub beta1_upper: Option<f64>,
    pub converged: bool,
}

impl ReplicateRecord {
    fn values(&self) -> [Option<f64>; 5] {
        [Some(self.beta0), Some(self.beta1), self.sigma_y2, self.phi_y, self.sigma_e2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRecord {
    pub replicate: u64,
    pub method: Estimator,
    pub seconds: f64,
}

fn gamma_of(s: &ScenarioConfig) -> Option<f64> {
    match s.coupling {
        Coupling::Proportional { gamma } => Some(gamma),
        Coupling::CrossCovariance { .. } => None,
    }
}

/// Least squares, bandwidth selection and the two kernel curves on lags up
/// to `r`, with the intercept corrected by `Ĉ_XY(0)` from a local-linear
/// fit at zero over pairs closer than `3h`.
#[derive(Debug, Clone)]
pub struct NonparametricStage {
    pub beta: BetaEstimate,
    pub omega: f64,
    pub bandwidth: f64,
    pub semivariogram: EmpiricalCurve,
    pub crosscov: EmpiricalCurve,
}

/// `bandwidth = None` selects it by cross-validation over lags up to `r`.
pub fn nonparametric_stage(pattern: &PointPattern, r: f64, bandwidth: Option<f64>) -> Result<NonparametricStage> {
    let beta_raw = ols_beta(pattern)?;
    let omega = sill_hat(pattern, &beta_raw);
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::InvalidParameter(format!("bandwidth {h} must be positive"))),
        None => select_bandwidth(pattern, &beta_raw, &bandwidth_candidates(r), r)?.bandwidth,
    };
    let lags = default_lags(h, r);
    let res = pattern.residuals(&beta_raw);
    let r0 = 3.0 * h;
    let pairs = pairs_within(&pattern.locations, (r + h).max(r0));
    let semivariogram = semivariogram_from_pairs(&res, &pairs, &lags, h)?;
    let crosscov = crosscov_from_pairs(&res, &pairs, &lags, h)?;
    let beta = BetaEstimate::new(beta_raw, crosscov_at_zero_pairs(&res, &pairs, r0)?);
    Ok(NonparametricStage { beta, omega, bandwidth: h, semivariogram, crosscov })
}

impl NonparametricStage {
    /// Sandwich covariance with lag cap `r` and the resulting intervals.
    pub fn intervals(&self, pattern: &PointPattern, r: f64, level: f64) -> Result<(SandwichEstimate, Vec<Interval>)> {
        let sw = sandwich(pattern, self.omega, &self.semivariogram, &self.crosscov, r)?;
        let ci = confidence_intervals(&self.beta, &sw, level)?;
        Ok((sw, ci))
    }

    pub fn report(&self, pattern: &PointPattern, r: f64, level: f64) -> Result<InferenceReport> {
        let (sw, intervals) = self.intervals(pattern, r, level)?;
        Ok(InferenceReport {
            beta: self.beta.clone(),
            omega_hat: self.omega,
            bandwidth: self.bandwidth,
            lag_cap: r,
            intervals,
            psd_clipped: sw.psd_clipped,
            pairs_used: sw.pairs_used,
        })
    }

    /// `r,semivariogram,crosscov,pairs` on the shared lag grid.
    pub fn write_curves_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["r", "semivariogram", "crosscov", "pairs"]).map_err(csv_err)?;
        for (k, &lag) in self.semivariogram.lags.iter().enumerate() {
            let c = self.crosscov.lags.iter().position(|&l| l == lag).map(|j| self.crosscov.values[j]);
            w.write_record([
                lag.to_string(),
                self.semivariogram.values[k].to_string(),
                opt(c),
                self.semivariogram.pair_count[k].to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs every requested estimator on one pattern.
pub fn analyze_pattern(
    pattern: &PointPattern,
    settings: &BenchSettings,
    replicate: u64,
) -> Result<(Vec<ReplicateRecord>, Vec<TimingRecord>)> {
    let r = settings.radius();
    let model = SemivariogramModel::new(settings.fit_nu)?;
    let base = |method: Estimator| ReplicateRecord {
        scenario: settings.scenario.scenario_id(),
        window_side: settings.scenario.window.width(),
        gamma: gamma_of(&settings.scenario),
        seed: settings.scenario.seed,
        replicate,
        method,
        n_points: pattern.len(),
        beta0: f64::NAN,
        beta0_raw: f64::NAN,
        beta1: f64::NAN,
        sigma_y2: None,
        phi_y: None,
        sigma_e2: None,
        beta1_lower: None,
        beta1_upper: None,
        converged: true,
    };
    let mut records = Vec::new();
    let mut timings = Vec::new();
    let wants = |e: Estimator| settings.estimators.contains(&e);

    let mut cl_theta = None;
    if wants(Estimator::Cl) || wants(Estimator::Mc) {
        let t0 = Instant::now();
        let stage = nonparametric_stage(pattern, r, None)?;
        let beta = &stage.beta;
        let beta_raw = &beta.beta_raw;
        let interval = match settings.ci_level {
            Some(level) => Some(stage.intervals(pattern, r, level)?.1[1].clone()),
            None => None,
        };
        let shared = t0.elapsed().as_secs_f64();
        let spec = PairWeightSpec::new(r, pattern.window)?;
        for (est, method) in [(Estimator::Cl, Method::Cl), (Estimator::Mc, Method::Mc)] {
            if !wants(est) {
                continue;
            }
            let t1 = Instant::now();
            let mut rec = base(est);
            rec.beta0 = beta.beta_corrected[0];
            rec.beta0_raw = beta.beta_raw[0];
            rec.beta1 = beta.beta_raw[1];
            if let Some(ci) = &interval {
                rec.beta1_lower = Some(ci.lower);
                rec.beta1_upper = Some(ci.upper);
            }
            if settings.fit_theta {
                let f = fit(pattern, beta_raw, &spec, &model, method, None)?;
                rec.sigma_y2 = Some(f.theta.sigma_y2);
                rec.phi_y = Some(f.theta.phi_y);
                rec.sigma_e2 = Some(f.theta.sigma_e2);
                rec.converged = f.converged;
                if est == Estimator::Cl {
                    cl_theta = Some(f.theta);
                }
            }
            records.push(rec);
            timings.push(TimingRecord { replicate, method: est, seconds: shared + t1.elapsed().as_secs_f64() });
        }
    }
    if wants(Estimator::Mle) {
        let t1 = Instant::now();
        let m = mle_fit(pattern, settings.fit_nu, cl_theta)?;
        let mut rec = base(Estimator::Mle);
        rec.beta0 = m.beta_hat[0];
        rec.beta0_raw = m.beta_hat[0];
        rec.beta1 = m.beta_hat[1];
        rec.sigma_y2 = Some(m.theta.sigma_y2);
        rec.phi_y = Some(m.theta.phi_y);
        rec.sigma_e2 = Some(m.theta.sigma_e2);
        rec.converged = m.converged;
        if let Some(level) = settings.ci_level {
            let z = Normal::standard().inverse_cdf(0.5 * (1.0 + level));
            let se = m.beta_cov[1][1].max(0.0).sqrt();
            rec.beta1_lower = Some(m.beta_hat[1] - z * se);
            rec.beta1_upper = Some(m.beta_hat[1] + z * se);
        }
        records.push(rec);
        timings.push(TimingRecord { replicate, method: Estimator::Mle, seconds: t1.elapsed().as_secs_f64() });
    }
    records.sort_by_key(|r| r.method);
    timings.sort_by_key(|t| t.method);
    Ok((records, timings))
}

/// Summary statistics of one parameter for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Estimator,
    pub param: String,
    pub truth: f64,
    pub n: usize,
    pub mean: f64,
    pub bias: f64,
    /// Sample standard deviation (denominator m − 1).
    pub sd_err: f64,
    /// `sqrt(mean((estimate − truth)²))`.
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub method: Estimator,
    pub param: String,
    pub n: usize,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub label: String,
    pub replicates: usize,
    pub failed: usize,
    pub rows: Vec<SummaryRow>,
    pub coverage: Vec<CoverageRow>,
}

/// Bias, SdErr and RMSE of `values` against `truth`.
pub fn summarize(values: &[f64], truth: f64) -> (f64, f64, f64, f64) {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    let sd = if values.len() > 1 { (ss / (m - 1.0)).sqrt() } else { 0.0 };
    let rmse = (values.iter().map(|v| (v - truth).powi(2)).sum::<f64>() / m).sqrt();
    (mean, mean - truth, sd, rmse)
}

impl SummaryTable {
    pub fn from_records(label: &str, records: &[ReplicateRecord], truth: [f64; 5], replicates: usize, failed: usize) -> Self {
        let mut methods: Vec<Estimator> = records.iter().map(|r| r.method).collect();
        methods.sort();
        methods.dedup();
        let mut rows = Vec::new();
        let mut coverage = Vec::new();
        for &method in &methods {
            let recs: Vec<&ReplicateRecord> = records.iter().filter(|r| r.method == method).collect();
            for (k, name) in PARAMS.iter().enumerate() {
                let vals: Vec<f64> = recs.iter().filter_map(|r| r.values()[k]).collect();
                if vals.is_empty() {
                    continue;
                }
                let (mean, bias, sd_err, rmse) = summarize(&vals, truth[k]);
                rows.push(SummaryRow {
                    method,
                    param: name.to_string(),
                    truth: truth[k],
                    n: vals.len(),
                    mean,
                    bias,
                    sd_err,
                    rmse,
                });
            }
            let cis: Vec<bool> = recs
                .iter()
                .filter_map(|r| Some(r.beta1_lower? <= truth[1] && truth[1] <= r.beta1_upper?))
                .collect();
            if !cis.is_empty() {
                let hits = cis.iter().filter(|&&c| c).count();
                coverage.push(CoverageRow {
                    method,
                    param: "beta1".into(),
                    n: cis.len(),
                    coverage: hits as f64 / cis.len() as f64,
                });
            }
        }
        Self { label: label.to_string(), replicates, failed, rows, coverage }
    }

    pub fn row(&self, method: Estimator, param: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.method == method && r.param == param)
    }

    pub fn coverage_of(&self, method: Estimator) -> Option<f64> {
        self.coverage.iter().find(|c| c.method == method).map(|c| c.coverage)
    }

    /// `mean(SdErr)` per parameter, one line per method.
    pub fn format_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {} ({} replicates, {} failed)", self.label, self.replicates, self.failed);
        let _ = writeln!(out, "{:<6}{:>18}{:>18}{:>18}{:>20}{:>18}", "method", "beta0", "beta1", "sigma_y2", "phi_y", "sigma_e2");
        let mut methods: Vec<Estimator> = self.rows.iter().map(|r| r.method).collect();
        methods.dedup();
        for m in methods {
            let _ = write!(out, "{:<6}", m.label());
            for (k, p) in PARAMS.iter().enumerate() {
                let cell = match self.row(m, p) {
                    Some(r) if k == 3 => format!("{:.4}({:.4})", r.mean, r.sd_err),
                    Some(r) => format!("{:.2}({:.2})", r.mean, r.sd_err),
                    None => "-".into(),
                };
                let _ = write!(out, "{:>width$}", cell, width = if k == 3 { 20 } else { 18 });
            }
            let _ = writeln!(out);
        }
        for c in &self.coverage {
            let _ = writeln!(out, "coverage {} {}: {:.3} (n={})", c.method.label(), c.param, c.coverage, c.n);
        }
        out
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["label", "method", "param", "truth", "n", "mean", "bias", "sd_err", "rmse"]).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                self.label.clone(),
                r.method.label().into(),
                r.param.clone(),
                r.truth.to_string(),
                r.n.to_string(),
                r.mean.to_string(),
                r.bias.to_string(),
                r.sd_err.to_string(),
                r.rmse.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn write_records_csv<W: Write>(records: &[ReplicateRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "scenario", "window_side", "gamma", "seed", "replicate", "method", "n_points", "beta0", "beta0_raw", "beta1",
        "sigma_y2", "phi_y", "sigma_e2", "beta1_lower", "beta1_upper", "converged",
    ])
    .map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.scenario.to_string(),
            r.window_side.to_string(),
            opt(r.gamma),
            r.seed.to_string(),
            r.replicate.to_string(),
            r.method.label().into(),
            r.n_points.to_string(),
            r.beta0.to_string(),
            r.beta0_raw.to_string(),
            r.beta1.to_string(),
            opt(r.sigma_y2),
            opt(r.phi_y),
            opt(r.sigma_e2),
            opt(r.beta1_lower),
            opt(r.beta1_upper),
            r.converged.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timing_csv<W: Write>(label: &str, timings: &[TimingRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["label", "replicate", "method", "seconds"]).map_err(csv_err)?;
    for t in timings {
        w.write_record([label.to_string(), t.replicate.to_string(), t.method.label().into(), t.seconds.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Records, timings and summary of one batch of replicates.
#[derive(Debug, Clone)]
pub struct BenchOutput {
    pub records: Vec<ReplicateRecord>,
    pub timings: Vec<TimingRecord>,
    pub summary: SummaryTable,
}

/// Simulates and analyses `settings.replicates` replicates. Failed
/// replicates are logged and excluded; 5% or more failures is an error.
pub fn run_replicates(settings: &BenchSettings, label: &str) -> Result<BenchOutput> {
    if settings.replicates == 0 {
        return Err(Error::Config("at least one replicate is required".into()));
    }
    let sim = ScenarioSimulator::new(&settings.scenario)?;
    let results: Vec<Result<(Vec<ReplicateRecord>, Vec<TimingRecord>)>> = (0..settings.replicates as u64)
        .into_par_iter()
        .map(|rep| {
            let pattern = sim.replicate(rep)?.pattern;
            analyze_pattern(&pattern, settings, rep)
        })
        .collect();
    let mut records = Vec::new();
    let mut timings = Vec::new();
    let mut failed = 0;
    for (rep, res) in results.into_iter().enumerate() {
        match res {
            Ok((r, t)) => {
                records.extend(r);
                timings.extend(t);
            }
            Err(e) => {
                log::warn!("{label}: replicate {rep} failed: {e}");
                failed += 1;
            }
        }
    }
    if failed * 20 >= settings.replicates && failed > 0 {
        return Err(Error::TooManyFailures { failed, total: settings.replicates });
    }
    let summary = SummaryTable::from_records(label, &records, settings.truth(), settings.replicates, failed);
    Ok(BenchOutput { records, timings, summary })
}

/// The Table 1 study: one scenario on the configured window.
pub fn run_table1(settings: &BenchSettings) -> Result<BenchOutput> {
    let label = format!("scenario {} phi_y={}", settings.scenario.scenario_id(), settings.scenario.y.phi);
    run_replicates(settings, &label)
}

/// The same study on `[0, side]²` for each side, at fixed point density.
pub fn run_expansion(settings: &BenchSettings, sides: &[f64]) -> Result<Vec<BenchOutput>> {
    sides
        .iter()
        .map(|&side| {
            let mut s = settings.clone();
            s.scenario.window = Window::square(side);
            run_replicates(&s, &format!("window [0,{side}]^2"))
        })
        .collect()
}

/// β₁ interval coverage for each coupling strength γ.
pub fn run_coverage(settings: &BenchSettings, gammas: &[f64]) -> Result<Vec<BenchOutput>> {
    gammas
        .iter()
        .map(|&gamma| {
            let mut s = settings.clone();
            s.scenario.coupling = Coupling::Proportional { gamma };
            if s.ci_level.is_none() {
                s.ci_level = Some(0.95);
            }
            run_replicates(&s, &format!("gamma={gamma}"))
        })
        .collect()
}

/// Long-format plot data: one row per (label, method, parameter).
pub fn write_plot_csv<W: Write>(outputs: &[BenchOutput], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["label", "method", "param", "bias", "sd_err", "rmse", "coverage"]).map_err(csv_err)?;
    for o in outputs {
        for r in &o.summary.rows {
            let cov = if r.param == "beta1" { o.summary.coverage_of(r.method) } else { None };
            w.write_record([
                o.summary.label.clone(),
                r.method.label().into(),
                r.param.clone(),
                r.bias.to_string(),
                r.sd_err.to_string(),
                r.rmse.to_string(),
                opt(cov),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Ingestion result with validation counts.
#[derive(Debug, Clone)]
pub struct IngestReport {
    pub pattern: PointPattern,
    pub rejected_outside: usize,
    pub rejected_domain: usize,
}

/// `log(DBH − 9)`; `None` outside the domain `DBH > 9`.
pub fn dbh_transform(dbh: f64) -> Option<f64> {
    (dbh > 9.0).then(|| (dbh - 9.0).ln())
}

/// Reads `x,y,mark` rows. Covariates are `(1, raster(s))` with a raster,
/// `(1)` without. Points outside the window (or raster) and marks outside
/// the transform domain are dropped and counted; malformed rows are errors.
pub fn ingest_dataset<R: Read>(
    input: R,
    raster: Option<&Raster>,
    window: Option<Window>,
    transform_dbh: bool,
) -> Result<IngestReport> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    if header != ["x", "y", "mark"] {
        return Err(Error::Parse { line: 1, message: "expected header x,y,mark".into() });
    }
    let window = match (window, raster) {
        (Some(w), _) => w,
        (None, Some(r)) => r.extent(),
        (None, None) => return Err(Error::Config("a window or covariate raster is required".into())),
    };
    let (mut locs, mut marks, mut covs) = (Vec::new(), Vec::new(), Vec::new());
    let (mut outside, mut domain) = (0, 0);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 3 {
            return Err(Error::Parse { line, message: format!("expected 3 fields, got {}", rec.len()) });
        }
        let mut v = [0.0; 3];
        for k in 0..3 {
            v[k] = rec[k].parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| Error::Parse {
                line,
                message: format!("column {}: '{}' is not a finite number", header[k], &rec[k]),
            })?;
        }
        let s = [v[0], v[1]];
        if !window.contains(s) {
            outside += 1;
            continue;
        }
        let mark = if transform_dbh {
            match dbh_transform(v[2]) {
                Some(m) => m,
                None => {
                    domain += 1;
                    continue;
                }
            }
        } else {
            v[2]
        };
        let cov = match raster {
            Some(r) => match r.sample(s) {
                Some(c) => vec![1.0, c],
                None => {
                    outside += 1;
                    continue;
                }
            },
            None => vec![1.0],
        };
        locs.push(s);
        marks.push(mark);
        covs.push(cov);
    }
    if outside > 0 {
        log::warn!("{outside} points outside the window were rejected");
    }
    if domain > 0 {
        log::warn!("{domain} marks with DBH ≤ 9 were rejected");
    }
    Ok(IngestReport {
        pattern: PointPattern::new(window, locs, marks, covs)?,
        rejected_outside: outside,
        rejected_domain: domain,
    })
}

/// Fitted parameters from one estimator, for side-by-side reporting.
/// `objective` is the contrast value for CL/MC and the negative
/// log-likelihood for MLE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub method: Estimator,
    pub beta: BetaEstimate,
    pub theta: SemivariogramParams,
    pub nu: f64,
    pub r: Option<f64>,
    pub bandwidth: Option<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub n_pairs_used: Option<usize>,
}

/// Fits the requested estimators to one pattern. Without `radius`, `R` comes
/// from a pilot composite-likelihood fit.
pub fn fit_pattern(pattern: &PointPattern, methods: &[Estimator], nu: f64, radius: Option<f64>) -> Result<Vec<FitRecord>> {
    let model = SemivariogramModel::new(nu)?;
    let beta_raw = ols_beta(pattern)?;
    let r = match radius {
        Some(r) => r,
        None => fit_with_pilot(pattern, &beta_raw, &model, Method::Cl)?.r,
    };
    let spec = PairWeightSpec::new(r, pattern.window)?;
    let mut methods = methods.to_vec();
    methods.sort();
    methods.dedup();
    let needs_stage = methods.iter().any(|&m| m != Estimator::Mle);
    let stage = if needs_stage { Some(nonparametric_stage(pattern, r, None)?) } else { None };
    let mut out = Vec::new();
    let mut cl_theta = None;
    // CL before MLE so the likelihood search can start from it.
    for &m in methods.iter().rev() {
        let rec = match m {
            Estimator::Cl | Estimator::Mc => {
                let stage = stage.as_ref().expect("stage computed");
                let method = if m == Estimator::Cl { Method::Cl } else { Method::Mc };
                let f = fit(pattern, &beta_raw, &spec, &model, method, None)?;
                if m == Estimator::Cl {
                    cl_theta = Some(f.theta);
                }
                FitRecord {
                    method: m,
                    beta: stage.beta.clone(),
                    theta: f.theta,
                    nu,
                    r: Some(r),
                    bandwidth: Some(stage.bandwidth),
                    objective: f.objective,
                    iterations: f.iterations,
                    converged: f.converged,
                    n_pairs_used: Some(f.n_pairs_used),
                }
            }
            Estimator::Mle => {
                let f = mle_fit(pattern, nu, cl_theta)?;
                FitRecord {
                    method: m,
                    beta: BetaEstimate::new(f.beta_hat, 0.0),
                    theta: f.theta,
                    nu,
                    r: None,
                    bandwidth: None,
                    objective: -f.loglik,
                    iterations: f.iterations,
                    converged: f.converged,
                    n_pairs_used: None,
                }
            }
        };
        out.push(rec);
    }
    out.sort_by_key(|r| r.method);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_identity() {
        let vals = [1.2, 0.9, 1.4, 1.05, 0.7];
        let (_, bias, sd, rmse) = summarize(&vals, 1.0);
        let m = vals.len() as f64;
        assert!((rmse * rmse - (bias * bias + sd * sd * (m - 1.0) / m)).abs() < 1e-12);
    }

    #[test]
    fn zero_replicates_rejected() {
        let s = BenchSettings::new(ScenarioConfig::scenario1(0.05, 1.0, 1.0, 1.0), 0);
        assert!(matches!(run_table1(&s), Err(Error::Config(_))));
    }

    #[test]
    fn dbh_transform_example() {
        let e2 = std::f64::consts::E.powi(2);
        assert!((dbh_transform(9.0 + e2).unwrap() - 2.0).abs() < 1e-14);
        assert_eq!(dbh_transform(9.0), None);
    }

    #[test]
    fn ingest_counts_rejections() {
        let csv = "x,y,mark\n1,1,20\n2,2,9\n50,50,30\n";
        let r = ingest_dataset(csv.as_bytes(), None, Some(Window::square(10.0)), true).unwrap();
        assert_eq!(r.pattern.len(), 1);
        assert_eq!(r.rejected_outside, 1);
        assert_eq!(r.rejected_domain, 1);
        assert!((r.pattern.marks[0] - 11f64.ln()).abs() < 1e-15);
        let bad = "x,y,mark\n1,1,20\n2,oops,9\n";
        assert!(matches!(
            ingest_dataset(bad.as_bytes(), None, Some(Window::square(10.0)), false),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn ingest_samples_raster() {
        let raster = Raster::parse("ncols 2\nnrows 1\nxorigin 0\nyorigin 0\ncellsize 5\n1 3\n").unwrap();
        let r = ingest_dataset("x,y,mark\n5,2,1.5\n".as_bytes(), Some(&raster), None, false).unwrap();
        assert_eq!(r.pattern.covariate(0), &[1.0, 2.0]);
    }
}
