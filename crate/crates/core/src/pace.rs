//! Principal analysis by conditional expectation for sparse, irregular
//! longitudinal data.
//!
//! The pooled mean is a GCV-penalized spline through every observation. The
//! covariance surface is a local linear smooth of the off-diagonal raw
//! covariances; the diagonal raw covariances carry the measurement-error
//! variance and are smoothed separately. Scores are best linear predictors
//! given each subject's own observations.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::error::{Error, Result};
use crate::fpca::{clamp_eigenvalues, quadrature_eigen};
use crate::quadrature::{linspace, trapezoid_weights};
use crate::smooth::{default_lambda_grid, select_lambda_points, PenalizedProblem, PlayerSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PaceConfig {
    /// Points on the working grid.
    pub grid_size: usize,
    /// Analysis domain; defaults to the pooled range of observation times.
    pub domain: Option<(f64, f64)>,
    /// Degree of the pooled-mean spline.
    pub mean_degree: usize,
    /// Equally spaced interior knots of the pooled-mean spline.
    pub mean_interior_knots: usize,
    pub lambda_grid: Vec<f64>,
    /// Candidate kernel bandwidths as fractions of the domain width.
    pub bandwidth_fractions: Vec<f64>,
    pub cv_folds: usize,
    /// Central share of the domain over which σ² is averaged.
    pub central_fraction: f64,
    /// Largest allowed gap between distinct pooled times, as a fraction of
    /// the domain width.
    pub max_gap_fraction: f64,
    /// σ² is kept at or above this share of the mean observation variance
    /// over the central domain.
    pub sigma2_floor_fraction: f64,
    /// Upper bound for the leave-one-out truncation search.
    pub j_max: usize,
    pub j_selection: JSelection,
    pub j_rule: JRule,
}

/// How `fit_pace` turns CV errors into a truncation order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JRule {
    /// Smallest total error.
    Argmin,
    /// Smallest order whose total error is within one paired standard error
    /// of the minimum.
    #[default]
    OneStandardError,
}

/// How `fit_pace` scores truncation orders.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JSelection {
    /// Each subject is predicted by a model estimated without its CV fold.
    #[default]
    CrossFitted,
    /// The model fit to all data predicts every subject.
    InSample,
}

impl Default for PaceConfig {
    fn default() -> Self {
        Self {
            grid_size: 51,
            domain: None,
            mean_degree: 3,
            mean_interior_knots: 8,
            lambda_grid: default_lambda_grid(),
            bandwidth_fractions: vec![0.04, 0.06, 0.08, 0.11, 0.15, 0.2],
            cv_folds: 5,
            central_fraction: 0.8,
            max_gap_fraction: 0.1,
            sigma2_floor_fraction: 0.01,
            j_max: 5,
            j_selection: JSelection::CrossFitted,
            j_rule: JRule::OneStandardError,
        }
    }
}

impl PaceConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.grid_size < 4 {
            errs.push(format!("pace.grid_size must be >= 4, got {}", self.grid_size));
        }
        if self.bandwidth_fractions.is_empty() || self.bandwidth_fractions.iter().any(|f| !(*f > 0.0)) {
            errs.push("pace.bandwidth_fractions must be non-empty and positive".into());
        }
        if self.cv_folds < 2 {
            errs.push("pace.cv_folds must be >= 2".into());
        }
        if !(self.central_fraction > 0.0 && self.central_fraction <= 1.0) {
            errs.push("pace.central_fraction must be in (0, 1]".into());
        }
        if !(self.sigma2_floor_fraction >= 0.0 && self.sigma2_floor_fraction < 1.0) {
            errs.push("pace.sigma2_floor_fraction must be in [0, 1)".into());
        }
        if self.j_max == 0 {
            errs.push("pace.j_max must be >= 1".into());
        }
        if let Some((lo, hi)) = self.domain {
            if !(lo < hi) {
                errs.push("pace.domain must satisfy lo < hi".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Choices made while fitting, kept for the run manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PaceDiagnostics {
    pub mean_lambda: f64,
    pub surface_bandwidth: f64,
    pub surface_cv: Vec<f64>,
    pub diagonal_bandwidth: f64,
    pub diagonal_cv: Vec<f64>,
    /// σ² before clamping.
    pub raw_sigma2: f64,
    pub sigma2_floor: f64,
    /// Smoothed variance of the observations, `G(t,t) + σ²`, on the grid.
    pub diagonal_smooth: Vec<f64>,
    /// Local linear surface before projection onto its positive part.
    pub smoothed_surface: Vec<Vec<f64>>,
    pub loocv_errors: Vec<f64>,
    /// Paired standard error of each order's total against the best one.
    pub loocv_se: Vec<f64>,
    pub j_selection: JSelection,
    pub j_rule: JRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaceModel {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    /// Covariance surface `G(s,t)` on the grid: the positive part of the
    /// smoothed surface, `Σ_k λ_k ψ_k(s) ψ_k(t)`.
    pub cov_surface: Vec<Vec<f64>>,
    pub sigma2: f64,
    pub eigenvalues: Vec<f64>,
    pub eigenfunctions: Vec<Vec<f64>>,
    pub j_selected: usize,
    #[serde(default)]
    pub diagnostics: PaceDiagnostics,
}

/// Scores plus whether the covariance solve needed a ridge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePrediction {
    pub scores: Vec<f64>,
    pub ridge_repaired: bool,
    pub condition: f64,
}

impl PaceModel {
    /// Assemble a model from its parts, checking shapes. `cov_surface`
    /// defaults to the eigen-expansion.
    pub fn from_parts(
        grid: Vec<f64>,
        mean: Vec<f64>,
        eigenvalues: Vec<f64>,
        eigenfunctions: Vec<Vec<f64>>,
        sigma2: f64,
        cov_surface: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let g = grid.len();
        if g < 2 || grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("grid must be increasing with >= 2 points".into()));
        }
        if mean.len() != g || eigenfunctions.iter().any(|p| p.len() != g) {
            return Err(Error::InvalidArgument("curve lengths must match the grid".into()));
        }
        if eigenvalues.len() != eigenfunctions.len() || eigenvalues.is_empty() {
            return Err(Error::InvalidArgument("need one eigenvalue per eigenfunction".into()));
        }
        let cov = match cov_surface {
            Some(c) => {
                if c.len() != g || c.iter().any(|r| r.len() != g) {
                    return Err(Error::InvalidArgument("covariance surface must be G x G".into()));
                }
                c
            }
            None => expand_covariance(&eigenvalues, &eigenfunctions),
        };
        Ok(Self {
            grid,
            mean,
            cov_surface: cov,
            sigma2: sigma2.max(0.0),
            eigenvalues,
            eigenfunctions,
            j_selected: 1,
            diagnostics: PaceDiagnostics::default(),
        })
    }

    pub fn num_components(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.grid[0], self.grid[self.grid.len() - 1])
    }

    fn check(&self, t: f64) -> Result<()> {
        let (lo, hi) = self.domain();
        if t >= lo && t <= hi {
            Ok(())
        } else {
            Err(Error::OutOfDomain { t, lo, hi })
        }
    }

    pub fn mean_at(&self, t: f64) -> Result<f64> {
        self.check(t)?;
        Ok(interpolate(&self.grid, &self.mean, t))
    }

    pub fn eigenfunction_at(&self, k: usize, t: f64) -> Result<f64> {
        self.check(t)?;
        Ok(interpolate(&self.grid, &self.eigenfunctions[k], t))
    }

    /// Tensor-product interpolation of the covariance surface.
    pub fn covariance_at(&self, s: f64, t: f64) -> Result<f64> {
        self.check(s)?;
        self.check(t)?;
        let ws = cubic_weights(&self.grid, s);
        let wt = cubic_weights(&self.grid, t);
        let mut v = 0.0;
        for &(a, wa) in ws.iter() {
            for &(b, wb) in wt.iter() {
                v += wa * wb * self.cov_surface[a][b];
            }
        }
        Ok(v)
    }

    /// Variance function `G(t,t)` on the grid.
    pub fn variance_function(&self) -> Vec<f64> {
        (0..self.grid.len()).map(|i| self.cov_surface[i][i]).collect()
    }

    /// Scores for every subject using the selected truncation.
    pub fn scores_for(&self, data: &[PlayerSeries]) -> Result<Vec<Vec<f64>>> {
        data.par_iter()
            .map(|s| conditional_scores(self, s, self.j_selected))
            .collect()
    }
}

fn expand_covariance(eigenvalues: &[f64], eigenfunctions: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let g = eigenfunctions[0].len();
    let mut cov = vec![vec![0.0; g]; g];
    for (lam, psi) in eigenvalues.iter().zip(eigenfunctions) {
        for a in 0..g {
            for b in a..g {
                cov[a][b] += lam * psi[a] * psi[b];
            }
        }
    }
    for a in 0..g {
        for b in 0..a {
            cov[a][b] = cov[b][a];
        }
    }
    cov
}

/// Local cubic Hermite interpolation weights with finite-difference slopes
/// (Catmull–Rom on the interior, secant slopes at the ends). The scheme is
/// linear in the data, so the tensor-product surface interpolant stays
/// positive semidefinite.
fn cubic_weights(grid: &[f64], t: f64) -> Vec<(usize, f64)> {
    let g = grid.len();
    let i = match grid.partition_point(|&x| x <= t) {
        0 => 0,
        p => (p - 1).min(g - 2),
    };
    let h = grid[i + 1] - grid[i];
    let u = ((t - grid[i]) / h).clamp(0.0, 1.0);
    let (u2, u3) = (u * u, u * u * u);
    let h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
    let h10 = u3 - 2.0 * u2 + u;
    let h01 = -2.0 * u3 + 3.0 * u2;
    let h11 = u3 - u2;
    let mut w: Vec<(usize, f64)> = vec![(i, h00), (i + 1, h01)];
    // slope at node j as a combination of values, in units of one grid step
    let slope = |j: usize| -> Vec<(usize, f64)> {
        if g == 2 || j == 0 {
            vec![(1, 1.0), (0, -1.0)]
        } else if j == g - 1 {
            vec![(g - 1, 1.0), (g - 2, -1.0)]
        } else {
            vec![(j + 1, 0.5), (j - 1, -0.5)]
        }
    };
    for (idx, c) in slope(i) {
        w.push((idx, h10 * c));
    }
    for (idx, c) in slope(i + 1) {
        w.push((idx, h11 * c));
    }
    w
}

fn interpolate(grid: &[f64], values: &[f64], t: f64) -> f64 {
    cubic_weights(grid, t).iter().map(|(i, w)| w * values[*i]).sum()
}

/// Weighted scatter point for the kernel smoothers.
#[derive(Debug, Clone, Copy)]
struct Point2 {
    s: f64,
    t: f64,
    z: f64,
    w: f64,
}

#[derive(Debug, Clone, Copy)]
struct Point1 {
    t: f64,
    z: f64,
    w: f64,
}

/// Merge points at identical locations into count-weighted means; the local
/// linear fit is unchanged by this.
fn bin2(mut pts: Vec<Point2>) -> Vec<Point2> {
    pts.sort_by(|a, b| a.s.total_cmp(&b.s).then(a.t.total_cmp(&b.t)));
    let mut out: Vec<Point2> = Vec::with_capacity(pts.len());
    for p in pts {
        match out.last_mut() {
            Some(q) if q.s == p.s && q.t == p.t => {
                let w = q.w + p.w;
                q.z = (q.z * q.w + p.z * p.w) / w;
                q.w = w;
            }
            _ => out.push(p),
        }
    }
    out
}

fn bin1(mut pts: Vec<Point1>) -> Vec<Point1> {
    pts.sort_by(|a, b| a.t.total_cmp(&b.t));
    let mut out: Vec<Point1> = Vec::with_capacity(pts.len());
    for p in pts {
        match out.last_mut() {
            Some(q) if q.t == p.t => {
                let w = q.w + p.w;
                q.z = (q.z * q.w + p.z * p.w) / w;
                q.w = w;
            }
            _ => out.push(p),
        }
    }
    out
}

const KERNEL_CUTOFF: f64 = 4.0;

/// Local linear estimate at `(s, t)` with a product Gaussian kernel
/// truncated at four bandwidths. `pts` must be sorted by `s`. Falls back to
/// the local constant fit when the local design is degenerate.
fn local_linear_2d(pts: &[Point2], s: f64, t: f64, h: f64) -> f64 {
    let reach = KERNEL_CUTOFF * h;
    let from = pts.partition_point(|p| p.s < s - reach);
    let to = pts.partition_point(|p| p.s <= s + reach);
    let inv = 1.0 / h;
    // moments of (1, ds/h, dt/h)
    let (mut m00, mut m01, mut m02, mut m11, mut m12, mut m22) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut r0, mut r1, mut r2) = (0.0, 0.0, 0.0);
    for p in &pts[from..to] {
        let us = (p.s - s) * inv;
        let ut = (p.t - t) * inv;
        if ut.abs() > KERNEL_CUTOFF {
            continue;
        }
        let k = p.w * (-0.5 * (us * us + ut * ut)).exp();
        m00 += k;
        m01 += k * us;
        m02 += k * ut;
        m11 += k * us * us;
        m12 += k * us * ut;
        m22 += k * ut * ut;
        r0 += k * p.z;
        r1 += k * us * p.z;
        r2 += k * ut * p.z;
    }
    if !(m00 > 0.0) {
        return f64::NAN;
    }
    let m = Matrix3::new(m00, m01, m02, m01, m11, m12, m02, m12, m22);
    if m.determinant().abs() > 1e-10 * m00.powi(3) {
        if let Some(sol) = m.lu().solve(&Vector3::new(r0, r1, r2)) {
            return sol[0];
        }
    }
    r0 / m00
}

/// One-dimensional version of [`local_linear_2d`]; `pts` sorted by `t`.
fn local_linear_1d(pts: &[Point1], t: f64, h: f64) -> f64 {
    let reach = KERNEL_CUTOFF * h;
    let from = pts.partition_point(|p| p.t < t - reach);
    let to = pts.partition_point(|p| p.t <= t + reach);
    let inv = 1.0 / h;
    let (mut s0, mut s1, mut s2, mut r0, mut r1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for p in &pts[from..to] {
        let u = (p.t - t) * inv;
        let k = p.w * (-0.5 * u * u).exp();
        s0 += k;
        s1 += k * u;
        s2 += k * u * u;
        r0 += k * p.z;
        r1 += k * u * p.z;
    }
    if !(s0 > 0.0) {
        return f64::NAN;
    }
    let det = s0 * s2 - s1 * s1;
    if det > 1e-10 * s0 * s2 && det > 0.0 {
        (s2 * r0 - s1 * r1) / det
    } else {
        r0 / s0
    }
}

/// Pick the bandwidth with the smallest held-out squared error; folds are
/// subjects `i` with `i % folds == f`. Ties go to the smaller bandwidth.
fn cv_bandwidth<P: Copy + Send + Sync>(
    points: &[(usize, P)],
    bandwidths: &[f64],
    folds: usize,
    bin: impl Fn(Vec<P>) -> Vec<P> + Sync,
    predict: impl Fn(&[P], P, f64) -> f64 + Sync,
    target: impl Fn(P) -> (f64, f64) + Sync,
) -> (f64, Vec<f64>) {
    let fold_data: Vec<(Vec<P>, Vec<P>)> = (0..folds)
        .map(|f| {
            let train = bin(points.iter().filter(|(s, _)| s % folds != f).map(|(_, p)| *p).collect());
            let test = bin(points.iter().filter(|(s, _)| s % folds == f).map(|(_, p)| *p).collect());
            (train, test)
        })
        .collect();
    let scores: Vec<f64> = bandwidths
        .iter()
        .map(|&h| {
            let per_fold: Vec<f64> = fold_data
                .par_iter()
                .map(|(train, test)| {
                    if train.is_empty() {
                        return 0.0;
                    }
                    let mut err = 0.0;
                    for &p in test {
                        let pred = predict(train, p, h);
                        let (z, w) = target(p);
                        if !pred.is_finite() {
                            return f64::INFINITY;
                        }
                        err += w * (z - pred) * (z - pred);
                    }
                    err
                })
                .collect();
            per_fold.iter().sum()
        })
        .collect();
    let mut best = 0;
    for i in 1..bandwidths.len() {
        if scores[i] < scores[best] || (scores[i] == scores[best] && bandwidths[i] < bandwidths[best]) {
            best = i;
        }
    }
    (bandwidths[best], scores)
}

/// Fit the sparse-FPCA model and select the truncation by leave-one-out CV.
pub fn fit_pace(data: &[PlayerSeries], config: &PaceConfig) -> Result<PaceModel> {
    config.validate()?;
    if data.len() < 2 {
        return Err(Error::InsufficientData(format!("PACE needs at least 2 subjects, got {}", data.len())));
    }
    for s in data {
        s.validate()?;
    }
    let mut model = estimate(data, config, None)?;
    let j_max = config.j_max.min(model.num_components());
    let mut method = config.j_selection;
    let mut rows = None;
    if method == JSelection::CrossFitted {
        rows = cross_fitted_rows(data, config, &model, j_max)?;
        if rows.is_none() {
            method = JSelection::InSample;
        }
    }
    if method == JSelection::InSample && data.iter().any(|s| s.len() >= 2) {
        rows = Some(loo_observation_errors(&model, data, j_max)?);
    }
    model.diagnostics.j_selection = method;
    model.diagnostics.j_rule = config.j_rule;
    // without any subject of two or more observations J stays at 1
    if let Some(rows) = rows {
        let totals = column_sums(&rows, j_max);
        let se = paired_standard_errors(&rows, &totals);
        model.j_selected = choose_order(&totals, &se, config.j_rule, loocv_tolerance(data));
        model.diagnostics.loocv_errors = totals;
        model.diagnostics.loocv_se = se;
    }
    Ok(model)
}

/// Leave-one-observation-out errors where each subject is predicted by a
/// model estimated without its fold. `None` when some fold cannot be fit or
/// no subject has two observations.
fn cross_fitted_rows(
    data: &[PlayerSeries],
    config: &PaceConfig,
    full: &PaceModel,
    j_max: usize,
) -> Result<Option<Vec<Vec<f64>>>> {
    if data.iter().all(|s| s.len() < 2) {
        return Ok(None);
    }
    let folds = config.cv_folds.min(data.len());
    let fixed = PaceConfig {
        domain: Some(full.domain()),
        ..config.clone()
    };
    let bandwidths = (full.diagnostics.surface_bandwidth, full.diagnostics.diagonal_bandwidth);
    let mut rows = Vec::new();
    for f in 0..folds {
        let train: Vec<PlayerSeries> = data.iter().enumerate().filter(|(i, _)| i % folds != f).map(|(_, s)| s.clone()).collect();
        let test: Vec<PlayerSeries> = data.iter().enumerate().filter(|(i, _)| i % folds == f).map(|(_, s)| s.clone()).collect();
        let fold_model = match estimate(&train, &fixed, Some(bandwidths)) {
            Ok(m) => m,
            Err(Error::NumericalError(m)) => return Err(Error::NumericalError(m)),
            Err(_) => return Ok(None),
        };
        rows.extend(loo_observation_errors(&fold_model, &test, j_max)?);
    }
    Ok(Some(rows))
}

/// Mean, covariance surface, σ² and eigenpairs. Bandwidths are selected by
/// CV unless given as `(surface, diagonal)`.
fn estimate(data: &[PlayerSeries], config: &PaceConfig, bandwidths: Option<(f64, f64)>) -> Result<PaceModel> {
    if data.len() < 2 {
        return Err(Error::InsufficientData(format!("PACE needs at least 2 subjects, got {}", data.len())));
    }
    // Domain and coverage.
    let mut pooled: Vec<f64> = data.iter().flat_map(|s| s.times.iter().copied()).collect();
    pooled.sort_by(f64::total_cmp);
    pooled.dedup();
    let (lo, hi) = config.domain.unwrap_or((pooled[0], pooled[pooled.len() - 1]));
    if !(lo < hi) {
        return Err(Error::InsufficientData("pooled observation times span a single point".into()));
    }
    if let Some(&t) = pooled.iter().find(|t| **t < lo || **t > hi) {
        return Err(Error::OutOfDomain { t, lo, hi });
    }
    let width = hi - lo;
    let mut edges = vec![lo];
    edges.extend_from_slice(&pooled);
    edges.push(hi);
    let gap = edges.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    let allowed = config.max_gap_fraction * width;
    if gap >= allowed {
        return Err(Error::SparseCoverage { gap, allowed });
    }
    if data.iter().all(|s| s.len() < 2) {
        return Err(Error::CovarianceUnidentified);
    }

    // Pooled mean.
    let grid = linspace(lo, hi, config.grid_size);
    let weights = trapezoid_weights(&grid);
    let mean_spec = BasisSpec::uniform(config.mean_degree, config.mean_interior_knots, (lo, hi))?;
    let all_t: Vec<f64> = data.iter().flat_map(|s| s.times.iter().copied()).collect();
    let all_y: Vec<f64> = data.iter().flat_map(|s| s.values.iter().copied()).collect();
    let selection = select_lambda_points(&mean_spec, &all_t, &all_y, &config.lambda_grid)?;
    let mean_fit = PenalizedProblem::new(&mean_spec, &all_t, &all_y)?.solve(selection.lambda)?;
    let mean_at = |t: f64| -> f64 {
        mean_spec
            .eval(t, 0)
            .expect("inside domain")
            .iter()
            .zip(&mean_fit.coefficients)
            .map(|(b, c)| b * c)
            .sum()
    };
    let mean: Vec<f64> = grid.iter().map(|&t| mean_at(t)).collect();

    // Raw covariances.
    let mut off: Vec<(usize, Point2)> = Vec::new();
    let mut diag: Vec<(usize, Point1)> = Vec::new();
    for (i, s) in data.iter().enumerate() {
        let resid: Vec<f64> = s.times.iter().zip(&s.values).map(|(t, y)| y - mean_at(*t)).collect();
        for j in 0..s.len() {
            diag.push((i, Point1 { t: s.times[j], z: resid[j] * resid[j], w: 1.0 }));
            for l in 0..s.len() {
                if j != l {
                    off.push((i, Point2 { s: s.times[j], t: s.times[l], z: resid[j] * resid[l], w: 1.0 }));
                }
            }
        }
    }

    let (h_surface, surface_cv, h_diag, diagonal_cv) = match bandwidths {
        Some((hs, hd)) => (hs, Vec::new(), hd, Vec::new()),
        None => {
            let folds = config.cv_folds.min(data.len());
            let candidates: Vec<f64> = config.bandwidth_fractions.iter().map(|f| f * width).collect();
            let (hs, scv) = cv_bandwidth(
                &off,
                &candidates,
                folds,
                bin2,
                |train, p, h| local_linear_2d(train, p.s, p.t, h),
                |p| (p.z, p.w),
            );
            let (hd, dcv) = cv_bandwidth(
                &diag,
                &candidates,
                folds,
                bin1,
                |train, p, h| local_linear_1d(train, p.t, h),
                |p| (p.z, p.w),
            );
            (hs, scv, hd, dcv)
        }
    };

    let off_all = bin2(off.into_iter().map(|(_, p)| p).collect());
    let diag_all = bin1(diag.into_iter().map(|(_, p)| p).collect());
    let g = grid.len();
    let upper: Vec<Vec<f64>> = (0..g)
        .into_par_iter()
        .map(|a| (a..g).map(|b| local_linear_2d(&off_all, grid[a], grid[b], h_surface)).collect())
        .collect();
    let mut surface = vec![vec![0.0; g]; g];
    for a in 0..g {
        for b in a..g {
            let v = upper[a][b - a];
            if !v.is_finite() {
                return Err(Error::SparseCoverage { gap, allowed });
            }
            surface[a][b] = v;
            surface[b][a] = v;
        }
    }
    let diagonal_smooth: Vec<f64> = grid.iter().map(|&t| local_linear_1d(&diag_all, t, h_diag)).collect();
    if diagonal_smooth.iter().any(|v| !v.is_finite()) {
        return Err(Error::SparseCoverage { gap, allowed });
    }

    // σ² over the central part of the domain.
    let margin = 0.5 * (1.0 - config.central_fraction) * width;
    let (c_lo, c_hi) = (lo + margin, hi - margin);
    let central: Vec<usize> = (0..g).filter(|&i| grid[i] >= c_lo - 1e-12 && grid[i] <= c_hi + 1e-12).collect();
    let central_mean = |f: &dyn Fn(usize) -> f64| -> f64 {
        if central.len() >= 2 {
            let sub_grid: Vec<f64> = central.iter().map(|&i| grid[i]).collect();
            let w = trapezoid_weights(&sub_grid);
            let len: f64 = w.iter().sum();
            central.iter().zip(&w).map(|(&i, wi)| wi * f(i)).sum::<f64>() / len
        } else {
            f(g / 2)
        }
    };
    let raw_sigma2 = central_mean(&|i| diagonal_smooth[i] - surface[i][i]);
    // A vanishing noise estimate makes the score solve amplify noise.
    let sigma2_floor = config.sigma2_floor_fraction * central_mean(&|i| diagonal_smooth[i]).max(0.0);
    let sigma2 = raw_sigma2.max(sigma2_floor).max(0.0);

    // Eigenpairs of the weighted surface.
    let cov = DMatrix::from_fn(g, g, |a, b| surface[a][b]);
    let eig = quadrature_eigen(&cov, &weights);
    let lead = eig.values[0].max(0.0);
    let keep = eig
        .values
        .iter()
        .take_while(|v| **v > 0.0 && **v > 1e-10 * lead)
        .count()
        .clamp(1, g);
    let mut eigenvalues: Vec<f64> = eig.values[..keep].to_vec();
    eigenvalues.iter_mut().for_each(|v| *v = v.max(0.0));
    clamp_eigenvalues(&mut eigenvalues)?;
    let eigenfunctions: Vec<Vec<f64>> = eig.functions.into_iter().take(keep).collect();

    let mut model = PaceModel::from_parts(grid, mean, eigenvalues, eigenfunctions, sigma2, None)?;
    model.diagnostics = PaceDiagnostics {
        mean_lambda: selection.lambda,
        surface_bandwidth: h_surface,
        surface_cv,
        diagonal_bandwidth: h_diag,
        diagonal_cv,
        raw_sigma2,
        sigma2_floor,
        diagonal_smooth,
        smoothed_surface: surface,
        ..Default::default()
    };
    Ok(model)
}

/// First index within `tol` of the minimum.
fn argmin_first(v: &[f64], tol: f64) -> usize {
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    v.iter().position(|x| *x <= min + tol).unwrap_or(0)
}

/// Rounding-level tolerance for comparing leave-one-out errors.
fn loocv_tolerance(data: &[PlayerSeries]) -> f64 {
    1e-12 * data.iter().filter(|s| s.len() >= 2).flat_map(|s| s.values.iter()).map(|y| y * y).sum::<f64>()
}

/// Residual vector and solve `Σ_i x = y_i - μ_i`, returning `x` and the
/// per-component design `ψ_k(t_ij)` for `k < j`.
struct SubjectSolve {
    x: DVector<f64>,
    psi: Vec<Vec<f64>>,
    ridge_repaired: bool,
    condition: f64,
}

fn solve_subject(model: &PaceModel, times: &[f64], values: &[f64], j: usize) -> Result<SubjectSolve> {
    let n = times.len();
    for &t in times {
        model.check(t)?;
    }
    let resid = DVector::from_iterator(
        n,
        times.iter().zip(values).map(|(t, y)| y - interpolate(&model.grid, &model.mean, *t)),
    );
    let psi: Vec<Vec<f64>> = (0..j)
        .map(|k| times.iter().map(|&t| interpolate(&model.grid, &model.eigenfunctions[k], t)).collect())
        .collect();
    let mut sigma = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            let v = model.covariance_at(times[a], times[b])?;
            sigma[(a, b)] = v;
            sigma[(b, a)] = v;
        }
        sigma[(a, a)] += model.sigma2;
    }
    let ev = sigma.clone().symmetric_eigen().eigenvalues;
    let max_abs = ev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min_ev = ev.iter().copied().fold(f64::INFINITY, f64::min);
    let condition = if min_ev > 0.0 { max_abs / min_ev } else { f64::INFINITY };
    let mut ridge_repaired = false;
    if !(condition <= 1e12) {
        let trace = sigma.trace();
        let jitter = if trace > 0.0 { 1e-8 * trace / n as f64 } else { 1e-8 };
        for a in 0..n {
            sigma[(a, a)] += jitter;
        }
        ridge_repaired = true;
    }
    let x = match sigma.clone().cholesky() {
        Some(ch) => ch.solve(&resid),
        None => sigma
            .lu()
            .solve(&resid)
            .ok_or_else(|| Error::NumericalError("subject covariance is singular".into()))?,
    };
    Ok(SubjectSolve { x, psi, ridge_repaired, condition })
}

/// `ξ_k = λ_k ψ_ik' Σ_i^{-1} (y_i - μ_i)` for `k = 1..J`, with diagnostics.
pub fn conditional_scores_detailed(model: &PaceModel, series: &PlayerSeries, j: usize) -> Result<ScorePrediction> {
    series.validate()?;
    if j == 0 || j > model.num_components() {
        return Err(Error::InvalidArgument(format!(
            "J must be in 1..={}, got {j}",
            model.num_components()
        )));
    }
    let solved = solve_subject(model, &series.times, &series.values, j)?;
    let scores = (0..j)
        .map(|k| model.eigenvalues[k] * solved.psi[k].iter().zip(solved.x.iter()).map(|(p, x)| p * x).sum::<f64>())
        .collect();
    Ok(ScorePrediction {
        scores,
        ridge_repaired: solved.ridge_repaired,
        condition: solved.condition,
    })
}

/// Best linear predictor of the first `j` scores given the subject's data.
pub fn conditional_scores(model: &PaceModel, series: &PlayerSeries, j: usize) -> Result<Vec<f64>> {
    Ok(conditional_scores_detailed(model, series, j)?.scores)
}

/// `μ(t) + Σ_k scores[k] ψ_k(t)` on any grid inside the model domain.
pub fn reconstruct(model: &PaceModel, scores: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    if scores.len() > model.num_components() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for a model with {} components",
            scores.len(),
            model.num_components()
        )));
    }
    grid.iter()
        .map(|&t| {
            model.check(t)?;
            let w = cubic_weights(&model.grid, t);
            let at = |v: &[f64]| -> f64 { w.iter().map(|(i, c)| c * v[*i]).sum() };
            let mut v = at(&model.mean);
            for (s, psi) in scores.iter().zip(&model.eigenfunctions) {
                v += s * at(psi);
            }
            Ok(v)
        })
        .collect()
}

/// Total leave-one-observation-out squared prediction error for
/// `J = 1..=j_max`.
pub fn loocv_errors(model: &PaceModel, data: &[PlayerSeries], j_max: usize) -> Result<Vec<f64>> {
    if j_max == 0 || j_max > model.num_components() {
        return Err(Error::InvalidArgument(format!(
            "J_max must be in 1..={}, got {j_max}",
            model.num_components()
        )));
    }
    if data.iter().all(|s| s.len() < 2) {
        return Err(Error::CvUndefined);
    }
    loo_errors_padded(model, data, j_max)
}

/// As `loocv_errors`, but orders beyond the model's component count reuse
/// the error at the full count.
fn loo_errors_padded(model: &PaceModel, data: &[PlayerSeries], j_max: usize) -> Result<Vec<f64>> {
    let rows = loo_observation_errors(model, data, j_max)?;
    Ok(column_sums(&rows, j_max))
}

fn column_sums(rows: &[Vec<f64>], j_max: usize) -> Vec<f64> {
    let mut total = vec![0.0; j_max];
    for r in rows {
        for (t, v) in total.iter_mut().zip(r) {
            *t += v;
        }
    }
    total
}

/// Squared leave-one-out prediction error of every observation (rows) for
/// each order `1..=j_max` (columns).
fn loo_observation_errors(model: &PaceModel, data: &[PlayerSeries], j_max: usize) -> Result<Vec<Vec<f64>>> {
    let usable = j_max.min(model.num_components());
    let per_subject: Vec<Vec<Vec<f64>>> = data
        .par_iter()
        .filter(|s| s.len() >= 2)
        .map(|s| {
            let mut rows = Vec::with_capacity(s.len());
            for hold in 0..s.len() {
                let times: Vec<f64> = (0..s.len()).filter(|&i| i != hold).map(|i| s.times[i]).collect();
                let values: Vec<f64> = (0..s.len()).filter(|&i| i != hold).map(|i| s.values[i]).collect();
                let solved = solve_subject(model, &times, &values, usable)?;
                let t0 = s.times[hold];
                let mut pred = interpolate(&model.grid, &model.mean, t0);
                let mut row = vec![0.0; j_max];
                for (k, e) in row.iter_mut().enumerate() {
                    if k < usable {
                        let xi = model.eigenvalues[k]
                            * solved.psi[k].iter().zip(solved.x.iter()).map(|(p, x)| p * x).sum::<f64>();
                        pred += xi * interpolate(&model.grid, &model.eigenfunctions[k], t0);
                    }
                    let r = s.values[hold] - pred;
                    *e = r * r;
                }
                rows.push(row);
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_subject.into_iter().flatten().collect())
}

/// Standard error of the total-error difference between each order and
/// the best one, from paired per-observation differences.
fn paired_standard_errors(rows: &[Vec<f64>], totals: &[f64]) -> Vec<f64> {
    let best = argmin_first(totals, 0.0);
    let n = rows.len() as f64;
    (0..totals.len())
        .map(|j| {
            if n < 2.0 {
                return 0.0;
            }
            let d: Vec<f64> = rows.iter().map(|r| r[j] - r[best]).collect();
            let mean = d.iter().sum::<f64>() / n;
            let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (n * var).sqrt()
        })
        .collect()
}

/// Pick the order from CV totals: the argmin, or the smallest order within
/// one standard error of it. Rounding-level ties go to the smaller order.
fn choose_order(totals: &[f64], se: &[f64], rule: JRule, tol: f64) -> usize {
    let best = argmin_first(totals, tol);
    match rule {
        JRule::Argmin => best + 1,
        JRule::OneStandardError => {
            totals
                .iter()
                .zip(se)
                .position(|(t, s)| *t <= totals[best] + s + tol)
                .unwrap_or(best)
                + 1
        }
    }
}

/// Truncation order minimizing leave-one-out prediction error; ties go to
/// the smaller order.
#[allow(non_snake_case)]
pub fn select_J_loocv(model: &PaceModel, data: &[PlayerSeries], j_max: usize) -> Result<usize> {
    let errors = loocv_errors(model, data, j_max)?;
    Ok(argmin_first(&errors, loocv_tolerance(data)) + 1)
}
