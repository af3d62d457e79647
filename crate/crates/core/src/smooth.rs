//! Penalized regression splines with GCV-selected roughness penalty.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::error::{Error, Result};

/// One subject's repeated measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlayerSeries {
    pub id: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl PlayerSeries {
    pub fn new(id: impl Into<String>, times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let s = Self {
            id: id.into(),
            times,
            values,
            meta: BTreeMap::new(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() {
            return Err(Error::InsufficientData(format!("series {} is empty", self.id)));
        }
        if self.times.len() != self.values.len() {
            return Err(Error::InvalidArgument(format!(
                "series {}: {} times but {} values",
                self.id,
                self.times.len(),
                self.values.len()
            )));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(format!(
                "series {}: times must be strictly increasing",
                self.id
            )));
        }
        if self.times.iter().chain(&self.values).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("series {}: non-finite entry", self.id)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn mean_value(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// A fitted curve: coefficients over a shared basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedCurve {
    pub spec: BasisSpec,
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub subject_id: String,
}

impl SmoothedCurve {
    pub fn new(spec: BasisSpec, coefficients: Vec<f64>, lambda: f64, subject_id: impl Into<String>) -> Result<Self> {
        if coefficients.len() != spec.dimension() {
            return Err(Error::InvalidArgument(format!(
                "{} coefficients for a basis of dimension {}",
                coefficients.len(),
                spec.dimension()
            )));
        }
        Ok(Self {
            spec,
            coefficients,
            lambda,
            subject_id: subject_id.into(),
        })
    }

    pub fn eval(&self, t: f64, deriv_order: usize) -> Result<f64> {
        let b = self.spec.eval(t, deriv_order)?;
        Ok(b.iter().zip(&self.coefficients).map(|(x, c)| x * c).sum())
    }

    pub fn eval_grid(&self, grid: &[f64], deriv_order: usize) -> Result<Vec<f64>> {
        let mut row = vec![0.0; self.spec.dimension()];
        grid.iter()
            .map(|&t| {
                if !self.spec.contains(t) {
                    let (lo, hi) = self.spec.domain();
                    return Err(Error::OutOfDomain { t, lo, hi });
                }
                self.spec.eval_into(t, deriv_order, &mut row);
                Ok(row.iter().zip(&self.coefficients).map(|(x, c)| x * c).sum())
            })
            .collect()
    }

    /// Closure form for the curve summaries.
    pub fn as_fn(&self) -> impl Fn(f64) -> f64 + '_ {
        move |t| {
            let (lo, hi) = self.spec.domain();
            self.eval(t.clamp(lo, hi), 0).expect("clamped into domain")
        }
    }
}

pub fn eval_curve(curve: &SmoothedCurve, grid: &[f64], deriv_order: usize) -> Result<Vec<f64>> {
    curve.eval_grid(grid, deriv_order)
}

/// Result of a single penalized least-squares solve.
#[derive(Debug, Clone)]
pub struct PenalizedFit {
    pub coefficients: Vec<f64>,
    pub sse: f64,
    /// Trace of the hat matrix `B (B'B + λP)^-1 B'`.
    pub trace: f64,
    pub n: usize,
}

impl PenalizedFit {
    pub fn gcv(&self) -> f64 {
        gcv_score(self.n as f64, self.sse, self.trace)
    }
}

pub(crate) fn gcv_score(n: f64, sse: f64, trace: f64) -> f64 {
    let denom = n - trace;
    if denom <= 1e-8 * n {
        f64::INFINITY
    } else {
        n * sse / (denom * denom)
    }
}

/// Precomputed design and penalty root for repeated solves on one dataset.
pub struct PenalizedProblem {
    design: DMatrix<f64>,
    penalty_root: DMatrix<f64>,
    y: DVector<f64>,
}

impl PenalizedProblem {
    /// Points need not be sorted or distinct.
    pub fn new(spec: &BasisSpec, times: &[f64], values: &[f64]) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::InvalidArgument("times and values differ in length".into()));
        }
        let design = spec.design_matrix(times, 0)?;
        Ok(Self {
            design,
            penalty_root: penalty_root(&spec.penalty_matrix()),
            y: DVector::from_column_slice(values),
        })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn solve(&self, lambda: f64) -> Result<PenalizedFit> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        let n = self.design.nrows();
        let j = self.design.ncols();
        // Least squares on [B; sqrt(λ) R] keeps the conditioning at the square
        // root of the normal equations'.
        let mut stacked = DMatrix::zeros(n + j, j);
        stacked.rows_mut(0, n).copy_from(&self.design);
        stacked.rows_mut(n, j).copy_from(&(&self.penalty_root * lambda.sqrt()));
        let svd = stacked.svd(true, true);
        let s = &svd.singular_values;
        let smax = s.max();
        let smin = s.min();
        if !(smax > 0.0) || smin <= smax * 1e-10 {
            return Err(Error::SingularFit(format!(
                "condition estimate {:.3e} at lambda = {lambda}",
                if smin > 0.0 { smax / smin } else { f64::INFINITY }
            )));
        }
        let u = svd.u.as_ref().expect("u requested");
        let vt = svd.v_t.as_ref().expect("v_t requested");
        let mut rhs = DVector::zeros(n + j);
        rhs.rows_mut(0, n).copy_from(&self.y);
        let uty = u.transpose() * rhs;
        let scaled = uty.component_div(s);
        let beta = vt.transpose() * scaled;
        let resid = &self.y - &self.design * &beta;
        let trace = u.rows(0, n).iter().map(|v| v * v).sum();
        Ok(PenalizedFit {
            coefficients: beta.iter().copied().collect(),
            sse: resid.norm_squared(),
            trace,
            n,
        })
    }
}

/// `R` with `R'R = P` for a symmetric PSD `P`.
fn penalty_root(p: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = p.clone().symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let d = eig
        .eigenvalues
        .map(|e| if e > 1e-14 * scale { e.sqrt() } else { 0.0 });
    DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

fn check_series_for_smoothing(series: &PlayerSeries) -> Result<()> {
    series.validate()?;
    if series.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "series {} has {} observation(s); smoothing needs at least 2",
            series.id,
            series.len()
        )));
    }
    Ok(())
}

/// Minimizer of `Σ (y - f(t))² + λ ∫ f''²` over the basis.
pub fn fit_penalized(spec: &BasisSpec, series: &PlayerSeries, lambda: f64) -> Result<SmoothedCurve> {
    check_series_for_smoothing(series)?;
    let fit = PenalizedProblem::new(spec, &series.times, &series.values)?.solve(lambda)?;
    SmoothedCurve::new(spec.clone(), fit.coefficients, lambda, series.id.clone())
}

/// Log-spaced grid of candidate penalties.
pub fn log_grid(min: f64, max: f64, points: usize) -> Vec<f64> {
    let (a, b) = (min.ln(), max.ln());
    crate::quadrature::linspace(a, b, points)
        .into_iter()
        .map(f64::exp)
        .collect()
}

/// Default 61-point grid on `[1e-6, 1e6]`.
pub fn default_lambda_grid() -> Vec<f64> {
    log_grid(1e-6, 1e6, 61)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcvSelection {
    pub lambda: f64,
    pub lambda_grid: Vec<f64>,
    pub gcv: Vec<f64>,
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("lambda grid is empty".into()));
    }
    if let Some(bad) = grid.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda grid entry {bad} is not positive")));
    }
    Ok(())
}

/// Smallest GCV score wins; equal scores go to the smaller lambda.
fn argmin_lambda(grid: &[f64], scores: &[f64]) -> f64 {
    let mut best = 0;
    for i in 1..grid.len() {
        let better = scores[i] < scores[best] || (scores[i] == scores[best] && grid[i] < grid[best]);
        if better {
            best = i;
        }
    }
    grid[best]
}

fn score_or_inf(r: Result<PenalizedFit>) -> Result<f64> {
    match r {
        Ok(fit) => Ok(fit.gcv()),
        Err(Error::SingularFit(_)) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

/// GCV selection for one dataset given as raw points.
pub fn select_lambda_points(spec: &BasisSpec, times: &[f64], values: &[f64], grid: &[f64]) -> Result<GcvSelection> {
    check_grid(grid)?;
    let problem = PenalizedProblem::new(spec, times, values)?;
    let gcv = grid
        .iter()
        .map(|&l| score_or_inf(problem.solve(l)))
        .collect::<Result<Vec<_>>>()?;
    Ok(GcvSelection {
        lambda: argmin_lambda(grid, &gcv),
        lambda_grid: grid.to_vec(),
        gcv,
    })
}

/// `GCV(λ) = n·SSE / (n − tr H)²`, minimized over `grid`.
pub fn select_lambda_gcv(spec: &BasisSpec, series: &PlayerSeries, grid: &[f64]) -> Result<GcvSelection> {
    check_series_for_smoothing(series)?;
    select_lambda_points(spec, &series.times, &series.values, grid)
}

/// One penalty for a whole cohort: pooled `N·ΣSSE / (N − Σ tr H)²`.
pub fn select_lambda_shared(spec: &BasisSpec, cohort: &[PlayerSeries], grid: &[f64]) -> Result<GcvSelection> {
    check_grid(grid)?;
    if cohort.is_empty() {
        return Err(Error::InsufficientData("empty cohort".into()));
    }
    let problems = cohort
        .iter()
        .map(|s| {
            check_series_for_smoothing(s)?;
            PenalizedProblem::new(spec, &s.times, &s.values)
        })
        .collect::<Result<Vec<_>>>()?;
    let n_total: usize = cohort.iter().map(PlayerSeries::len).sum();
    let gcv = grid
        .par_iter()
        .map(|&l| {
            let mut sse = 0.0;
            let mut trace = 0.0;
            for p in &problems {
                match p.solve(l) {
                    Ok(f) => {
                        sse += f.sse;
                        trace += f.trace;
                    }
                    Err(Error::SingularFit(_)) => return Ok(f64::INFINITY),
                    Err(e) => return Err(e),
                }
            }
            Ok(gcv_score(n_total as f64, sse, trace))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GcvSelection {
        lambda: argmin_lambda(grid, &gcv),
        lambda_grid: grid.to_vec(),
        gcv,
    })
}

/// How the roughness penalty is chosen for a cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum LambdaMode {
    Fixed { value: f64 },
    Shared { grid: Vec<f64> },
    PerSubject { grid: Vec<f64> },
}

impl Default for LambdaMode {
    fn default() -> Self {
        LambdaMode::Shared {
            grid: default_lambda_grid(),
        }
    }
}

/// Fit every subject; fits run in parallel and come back in input order.
pub fn smooth_cohort(spec: &BasisSpec, cohort: &[PlayerSeries], mode: &LambdaMode) -> Result<Vec<SmoothedCurve>> {
    let shared = match mode {
        LambdaMode::Fixed { value } => Some(*value),
        LambdaMode::Shared { grid } => Some(select_lambda_shared(spec, cohort, grid)?.lambda),
        LambdaMode::PerSubject { .. } => None,
    };
    cohort
        .par_iter()
        .map(|s| {
            let lambda = match (shared, mode) {
                (Some(l), _) => l,
                (None, LambdaMode::PerSubject { grid }) => select_lambda_gcv(spec, s, grid)?.lambda,
                _ => unreachable!(),
            };
            fit_penalized(spec, s, lambda)
        })
        .collect()
}

/// Subtract the subject's own average from every value.
pub fn demean(series: &PlayerSeries) -> PlayerSeries {
    let m = series.mean_value();
    PlayerSeries {
        id: series.id.clone(),
        times: series.times.clone(),
        values: series.values.iter().map(|v| v - m).collect(),
        meta: series.meta.clone(),
    }
}
