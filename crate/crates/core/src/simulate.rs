//! Synthetic data with known ground truth.
//!
//! Curves follow `μ(t) + Σ_k ξ_k ψ_k(t)` with `μ(u) = 1 + 2u(1-u)` and
//! `ψ_k(t) = sqrt(2/L) sin(kπu)`, where `u = (t - lo)/L` maps the domain to
//! the unit interval. The sine family is orthonormal on the domain and its
//! members integrate to a positive value, so it matches the sign convention
//! of the decompositions.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::linspace;
use crate::rng::{stream, stream_rng};
use crate::smooth::PlayerSeries;

pub fn truth_mean(domain: (f64, f64), t: f64) -> f64 {
    let u = (t - domain.0) / (domain.1 - domain.0);
    1.0 + 2.0 * u * (1.0 - u)
}

/// `k` is zero-based.
pub fn truth_eigenfunction(domain: (f64, f64), k: usize, t: f64) -> f64 {
    let len = domain.1 - domain.0;
    let u = (t - domain.0) / len;
    (2.0 / len).sqrt() * ((k + 1) as f64 * std::f64::consts::PI * u).sin()
}

/// Ground truth written next to simulated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub domain: (f64, f64),
    pub eigenvalues: Vec<f64>,
    pub noise_var: f64,
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub eigenfunctions: Vec<Vec<f64>>,
    pub subject_ids: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl Truth {
    fn new(domain: (f64, f64), eigenvalues: &[f64], noise_var: f64, ids: Vec<String>, scores: Vec<Vec<f64>>) -> Self {
        let grid = linspace(domain.0, domain.1, 101);
        Self {
            domain,
            eigenvalues: eigenvalues.to_vec(),
            noise_var,
            mean: grid.iter().map(|&t| truth_mean(domain, t)).collect(),
            eigenfunctions: (0..eigenvalues.len())
                .map(|k| grid.iter().map(|&t| truth_eigenfunction(domain, k, t)).collect())
                .collect(),
            grid,
            subject_ids: ids,
            scores,
        }
    }

    /// Noise-free curve of subject `i` at `t`.
    pub fn curve(&self, i: usize, t: f64) -> f64 {
        truth_mean(self.domain, t)
            + self.scores[i]
                .iter()
                .enumerate()
                .map(|(k, s)| s * truth_eigenfunction(self.domain, k, t))
                .sum::<f64>()
    }
}

/// Settings for the sparse generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SparseDesign {
    pub subjects: usize,
    pub min_obs: usize,
    pub max_obs: usize,
    pub domain: (f64, f64),
    pub eigenvalues: Vec<f64>,
    pub noise_var: f64,
    /// Added to the first score of every subject in group `B`.
    pub group_shift: f64,
}

impl Default for SparseDesign {
    fn default() -> Self {
        Self {
            subjects: 200,
            min_obs: 3,
            max_obs: 8,
            domain: (0.0, 10.0),
            eigenvalues: vec![2.0],
            noise_var: 0.25,
            group_shift: 0.0,
        }
    }
}

impl SparseDesign {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.subjects < 2 {
            errs.push("simulate.subjects must be >= 2".to_string());
        }
        if self.min_obs == 0 || self.min_obs > self.max_obs {
            errs.push("simulate requires 1 <= min_obs <= max_obs".to_string());
        }
        if !(self.domain.0 < self.domain.1) {
            errs.push("simulate.domain must satisfy lo < hi".to_string());
        }
        if self.eigenvalues.is_empty() || self.eigenvalues.iter().any(|v| !(*v >= 0.0)) {
            errs.push("simulate.eigenvalues must be non-empty and non-negative".to_string());
        }
        if !(self.noise_var >= 0.0) {
            errs.push("simulate.noise_var must be >= 0".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Debug, Clone)]
pub struct SparseSample {
    pub series: Vec<PlayerSeries>,
    pub truth: Truth,
}

/// Subjects with `n_i` uniform on `min_obs..=max_obs`, times uniform on the
/// domain, Gaussian scores and Gaussian noise. Subjects alternate between
/// groups `A` and `B` (stored in the `group` metadata key).
pub fn sparse_sample(design: &SparseDesign, seed: u64) -> Result<SparseSample> {
    design.validate()?;
    let mut rng = stream_rng(seed, stream::SIMULATE, 0);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (lo, hi) = design.domain;
    let noise_sd = design.noise_var.sqrt();
    let mut series = Vec::with_capacity(design.subjects);
    let mut ids = Vec::with_capacity(design.subjects);
    let mut all_scores = Vec::with_capacity(design.subjects);
    for i in 0..design.subjects {
        let group = if i % 2 == 0 { "A" } else { "B" };
        let mut scores: Vec<f64> = design
            .eigenvalues
            .iter()
            .map(|l| l.sqrt() * std_normal.sample(&mut rng))
            .collect();
        if group == "B" {
            scores[0] += design.group_shift;
        }
        let n = rng.random_range(design.min_obs..=design.max_obs);
        let mut times: Vec<f64> = (0..n).map(|_| rng.random_range(lo..=hi)).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        let values: Vec<f64> = times
            .iter()
            .map(|&t| {
                let f = truth_mean(design.domain, t)
                    + scores
                        .iter()
                        .enumerate()
                        .map(|(k, s)| s * truth_eigenfunction(design.domain, k, t))
                        .sum::<f64>();
                f + noise_sd * std_normal.sample(&mut rng)
            })
            .collect();
        let id = format!("s{i:04}");
        series.push(PlayerSeries::new(id.clone(), times, values)?.with_meta("group", group));
        ids.push(id);
        all_scores.push(scores);
    }
    let truth = Truth::new(design.domain, &design.eigenvalues, design.noise_var, ids, all_scores);
    Ok(SparseSample { series, truth })
}

/// Scores with sample mean exactly zero and sample covariance (divisor
/// `N - 1`) exactly `diag(eigenvalues)`.
pub fn balanced_scores(n: usize, eigenvalues: &[f64], seed: u64) -> Result<DMatrix<f64>> {
    let k = eigenvalues.len();
    if n <= k {
        return Err(Error::InsufficientData(format!("need more than {k} subjects, got {n}")));
    }
    let mut rng = stream_rng(seed, stream::SIMULATE, 1);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut x = DMatrix::from_fn(n, k, |_, _| std_normal.sample(&mut rng));
    for mut col in x.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    let q = x.qr().q();
    Ok(DMatrix::from_fn(n, k, |i, j| {
        q[(i, j)] * (eigenvalues[j] * (n - 1) as f64).sqrt()
    }))
}

/// Noiseless curves `μ + Σ ξ_k ψ_k` sampled on `grid`, with balanced
/// scores. Returns the `N × G` matrix and the scores.
pub fn dense_ensemble(
    n: usize,
    grid: &[f64],
    eigenvalues: &[f64],
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let domain = (grid[0], grid[grid.len() - 1]);
    let scores = balanced_scores(n, eigenvalues, seed)?;
    let x = DMatrix::from_fn(n, grid.len(), |i, g| {
        let t = grid[g];
        truth_mean(domain, t)
            + (0..eigenvalues.len())
                .map(|k| scores[(i, k)] * truth_eigenfunction(domain, k, t))
                .sum::<f64>()
    });
    Ok((x, scores))
}

/// Gaussian clusters in `centers.len()` groups of `per_cluster` points.
/// Returns the points (rows) and generating labels.
pub fn clustered_points(centers: &[Vec<f64>], per_cluster: usize, sd: f64, seed: u64) -> (DMatrix<f64>, Vec<usize>) {
    let mut rng = stream_rng(seed, stream::SIMULATE, 2);
    let noise = Normal::new(0.0, sd).expect("finite sd");
    let d = centers[0].len();
    let n = centers.len() * per_cluster;
    let mut labels: Vec<usize> = (0..n).map(|i| i / per_cluster).collect();
    labels.shuffle(&mut rng);
    let mut x = DMatrix::zeros(n, d);
    for (i, &c) in labels.iter().enumerate() {
        for j in 0..d {
            x[(i, j)] = centers[c][j] + noise.sample(&mut rng);
        }
    }
    (x, labels)
}

/// Three centers at the vertices of an equilateral triangle with side
/// `separation` in the first two of three coordinates.
pub fn triangle_centers(separation: f64) -> Vec<Vec<f64>> {
    vec![
        vec![0.0, 0.0, 0.0],
        vec![separation, 0.0, 0.0],
        vec![0.5 * separation, 0.5 * 3f64.sqrt() * separation, 0.0],
    ]
}

/// Two independent normal samples; the second is shifted by `shift`.
pub fn two_groups(n_p: usize, n_q: usize, shift: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = stream_rng(seed, stream::SIMULATE, 3);
    let z = Normal::new(0.0, 1.0).expect("unit normal");
    let p = (0..n_p).map(|_| z.sample(&mut rng)).collect();
    let q = (0..n_q).map(|_| shift + z.sample(&mut rng)).collect();
    (p, q)
}
