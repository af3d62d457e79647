//! k-means on component scores and cluster-count selection against a
//! column-permutation null.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{split_seed, stream, stream_rng};

pub const MAX_ITERATIONS: usize = 300;
pub const DEFAULT_RESTARTS: usize = 25;
pub const DEFAULT_RUNS: usize = 250;
const GAP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansResult {
    pub assignments: Vec<usize>,
    pub centroids: DMatrix<f64>,
    pub sse: f64,
    pub iterations: usize,
    /// SSE after each Lloyd iteration.
    pub sse_trace: Vec<f64>,
}

fn sq_dist(points: &DMatrix<f64>, i: usize, centroids: &DMatrix<f64>, c: usize) -> f64 {
    (0..points.ncols()).map(|j| (points[(i, j)] - centroids[(c, j)]).powi(2)).sum()
}

fn nearest(points: &DMatrix<f64>, i: usize, centroids: &DMatrix<f64>) -> (usize, f64) {
    let mut best = (0, sq_dist(points, i, centroids, 0));
    for c in 1..centroids.nrows() {
        let d = sq_dist(points, i, centroids, c);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn sse_of(points: &DMatrix<f64>, assignments: &[usize], centroids: &DMatrix<f64>) -> f64 {
    assignments.iter().enumerate().map(|(i, &c)| sq_dist(points, i, centroids, c)).sum()
}

fn kmeans_pp(points: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let (n, d) = points.shape();
    let mut centroids = DMatrix::<f64>::zeros(k, d);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from(&points.row(first));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(points, i, &centroids, 0)).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, w) in dist.iter().enumerate() {
                if target < *w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from(&points.row(pick));
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(points, i, &centroids, c));
        }
    }
    centroids
}

/// Lloyd iterations from the given centroids.
fn lloyd(points: &DMatrix<f64>, mut centroids: DMatrix<f64>) -> KmeansResult {
    let (n, d) = points.shape();
    let k = centroids.nrows();
    let mut assignments: Vec<usize> = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        let next: Vec<usize> = (0..n).map(|i| nearest(points, i, &centroids).0).collect();
        if next == assignments {
            break;
        }
        assignments = next;
        iterations += 1;

        let mut counts = vec![0usize; k];
        let mut sums = DMatrix::<f64>::zeros(k, d);
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            for j in 0..d {
                sums[(c, j)] += points[(i, j)];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centroids[(c, j)] = sums[(c, j)] / counts[c] as f64;
                }
            }
        }
        // Empty clusters take the point farthest from its centroid among
        // clusters that can spare one.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[assignments[i]] > 1)
                .map(|i| (i, sq_dist(points, i, &centroids, assignments[i])))
                .fold(None, |best: Option<(usize, f64)>, cur| match best {
                    Some(b) if b.1 >= cur.1 => Some(b),
                    _ => Some(cur),
                });
            if let Some((i, _)) = far {
                let old = assignments[i];
                counts[old] -= 1;
                counts[c] = 1;
                assignments[i] = c;
                centroids.row_mut(c).copy_from(&points.row(i));
                let members: Vec<usize> = (0..n).filter(|&p| assignments[p] == old).collect();
                for j in 0..d {
                    centroids[(old, j)] = members.iter().map(|&p| points[(p, j)]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        trace.push(sse_of(points, &assignments, &centroids));
    }
    let sse = sse_of(points, &assignments, &centroids);
    KmeansResult {
        assignments,
        centroids,
        sse,
        iterations,
        sse_trace: trace,
    }
}

fn check_k(points: &DMatrix<f64>, k: usize) -> Result<()> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::InvalidK { k, n });
    }
    Ok(())
}

/// Best of `restarts` k-means++ seeded Lloyd runs. Restart `r` draws from
/// its own stream derived from `seed`, so results do not depend on thread
/// scheduling.
pub fn kmeans(points: &DMatrix<f64>, k: usize, restarts: usize, seed: u64) -> Result<KmeansResult> {
    check_k(points, k)?;
    if restarts == 0 {
        return Err(Error::InvalidArgument("restarts must be >= 1".into()));
    }
    let runs: Vec<KmeansResult> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, stream::KMEANS_RESTART, r as u64);
            lloyd(points, kmeans_pp(points, k, &mut rng))
        })
        .collect();
    Ok(best_of(runs))
}

fn best_of(runs: Vec<KmeansResult>) -> KmeansResult {
    runs.into_iter()
        .reduce(|a, b| if b.sse < a.sse { b } else { a })
        .expect("at least one run")
}

/// k-means for each `k` in ascending `k_range`. For consecutive orders the
/// restarts also compete with a warm start from the previous centroids plus
/// the worst-fit point, which keeps the SSE non-increasing in `k`.
fn kmeans_path(points: &DMatrix<f64>, k_range: &[usize], restarts: usize, seed: u64) -> Result<Vec<KmeansResult>> {
    let mut out: Vec<KmeansResult> = Vec::with_capacity(k_range.len());
    for (idx, &k) in k_range.iter().enumerate() {
        let mut best = kmeans(points, k, restarts, seed)?;
        if idx > 0 && k_range[idx - 1] + 1 == k {
            let prev = &out[idx - 1];
            let worst = (0..points.nrows())
                .map(|i| (i, sq_dist(points, i, &prev.centroids, prev.assignments[i])))
                .fold((0, f64::NEG_INFINITY), |b, c| if c.1 > b.1 { c } else { b })
                .0;
            let mut init = DMatrix::<f64>::zeros(k, points.ncols());
            init.rows_mut(0, k - 1).copy_from(&prev.centroids);
            init.row_mut(k - 1).copy_from(&points.row(worst));
            let warm = lloyd(points, init);
            if warm.sse < best.sse {
                best = warm;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Permute every column independently across rows.
pub fn permute_columns(points: &DMatrix<f64>, seed: u64) -> DMatrix<f64> {
    let mut out = points.clone();
    for j in 0..points.ncols() {
        let mut rng = stream_rng(seed, stream::NULL_COLUMN, j as u64);
        let mut col: Vec<f64> = points.column(j).iter().copied().collect();
        col.shuffle(&mut rng);
        for (i, v) in col.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullReference {
    pub k_range: Vec<usize>,
    pub min: Vec<f64>,
    pub mean: Vec<f64>,
    /// `values[k_index][run]`.
    pub values: Vec<Vec<f64>>,
}

fn normalize_k_range(points: &DMatrix<f64>, k_range: &[usize]) -> Result<Vec<usize>> {
    if k_range.is_empty() {
        return Err(Error::InvalidArgument("k_range must not be empty".into()));
    }
    let mut ks = k_range.to_vec();
    ks.sort_unstable();
    ks.dedup();
    for &k in &ks {
        check_k(points, k)?;
    }
    Ok(ks)
}

/// SSE of k-means on column-permuted copies of `points`, per `k`, over
/// `runs` independent permutations.
pub fn null_sse_reference(
    points: &DMatrix<f64>,
    k_range: &[usize],
    runs: usize,
    restarts: usize,
    seed: u64,
) -> Result<NullReference> {
    let ks = normalize_k_range(points, k_range)?;
    if runs == 0 {
        return Err(Error::InvalidArgument("runs must be >= 1".into()));
    }
    let per_run: Vec<Vec<f64>> = (0..runs)
        .into_par_iter()
        .map(|r| {
            let run_seed = split_seed(seed, stream::NULL_RUN, r as u64);
            let permuted = permute_columns(points, run_seed);
            Ok(kmeans_path(&permuted, &ks, restarts, run_seed)?.into_iter().map(|f| f.sse).collect())
        })
        .collect::<Result<_>>()?;
    let values: Vec<Vec<f64>> = (0..ks.len()).map(|k| per_run.iter().map(|r| r[k]).collect()).collect();
    Ok(NullReference {
        min: values.iter().map(|v| v.iter().copied().fold(f64::INFINITY, f64::min)).collect(),
        mean: values.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect(),
        k_range: ks,
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    pub selected_k: usize,
    pub gap_min: Vec<f64>,
    pub gap_mean: Vec<f64>,
    /// Argmax of the minimum-based gap.
    pub gap_min_k: usize,
    pub disagreement: bool,
    pub no_structure: bool,
}

fn log_gap(null: f64, actual: f64) -> f64 {
    if null == actual {
        0.0
    } else {
        null.ln() - actual.ln()
    }
}

fn argmax_smallest(k_range: &[usize], gaps: &[f64]) -> usize {
    let max = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let i = gaps.iter().position(|g| *g >= max - GAP_TOL).unwrap_or(0);
    k_range[i]
}

/// Pick `k` maximizing `log(null_mean) - log(actual)`; ties within 1e-9 go
/// to the smallest `k`.
pub fn select_k(actual_sse: &[f64], null_min_sse: &[f64], null_mean_sse: &[f64], k_range: &[usize]) -> Result<KSelection> {
    let n = k_range.len();
    if n == 0 || actual_sse.len() != n || null_min_sse.len() != n || null_mean_sse.len() != n {
        return Err(Error::InvalidArgument("select_k needs aligned, non-empty lists".into()));
    }
    let gap_min: Vec<f64> = null_min_sse.iter().zip(actual_sse).map(|(n, a)| log_gap(*n, *a)).collect();
    let gap_mean: Vec<f64> = null_mean_sse.iter().zip(actual_sse).map(|(n, a)| log_gap(*n, *a)).collect();
    let selected_k = argmax_smallest(k_range, &gap_mean);
    let gap_min_k = argmax_smallest(k_range, &gap_min);
    let no_structure = gap_mean.iter().all(|g| *g <= GAP_TOL);
    Ok(KSelection {
        selected_k,
        disagreement: gap_min_k != selected_k,
        gap_min,
        gap_mean,
        gap_min_k,
        no_structure,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k_range: Vec<usize>,
    pub actual_sse: Vec<f64>,
    pub log_actual_sse: Vec<f64>,
    pub null_min_sse: Vec<f64>,
    pub null_mean_sse: Vec<f64>,
    pub selection: KSelection,
    pub selected_k: usize,
    /// `(subject id, cluster)` for the selected `k`.
    pub assignments: Vec<(String, usize)>,
    pub centroids: Vec<Vec<f64>>,
    pub runs: usize,
    pub restarts: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub k_range: Vec<usize>,
    pub runs: usize,
    pub restarts: usize,
    /// Number of leading score columns to cluster on.
    pub num_pcs: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k_range: (1..=8).collect(),
            runs: DEFAULT_RUNS,
            restarts: DEFAULT_RESTARTS,
            num_pcs: 3,
        }
    }
}

/// Actual and null SSE curves, the selected `k`, and the clustering at it.
pub fn cluster_report(
    points: &DMatrix<f64>,
    ids: &[String],
    k_range: &[usize],
    runs: usize,
    restarts: usize,
    seed: u64,
) -> Result<ClusterReport> {
    if ids.len() != points.nrows() {
        return Err(Error::InvalidArgument("one id per row required".into()));
    }
    let ks = normalize_k_range(points, k_range)?;
    let fits = kmeans_path(points, &ks, restarts.max(1), seed)?;
    let actual: Vec<f64> = fits.iter().map(|f| f.sse).collect();
    let null = null_sse_reference(points, &ks, runs, restarts.max(1), seed)?;
    let selection = select_k(&actual, &null.min, &null.mean, &ks)?;
    let chosen = &fits[ks.iter().position(|k| *k == selection.selected_k).expect("selected from range")];
    Ok(ClusterReport {
        log_actual_sse: actual.iter().map(|v| v.ln()).collect(),
        actual_sse: actual,
        null_min_sse: null.min,
        null_mean_sse: null.mean,
        selected_k: selection.selected_k,
        selection,
        assignments: ids.iter().cloned().zip(chosen.assignments.iter().copied()).collect(),
        centroids: chosen.centroids.row_iter().map(|r| r.iter().copied().collect()).collect(),
        k_range: ks,
        runs,
        restarts,
        seed,
    })
}
