//! Two-group permutation test on component scores, plus the classical tests
//! used to describe clusters (Welch t, Pearson chi-square, Bonferroni).

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng};
use crate::special::{chi_square_sf, student_t_cdf, student_t_sf};

/// Replication count used by the reference analysis.
pub const DEFAULT_REPLICATIONS: usize = 5000;

/// Pooled sizes at or below this are enumerated exactly by default.
pub const DEFAULT_EXACT_THRESHOLD: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermTestResult {
    pub observed_t: f64,
    pub null_sample: Vec<f64>,
    pub p_value: f64,
    pub replications: usize,
    pub seed: u64,
    /// Null sample is the full set of relabelings rather than random draws.
    pub exact: bool,
    /// `p` counts `T' > T` instead of `T' >= T`.
    pub strict: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PermTestOptions {
    pub replications: usize,
    pub seed: u64,
    pub strict: bool,
    /// Enumerate all relabelings when the pooled size is at most this.
    pub exact_threshold: usize,
}

impl Default for PermTestOptions {
    fn default() -> Self {
        Self {
            replications: DEFAULT_REPLICATIONS,
            seed: 0,
            strict: false,
            exact_threshold: DEFAULT_EXACT_THRESHOLD,
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `|mean(P) - mean(Q)|`.
#[allow(non_snake_case)]
pub fn statistic_T(p_scores: &[f64], q_scores: &[f64]) -> Result<f64> {
    if p_scores.is_empty() || q_scores.is_empty() {
        return Err(Error::EmptyGroup);
    }
    Ok((mean(p_scores) - mean(q_scores)).abs())
}

/// Pooled rows and the group sizes; rows may be multi-dimensional.
struct Pool {
    rows: Vec<Vec<f64>>,
    n: usize,
    total: Vec<f64>,
    eps: f64,
}

impl Pool {
    fn new(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<Self> {
        if p.is_empty() || q.is_empty() {
            return Err(Error::EmptyGroup);
        }
        let dim = p[0].len();
        if dim == 0 || p.iter().chain(q).any(|r| r.len() != dim) {
            return Err(Error::InvalidArgument("score rows must share one non-zero dimension".into()));
        }
        let rows: Vec<Vec<f64>> = p.iter().chain(q).cloned().collect();
        let mut total = vec![0.0; dim];
        for r in &rows {
            for (t, v) in total.iter_mut().zip(r) {
                *t += v;
            }
        }
        let n_all = rows.len() as f64;
        let spread = rows
            .iter()
            .flat_map(|r| r.iter().zip(&total).map(move |(v, t)| (v - t / n_all).abs()))
            .fold(0.0, f64::max);
        Ok(Self {
            rows,
            n: p.len(),
            total,
            eps: 1e-10 * spread,
        })
    }

    fn m(&self) -> usize {
        self.rows.len() - self.n
    }

    /// Statistic for the labelling that puts `first` in group P.
    fn statistic<I: Iterator<Item = usize>>(&self, first: I) -> f64 {
        let mut sum = vec![0.0; self.total.len()];
        for i in first {
            for (s, v) in sum.iter_mut().zip(&self.rows[i]) {
                *s += v;
            }
        }
        let (n, m) = (self.n as f64, self.m() as f64);
        sum.iter()
            .zip(&self.total)
            .map(|(s, t)| {
                let d = s / n - (t - s) / m;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    fn exceeds(&self, t_perm: f64, observed: f64, strict: bool) -> bool {
        if strict {
            t_perm > observed + self.eps
        } else {
            t_perm >= observed - self.eps
        }
    }
}

/// Permutation test of `|mean(P) - mean(Q)|` on scalar scores.
pub fn permutation_test(p_scores: &[f64], q_scores: &[f64], replications: usize, seed: u64) -> Result<PermTestResult> {
    let options = PermTestOptions {
        replications,
        seed,
        ..PermTestOptions::default()
    };
    permutation_test_with(p_scores, q_scores, &options)
}

pub fn permutation_test_with(p_scores: &[f64], q_scores: &[f64], options: &PermTestOptions) -> Result<PermTestResult> {
    let p: Vec<Vec<f64>> = p_scores.iter().map(|v| vec![*v]).collect();
    let q: Vec<Vec<f64>> = q_scores.iter().map(|v| vec![*v]).collect();
    permutation_test_multi(&p, &q, options)
}

/// Multi-component variant: the statistic is the Euclidean norm of the
/// difference of group mean score vectors. With one component it reduces to
/// the scalar test.
pub fn permutation_test_multi(p: &[Vec<f64>], q: &[Vec<f64>], options: &PermTestOptions) -> Result<PermTestResult> {
    let pool = Pool::new(p, q)?;
    let n_all = pool.rows.len();
    let observed = pool.statistic(0..pool.n);

    let (null_sample, exact) = if n_all <= options.exact_threshold {
        (enumerate_relabelings(&pool), true)
    } else {
        if options.replications == 0 {
            return Err(Error::InvalidArgument("replications must be at least 1".into()));
        }
        let sample = (0..options.replications)
            .into_par_iter()
            .map(|rep| {
                let mut rng = stream_rng(options.seed, stream::PERMUTATION, rep as u64);
                let mut idx: Vec<usize> = (0..n_all).collect();
                idx.shuffle(&mut rng);
                pool.statistic(idx[..pool.n].iter().copied())
            })
            .collect::<Vec<_>>();
        (sample, false)
    };
    let hits = null_sample
        .iter()
        .filter(|t| pool.exceeds(**t, observed, options.strict))
        .count();
    let replications = null_sample.len();
    Ok(PermTestResult {
        observed_t: observed,
        p_value: hits as f64 / replications as f64,
        null_sample,
        replications,
        seed: options.seed,
        exact,
        strict: options.strict,
    })
}

/// Statistic for every size-`n` subset assigned to P, in lexicographic order.
fn enumerate_relabelings(pool: &Pool) -> Vec<f64> {
    let n_all = pool.rows.len();
    let k = pool.n;
    let mut out = Vec::new();
    let mut comb: Vec<usize> = (0..k).collect();
    loop {
        out.push(pool.statistic(comb.iter().copied()));
        // next combination
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if comb[i] < n_all - k + i {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        comb[i] += 1;
        for j in i + 1..k {
            comb[j] = comb[j - 1] + 1;
        }
    }
}

/// Equal-width histogram `(bin_lo, bin_hi, count)` of a null sample.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + width * i as f64, lo + width * (i + 1) as f64, c))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    TwoSided,
    /// Mean of the first sample exceeds the second.
    Greater,
    Less,
}

impl std::str::FromStr for Alternative {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-sided" | "two_sided" => Ok(Self::TwoSided),
            "greater" => Ok(Self::Greater),
            "less" => Ok(Self::Less),
            other => Err(Error::InvalidArgument(format!("unknown alternative {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub df: f64,
    pub p_value: f64,
    pub alternative: Alternative,
}

fn sample_variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

/// Welch's unequal-variance two-sample t-test.
pub fn t_test(a: &[f64], b: &[f64], alternative: Alternative) -> Result<TestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InsufficientData("t-test needs at least 2 values per group".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (sample_variance(a) / na, sample_variance(b) / nb);
    let se2 = va + vb;
    let diff = ma - mb;
    let (statistic, df) = if se2 > 0.0 {
        let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
        (diff / se2.sqrt(), df)
    } else if diff == 0.0 {
        (0.0, na + nb - 2.0)
    } else {
        (diff.signum() * f64::INFINITY, na + nb - 2.0)
    };
    let p_value = match alternative {
        Alternative::TwoSided if statistic == 0.0 => 1.0,
        Alternative::TwoSided => (2.0 * student_t_sf(statistic.abs(), df)).min(1.0),
        Alternative::Greater => student_t_sf(statistic, df),
        Alternative::Less => student_t_cdf(statistic, df),
    };
    Ok(TestResult {
        statistic,
        df,
        p_value,
        alternative,
    })
}

/// Pearson chi-square test of independence on an `R x C` table of counts.
pub fn chi_square_independence(table: &[Vec<f64>]) -> Result<TestResult> {
    let r = table.len();
    let c = table.first().map_or(0, Vec::len);
    if r < 2 || c < 2 || table.iter().any(|row| row.len() != c) {
        return Err(Error::InvalidArgument("table must be rectangular and at least 2 x 2".into()));
    }
    if table.iter().flatten().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("counts must be finite and non-negative".into()));
    }
    let rows: Vec<f64> = table.iter().map(|row| row.iter().sum()).collect();
    let cols: Vec<f64> = (0..c).map(|j| table.iter().map(|row| row[j]).sum()).collect();
    if rows.iter().chain(&cols).any(|s| *s <= 0.0) {
        return Err(Error::ZeroMargin);
    }
    let total: f64 = rows.iter().sum();
    let mut stat = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, o) in row.iter().enumerate() {
            let e = rows[i] * cols[j] / total;
            stat += (o - e) * (o - e) / e;
        }
    }
    let df = ((r - 1) * (c - 1)) as f64;
    Ok(TestResult {
        statistic: stat,
        df,
        p_value: chi_square_sf(stat, df),
        alternative: Alternative::Greater,
    })
}

/// Per-test level for `m` simultaneous tests.
pub fn bonferroni(alpha: f64, m: usize) -> Result<f64> {
    if m == 0 || !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("need 0 < alpha < 1 and m >= 1, got ({alpha}, {m})")));
    }
    Ok(alpha / m as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn statistic_examples() {
        assert_eq!(statistic_T(&[1.0, 2.0, 3.0], &[4.0, 5.0]).unwrap(), 2.5);
        assert_eq!(statistic_T(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(matches!(statistic_T(&[], &[1.0]), Err(Error::EmptyGroup)));
    }

    #[test]
    fn degenerate_pool_has_p_one() {
        let opts = PermTestOptions { replications: 200, seed: 1, exact_threshold: 0, ..Default::default() };
        let r = permutation_test_with(&[3.0; 6], &[3.0; 7], &opts).unwrap();
        assert_eq!(r.observed_t, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.null_sample.len(), 200);
    }

    #[test]
    fn exact_small_pool() {
        let r = permutation_test(&[0.0, 0.0], &[10.0, 10.0], 100, 5).unwrap();
        assert!(r.exact);
        assert_eq!(r.replications, 6);
        assert!((r.p_value - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn strict_mode_excludes_ties() {
        let opts = PermTestOptions { strict: true, ..Default::default() };
        let r = permutation_test_with(&[0.0, 0.0], &[10.0, 10.0], &opts).unwrap();
        assert_eq!(r.p_value, 0.0);
    }

    #[test]
    fn multi_with_one_component_matches_scalar() {
        let p = [0.3, -1.2, 0.8, 2.2, 0.1, 0.0];
        let q = [1.5, 1.1, -0.4, 2.9, 1.0, 0.7, 0.3];
        let opts = PermTestOptions { replications: 300, seed: 9, exact_threshold: 0, ..Default::default() };
        let a = permutation_test_with(&p, &q, &opts).unwrap();
        let pm: Vec<Vec<f64>> = p.iter().map(|v| vec![*v]).collect();
        let qm: Vec<Vec<f64>> = q.iter().map(|v| vec![*v]).collect();
        let b = permutation_test_multi(&pm, &qm, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn welch_textbook() {
        let r = t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &[3.0, 4.0, 5.0, 6.0, 7.0], Alternative::TwoSided).unwrap();
        assert!((r.statistic + 2.0).abs() < 1e-12);
        assert!((r.df - 8.0).abs() < 1e-12);
        assert!((r.p_value - 0.0805).abs() < 1e-4);
        let less = t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &[3.0, 4.0, 5.0, 6.0, 7.0], Alternative::Less).unwrap();
        assert!((less.p_value - r.p_value / 2.0).abs() < 1e-12);
    }

    #[test]
    fn identical_samples() {
        let a = [2.0, 4.0, 9.0];
        let r = t_test(&a, &a, Alternative::TwoSided).unwrap();
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));
        let c = t_test(&[1.0, 1.0], &[1.0, 1.0, 1.0], Alternative::TwoSided).unwrap();
        assert_eq!((c.statistic, c.p_value), (0.0, 1.0));
    }

    #[test]
    fn chi_square_examples() {
        let r = chi_square_independence(&[vec![10.0, 10.0], vec![10.0, 10.0]]).unwrap();
        assert_eq!((r.statistic, r.df), (0.0, 1.0));
        assert!((r.p_value - 1.0).abs() < 1e-15);
        let r = chi_square_independence(&[vec![20.0, 0.0], vec![0.0, 20.0]]).unwrap();
        assert!((r.statistic - 40.0).abs() < 1e-12);
        assert!(r.p_value < 1e-9);
        assert!(matches!(
            chi_square_independence(&[vec![0.0, 0.0], vec![1.0, 2.0]]),
            Err(Error::ZeroMargin)
        ));
    }

    #[test]
    fn bonferroni_examples() {
        assert!((bonferroni(0.05, 39).unwrap() - 0.05 / 39.0).abs() < 1e-18);
        assert_eq!(bonferroni(0.05, 1).unwrap(), 0.05);
        assert!((bonferroni(0.10, 5).unwrap() - 0.02).abs() < 1e-17);
        assert!(bonferroni(0.05, 0).is_err());
    }

    #[test]
    fn histogram_counts_everything() {
        let h = histogram(&[0.0, 0.1, 0.5, 0.9, 1.0], 4);
        assert_eq!(h.iter().map(|b| b.2).sum::<usize>(), 5);
        assert_eq!(h[3].2, 2);
    }

    proptest! {
        #[test]
        fn statistic_symmetric(p in proptest::collection::vec(-10.0f64..10.0, 1..10),
                               q in proptest::collection::vec(-10.0f64..10.0, 1..10)) {
            prop_assert_eq!(statistic_T(&p, &q).unwrap(), statistic_T(&q, &p).unwrap());
        }

        #[test]
        fn p_value_on_lattice(seed in 0u64..1000) {
            let p: Vec<f64> = (0..8).map(|i| (i as f64 * 1.37 + seed as f64).sin()).collect();
            let q: Vec<f64> = (0..9).map(|i| (i as f64 * 0.91).cos()).collect();
            let opts = PermTestOptions { replications: 97, seed, exact_threshold: 0, ..Default::default() };
            let r = permutation_test_with(&p, &q, &opts).unwrap();
            let scaled = r.p_value * 97.0;
            prop_assert!((scaled - scaled.round()).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&r.p_value));
        }

        #[test]
        fn affine_invariance(scale in 0.01f64..100.0, shift in -50.0f64..50.0, seed in 0u64..100) {
            let p: Vec<f64> = (0..7).map(|i| (i as f64 * 2.1).sin()).collect();
            let q: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).cos() + 0.3).collect();
            let opts = PermTestOptions { replications: 150, seed, exact_threshold: 0, ..Default::default() };
            let a = permutation_test_with(&p, &q, &opts).unwrap();
            let tp: Vec<f64> = p.iter().map(|v| v * scale + shift).collect();
            let tq: Vec<f64> = q.iter().map(|v| v * scale + shift).collect();
            let b = permutation_test_with(&tp, &tq, &opts).unwrap();
            prop_assert_eq!(a.p_value, b.p_value);
        }
    }
}
