//! Functional PCA of curves sharing one basis, computed on a dense grid with
//! trapezoid weights so that grid inner products approximate the L² inner
//! product.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{linspace, trapezoid_weights};
use crate::smooth::SmoothedCurve;

/// Default number of grid points for dense fPCA.
pub const DEFAULT_GRID_SIZE: usize = 201;

/// Cumulative variance fraction used when no component count is given.
pub const DEFAULT_VAREX_TARGET: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpcaModel {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    /// `eigenfunctions[k][g]`, orthonormal under trapezoid quadrature.
    pub eigenfunctions: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// `scores[i][k]`.
    pub scores: Vec<Vec<f64>>,
    pub varex: Vec<f64>,
    pub subject_ids: Vec<String>,
}

impl FpcaModel {
    pub fn num_components(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `μ + Σ_k scores[k] ψ_k` on the model grid.
    pub fn reconstruct(&self, scores: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (s, psi) in scores.iter().zip(&self.eigenfunctions) {
            for (o, p) in out.iter_mut().zip(psi) {
                *o += s * p;
            }
        }
        out
    }

    /// Curves `μ ± multiple·sqrt(λ_k)·ψ_k` for plotting a component's effect.
    pub fn component_display(&self, k: usize, multiple: f64) -> (Vec<f64>, Vec<f64>) {
        let amp = multiple * self.eigenvalues[k].max(0.0).sqrt();
        let plus = self.mean.iter().zip(&self.eigenfunctions[k]).map(|(m, p)| m + amp * p).collect();
        let minus = self.mean.iter().zip(&self.eigenfunctions[k]).map(|(m, p)| m - amp * p).collect();
        (plus, minus)
    }

    /// First `k` columns of the score matrix.
    pub fn leading_scores(&self, k: usize) -> Vec<Vec<f64>> {
        self.scores.iter().map(|row| row[..k.min(row.len())].to_vec()).collect()
    }
}

/// Default dense grid over a curve's basis domain.
pub fn default_grid(curve: &SmoothedCurve) -> Vec<f64> {
    let (lo, hi) = curve.spec.domain();
    linspace(lo, hi, DEFAULT_GRID_SIZE)
}

fn curve_matrix(curves: &[SmoothedCurve], grid: &[f64]) -> Result<DMatrix<f64>> {
    let first = curves
        .first()
        .ok_or_else(|| Error::InsufficientData("no curves supplied".into()))?;
    if curves.iter().any(|c| c.spec != first.spec) {
        return Err(Error::BasisMismatch);
    }
    let rows = curves
        .par_iter()
        .map(|c| c.eval_grid(grid, 0))
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_fn(curves.len(), grid.len(), |i, g| rows[i][g]))
}

fn column_means(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows() as f64;
    (0..x.ncols()).map(|g| x.column(g).sum() / n).collect()
}

/// Pointwise mean of the curves on `grid`.
pub fn mean_curve(curves: &[SmoothedCurve], grid: &[f64]) -> Result<Vec<f64>> {
    Ok(column_means(&curve_matrix(curves, grid)?))
}

/// Pointwise sample variance (divisor `N - 1`).
pub fn variance_curve(curves: &[SmoothedCurve], grid: &[f64]) -> Result<Vec<f64>> {
    if curves.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "variance needs at least 2 curves, got {}",
            curves.len()
        )));
    }
    let x = curve_matrix(curves, grid)?;
    let mean = column_means(&x);
    let denom = (x.nrows() - 1) as f64;
    Ok((0..x.ncols())
        .map(|g| x.column(g).iter().map(|v| (v - mean[g]).powi(2)).sum::<f64>() / denom)
        .collect())
}

/// Eigenpairs of a covariance kernel sampled on a grid, as functions.
pub(crate) struct GridEigen {
    pub values: Vec<f64>,
    pub functions: Vec<Vec<f64>>,
}

/// Eigen-decomposition of `W^½ C W^½` with trapezoid weights `W`; the
/// returned functions are unweighted so that `Σ_g w_g ψ_g² = 1`, sorted by
/// descending eigenvalue and sign-oriented.
pub(crate) fn quadrature_eigen(cov: &DMatrix<f64>, weights: &[f64]) -> GridEigen {
    let g = weights.len();
    let sw: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let mut weighted = DMatrix::from_fn(g, g, |r, c| sw[r] * cov[(r, c)] * sw[c]);
    weighted = (&weighted + weighted.transpose()) * 0.5;
    let eig = weighted.symmetric_eigen();
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut values = Vec::with_capacity(g);
    let mut functions = Vec::with_capacity(g);
    for idx in order {
        values.push(eig.eigenvalues[idx]);
        let v = eig.eigenvectors.column(idx);
        let mut psi: Vec<f64> = (0..g).map(|r| v[r] / sw[r]).collect();
        orient(&mut psi, weights);
        functions.push(psi);
    }
    GridEigen { values, functions }
}

/// Flip so `∫ψ > 0`; near-zero integrals fall back to the largest-magnitude
/// entry being positive.
pub(crate) fn orient(psi: &mut [f64], weights: &[f64]) -> bool {
    let integral: f64 = psi.iter().zip(weights).map(|(p, w)| p * w).sum();
    let flip = if integral.abs() >= 1e-10 {
        integral < 0.0
    } else {
        let big = psi
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        big < 0.0
    };
    if flip {
        psi.iter_mut().for_each(|p| *p = -*p);
    }
    flip
}

/// Clamp eigenvalues in `[-tol, 0)` to zero; anything below is an error.
pub(crate) fn clamp_eigenvalues(values: &mut [f64]) -> Result<()> {
    let scale = values.first().copied().unwrap_or(0.0).abs().max(1.0);
    let tol = 1e-10 * scale;
    for v in values.iter_mut() {
        if *v < -tol {
            return Err(Error::NumericalError(format!(
                "covariance eigenvalue {v:.3e} is significantly negative"
            )));
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(())
}

/// Dense fPCA of curves on `grid`. With `num_components = None` the smallest
/// count reaching 99% cumulative variance is used.
pub fn fpca_decompose(curves: &[SmoothedCurve], grid: &[f64], num_components: Option<usize>) -> Result<FpcaModel> {
    let x = curve_matrix(curves, grid)?;
    let ids = curves.iter().map(|c| c.subject_id.clone()).collect();
    fpca_from_matrix(&x, grid, num_components, ids)
}

/// Dense fPCA of an `N x G` matrix of curve values on `grid`.
pub fn fpca_from_matrix(
    x: &DMatrix<f64>,
    grid: &[f64],
    num_components: Option<usize>,
    subject_ids: Vec<String>,
) -> Result<FpcaModel> {
    let n = x.nrows();
    let g = x.ncols();
    if n < 2 {
        return Err(Error::InsufficientData(format!("fPCA needs at least 2 curves, got {n}")));
    }
    if g != grid.len() || g < 2 {
        return Err(Error::InvalidArgument("grid does not match the curve matrix".into()));
    }
    let max_k = (n - 1).min(g);
    if let Some(k) = num_components {
        if k == 0 || k > max_k {
            return Err(Error::InvalidArgument(format!(
                "num_components must be in 1..={max_k}, got {k}"
            )));
        }
    }
    let mean = column_means(x);
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let weights = trapezoid_weights(grid);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let mut eig = quadrature_eigen(&cov, &weights);
    clamp_eigenvalues(&mut eig.values)?;
    let total: f64 = eig.values.iter().sum();
    let all_varex: Vec<f64> = eig
        .values
        .iter()
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();

    let k = num_components.unwrap_or_else(|| {
        let mut cum = 0.0;
        let mut k = max_k;
        for (i, v) in all_varex.iter().enumerate().take(max_k) {
            cum += v;
            if cum >= DEFAULT_VAREX_TARGET {
                k = i + 1;
                break;
            }
        }
        k
    });

    let eigenfunctions: Vec<Vec<f64>> = eig.functions.into_iter().take(k).collect();
    let scores = (0..n)
        .map(|i| {
            eigenfunctions
                .iter()
                .map(|psi| {
                    (0..g)
                        .map(|c| weights[c] * centered[(i, c)] * psi[c])
                        .sum()
                })
                .collect()
        })
        .collect();
    Ok(FpcaModel {
        grid: grid.to_vec(),
        mean,
        eigenfunctions,
        eigenvalues: eig.values[..k].to_vec(),
        scores,
        varex: all_varex[..k].to_vec(),
        subject_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{make_basis, BasisSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec() -> BasisSpec {
        make_basis(3, &[0.25, 0.5, 0.75], (0.0, 1.0)).unwrap()
    }

    fn curve(coef: Vec<f64>, id: &str) -> SmoothedCurve {
        SmoothedCurve::new(spec(), coef, 0.0, id).unwrap()
    }

    fn grid() -> Vec<f64> {
        linspace(0.0, 1.0, 101)
    }

    #[test]
    fn mean_of_opposites_is_zero() {
        let t = spec().monomial_coefficients(1);
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        let m = mean_curve(&[curve(t, "a"), curve(neg, "b")], &grid()).unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn mean_equals_coefficient_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let coefs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..7).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let curves: Vec<_> = coefs.iter().map(|c| curve(c.clone(), "x")).collect();
        let avg: Vec<f64> = (0..7).map(|j| coefs.iter().map(|c| c[j]).sum::<f64>() / 3.0).collect();
        let oracle = curve(avg, "avg").eval_grid(&grid(), 0).unwrap();
        let m = mean_curve(&curves, &grid()).unwrap();
        for (a, b) in m.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_and_opposite_variance() {
        let c = vec![0.1, 0.5, -0.2, 0.3, 0.9, 0.0, 0.4];
        let v = variance_curve(&[curve(c.clone(), "a"), curve(c.clone(), "b")], &grid()).unwrap();
        assert!(v.iter().all(|x| x.abs() < 1e-15));
        let neg: Vec<f64> = c.iter().map(|x| -x).collect();
        let g = curve(c.clone(), "g").eval_grid(&grid(), 0).unwrap();
        let v = variance_curve(&[curve(c, "a"), curve(neg, "b")], &grid()).unwrap();
        for (a, gv) in v.iter().zip(&g) {
            assert!((a - 2.0 * gv * gv).abs() < 1e-12);
        }
    }

    #[test]
    fn variance_matches_naive_sample_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let curves: Vec<_> = (0..6)
            .map(|i| curve((0..7).map(|_| rng.random_range(-1.0..1.0)).collect(), &i.to_string()))
            .collect();
        let v = variance_curve(&curves, &grid()).unwrap();
        for (gi, &t) in grid().iter().enumerate() {
            let vals: Vec<f64> = curves.iter().map(|c| c.eval(t, 0).unwrap()).collect();
            let m = vals.iter().sum::<f64>() / 6.0;
            let naive = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 5.0;
            assert!((v[gi] - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let c = curve(vec![0.0; 7], "a");
        assert!(matches!(variance_curve(std::slice::from_ref(&c), &grid()), Err(Error::InsufficientData(_))));
        let other = SmoothedCurve::new(make_basis(3, &[0.5, 0.6, 0.7], (0.0, 1.0)).unwrap(), vec![0.0; 7], 0.0, "b").unwrap();
        assert!(matches!(mean_curve(&[c.clone(), other], &grid()), Err(Error::BasisMismatch)));
        assert!(matches!(fpca_decompose(&[c], &grid(), None), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn rank_one_ensemble() {
        let base = vec![0.3, 0.1, 0.4, 0.1, 0.5, 0.9, 0.2];
        let shape = vec![0.0, 1.0, 2.0, -1.0, 0.5, 0.0, 1.0];
        let amps = [-2.0, -1.0, 0.0, 1.0, 2.0];
        let curves: Vec<_> = amps
            .iter()
            .map(|a| curve(base.iter().zip(&shape).map(|(b, s)| b + a * s).collect(), "x"))
            .collect();
        let m = fpca_decompose(&curves, &grid(), None).unwrap();
        assert_eq!(m.num_components(), 1);
        assert!((m.varex[0] - 1.0).abs() < 1e-8);
        // the a = 0 subject sits on the mean
        assert!(m.scores[2][0].abs() < 1e-12);
        let s = curve(shape, "s").eval_grid(&grid(), 0).unwrap();
        let w = trapezoid_weights(&grid());
        let norm = s.iter().zip(&w).map(|(v, w)| v * v * w).sum::<f64>().sqrt();
        let cos: f64 = s.iter().zip(&m.eigenfunctions[0]).zip(&w).map(|((a, b), w)| a * b * w).sum::<f64>() / norm;
        assert!((cos.abs() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn orthonormal_reconstructs_and_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let curves: Vec<_> = (0..12)
            .map(|i| curve((0..7).map(|_| rng.random_range(-1.0..1.0)).collect(), &i.to_string()))
            .collect();
        let g = grid();
        let w = trapezoid_weights(&g);
        let m = fpca_decompose(&curves, &g, Some(7)).unwrap();
        for a in 0..7 {
            for b in 0..7 {
                let ip: f64 = (0..g.len()).map(|i| w[i] * m.eigenfunctions[a][i] * m.eigenfunctions[b][i]).sum();
                let e = if a == b { 1.0 } else { 0.0 };
                assert!((ip - e).abs() < 1e-8);
            }
        }
        for (c, s) in curves.iter().zip(&m.scores) {
            let truth = c.eval_grid(&g, 0).unwrap();
            let rec = m.reconstruct(s);
            let err = truth.iter().zip(&rec).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "err {err}");
        }
        let shifted: Vec<_> = curves
            .iter()
            .map(|c| curve(c.coefficients.iter().map(|v| v + 3.0).collect(), "s"))
            .collect();
        let m2 = fpca_decompose(&shifted, &g, Some(7)).unwrap();
        for k in 0..7 {
            assert!((m.eigenvalues[k] - m2.eigenvalues[k]).abs() < 1e-8);
            for i in 0..12 {
                assert!((m.scores[i][k] - m2.scores[i][k]).abs() < 1e-8);
            }
        }
    }
}
