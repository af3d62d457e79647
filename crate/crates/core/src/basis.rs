//! Clamped B-spline bases: construction, evaluation (with derivatives) and
//! the second-derivative roughness penalty.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::gauss_legendre;

/// A B-spline basis of a given degree over `[lo, hi]` with interior knots.
///
/// Boundary knots are replicated `degree + 1` times, so the basis has
/// `degree + 1 + interior_knots.len()` functions and spans every polynomial
/// of degree `<= degree` on the domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BasisRepr", into = "BasisRepr")]
pub struct BasisSpec {
    degree: usize,
    interior_knots: Vec<f64>,
    lo: f64,
    hi: f64,
    knots: Vec<f64>,
}

/// Serialized form: the augmented knot vector is rebuilt on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasisRepr {
    pub degree: usize,
    pub interior_knots: Vec<f64>,
    pub endpoints: (f64, f64),
}

impl TryFrom<BasisRepr> for BasisSpec {
    type Error = Error;

    fn try_from(r: BasisRepr) -> Result<Self> {
        BasisSpec::new(r.degree, &r.interior_knots, r.endpoints)
    }
}

impl From<BasisSpec> for BasisRepr {
    fn from(b: BasisSpec) -> Self {
        BasisRepr {
            degree: b.degree,
            interior_knots: b.interior_knots,
            endpoints: (b.lo, b.hi),
        }
    }
}

impl BasisSpec {
    pub fn new(degree: usize, interior_knots: &[f64], endpoints: (f64, f64)) -> Result<Self> {
        let (lo, hi) = endpoints;
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(Error::InvalidKnots(format!(
                "endpoints must satisfy lo < hi, got ({lo}, {hi})"
            )));
        }
        let mut prev = lo;
        for &k in interior_knots {
            if !k.is_finite() || k <= prev {
                return Err(Error::InvalidKnots(format!(
                    "knot {k} is not strictly greater than {prev}"
                )));
            }
            prev = k;
        }
        if prev >= hi {
            return Err(Error::InvalidKnots(format!(
                "interior knot {prev} is not below the right endpoint {hi}"
            )));
        }
        let mut knots = Vec::with_capacity(interior_knots.len() + 2 * degree + 2);
        knots.extend(std::iter::repeat_n(lo, degree + 1));
        knots.extend_from_slice(interior_knots);
        knots.extend(std::iter::repeat_n(hi, degree + 1));
        Ok(Self {
            degree,
            interior_knots: interior_knots.to_vec(),
            lo,
            hi,
            knots,
        })
    }

    /// Basis with `count` equally spaced interior knots.
    pub fn uniform(degree: usize, count: usize, endpoints: (f64, f64)) -> Result<Self> {
        let (lo, hi) = endpoints;
        let step = (hi - lo) / (count + 1) as f64;
        let knots: Vec<f64> = (1..=count).map(|i| lo + step * i as f64).collect();
        Self::new(degree, &knots, endpoints)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.interior_knots
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    /// Number of basis functions.
    pub fn dimension(&self) -> usize {
        self.degree + 1 + self.interior_knots.len()
    }

    /// Full (augmented) knot vector.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Distinct breakpoints `lo, interior..., hi`.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.interior_knots.len() + 2);
        b.push(self.lo);
        b.extend_from_slice(&self.interior_knots);
        b.push(self.hi);
        b
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.lo && t <= self.hi
    }

    fn check(&self, t: f64) -> Result<()> {
        if self.contains(t) {
            Ok(())
        } else {
            Err(Error::OutOfDomain {
                t,
                lo: self.lo,
                hi: self.hi,
            })
        }
    }

    /// Index `i` of the knot span `[knots[i], knots[i+1])` containing `t`,
    /// with the right endpoint assigned to the last non-degenerate span.
    fn span(&self, t: f64) -> usize {
        let k = self.degree;
        let last = self.knots.len() - k - 2;
        if t >= self.hi {
            return last;
        }
        // knots[k..=last+1] are lo, interior..., hi
        let slice = &self.knots[k..=last + 1];
        let pos = slice.partition_point(|&x| x <= t);
        (k + pos - 1).min(last)
    }

    /// Values of `d^r/dt^r B_j(t)` for all `j`.
    pub fn eval(&self, t: f64, deriv_order: usize) -> Result<Vec<f64>> {
        self.check(t)?;
        let mut out = vec![0.0; self.dimension()];
        self.eval_into(t, deriv_order, &mut out);
        Ok(out)
    }

    /// Like [`eval`](Self::eval) but writes into `out` and assumes `t` is in
    /// the domain.
    pub(crate) fn eval_into(&self, t: f64, deriv_order: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let k = self.degree;
        if deriv_order > k {
            return;
        }
        let knots = &self.knots;
        let nk = knots.len();
        let span = self.span(t);

        // Degree-0 indicators over the whole knot vector, then Cox–de Boor
        // up to degree k - r.
        let base_degree = k - deriv_order;
        let mut vals = vec![0.0; nk - 1];
        vals[span] = 1.0;
        for d in 1..=base_degree {
            let mut next = vec![0.0; nk - 1 - d];
            for (j, slot) in next.iter_mut().enumerate() {
                let mut v = 0.0;
                let left = knots[j + d] - knots[j];
                if left > 0.0 && vals[j] != 0.0 {
                    v += (t - knots[j]) / left * vals[j];
                }
                let right = knots[j + d + 1] - knots[j + 1];
                if right > 0.0 && vals[j + 1] != 0.0 {
                    v += (knots[j + d + 1] - t) / right * vals[j + 1];
                }
                *slot = v;
            }
            vals = next;
        }

        // Derivative recurrence raises the degree back to k, one order at a time.
        for d in (base_degree + 1)..=k {
            let df = d as f64;
            let mut next = vec![0.0; nk - 1 - d];
            for (j, slot) in next.iter_mut().enumerate() {
                let mut v = 0.0;
                let left = knots[j + d] - knots[j];
                if left > 0.0 {
                    v += df * vals[j] / left;
                }
                let right = knots[j + d + 1] - knots[j + 1];
                if right > 0.0 {
                    v -= df * vals[j + 1] / right;
                }
                *slot = v;
            }
            vals = next;
        }
        out.copy_from_slice(&vals);
    }

    /// `n x J` design matrix of basis values (or derivatives) at `points`.
    pub fn design_matrix(&self, points: &[f64], deriv_order: usize) -> Result<DMatrix<f64>> {
        let j = self.dimension();
        let mut m = DMatrix::zeros(points.len(), j);
        let mut row = vec![0.0; j];
        for (i, &t) in points.iter().enumerate() {
            self.check(t)?;
            self.eval_into(t, deriv_order, &mut row);
            for (c, v) in row.iter().enumerate() {
                m[(i, c)] = *v;
            }
        }
        Ok(m)
    }

    /// Roughness penalty `P[j,l] = ∫ B_j''(t) B_l''(t) dt`.
    ///
    /// Integrated per knot interval with a Gauss–Legendre rule exact for the
    /// piecewise-polynomial integrand.
    pub fn penalty_matrix(&self) -> DMatrix<f64> {
        let j = self.dimension();
        let mut p = DMatrix::zeros(j, j);
        let k = self.degree;
        if k < 2 {
            return p;
        }
        let integrand_degree = 2 * (k - 2);
        let nodes = (integrand_degree + 1).div_ceil(2) + 1;
        let (x, w) = gauss_legendre(nodes);
        let breaks = self.breakpoints();
        let mut row = vec![0.0; j];
        for win in breaks.windows(2) {
            let (a, b) = (win[0], win[1]);
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (xi, wi) in x.iter().zip(&w) {
                let t = mid + half * xi;
                self.eval_into(t, 2, &mut row);
                let scale = wi * half;
                for r in 0..j {
                    if row[r] == 0.0 {
                        continue;
                    }
                    for c in 0..j {
                        p[(r, c)] += scale * row[r] * row[c];
                    }
                }
            }
        }
        p
    }

    /// Coefficients representing the polynomial `t^power` (power <= degree),
    /// via Marsden's identity.
    pub fn monomial_coefficients(&self, power: usize) -> Vec<f64> {
        assert!(power <= self.degree, "power exceeds degree");
        let k = self.degree;
        let binom = |n: usize, r: usize| -> f64 {
            (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
        };
        let denom = binom(k, power);
        (0..self.dimension())
            .map(|j| {
                let inner = &self.knots[j + 1..=j + k];
                elementary_symmetric(inner, power) / denom
            })
            .collect()
    }
}

fn elementary_symmetric(values: &[f64], r: usize) -> f64 {
    let mut e = vec![0.0; r + 1];
    e[0] = 1.0;
    for &v in values {
        for i in (1..=r).rev() {
            e[i] += e[i - 1] * v;
        }
    }
    e[r]
}

/// Free-function form of [`BasisSpec::new`].
pub fn make_basis(degree: usize, interior_knots: &[f64], endpoints: (f64, f64)) -> Result<BasisSpec> {
    BasisSpec::new(degree, interior_knots, endpoints)
}

/// Free-function form of [`BasisSpec::eval`].
pub fn eval_basis(spec: &BasisSpec, t: f64, deriv_order: usize) -> Result<Vec<f64>> {
    spec.eval(t, deriv_order)
}

/// Free-function form of [`BasisSpec::penalty_matrix`].
pub fn penalty_matrix(spec: &BasisSpec) -> DMatrix<f64> {
    spec.penalty_matrix()
}
