//! Scalar summaries of a fitted curve: peak, near-peak interval, area.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::simpson;

const SCAN_POINTS: usize = 2001;
const TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub peak_age: f64,
    pub peak_value: f64,
    pub near_peak: (f64, f64),
    pub integral: f64,
}

fn scan_point(domain: (f64, f64), i: usize) -> f64 {
    let (lo, hi) = domain;
    if i == SCAN_POINTS - 1 {
        hi
    } else {
        lo + (hi - lo) * i as f64 / (SCAN_POINTS - 1) as f64
    }
}

fn golden_max<F: Fn(f64) -> f64>(f: &F, mut a: f64, mut b: f64) -> f64 {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > TOL {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Global maximum `(t*, f(t*))` over `domain`: a 2001-point scan, then
/// golden-section refinement on the bracketing cells. Ties go to the
/// smallest `t`.
pub fn peak<F: Fn(f64) -> f64>(f: F, domain: (f64, f64)) -> (f64, f64) {
    let mut best_i = 0;
    let mut best_v = f(domain.0);
    for i in 1..SCAN_POINTS {
        let v = f(scan_point(domain, i));
        if v > best_v {
            best_v = v;
            best_i = i;
        }
    }
    let t_grid = scan_point(domain, best_i);
    let a = scan_point(domain, best_i.saturating_sub(1));
    let b = scan_point(domain, (best_i + 1).min(SCAN_POINTS - 1));
    let t_ref = golden_max(&f, a, b);
    let v_ref = f(t_ref);
    if v_ref > best_v {
        (t_ref, v_ref)
    } else {
        (t_grid, best_v)
    }
}

fn bisect<F: Fn(f64) -> f64>(f: &F, threshold: f64, mut inside: f64, mut outside: f64) -> f64 {
    while (outside - inside).abs() > TOL * 0.5 {
        let mid = 0.5 * (inside + outside);
        if f(mid) >= threshold {
            inside = mid;
        } else {
            outside = mid;
        }
    }
    0.5 * (inside + outside)
}

/// Maximal interval around the peak on which `f >= (1 - fraction)·peak`.
pub fn near_peak_interval<F: Fn(f64) -> f64>(f: F, domain: (f64, f64), fraction: f64) -> Result<(f64, f64)> {
    let (t_peak, v_peak) = peak(&f, domain);
    near_peak_from(&f, domain, fraction, t_peak, v_peak)
}

fn near_peak_from<F: Fn(f64) -> f64>(
    f: &F,
    domain: (f64, f64),
    fraction: f64,
    t_peak: f64,
    v_peak: f64,
) -> Result<(f64, f64)> {
    if !(v_peak > 0.0) {
        return Err(Error::NearPeakUndefined(v_peak));
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("fraction must be in [0, 1), got {fraction}")));
    }
    let threshold = (1.0 - fraction) * v_peak;
    let (lo, hi) = domain;
    let step = (hi - lo) / (SCAN_POINTS - 1) as f64;

    let mut left = lo;
    let mut t = t_peak;
    loop {
        let next = (t - step).max(lo);
        if f(next) < threshold {
            left = bisect(f, threshold, t, next);
            break;
        }
        if next <= lo {
            break;
        }
        t = next;
    }
    let mut right = hi;
    let mut t = t_peak;
    loop {
        let next = (t + step).min(hi);
        if f(next) < threshold {
            right = bisect(f, threshold, t, next);
            break;
        }
        if next >= hi {
            break;
        }
        t = next;
    }
    Ok((left.min(t_peak), right.max(t_peak)))
}

/// Area under the curve by composite Simpson on 2001 points.
pub fn integral_measure<F: Fn(f64) -> f64>(f: F, domain: (f64, f64)) -> f64 {
    simpson(f, domain.0, domain.1, SCAN_POINTS)
}

/// All three summaries; the near-peak interval is `None` when the peak is
/// not positive.
pub fn summarize<F: Fn(f64) -> f64>(f: F, domain: (f64, f64), fraction: f64) -> (f64, f64, Option<(f64, f64)>, f64) {
    let (t, v) = peak(&f, domain);
    let near = near_peak_from(&f, domain, fraction, t, v).ok();
    (t, v, near, integral_measure(&f, domain))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(t: f64) -> f64 {
        -(t - 30.0).powi(2) + 5.0
    }

    #[test]
    fn quadratic_peak() {
        let (t, v) = peak(quad, (19.0, 39.0));
        assert!((t - 30.0).abs() < 1e-5 && (v - 5.0).abs() < 1e-5);
    }

    #[test]
    fn off_grid_peak_is_refined() {
        let (t, _) = peak(|t| -(t - 27.123_456_7f64).powi(2), (19.0, 39.0));
        assert!((t - 27.123_456_7).abs() < 1e-6);
    }

    #[test]
    fn constant_peak_is_leftmost() {
        let (t, v) = peak(|_| 2.5, (19.0, 39.0));
        assert_eq!((t, v), (19.0, 2.5));
    }

    #[test]
    fn quadratic_near_peak() {
        let (a, b) = near_peak_interval(quad, (19.0, 39.0), 0.10).unwrap();
        assert!((a - (30.0 - 0.5f64.sqrt())).abs() < 1e-5);
        assert!((b - (30.0 + 0.5f64.sqrt())).abs() < 1e-5);
    }

    #[test]
    fn constant_near_peak_is_whole_domain() {
        assert_eq!(near_peak_interval(|_| 3.0, (19.0, 39.0), 0.1).unwrap(), (19.0, 39.0));
    }

    #[test]
    fn nonpositive_peak_rejected() {
        assert!(matches!(
            near_peak_interval(|t| -t * t, (-1.0, 1.0), 0.1),
            Err(Error::NearPeakUndefined(_))
        ));
    }

    #[test]
    fn integrals() {
        assert!((integral_measure(|_| 2.0, (19.0, 39.0)) - 40.0).abs() < 1e-9);
        assert!((integral_measure(|t| t, (0.0, 1.0)) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn shift_equivariance() {
        let f = |t: f64| (t / 3.0).sin() * t.sqrt();
        let g = |t: f64| f(t) + 1.75;
        let d = (19.0, 39.0);
        let (tf, vf) = peak(f, d);
        let (tg, vg) = peak(g, d);
        assert!((tf - tg).abs() < 1e-6);
        assert!((vg - vf - 1.75).abs() < 1e-9);
        assert!((integral_measure(g, d) - integral_measure(f, d) - 1.75 * 20.0).abs() < 1e-9);
    }
}
