//! Peak age, near-peak interval and career integral of a fitted curve.

use agecurve::curveops::{integral_measure, near_peak_interval, peak};
use agecurve::{make_basis, PlayerSeries};
use agecurve::smooth::fit_penalized;

fn main() -> agecurve::Result<()> {
    // a closed form first: f(t) = 1 - (t - 27)^2 / 50 on [20, 38]
    let f = |t: f64| 1.0 - (t - 27.0).powi(2) / 50.0;
    let (t_star, v) = peak(f, (20.0, 38.0));
    let (lo, hi) = near_peak_interval(f, (20.0, 38.0), 0.1)?;
    println!("quadratic: peak {t_star:.6} at {v:.6}, near-peak [{lo:.4}, {hi:.4}]");
    println!("           integral {:.6}", integral_measure(f, (20.0, 38.0)));

    let ages: Vec<f64> = (21..=35).map(f64::from).collect();
    let ws = vec![2.1, 4.0, 6.3, 8.2, 9.9, 10.4, 11.0, 10.1, 9.6, 8.0, 7.7, 5.9, 4.4, 3.0, 1.2];
    let series = PlayerSeries::new("nba042", ages, ws)?;
    let spec = make_basis(3, &[24.0, 28.0, 32.0], (21.0, 35.0))?;
    let curve = fit_penalized(&spec, &series, 0.5)?;
    let g = curve.as_fn();
    let (t_star, v) = peak(&g, spec.domain());
    let (lo, hi) = near_peak_interval(&g, spec.domain(), 0.1)?;
    println!("win shares: peak {v:.2} at age {t_star:.2}, within 10% from {lo:.2} to {hi:.2}");
    println!("career area {:.2}", integral_measure(&g, spec.domain()));
    Ok(())
}
