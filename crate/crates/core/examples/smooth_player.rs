//! Fit one player's season values with a penalized cubic B-spline and pick
//! the roughness penalty by generalized cross-validation.
//!
//! ```bash
//! cargo run -p agecurve --example smooth_player
//! ```

use agecurve::smooth::{default_lambda_grid, fit_penalized, select_lambda_gcv};
use agecurve::{make_basis, PlayerSeries};

fn main() -> agecurve::Result<()> {
    let ages: Vec<f64> = (24..=36).map(f64::from).collect();
    let woba = vec![
        0.317, 0.331, 0.352, 0.349, 0.361, 0.355, 0.347, 0.350, 0.331, 0.322, 0.319, 0.301, 0.297,
    ];
    let series = PlayerSeries::new("ruthba01", ages, woba)?;

    // cubic, five interior knots at 26..34
    let spec = make_basis(3, &[26.0, 28.0, 30.0, 32.0, 34.0], (24.0, 36.0))?;
    println!("basis dimension {}", spec.dimension());

    let gcv = select_lambda_gcv(&spec, &series, &default_lambda_grid())?;
    let curve = fit_penalized(&spec, &series, gcv.lambda)?;
    println!("GCV lambda = {:.4}", gcv.lambda);

    println!("{:>5} {:>8} {:>8} {:>9}", "age", "obs", "fit", "slope");
    for (t, y) in series.times.iter().zip(&series.values) {
        println!("{t:>5} {y:>8.3} {:>8.4} {:>9.5}", curve.eval(*t, 0)?, curve.eval(*t, 1)?);
    }

    // the two limits of the penalty
    let rough = fit_penalized(&spec, &series, 1e-10)?;
    let stiff = fit_penalized(&spec, &series, 1e8)?;
    println!(
        "slope at 30: lambda->0 {:.5}, GCV {:.5}, lambda->inf {:.5}",
        rough.eval(30.0, 1)?,
        curve.eval(30.0, 1)?,
        stiff.eval(30.0, 1)?
    );
    Ok(())
}
