//! PACE on sparse, noisy careers.
//!
//! Each simulated subject has 3 to 8 irregular observations. The fit pools
//! everyone to estimate the mean, covariance surface and noise variance,
//! then predicts each subject's component scores by conditional
//! expectation. Reconstructions are compared with the simulation truth and
//! with joining the dots.

use agecurve::cli::linear_interpolation;
use agecurve::pace::{conditional_scores, fit_pace, reconstruct, PaceConfig};
use agecurve::quadrature::trapezoid_weights;
use agecurve::simulate::{sparse_sample, SparseDesign};

fn main() -> agecurve::Result<()> {
    let design = SparseDesign {
        eigenvalues: vec![4.0, 1.0],
        noise_var: 0.1,
        ..SparseDesign::default()
    };
    let sample = sparse_sample(&design, 3)?;
    let model = fit_pace(&sample.series, &PaceConfig::default())?;

    println!("sigma2 estimate {:.4} (truth {})", model.sigma2, design.noise_var);
    println!("eigenvalues {:?}", model.eigenvalues.iter().map(|l| (l * 1e3).round() / 1e3).collect::<Vec<_>>());
    println!("components kept by cross-validation: {}", model.j_selected);
    println!("LOO error by J: {:?}", model.diagnostics.loocv_errors);

    let w = trapezoid_weights(&model.grid);
    let (mut pace_ise, mut lin_ise) = (0.0, 0.0);
    for (i, s) in sample.series.iter().enumerate() {
        let xi = conditional_scores(&model, s, model.j_selected)?;
        let fitted = reconstruct(&model, &xi, &model.grid)?;
        for (g, &t) in model.grid.iter().enumerate() {
            let truth = sample.truth.curve(i, t);
            pace_ise += w[g] * (fitted[g] - truth).powi(2);
            lin_ise += w[g] * (linear_interpolation(&s.times, &s.values, t) - truth).powi(2);
        }
    }
    let n = sample.series.len() as f64;
    println!("mean ISE: PACE {:.4}, linear interpolation {:.4}", pace_ise / n, lin_ise / n);
    Ok(())
}
