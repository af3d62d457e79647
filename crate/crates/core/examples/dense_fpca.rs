//! Functional PCA of a cohort of smoothed curves.
//!
//! The cohort is synthetic: 150 players whose curves are a mean shape plus
//! two orthogonal modes of variation. Each curve is observed every season
//! with a little noise, smoothed with a shared GCV penalty, and decomposed.

use agecurve::basis::BasisSpec;
use agecurve::fpca::{fpca_decompose, DEFAULT_GRID_SIZE};
use agecurve::quadrature::linspace;
use agecurve::simulate::{balanced_scores, truth_eigenfunction, truth_mean};
use agecurve::smooth::{smooth_cohort, LambdaMode};
use agecurve::PlayerSeries;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

fn main() -> agecurve::Result<()> {
    let domain = (24.0, 36.0);
    let scores = balanced_scores(150, &[0.8, 0.2], 11)?;
    let noise = Normal::new(0.0, 0.02).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);

    let cohort: Vec<PlayerSeries> = (0..150)
        .map(|i| {
            let ages: Vec<f64> = (24..=36).map(f64::from).collect();
            let values = ages
                .iter()
                .map(|&t| {
                    truth_mean(domain, t)
                        + scores[(i, 0)] * truth_eigenfunction(domain, 0, t)
                        + scores[(i, 1)] * truth_eigenfunction(domain, 1, t)
                        + noise.sample(&mut rng)
                })
                .collect();
            PlayerSeries::new(format!("p{i:03}"), ages, values)
        })
        .collect::<agecurve::Result<_>>()?;

    let spec = BasisSpec::uniform(3, 5, domain)?;
    let curves = smooth_cohort(&spec, &cohort, &LambdaMode::default())?;
    println!("shared lambda {:.3e}", curves[0].lambda);

    let grid = linspace(domain.0, domain.1, DEFAULT_GRID_SIZE);
    let model = fpca_decompose(&curves, &grid, Some(4))?;
    let mut cumulative = 0.0;
    for k in 0..model.num_components() {
        cumulative += model.varex[k];
        println!(
            "PC{}  eigenvalue {:.4}  varex {:.4}  cumulative {:.4}",
            k + 1,
            model.eigenvalues[k],
            model.varex[k],
            cumulative
        );
    }

    let (plus, minus) = model.component_display(0, 2.0);
    println!("PC1 effect at the ends: mean {:.3} -> [{:.3}, {:.3}]", model.mean[0], minus[0], plus[0]);
    println!("first player scores {:?}", &model.scores[0][..2]);
    Ok(())
}
