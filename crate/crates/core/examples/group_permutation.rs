//! Do two groups of players differ in their first component score?
//!
//! Runs the permutation test on |mean(P) - mean(Q)| next to Welch's t-test,
//! then shows exact enumeration for a tiny sample.

use agecurve::inference::{permutation_test, permutation_test_with, t_test, Alternative, PermTestOptions};
use agecurve::simulate::two_groups;

fn main() -> agecurve::Result<()> {
    let (power, other) = two_groups(60, 90, 0.5, 2024);
    let perm = permutation_test(&power, &other, 5000, 2024)?;
    let welch = t_test(&power, &other, Alternative::TwoSided)?;
    println!(
        "T = {:.4}, permutation p = {:.4} over {} relabelings",
        perm.observed_t, perm.p_value, perm.replications
    );
    println!("Welch t = {:.3} on {:.1} df, p = {:.2e}", welch.statistic, welch.df, welch.p_value);

    let small = permutation_test_with(
        &[1.2, 0.4, 2.2],
        &[-0.3, 0.1, -1.0, 0.0],
        &PermTestOptions::default(),
    )?;
    println!(
        "N = 7: exact = {}, {} labelings, p = {:.4}",
        small.exact, small.replications, small.p_value
    );
    Ok(())
}
