//! Pick the number of clusters in a score cloud by comparing k-means SSE
//! with a column-permutation reference.

use agecurve::cluster::cluster_report;
use agecurve::simulate::{clustered_points, triangle_centers};

fn main() -> agecurve::Result<()> {
    let (points, truth) = clustered_points(&triangle_centers(6.0), 40, 1.0, 5);
    let ids: Vec<String> = (0..points.nrows()).map(|i| format!("s{i}")).collect();
    let report = cluster_report(&points, &ids, &[1, 2, 3, 4, 5, 6], 100, 10, 5)?;

    println!("{:>2} {:>10} {:>10} {:>8}", "k", "SSE", "null mean", "gap");
    for (i, k) in report.k_range.iter().enumerate() {
        println!(
            "{k:>2} {:>10.2} {:>10.2} {:>8.4}",
            report.actual_sse[i], report.null_mean_sse[i], report.selection.gap_mean[i]
        );
    }
    println!(
        "selected k = {} (min-based rule says {}, no_structure = {})",
        report.selected_k, report.selection.gap_min_k, report.selection.no_structure
    );

    let mut agree = 0;
    for i in 0..truth.len() {
        for j in i + 1..truth.len() {
            let same_truth = truth[i] == truth[j];
            let same_fit = report.assignments[i].1 == report.assignments[j].1;
            agree += usize::from(same_truth == same_fit);
        }
    }
    let pairs = truth.len() * (truth.len() - 1) / 2;
    println!("pairwise agreement with the generating labels {:.3}", agree as f64 / pairs as f64);
    Ok(())
}
