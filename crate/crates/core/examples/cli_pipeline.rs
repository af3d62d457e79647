//! The batch runner driven from code: simulate a cohort, fit PACE, cluster
//! the scores and test the group difference, exactly as
//!
//! ```bash
//! agecurve simulate --config examples/configs/pipeline.json --out out
//! agecurve pace     --config examples/configs/pipeline.json --out out
//! ```
//!
//! would, with outputs under `<out>/<subcommand>/`.

use agecurve::cli::{run, RunRequest, Subcommand};
use std::path::PathBuf;

fn main() -> agecurve::Result<()> {
    let work = tempfile::tempdir()?;
    let config = work.path().join("pipeline.json");
    std::fs::copy(
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/configs/pipeline.json"),
        &config,
    )?;
    let request = RunRequest {
        config_path: config,
        seed: Some(7),
        out_dir: work.path().join("out"),
        overrides: vec!["cluster.runs=40".into()],
    };
    for sub in [Subcommand::Simulate, Subcommand::Pace, Subcommand::Cluster, Subcommand::Permtest] {
        let dir = run(sub, &request)?;
        let mut files: Vec<String> = std::fs::read_dir(&dir)?
            .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
            .collect::<std::io::Result<_>>()?;
        files.sort();
        println!("{:<9} {}", sub.name(), files.join(" "));
    }
    let truth = std::fs::read_to_string(work.path().join("out/pace/truth_comparison.json"))?;
    println!("{truth}");
    let perm = std::fs::read_to_string(work.path().join("out/permtest/permtest.json"))?;
    let perm: serde_json::Value = serde_json::from_str(&perm)?;
    println!("permutation p = {}, Welch p = {}", perm["p_value"], perm["welch"]["p_value"]);
    Ok(())
}
