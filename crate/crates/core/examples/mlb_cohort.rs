//! Build an analysis cohort from a season-level CSV.
//!
//! Writes a small table to a temporary directory, loads it, applies the
//! exposure, era, age-window and gap rules, and splits the survivors into
//! power and non-power hitters by early-career ISO.

use agecurve::ingest::{
    filter_mlb_cohort, iso_by_player, load_csv, split_power_groups, MlbFilter, SchemaConfig, POWER_THRESHOLD,
};
use std::fmt::Write as _;

fn main() -> agecurve::Result<()> {
    let mut text = String::from("player_id,season_year,age,value,pa,slg,avg,position\n");
    let players = [("aaronha01", 0.22, 1954), ("gwynnto01", 0.10, 1982), ("oldtimer", 0.18, 1905)];
    for (id, iso, debut) in players {
        for age in 22..=37 {
            let year = debut + age - 22;
            let woba = 0.36 - 0.0008 * f64::from((age - 28) * (age - 28));
            let _ = writeln!(text, "{id},{year},{age},{woba:.3},{},{:.3},0.300,OF", 450 + age, 0.300 + iso);
        }
    }
    // a part-time season and an unreadable row
    text.push_str("benchguy,1999,27,0.300,120,0.400,0.250,C\nbroken,2001,abc,0.3,500,0.4,0.3,1B\n");

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("seasons.csv");
    std::fs::write(&path, text)?;

    let schema = SchemaConfig::default();
    let loaded = load_csv(&path, &schema)?;
    println!("{} rows loaded, {} rejected", loaded.records.len(), loaded.rejects.len());
    for r in &loaded.rejects {
        println!("  row {}: {}", r.row, r.reason);
    }

    let cohort = filter_mlb_cohort(&loaded.records, &MlbFilter::default(), &schema.meta_columns)?;
    println!("cohort: {:?}", cohort.series.iter().map(|s| &s.id).collect::<Vec<_>>());
    for e in &cohort.exclusions {
        println!("  excluded {} {:?}: {}", e.player_id, e.season_year, e.reason.as_str());
    }

    let (iso, _) = iso_by_player(&loaded.records, &schema, &[24, 25]);
    let split = split_power_groups(&cohort.series, &iso, POWER_THRESHOLD);
    println!(
        "power {:?}, non-power {:?}",
        split.power.iter().map(|s| &s.id).collect::<Vec<_>>(),
        split.non_power.iter().map(|s| &s.id).collect::<Vec<_>>()
    );
    Ok(())
}
