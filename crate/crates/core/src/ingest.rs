//! CSV ingestion, cohort filters and derived per-season metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::smooth::PlayerSeries;

/// Earliest plausible season.
pub const MIN_SEASON_YEAR: i32 = 1871;

/// One player-season.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeasonRecord {
    pub player_id: String,
    pub season_year: i32,
    pub age: f64,
    pub value: f64,
    /// Plate appearances, games, minutes: whatever the league filter uses.
    pub exposure: Option<f64>,
    pub extra: BTreeMap<String, String>,
}

impl SeasonRecord {
    pub fn extra_f64(&self, key: &str) -> Option<f64> {
        self.extra.get(key).and_then(|v| v.trim().parse().ok())
    }

    /// Age in completed years.
    pub fn integer_age(&self) -> i64 {
        self.age.floor() as i64
    }
}

/// Reference date used to derive ages from birth dates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeReference {
    pub month: u32,
    pub day: u32,
    /// Added to `season_year` to get the reference year.
    pub year_offset: i32,
}

impl Default for AgeReference {
    fn default() -> Self {
        Self {
            month: 2,
            day: 1,
            year_offset: 0,
        }
    }
}

/// Column names of the input CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchemaConfig {
    pub player_id: String,
    pub season_year: String,
    pub age: String,
    pub value: String,
    pub exposure: String,
    pub slg: String,
    pub avg: String,
    pub birth_date: String,
    /// Per-player columns copied into the series metadata.
    pub meta_columns: Vec<String>,
    /// When set, ages come from `birth_date` instead of the age column.
    pub age_reference: Option<AgeReference>,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        Self {
            player_id: "player_id".into(),
            season_year: "season_year".into(),
            age: "age".into(),
            value: "value".into(),
            exposure: "pa".into(),
            slg: "slg".into(),
            avg: "avg".into(),
            birth_date: "birth_date".into(),
            meta_columns: vec!["position".into(), "group".into()],
            age_reference: None,
        }
    }
}

/// A data row that could not be parsed. `row` is the 1-based line number
/// in the file, the header being line 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadResult {
    pub records: Vec<SeasonRecord>,
    pub rejects: Vec<Reject>,
}

/// Parse a player-season CSV. Columns other than the required ones are kept
/// as strings in `extra`; empty cells are skipped.
pub fn load_csv(path: impl AsRef<Path>, schema: &SchemaConfig) -> Result<LoadResult> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers()?.clone();
    let position = |name: &str| headers.iter().position(|h| h == name);
    let mut required = vec![&schema.player_id, &schema.season_year, &schema.value];
    if schema.age_reference.is_some() {
        required.push(&schema.birth_date);
    } else {
        required.push(&schema.age);
    }
    let missing: Vec<String> = required.iter().filter(|c| position(c).is_none()).map(|c| c.to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::Schema(format!(
            "{}: missing column(s) {}",
            path.display(),
            missing.join(", ")
        )));
    }
    let id_col = position(&schema.player_id).expect("checked");
    let year_col = position(&schema.season_year).expect("checked");
    let value_col = position(&schema.value).expect("checked");
    let age_col = position(&schema.age);
    let birth_col = position(&schema.birth_date);
    let exposure_col = position(&schema.exposure);
    let fixed: BTreeSet<usize> = [Some(id_col), Some(year_col), Some(value_col), age_col, exposure_col]
        .into_iter()
        .flatten()
        .collect();

    let mut out = LoadResult::default();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                out.rejects.push(Reject { row: line, reason: format!("malformed row: {e}") });
                continue;
            }
        };
        let field = |c: usize| row.get(c).unwrap_or("");
        let parsed = (|| -> std::result::Result<SeasonRecord, String> {
            let player_id = field(id_col).to_string();
            if player_id.is_empty() {
                return Err(format!("empty {}", schema.player_id));
            }
            let season_year: i32 = field(year_col)
                .parse()
                .map_err(|_| format!("non-integer {}: {:?}", schema.season_year, field(year_col)))?;
            if season_year < MIN_SEASON_YEAR {
                return Err(format!("implausible {}: {season_year}", schema.season_year));
            }
            let value: f64 = parse_finite(field(value_col)).ok_or_else(|| format!("non-numeric {}: {:?}", schema.value, field(value_col)))?;
            let age = match schema.age_reference {
                Some(reference) => {
                    let raw = field(birth_col.expect("checked"));
                    let birth = parse_date(raw).map_err(|e| e.to_string())?;
                    let on = reference_date(season_year, reference).map_err(|e| e.to_string())?;
                    age_at_reference(birth, on).map_err(|e| e.to_string())?
                }
                None => {
                    let col = age_col.expect("checked");
                    parse_finite(field(col)).ok_or_else(|| format!("non-numeric {}: {:?}", schema.age, field(col)))?
                }
            };
            if !(age > 0.0) {
                return Err(format!("non-positive {}: {age}", schema.age));
            }
            let exposure = match exposure_col.map(field) {
                None | Some("") => None,
                Some(raw) => Some(parse_finite(raw).ok_or_else(|| format!("non-numeric {}: {raw:?}", schema.exposure))?),
            };
            let extra = headers
                .iter()
                .enumerate()
                .filter(|(c, _)| !fixed.contains(c))
                .filter(|(c, _)| !field(*c).is_empty())
                .map(|(c, h)| (h.to_string(), field(c).to_string()))
                .collect();
            Ok(SeasonRecord {
                player_id,
                season_year,
                age,
                value,
                exposure,
                extra,
            })
        })();
        match parsed {
            Ok(r) => out.records.push(r),
            Err(reason) => out.rejects.push(Reject { row: line, reason }),
        }
    }
    Ok(out)
}

fn parse_finite(raw: &str) -> Option<f64> {
    raw.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Write records with the schema's column names; extra columns follow in
/// sorted order.
pub fn write_csv(path: impl AsRef<Path>, records: &[SeasonRecord], schema: &SchemaConfig) -> Result<()> {
    let extras: BTreeSet<&String> = records.iter().flat_map(|r| r.extra.keys()).collect();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        schema.player_id.clone(),
        schema.season_year.clone(),
        schema.age.clone(),
        schema.value.clone(),
        schema.exposure.clone(),
    ];
    header.extend(extras.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.player_id.clone(),
            r.season_year.to_string(),
            r.age.to_string(),
            r.value.to_string(),
            r.exposure.map(|v| v.to_string()).unwrap_or_default(),
        ];
        row.extend(extras.iter().map(|k| r.extra.get(*k).cloned().unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Machine-readable exclusion reasons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonCode {
    BeforeMinYear,
    MissingExposure,
    LowExposure,
    AgeOutOfWindow,
    DuplicateAge,
    GapRule,
    TooFewSeasons,
    NoIsoSeasons,
}

impl ReasonCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReasonCode::BeforeMinYear => "before_min_year",
            ReasonCode::MissingExposure => "missing_exposure",
            ReasonCode::LowExposure => "low_exposure",
            ReasonCode::AgeOutOfWindow => "age_out_of_window",
            ReasonCode::DuplicateAge => "duplicate_age",
            ReasonCode::GapRule => "gap_rule",
            ReasonCode::TooFewSeasons => "too_few_seasons",
            ReasonCode::NoIsoSeasons => "no_iso_seasons",
        }
    }
}

/// One excluded row, or a whole player when `season_year` is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub player_id: String,
    pub season_year: Option<i32>,
    pub reason: ReasonCode,
}

pub fn write_exclusions(path: impl AsRef<Path>, exclusions: &[Exclusion]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["player_id", "season_year", "reason_code"])?;
    for e in exclusions {
        w.write_record([
            e.player_id.as_str(),
            &e.season_year.map(|y| y.to_string()).unwrap_or_default(),
            e.reason.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Cohort {
    /// Sorted by player id.
    pub series: Vec<PlayerSeries>,
    pub exclusions: Vec<Exclusion>,
    /// Observations per integer age among retained players.
    pub per_age_counts: BTreeMap<i64, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlbFilter {
    pub min_exposure: f64,
    pub min_year: i32,
    pub age_window: (i64, i64),
    /// Apply the gap rule to the whole window rather than the observed span.
    pub strict_gaps: bool,
}

impl Default for MlbFilter {
    fn default() -> Self {
        Self {
            min_exposure: 200.0,
            min_year: 1920,
            age_window: (24, 36),
            strict_gaps: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NbaFilter {
    pub min_seasons: usize,
    pub age_window: (i64, i64),
}

impl Default for NbaFilter {
    fn default() -> Self {
        Self {
            min_seasons: 8,
            age_window: (19, 39),
        }
    }
}

fn exclude(r: &SeasonRecord, reason: ReasonCode) -> Exclusion {
    Exclusion {
        player_id: r.player_id.clone(),
        season_year: Some(r.season_year),
        reason,
    }
}

/// Build one series per player from rows already passing the row filters.
/// Times are integer ages; later rows at an already-seen age are dropped.
fn assemble(
    by_player: BTreeMap<String, Vec<&SeasonRecord>>,
    meta_columns: &[String],
    exclusions: &mut Vec<Exclusion>,
) -> Result<BTreeMap<String, (PlayerSeries, Vec<Exclusion>)>> {
    let mut out = BTreeMap::new();
    for (id, mut rows) in by_player {
        rows.sort_by_key(|r| (r.integer_age(), r.season_year));
        let mut seen = BTreeSet::new();
        let mut kept: Vec<&SeasonRecord> = Vec::new();
        for r in rows {
            if seen.insert(r.integer_age()) {
                kept.push(r);
            } else {
                exclusions.push(exclude(r, ReasonCode::DuplicateAge));
            }
        }
        let times = kept.iter().map(|r| r.integer_age() as f64).collect();
        let values = kept.iter().map(|r| r.value).collect();
        let mut series = PlayerSeries::new(id.clone(), times, values)?;
        for col in meta_columns {
            if let Some(v) = kept.iter().find_map(|r| r.extra.get(col)) {
                series = series.with_meta(col.clone(), v.clone());
            }
        }
        let rows_as_exclusions = kept.iter().map(|r| exclude(r, ReasonCode::GapRule)).collect();
        out.insert(id, (series, rows_as_exclusions));
    }
    Ok(out)
}

/// True when two consecutive integer ages in `lo..=hi` are both missing.
fn has_double_gap(ages: &BTreeSet<i64>, lo: i64, hi: i64) -> bool {
    (lo..hi).any(|a| !ages.contains(&a) && !ages.contains(&(a + 1)))
}

/// Season filters (year, exposure, age window) followed by the per-player
/// gap rule: no two consecutive ages missing within the observed span, or
/// within the whole window in strict mode.
pub fn filter_mlb_cohort(records: &[SeasonRecord], filter: &MlbFilter, meta_columns: &[String]) -> Result<Cohort> {
    let mut exclusions = Vec::new();
    let mut by_player: BTreeMap<String, Vec<&SeasonRecord>> = BTreeMap::new();
    let (lo, hi) = filter.age_window;
    for r in records {
        let reason = if r.season_year < filter.min_year {
            Some(ReasonCode::BeforeMinYear)
        } else {
            match r.exposure {
                None => Some(ReasonCode::MissingExposure),
                Some(e) if e < filter.min_exposure => Some(ReasonCode::LowExposure),
                Some(_) if !(lo..=hi).contains(&r.integer_age()) => Some(ReasonCode::AgeOutOfWindow),
                Some(_) => None,
            }
        };
        match reason {
            Some(code) => exclusions.push(exclude(r, code)),
            None => by_player.entry(r.player_id.clone()).or_default().push(r),
        }
    }
    let assembled = assemble(by_player, meta_columns, &mut exclusions)?;
    let mut cohort = Cohort::default();
    for (_, (series, rows)) in assembled {
        let ages: BTreeSet<i64> = series.times.iter().map(|t| *t as i64).collect();
        let (span_lo, span_hi) = if filter.strict_gaps {
            (lo, hi)
        } else {
            (*ages.first().expect("non-empty"), *ages.last().expect("non-empty"))
        };
        if has_double_gap(&ages, span_lo, span_hi) {
            exclusions.extend(rows);
        } else {
            for a in &ages {
                *cohort.per_age_counts.entry(*a).or_default() += 1;
            }
            cohort.series.push(series);
        }
    }
    cohort.exclusions = exclusions;
    Ok(cohort)
}

/// Players with at least `min_seasons` distinct seasons, observations
/// clipped to the age window. Per-age counts are reported, not enforced.
pub fn filter_nba_cohort(records: &[SeasonRecord], filter: &NbaFilter, meta_columns: &[String]) -> Result<Cohort> {
    let mut seasons: BTreeMap<&str, BTreeSet<i32>> = BTreeMap::new();
    for r in records {
        seasons.entry(&r.player_id).or_default().insert(r.season_year);
    }
    let (lo, hi) = filter.age_window;
    let mut exclusions = Vec::new();
    let mut by_player: BTreeMap<String, Vec<&SeasonRecord>> = BTreeMap::new();
    for r in records {
        if seasons[r.player_id.as_str()].len() < filter.min_seasons {
            exclusions.push(exclude(r, ReasonCode::TooFewSeasons));
        } else if !(lo..=hi).contains(&r.integer_age()) {
            exclusions.push(exclude(r, ReasonCode::AgeOutOfWindow));
        } else {
            by_player.entry(r.player_id.clone()).or_default().push(r);
        }
    }
    let mut cohort = Cohort::default();
    for (_, (series, _)) in assemble(by_player, meta_columns, &mut exclusions)? {
        for t in &series.times {
            *cohort.per_age_counts.entry(*t as i64).or_default() += 1;
        }
        cohort.series.push(series);
    }
    cohort.exclusions = exclusions;
    Ok(cohort)
}

/// Mean of `slg - avg` over each player's seasons at the given integer ages.
/// Players without such a season are reported.
pub fn iso_by_player(
    records: &[SeasonRecord],
    schema: &SchemaConfig,
    ages: &[i64],
) -> (BTreeMap<String, f64>, Vec<Exclusion>) {
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    let mut players: BTreeSet<&str> = BTreeSet::new();
    for r in records {
        players.insert(&r.player_id);
        if !ages.contains(&r.integer_age()) {
            continue;
        }
        if let (Some(slg), Some(avg)) = (r.extra_f64(&schema.slg), r.extra_f64(&schema.avg)) {
            let e = sums.entry(&r.player_id).or_insert((0.0, 0));
            e.0 += slg - avg;
            e.1 += 1;
        }
    }
    let iso = sums.iter().map(|(id, (s, n))| (id.to_string(), s / *n as f64)).collect();
    let missing = players
        .into_iter()
        .filter(|p| !sums.contains_key(p))
        .map(|p| Exclusion {
            player_id: p.to_string(),
            season_year: None,
            reason: ReasonCode::NoIsoSeasons,
        })
        .collect();
    (iso, missing)
}

/// Default power threshold on early-career ISO.
pub const POWER_THRESHOLD: f64 = 0.150;
/// Margin absorbing binary rounding of `slg - avg`, so a decimal ISO of
/// exactly the threshold is not power.
const ISO_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PowerSplit {
    pub power: Vec<PlayerSeries>,
    pub non_power: Vec<PlayerSeries>,
    /// Players without an ISO value.
    pub excluded: Vec<String>,
}

/// Power if ISO exceeds `threshold`, otherwise non-power.
pub fn split_power_groups(series: &[PlayerSeries], iso: &BTreeMap<String, f64>, threshold: f64) -> PowerSplit {
    let mut split = PowerSplit::default();
    for s in series {
        match iso.get(&s.id) {
            Some(v) if *v > threshold + ISO_EPS => split.power.push(s.clone()),
            Some(_) => split.non_power.push(s.clone()),
            None => split.excluded.push(s.id.clone()),
        }
    }
    split
}

pub fn parse_date(raw: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(raw.trim(), "%Y-%m-%d").map_err(|e| Error::InvalidDate(format!("{raw:?}: {e}")))
}

pub fn reference_date(season_year: i32, reference: AgeReference) -> Result<NaiveDate> {
    let year = season_year + reference.year_offset;
    NaiveDate::from_ymd_opt(year, reference.month, reference.day)
        .ok_or_else(|| Error::InvalidDate(format!("{year}-{:02}-{:02}", reference.month, reference.day)))
}

/// Completed years of age on `on`.
pub fn age_at_reference(birth: NaiveDate, on: NaiveDate) -> Result<f64> {
    if on < birth {
        return Err(Error::InvalidDate(format!("reference {on} precedes birth {birth}")));
    }
    let mut years = on.year() - birth.year();
    if (on.month(), on.day()) < (birth.month(), birth.day()) {
        years -= 1;
    }
    Ok(years as f64)
}
