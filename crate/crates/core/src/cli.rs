//! Batch runner behind the `agecurve` binary.
//!
//! A run reads a JSON [`RunConfig`], applies command-line overrides, and
//! writes tidy CSV/JSON files into `<out>/<subcommand>/`. Files are staged in
//! a sibling temporary directory and renamed into place only when the whole
//! subcommand succeeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::basis::BasisSpec;
use crate::cluster::{cluster_report, ClusterConfig};
use crate::curveops::summarize;
use crate::error::{Error, Result};
use crate::fpca::{fpca_decompose, mean_curve, variance_curve, FpcaModel};
use crate::inference::{
    histogram, permutation_test_multi, permutation_test_with, t_test, Alternative, PermTestOptions,
};
use crate::ingest::{
    filter_mlb_cohort, filter_nba_cohort, iso_by_player, load_csv, split_power_groups, write_exclusions, MlbFilter,
    NbaFilter, SchemaConfig, SeasonRecord, POWER_THRESHOLD,
};
use crate::pace::{conditional_scores_detailed, fit_pace, reconstruct, PaceConfig, PaceModel};
use crate::quadrature::{linspace, trapezoid_weights};
use crate::simulate::{sparse_sample, SparseDesign, Truth};
use crate::smooth::{demean, smooth_cohort, LambdaMode, PlayerSeries, SmoothedCurve};

pub const DEFAULT_SEED: u64 = 20_170_101;
/// Version of the output file layout.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subcommand {
    Smooth,
    Fpca,
    Pace,
    Permtest,
    Cluster,
    Summary,
    Simulate,
}

impl Subcommand {
    pub fn name(&self) -> &'static str {
        match self {
            Subcommand::Smooth => "smooth",
            Subcommand::Fpca => "fpca",
            Subcommand::Pace => "pace",
            Subcommand::Permtest => "permtest",
            Subcommand::Cluster => "cluster",
            Subcommand::Summary => "summary",
            Subcommand::Simulate => "simulate",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CohortKind {
    /// Every row, grouped by player, ages as given.
    #[default]
    None,
    Mlb,
    Nba,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    /// CSV path, relative paths resolve against the config file.
    pub path: PathBuf,
    pub schema: SchemaConfig,
    pub cohort: CohortKind,
    pub mlb: MlbFilter,
    pub nba: NbaFilter,
    /// Subtract each player's own mean before any fitting.
    pub demean: bool,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::new(),
            schema: SchemaConfig::default(),
            cohort: CohortKind::None,
            mlb: MlbFilter::default(),
            nba: NbaFilter::default(),
            demean: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisConfig {
    pub degree: usize,
    /// Explicit interior knots; when absent `knot_count` equally spaced knots.
    pub interior_knots: Option<Vec<f64>>,
    pub knot_count: usize,
    /// Defaults to the pooled range of observation times.
    pub endpoints: Option<(f64, f64)>,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            degree: 3,
            interior_knots: None,
            knot_count: 5,
            endpoints: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothConfig {
    pub basis: BasisConfig,
    pub lambda: LambdaMode,
    /// Evaluation grid for curve outputs.
    pub grid_size: usize,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        Self {
            basis: BasisConfig::default(),
            lambda: LambdaMode::default(),
            grid_size: 201,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FpcaConfig {
    pub grid_size: usize,
    pub num_components: Option<usize>,
    /// Components are displayed as `mean ± multiple·sqrt(λ)·ψ`.
    pub display_multiple: f64,
}

impl Default for FpcaConfig {
    fn default() -> Self {
        Self {
            grid_size: crate::fpca::DEFAULT_GRID_SIZE,
            num_components: None,
            display_multiple: 2.0,
        }
    }
}

/// Where component scores come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSource {
    #[default]
    Fpca,
    Pace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupConfig {
    /// Metadata column holding the group label.
    pub column: String,
    /// The two labels compared; default the two distinct values, sorted.
    pub labels: Option<(String, String)>,
    /// Split on early-career ISO instead of a column: `power` vs `non_power`.
    pub power_split: bool,
    pub iso_ages: Vec<i64>,
    pub power_threshold: f64,
}

impl Default for GroupConfig {
    fn default() -> Self {
        Self {
            column: "group".into(),
            labels: None,
            power_split: false,
            iso_ages: vec![24, 25],
            power_threshold: POWER_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PermtestConfig {
    pub source: ScoreSource,
    pub groups: GroupConfig,
    /// Leading components tested; more than one uses the Euclidean norm of
    /// the mean difference.
    pub num_pcs: usize,
    pub replications: usize,
    pub strict: bool,
    pub exact_threshold: usize,
    /// Direction of the accompanying Welch t-test; without it no t-test is
    /// reported.
    pub alternative: Option<Alternative>,
    pub histogram_bins: usize,
}

impl Default for PermtestConfig {
    fn default() -> Self {
        Self {
            source: ScoreSource::Fpca,
            groups: GroupConfig::default(),
            num_pcs: 1,
            replications: crate::inference::DEFAULT_REPLICATIONS,
            strict: false,
            exact_threshold: crate::inference::DEFAULT_EXACT_THRESHOLD,
            alternative: None,
            histogram_bins: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub source: ScoreSource,
    #[serde(flatten)]
    pub settings: ClusterConfig,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            source: ScoreSource::Fpca,
            settings: ClusterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SummaryConfig {
    /// Near-peak tolerance as a fraction of the peak value.
    pub near_peak_fraction: f64,
}

impl Default for SummaryConfig {
    fn default() -> Self {
        Self { near_peak_fraction: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(flatten)]
    pub design: SparseDesign,
    /// Season year assigned to time `t` is `base_year + floor(t)`.
    pub base_year: i32,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            design: SparseDesign::default(),
            base_year: 1990,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PaceSection {
    #[serde(flatten)]
    pub settings: PaceConfig,
    /// Ground-truth sidecar written by `simulate`; when given, the run also
    /// reports reconstruction error against it.
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub input: Option<InputConfig>,
    pub smooth: SmoothConfig,
    pub fpca: FpcaConfig,
    pub pace: PaceSection,
    pub permtest: PermtestConfig,
    pub cluster: ClusterSection,
    pub summary: SummaryConfig,
    pub simulate: SimulateConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("invalid config: {e}")]))
    }

    /// Set a dotted path such as `permtest.replications` to a value. The
    /// value is parsed as JSON, falling back to a plain string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(vec![format!("override {assignment:?} is not key=value")]))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut tree = serde_json::to_value(&*self)?;
        let mut node = &mut tree;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            }
            let obj = node
                .as_object_mut()
                .ok_or_else(|| Error::Config(vec![format!("override {key:?}: {part:?} is not inside an object")]))?;
            if i + 1 == parts.len() {
                obj.insert(part.to_string(), value.clone());
                break;
            }
            node = obj.entry(part.to_string()).or_insert(Value::Null);
        }
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(vec![format!("override {key:?}: {e}")]))?;
        Ok(())
    }

    /// Check everything that can be checked before touching data.
    pub fn validate(&self, subcommand: Subcommand, base_dir: &Path) -> Result<()> {
        let mut errs = Vec::new();
        let needs_input = !matches!(subcommand, Subcommand::Simulate);
        match (&self.input, needs_input) {
            (None, true) => errs.push(format!("{} requires an input section", subcommand.name())),
            (Some(input), true) => {
                let p = resolve(base_dir, &input.path);
                if input.path.as_os_str().is_empty() {
                    errs.push("input.path is empty".into());
                } else if !p.is_file() {
                    errs.push(format!("input.path {} does not exist", p.display()));
                }
            }
            _ => {}
        }
        if let Some(t) = &self.pace.truth {
            if matches!(subcommand, Subcommand::Pace) && !resolve(base_dir, t).is_file() {
                errs.push(format!("pace.truth {} does not exist", t.display()));
            }
        }
        if self.smooth.grid_size < 2 {
            errs.push("smooth.grid_size must be >= 2".into());
        }
        if self.fpca.grid_size < 2 {
            errs.push("fpca.grid_size must be >= 2".into());
        }
        if let Err(Error::Config(e)) = self.pace.settings.validate() {
            errs.extend(e);
        }
        if self.permtest.num_pcs == 0 {
            errs.push("permtest.num_pcs must be >= 1".into());
        }
        if self.permtest.replications == 0 {
            errs.push("permtest.replications must be >= 1".into());
        }
        if self.permtest.histogram_bins == 0 {
            errs.push("permtest.histogram_bins must be >= 1".into());
        }
        let c = &self.cluster.settings;
        if c.k_range.is_empty() || c.k_range.contains(&0) {
            errs.push("cluster.k_range must be non-empty and positive".into());
        }
        if c.runs == 0 || c.restarts == 0 || c.num_pcs == 0 {
            errs.push("cluster.runs, cluster.restarts and cluster.num_pcs must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.summary.near_peak_fraction) {
            errs.push("summary.near_peak_fraction must be in [0, 1)".into());
        }
        if matches!(subcommand, Subcommand::Simulate) {
            if let Err(Error::Config(e)) = self.simulate.design.validate() {
                errs.extend(e);
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Everything a run needs besides the subcommand.
#[derive(Debug, Clone)]
pub struct RunRequest {
    pub config_path: PathBuf,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    schema_version: u32,
    subcommand: &'static str,
    seed: u64,
    config: &'a RunConfig,
    outputs: Vec<String>,
}

/// Staged output directory.
struct Output {
    staging: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.staging.join(name)
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
        let mut w = csv::Writer::from_path(self.path(name))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.path(name), text)?;
        Ok(())
    }
}

fn num(v: f64) -> String {
    v.to_string()
}

/// Parse, validate and execute one subcommand. Returns the directory that
/// received the outputs.
pub fn run(subcommand: Subcommand, request: &RunRequest) -> Result<PathBuf> {
    let text = fs::read_to_string(&request.config_path)
        .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", request.config_path.display())]))?;
    let mut config = RunConfig::from_json(&text)?;
    for o in &request.overrides {
        config.apply_override(o)?;
    }
    if let Some(seed) = request.seed {
        config.seed = Some(seed);
    }
    let seed = *config.seed.get_or_insert(DEFAULT_SEED);
    let base_dir = request
        .config_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    config.validate(subcommand, &base_dir)?;

    fs::create_dir_all(&request.out_dir)?;
    let target = request.out_dir.join(subcommand.name());
    let staging = request
        .out_dir
        .join(format!(".{}.staging-{}", subcommand.name(), std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    let mut out = Output {
        staging: staging.clone(),
        files: Vec::new(),
    };
    let ctx = Context {
        config: &config,
        base_dir: &base_dir,
        seed,
    };
    let result = match subcommand {
        Subcommand::Simulate => run_simulate(&ctx, &mut out),
        Subcommand::Smooth => run_smooth(&ctx, &mut out),
        Subcommand::Summary => run_summary(&ctx, &mut out),
        Subcommand::Fpca => run_fpca(&ctx, &mut out),
        Subcommand::Pace => run_pace(&ctx, &mut out),
        Subcommand::Permtest => run_permtest(&ctx, &mut out),
        Subcommand::Cluster => run_cluster(&ctx, &mut out),
    };
    if let Err(e) = result {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    let mut files = out.files.clone();
    files.sort();
    files.dedup();
    let manifest = Manifest {
        tool: "agecurve",
        version: env!("CARGO_PKG_VERSION"),
        schema_version: SCHEMA_VERSION,
        subcommand: subcommand.name(),
        seed,
        config: &config,
        outputs: files,
    };
    out.json("manifest.json", &manifest)?;

    // promote
    let retired = request.out_dir.join(format!(".{}.old-{}", subcommand.name(), std::process::id()));
    if target.exists() {
        fs::rename(&target, &retired)?;
    }
    fs::rename(&staging, &target)?;
    if retired.exists() {
        fs::remove_dir_all(&retired)?;
    }
    Ok(target)
}

struct Context<'a> {
    config: &'a RunConfig,
    base_dir: &'a Path,
    seed: u64,
}

struct Loaded {
    records: Vec<SeasonRecord>,
    series: Vec<PlayerSeries>,
}

impl Context<'_> {
    fn input(&self) -> &InputConfig {
        self.config.input.as_ref().expect("validated")
    }

    /// Read the CSV, apply the cohort filter, write rejects and exclusions.
    fn load(&self, out: &mut Output) -> Result<Loaded> {
        let input = self.input();
        let path = resolve(self.base_dir, &input.path);
        let loaded = load_csv(&path, &input.schema)?;
        out.csv(
            "rejects.csv",
            &["row", "reason"],
            loaded.rejects.iter().map(|r| vec![r.row.to_string(), r.reason.clone()]),
        )?;
        let series = match input.cohort {
            CohortKind::Mlb => {
                let c = filter_mlb_cohort(&loaded.records, &input.mlb, &input.schema.meta_columns)?;
                write_exclusions(out.path("exclusions.csv"), &c.exclusions)?;
                write_age_counts(out, &c.per_age_counts)?;
                c.series
            }
            CohortKind::Nba => {
                let c = filter_nba_cohort(&loaded.records, &input.nba, &input.schema.meta_columns)?;
                write_exclusions(out.path("exclusions.csv"), &c.exclusions)?;
                write_age_counts(out, &c.per_age_counts)?;
                c.series
            }
            CohortKind::None => group_records(&loaded.records, &input.schema.meta_columns)?,
        };
        if series.is_empty() {
            return Err(Error::InsufficientData("no subjects after filtering".into()));
        }
        let series = if input.demean {
            series.iter().map(demean).collect()
        } else {
            series
        };
        Ok(Loaded {
            records: loaded.records,
            series,
        })
    }

    fn basis(&self, series: &[PlayerSeries]) -> Result<BasisSpec> {
        let b = &self.config.smooth.basis;
        let endpoints = b.endpoints.unwrap_or_else(|| pooled_range(series));
        match &b.interior_knots {
            Some(knots) => BasisSpec::new(b.degree, knots, endpoints),
            None => BasisSpec::uniform(b.degree, b.knot_count, endpoints),
        }
    }

    fn smooth(&self, out: &mut Output) -> Result<(Loaded, Vec<SmoothedCurve>)> {
        let loaded = self.load(out)?;
        let spec = self.basis(&loaded.series)?;
        let curves = smooth_cohort(&spec, &loaded.series, &self.config.smooth.lambda)?;
        Ok((loaded, curves))
    }
}

fn write_age_counts(out: &mut Output, counts: &BTreeMap<i64, usize>) -> Result<()> {
    out.csv(
        "age_counts.csv",
        &["age", "count"],
        counts.iter().map(|(a, c)| vec![a.to_string(), c.to_string()]),
    )
}

fn pooled_range(series: &[PlayerSeries]) -> (f64, f64) {
    let lo = series.iter().flat_map(|s| s.times.iter().copied()).fold(f64::INFINITY, f64::min);
    let hi = series.iter().flat_map(|s| s.times.iter().copied()).fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// One series per player, sorted by id, times being the recorded ages.
pub fn group_records(records: &[SeasonRecord], meta_columns: &[String]) -> Result<Vec<PlayerSeries>> {
    let mut by_player: BTreeMap<&str, Vec<&SeasonRecord>> = BTreeMap::new();
    for r in records {
        by_player.entry(&r.player_id).or_default().push(r);
    }
    by_player
        .into_iter()
        .map(|(id, mut rows)| {
            rows.sort_by(|a, b| a.age.total_cmp(&b.age));
            let mut s = PlayerSeries::new(id, rows.iter().map(|r| r.age).collect(), rows.iter().map(|r| r.value).collect())?;
            for col in meta_columns {
                if let Some(v) = rows.iter().find_map(|r| r.extra.get(col)) {
                    s = s.with_meta(col.clone(), v.clone());
                }
            }
            Ok(s)
        })
        .collect()
}

fn run_simulate(ctx: &Context, out: &mut Output) -> Result<()> {
    let sim = &ctx.config.simulate;
    let sample = sparse_sample(&sim.design, ctx.seed)?;
    let rows = sample.series.iter().flat_map(|s| {
        let group = s.meta.get("group").cloned().unwrap_or_default();
        s.times
            .iter()
            .zip(&s.values)
            .map(|(t, y)| {
                vec![
                    s.id.clone(),
                    (sim.base_year + t.floor() as i32).to_string(),
                    num(*t),
                    num(*y),
                    group.clone(),
                ]
            })
            .collect::<Vec<_>>()
    });
    out.csv("simulated.csv", &["player_id", "season_year", "age", "value", "group"], rows)?;
    out.json("truth.json", &sample.truth)
}

fn curve_grid(curves: &[SmoothedCurve], size: usize) -> Vec<f64> {
    let (lo, hi) = curves[0].spec.domain();
    linspace(lo, hi, size)
}

fn run_smooth(ctx: &Context, out: &mut Output) -> Result<()> {
    let (_, curves) = ctx.smooth(out)?;
    let j = curves[0].coefficients.len();
    let mut header = vec!["subject_id".to_string(), "lambda".to_string()];
    header.extend((0..j).map(|i| format!("coef_{i}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv(
        "coefficients.csv",
        &header_refs,
        curves.iter().map(|c| {
            let mut row = vec![c.subject_id.clone(), num(c.lambda)];
            row.extend(c.coefficients.iter().map(|v| num(*v)));
            row
        }),
    )?;
    let grid = curve_grid(&curves, ctx.config.smooth.grid_size);
    let mut rows = Vec::new();
    for c in &curves {
        let f = c.eval_grid(&grid, 0)?;
        let d = c.eval_grid(&grid, 1)?;
        for i in 0..grid.len() {
            rows.push(vec![c.subject_id.clone(), num(grid[i]), num(f[i]), num(d[i])]);
        }
    }
    out.csv("curves.csv", &["subject_id", "t", "value", "derivative"], rows)?;
    out.json("basis.json", &curves[0].spec)
}

fn run_summary(ctx: &Context, out: &mut Output) -> Result<()> {
    let (loaded, curves) = ctx.smooth(out)?;
    let grid = curve_grid(&curves, ctx.config.smooth.grid_size);
    let mean = mean_curve(&curves, &grid)?;
    let variance = if curves.len() >= 2 {
        variance_curve(&curves, &grid)?
    } else {
        vec![f64::NAN; grid.len()]
    };
    let derivs: Vec<Vec<f64>> = curves.iter().map(|c| c.eval_grid(&grid, 1)).collect::<Result<_>>()?;
    let mean_deriv: Vec<f64> = (0..grid.len())
        .map(|i| derivs.iter().map(|d| d[i]).sum::<f64>() / derivs.len() as f64)
        .collect();
    out.csv(
        "mean_curve.csv",
        &["t", "mean", "derivative", "variance"],
        (0..grid.len()).map(|i| vec![num(grid[i]), num(mean[i]), num(mean_deriv[i]), num(variance[i])]),
    )?;

    let domain = curves[0].spec.domain();
    let fraction = ctx.config.summary.near_peak_fraction;
    out.csv(
        "summaries.csv",
        &["subject_id", "peak_age", "peak_value", "near_peak_lo", "near_peak_hi", "integral"],
        curves.iter().map(|c| {
            let (t, v, near, area) = summarize(c.as_fn(), domain, fraction);
            let (a, b) = near.map(|(a, b)| (num(a), num(b))).unwrap_or_default();
            vec![c.subject_id.clone(), num(t), num(v), a, b, num(area)]
        }),
    )?;

    // group means by the first metadata column present
    let groups = group_labels(&loaded.series, &ctx.input().schema.meta_columns);
    if let Some((column, labels)) = groups {
        let mut rows = Vec::new();
        for label in labels {
            let members: Vec<SmoothedCurve> = curves
                .iter()
                .zip(&loaded.series)
                .filter(|(_, s)| s.meta.get(&column) == Some(&label))
                .map(|(c, _)| c.clone())
                .collect();
            let m = mean_curve(&members, &grid)?;
            for i in 0..grid.len() {
                rows.push(vec![column.clone(), label.clone(), members.len().to_string(), num(grid[i]), num(m[i])]);
            }
        }
        out.csv("group_means.csv", &["column", "group", "n", "t", "mean"], rows)?;
    }
    Ok(())
}

fn group_labels(series: &[PlayerSeries], columns: &[String]) -> Option<(String, Vec<String>)> {
    columns.iter().find_map(|c| {
        let mut labels: Vec<String> = series.iter().filter_map(|s| s.meta.get(c).cloned()).collect();
        labels.sort();
        labels.dedup();
        (!labels.is_empty()).then(|| (c.clone(), labels))
    })
}

fn fit_fpca(ctx: &Context, out: &mut Output) -> Result<(Loaded, Vec<SmoothedCurve>, FpcaModel)> {
    let (loaded, curves) = ctx.smooth(out)?;
    let grid = curve_grid(&curves, ctx.config.fpca.grid_size);
    let model = fpca_decompose(&curves, &grid, ctx.config.fpca.num_components)?;
    Ok((loaded, curves, model))
}

fn write_fpca(ctx: &Context, out: &mut Output, model: &FpcaModel) -> Result<()> {
    let k = model.num_components();
    let mut header = vec!["t".to_string(), "mean".to_string()];
    header.extend((1..=k).map(|i| format!("psi_{i}")));
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv(
        "eigenfunctions.csv",
        &refs,
        (0..model.grid.len()).map(|g| {
            let mut row = vec![num(model.grid[g]), num(model.mean[g])];
            row.extend(model.eigenfunctions.iter().map(|p| num(p[g])));
            row
        }),
    )?;
    let mut cumulative = 0.0;
    out.csv(
        "eigenvalues.csv",
        &["component", "eigenvalue", "varex", "cumulative_varex"],
        (0..k).map(|i| {
            cumulative += model.varex[i];
            vec![(i + 1).to_string(), num(model.eigenvalues[i]), num(model.varex[i]), num(cumulative)]
        }),
    )?;
    write_scores(out, "scores.csv", &model.subject_ids, &model.scores)?;
    let mut rows = Vec::new();
    for c in 0..k {
        let (plus, minus) = model.component_display(c, ctx.config.fpca.display_multiple);
        for g in 0..model.grid.len() {
            rows.push(vec![(c + 1).to_string(), num(model.grid[g]), num(model.mean[g]), num(plus[g]), num(minus[g])]);
        }
    }
    out.csv("pc_display.csv", &["component", "t", "mean", "plus", "minus"], rows)
}

fn write_scores(out: &mut Output, name: &str, ids: &[String], scores: &[Vec<f64>]) -> Result<()> {
    let k = scores.first().map_or(0, Vec::len);
    let mut header = vec!["subject_id".to_string()];
    header.extend((1..=k).map(|i| format!("score_{i}")));
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv(
        name,
        &refs,
        ids.iter().zip(scores).map(|(id, s)| {
            let mut row = vec![id.clone()];
            row.extend(s.iter().map(|v| num(*v)));
            row
        }),
    )
}

fn run_fpca(ctx: &Context, out: &mut Output) -> Result<()> {
    let (_, _, model) = fit_fpca(ctx, out)?;
    write_fpca(ctx, out, &model)
}

/// Model, per-subject scores at `J_selected`, and ridge flags.
fn fit_pace_scores(ctx: &Context, series: &[PlayerSeries]) -> Result<(PaceModel, Vec<Vec<f64>>, Vec<bool>)> {
    let model = fit_pace(series, &ctx.config.pace.settings)?;
    let predictions: Vec<_> = series
        .iter()
        .map(|s| conditional_scores_detailed(&model, s, model.j_selected))
        .collect::<Result<_>>()?;
    let flags = predictions.iter().map(|p| p.ridge_repaired).collect();
    let scores = predictions.into_iter().map(|p| p.scores).collect();
    Ok((model, scores, flags))
}

#[derive(Serialize)]
struct PaceSummary<'a> {
    sigma2: f64,
    j_selected: usize,
    eigenvalues: &'a [f64],
    diagnostics: PaceDiagnosticsView<'a>,
}

#[derive(Serialize)]
struct PaceDiagnosticsView<'a> {
    mean_lambda: f64,
    surface_bandwidth: f64,
    surface_cv: &'a [f64],
    diagonal_bandwidth: f64,
    diagonal_cv: &'a [f64],
    raw_sigma2: f64,
    sigma2_floor: f64,
    loocv_errors: &'a [f64],
    loocv_se: &'a [f64],
    j_selection: crate::pace::JSelection,
    j_rule: crate::pace::JRule,
    ridge_repaired_subjects: usize,
}

/// Integrated squared error of PACE reconstructions and of linear
/// interpolation, against the simulation truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthComparison {
    pub subjects: usize,
    pub median_ise_pace: f64,
    pub median_ise_linear: f64,
    pub sigma2_true: f64,
    pub sigma2_estimate: f64,
    pub leading_cosine: f64,
}

/// Linear interpolation through the observations, constant beyond them.
pub fn linear_interpolation(times: &[f64], values: &[f64], t: f64) -> f64 {
    let n = times.len();
    if t <= times[0] {
        return values[0];
    }
    if t >= times[n - 1] {
        return values[n - 1];
    }
    let i = times.partition_point(|x| *x <= t) - 1;
    let u = (t - times[i]) / (times[i + 1] - times[i]);
    values[i] * (1.0 - u) + values[i + 1] * u
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Compare a fitted model with simulation truth on the model grid.
pub fn compare_with_truth(model: &PaceModel, series: &[PlayerSeries], scores: &[Vec<f64>], truth: &Truth) -> Result<TruthComparison> {
    let w = trapezoid_weights(&model.grid);
    let index: BTreeMap<&str, usize> = truth.subject_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut ise_pace = Vec::new();
    let mut ise_lin = Vec::new();
    for (s, sc) in series.iter().zip(scores) {
        let Some(&i) = index.get(s.id.as_str()) else { continue };
        let rec = reconstruct(model, sc, &model.grid)?;
        let (mut a, mut b) = (0.0, 0.0);
        for (g, &t) in model.grid.iter().enumerate() {
            let f = truth.curve(i, t);
            a += w[g] * (rec[g] - f).powi(2);
            b += w[g] * (linear_interpolation(&s.times, &s.values, t) - f).powi(2);
        }
        ise_pace.push(a);
        ise_lin.push(b);
    }
    if ise_pace.is_empty() {
        return Err(Error::InsufficientData("no subject matches the truth sidecar".into()));
    }
    let truth_psi: Vec<f64> = model
        .grid
        .iter()
        .map(|&t| crate::simulate::truth_eigenfunction(truth.domain, 0, t))
        .collect();
    let cosine = model.eigenfunctions[0].iter().zip(&truth_psi).zip(&w).map(|((a, b), w)| a * b * w).sum::<f64>().abs();
    Ok(TruthComparison {
        subjects: ise_pace.len(),
        median_ise_pace: median(ise_pace),
        median_ise_linear: median(ise_lin),
        sigma2_true: truth.noise_var,
        sigma2_estimate: model.sigma2,
        leading_cosine: cosine,
    })
}

fn run_pace(ctx: &Context, out: &mut Output) -> Result<()> {
    let loaded = ctx.load(out)?;
    let (model, scores, flags) = fit_pace_scores(ctx, &loaded.series)?;
    let d = &model.diagnostics;
    out.json(
        "pace_model.json",
        &PaceSummary {
            sigma2: model.sigma2,
            j_selected: model.j_selected,
            eigenvalues: &model.eigenvalues,
            diagnostics: PaceDiagnosticsView {
                mean_lambda: d.mean_lambda,
                surface_bandwidth: d.surface_bandwidth,
                surface_cv: &d.surface_cv,
                diagonal_bandwidth: d.diagonal_bandwidth,
                diagonal_cv: &d.diagonal_cv,
                raw_sigma2: d.raw_sigma2,
                sigma2_floor: d.sigma2_floor,
                loocv_errors: &d.loocv_errors,
                loocv_se: &d.loocv_se,
                j_selection: d.j_selection,
                j_rule: d.j_rule,
                ridge_repaired_subjects: flags.iter().filter(|f| **f).count(),
            },
        },
    )?;
    let variance = model.variance_function();
    let mut header = vec!["t".to_string(), "mean".to_string(), "variance".to_string()];
    header.extend((1..=model.num_components()).map(|i| format!("psi_{i}")));
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv(
        "pace_curves.csv",
        &refs,
        (0..model.grid.len()).map(|g| {
            let mut row = vec![num(model.grid[g]), num(model.mean[g]), num(variance[g])];
            row.extend(model.eigenfunctions.iter().map(|p| num(p[g])));
            row
        }),
    )?;
    let g = model.grid.len();
    out.csv(
        "pace_covariance.csv",
        &["s", "t", "covariance"],
        (0..g).flat_map(|a| (0..g).map(move |b| (a, b))).map(|(a, b)| {
            vec![num(model.grid[a]), num(model.grid[b]), num(model.cov_surface[a][b])]
        }),
    )?;
    let ids: Vec<String> = loaded.series.iter().map(|s| s.id.clone()).collect();
    write_scores(out, "pace_scores.csv", &ids, &scores)?;
    let mut rows = Vec::new();
    for (s, sc) in loaded.series.iter().zip(&scores) {
        let rec = reconstruct(&model, sc, &model.grid)?;
        for (t, v) in model.grid.iter().zip(rec) {
            rows.push(vec![s.id.clone(), num(*t), num(v)]);
        }
    }
    out.csv("pace_reconstructions.csv", &["subject_id", "t", "value"], rows)?;
    if let Some(path) = &ctx.config.pace.truth {
        let text = fs::read_to_string(resolve(ctx.base_dir, path))?;
        let truth: Truth = serde_json::from_str(&text)?;
        let cmp = compare_with_truth(&model, &loaded.series, &scores, &truth)?;
        out.json("truth_comparison.json", &cmp)?;
    }
    Ok(())
}

/// Subject ids, their scores (rows), curves on a common grid, and the grid.
struct ScoreTable {
    ids: Vec<String>,
    scores: Vec<Vec<f64>>,
    curves: Vec<Vec<f64>>,
    grid: Vec<f64>,
    series: Vec<PlayerSeries>,
    records: Vec<SeasonRecord>,
}

fn score_table(ctx: &Context, out: &mut Output, source: ScoreSource) -> Result<ScoreTable> {
    match source {
        ScoreSource::Fpca => {
            let (loaded, curves, model) = fit_fpca(ctx, out)?;
            let grid = model.grid.clone();
            let values = curves.iter().map(|c| c.eval_grid(&grid, 0)).collect::<Result<_>>()?;
            Ok(ScoreTable {
                ids: model.subject_ids.clone(),
                scores: model.scores.clone(),
                curves: values,
                grid,
                series: loaded.series,
                records: loaded.records,
            })
        }
        ScoreSource::Pace => {
            let loaded = ctx.load(out)?;
            let (model, scores, _) = fit_pace_scores(ctx, &loaded.series)?;
            let curves = scores.iter().map(|s| reconstruct(&model, s, &model.grid)).collect::<Result<_>>()?;
            Ok(ScoreTable {
                ids: loaded.series.iter().map(|s| s.id.clone()).collect(),
                scores,
                curves,
                grid: model.grid.clone(),
                series: loaded.series,
                records: loaded.records,
            })
        }
    }
}

/// Central differences, one-sided at the ends.
fn derivative(grid: &[f64], values: &[f64]) -> Vec<f64> {
    let n = grid.len();
    (0..n)
        .map(|i| {
            let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
            (values[b] - values[a]) / (grid[b] - grid[a])
        })
        .collect()
}

#[derive(Serialize)]
struct PermtestOutput<'a> {
    source: ScoreSource,
    group_labels: (String, String),
    group_sizes: (usize, usize),
    num_pcs: usize,
    observed_t: f64,
    p_value: f64,
    replications: usize,
    seed: u64,
    exact: bool,
    strict: bool,
    welch: Option<crate::inference::TestResult>,
    excluded_subjects: &'a [String],
}

fn run_permtest(ctx: &Context, out: &mut Output) -> Result<()> {
    let cfg = &ctx.config.permtest;
    let table = score_table(ctx, out, cfg.source)?;
    let available = table.scores.first().map_or(0, Vec::len);
    if cfg.num_pcs > available {
        return Err(Error::InvalidArgument(format!(
            "permtest.num_pcs = {} but only {available} components are available",
            cfg.num_pcs
        )));
    }
    let (labels, membership, excluded) = assign_groups(ctx, &table)?;
    let pick = |g: usize| -> Vec<Vec<f64>> {
        table
            .scores
            .iter()
            .zip(&membership)
            .filter(|(_, m)| **m == Some(g))
            .map(|(s, _)| s[..cfg.num_pcs].to_vec())
            .collect()
    };
    let (p, q) = (pick(0), pick(1));
    if p.is_empty() || q.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let opts = PermTestOptions {
        replications: cfg.replications,
        seed: ctx.seed,
        strict: cfg.strict,
        exact_threshold: cfg.exact_threshold,
    };
    let (result, welch) = if cfg.num_pcs == 1 {
        let a: Vec<f64> = p.iter().map(|r| r[0]).collect();
        let b: Vec<f64> = q.iter().map(|r| r[0]).collect();
        let welch = match cfg.alternative {
            Some(alt) if a.len() >= 2 && b.len() >= 2 => Some(t_test(&a, &b, alt)?),
            _ => None,
        };
        (permutation_test_with(&a, &b, &opts)?, welch)
    } else {
        (permutation_test_multi(&p, &q, &opts)?, None)
    };
    out.json(
        "permtest.json",
        &PermtestOutput {
            source: cfg.source,
            group_labels: labels.clone(),
            group_sizes: (p.len(), q.len()),
            num_pcs: cfg.num_pcs,
            observed_t: result.observed_t,
            p_value: result.p_value,
            replications: result.replications,
            seed: result.seed,
            exact: result.exact,
            strict: result.strict,
            welch,
            excluded_subjects: &excluded,
        },
    )?;
    out.csv(
        "null_histogram.csv",
        &["bin_lo", "bin_hi", "count"],
        histogram(&result.null_sample, cfg.histogram_bins)
            .into_iter()
            .map(|(a, b, c)| vec![num(a), num(b), c.to_string()]),
    )?;
    // group mean curves
    let mut rows = Vec::new();
    for (g, label) in [(0usize, &labels.0), (1, &labels.1)] {
        let members: Vec<&Vec<f64>> = table.curves.iter().zip(&membership).filter(|(_, m)| **m == Some(g)).map(|(c, _)| c).collect();
        for (i, t) in table.grid.iter().enumerate() {
            let m = members.iter().map(|c| c[i]).sum::<f64>() / members.len() as f64;
            rows.push(vec![label.clone(), num(*t), num(m)]);
        }
    }
    out.csv("group_means.csv", &["group", "t", "mean"], rows)
}

type GroupAssignment = ((String, String), Vec<Option<usize>>, Vec<String>);

fn assign_groups(ctx: &Context, table: &ScoreTable) -> Result<GroupAssignment> {
    let cfg = &ctx.config.permtest.groups;
    if cfg.power_split {
        let (iso, _) = iso_by_player(&table.records, &ctx.input().schema, &cfg.iso_ages);
        let split = split_power_groups(&table.series, &iso, cfg.power_threshold);
        let power: std::collections::BTreeSet<&str> = split.power.iter().map(|s| s.id.as_str()).collect();
        let membership = table
            .ids
            .iter()
            .map(|id| {
                if split.excluded.contains(id) {
                    None
                } else if power.contains(id.as_str()) {
                    Some(0)
                } else {
                    Some(1)
                }
            })
            .collect();
        return Ok((("power".into(), "non_power".into()), membership, split.excluded));
    }
    let values: Vec<Option<&String>> = table.series.iter().map(|s| s.meta.get(&cfg.column)).collect();
    let labels = match &cfg.labels {
        Some(l) => l.clone(),
        None => {
            let mut distinct: Vec<&String> = values.iter().flatten().copied().collect();
            distinct.sort();
            distinct.dedup();
            if distinct.len() != 2 {
                return Err(Error::InvalidArgument(format!(
                    "group column {:?} has {} distinct values; set permtest.groups.labels",
                    cfg.column,
                    distinct.len()
                )));
            }
            (distinct[0].clone(), distinct[1].clone())
        }
    };
    let mut excluded = Vec::new();
    let membership = values
        .iter()
        .zip(&table.ids)
        .map(|(v, id)| match v {
            Some(v) if **v == labels.0 => Some(0),
            Some(v) if **v == labels.1 => Some(1),
            _ => {
                excluded.push(id.clone());
                None
            }
        })
        .collect();
    Ok((labels, membership, excluded))
}

fn run_cluster(ctx: &Context, out: &mut Output) -> Result<()> {
    let section = &ctx.config.cluster;
    let cfg = &section.settings;
    let table = score_table(ctx, out, section.source)?;
    let available = table.scores.first().map_or(0, Vec::len);
    let d = cfg.num_pcs.min(available);
    if d == 0 {
        return Err(Error::InsufficientData("no component scores to cluster".into()));
    }
    let n = table.scores.len();
    let points = DMatrix::from_fn(n, d, |i, j| table.scores[i][j]);
    let k_range: Vec<usize> = cfg.k_range.iter().copied().filter(|k| *k <= n).collect();
    let report = cluster_report(&points, &table.ids, &k_range, cfg.runs, cfg.restarts, ctx.seed)?;
    out.json("cluster_report.json", &report)?;
    out.csv(
        "cluster_sse.csv",
        &["k", "actual_sse", "log_actual_sse", "null_min_sse", "null_mean_sse", "gap_min", "gap_mean"],
        (0..report.k_range.len()).map(|i| {
            vec![
                report.k_range[i].to_string(),
                num(report.actual_sse[i]),
                num(report.log_actual_sse[i]),
                num(report.null_min_sse[i]),
                num(report.null_mean_sse[i]),
                num(report.selection.gap_min[i]),
                num(report.selection.gap_mean[i]),
            ]
        }),
    )?;
    out.csv(
        "cluster_assignments.csv",
        &["subject_id", "cluster"],
        report.assignments.iter().map(|(id, c)| vec![id.clone(), c.to_string()]),
    )?;
    let mut rows = Vec::new();
    for c in 0..report.selected_k {
        let members: Vec<&Vec<f64>> = table
            .curves
            .iter()
            .zip(&report.assignments)
            .filter(|(_, (_, a))| *a == c)
            .map(|(v, _)| v)
            .collect();
        let mean: Vec<f64> = (0..table.grid.len())
            .map(|i| members.iter().map(|m| m[i]).sum::<f64>() / members.len() as f64)
            .collect();
        let deriv = derivative(&table.grid, &mean);
        for i in 0..table.grid.len() {
            rows.push(vec![c.to_string(), members.len().to_string(), num(table.grid[i]), num(mean[i]), num(deriv[i])]);
        }
    }
    out.csv("cluster_curves.csv", &["cluster", "n", "t", "mean", "derivative"], rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let mut c = RunConfig::default();
        c.apply_override("permtest.replications=123").unwrap();
        c.apply_override("cluster.k_range=[1,2,3]").unwrap();
        c.apply_override("input.path=data.csv").unwrap();
        assert_eq!(c.permtest.replications, 123);
        assert_eq!(c.cluster.settings.k_range, vec![1, 2, 3]);
        assert_eq!(c.input.unwrap().path, PathBuf::from("data.csv"));
        let mut c = RunConfig::default();
        assert!(matches!(c.apply_override("permtest.bogus=1"), Err(Error::Config(_))));
        assert!(matches!(c.apply_override("noequals"), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_fields_are_config_errors() {
        assert!(matches!(RunConfig::from_json(r#"{"sed": 3}"#), Err(Error::Config(_))));
        assert!(RunConfig::from_json("{}").is_ok());
    }

    #[test]
    fn validation_collects_errors() {
        let mut c = RunConfig::default();
        c.permtest.replications = 0;
        c.cluster.settings.k_range = vec![];
        match c.validate(Subcommand::Permtest, Path::new(".")) {
            Err(Error::Config(errs)) => assert_eq!(errs.len(), 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn linear_baseline_is_flat_outside() {
        let t = [1.0, 2.0, 4.0];
        let y = [0.0, 1.0, 3.0];
        assert_eq!(linear_interpolation(&t, &y, 0.0), 0.0);
        assert_eq!(linear_interpolation(&t, &y, 3.0), 2.0);
        assert_eq!(linear_interpolation(&t, &y, 9.0), 3.0);
    }
}
