//! Experiment orchestration: config parsing, grid execution over
//! `(budget, alpha, repeat)` cells, aggregation and report files.
//!
//! # Config (TOML)
//!
//! ```toml
//! name = "desk"            # label written into every CSV row
//! rounds = 2000            # competition rounds T per cell
//! predictors = 6           # M
//! alpha_grid = [4.0]
//! budget_grid = [0, 100, 200]
//! repeats = 10
//! seed = 1                 # base seed
//! eval_subsample = 3000    # optional; default: whole evaluation split
//! histogram_bins = 50
//! workers = 0              # 0 = one per core
//! audit = false            # record per-round model fingerprints
//! quality = "correctness"  # or { custom = { table = [[...], ...] } }
//!
//! [dataset]
//! label_noise = 0.3
//! eval_count = 1000        # default: min(5000, n / 5)
//! standardize = false
//! [dataset.synthetic]      # or [dataset.csv] path / label_column / has_header
//! means = [[-0.5, 0.0], [0.5, 0.0]]
//! cov_scale = 1.0
//! n = 6000
//!
//! [predictor]              # homogeneous defaults
//! n_seed = 50
//! model = { kind = "logistic" }          # or { kind = "one-hidden-layer", hidden_nodes = 400 }
//! strategy = { type = "entropy", c_ent = 0.3 }
//! [predictor.train]
//! epochs = 10
//! learning_rate = 0.01
//! ```
//!
//! `overrides`, when present, is a list of exactly M tables, one per
//! predictor, each optionally setting `n_seed`, `budget` (fixed, ignores the
//! grid), `budget_scale` (multiplies the grid budget, rounded down), `model`,
//! `strategy` or `train` (replaces the whole train table).
//!
//! # Output files
//!
//! - `raw.csv`: one row per cell, columns [`RAW_COLUMNS`]
//! - `aggregate.csv`: one row per `(n_b, alpha)`, columns
//!   [`aggregate_columns`]; `band` is `2.58 * sd / sqrt(repeats)` with the
//!   sample standard deviation
//! - `cells/nb{i}_a{j}_r{k}.json`: class-quality matrix and Z histogram
//! - `cells/nb{i}_a{j}_r{k}_hist.csv`: `bin_lo,bin_hi,density`
//! - `errors.csv`: `n_b,alpha,repeat,error` for failed cells

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Dataset, LabelColumn, MixtureSpec, NoiseConfig, SplitPair, UserStream};
use crate::environment::{run_competition, MarketConfig, ModelChoice, PredictorConfig, RoundRecord, SelectionMode};
use crate::error::{Error, Result};
use crate::metrics::{ClassQuality, DensityHistogram, MetricReport, PredictionTable, QualityFunction, DEFAULT_BINS};
use crate::models::{ModelState, TrainConfig};
use crate::seed::{self, streams};
use crate::strategy::BuyingStrategy;

const EVAL_STREAM: u64 = 8;
const Z99: f64 = 2.58;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    pub label_column: LabelColumn,
    #[serde(default = "yes")]
    pub has_header: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub csv: Option<CsvSource>,
    pub synthetic: Option<MixtureSpec>,
    #[serde(default)]
    pub standardize: bool,
    #[serde(default = "default_noise")]
    pub label_noise: f64,
    pub eval_count: Option<usize>,
}

fn default_noise() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorDefaults {
    pub n_seed: usize,
    pub model: ModelChoice,
    pub strategy: BuyingStrategy,
    pub train: TrainConfig,
}

impl Default for PredictorDefaults {
    fn default() -> Self {
        Self {
            n_seed: 100,
            model: ModelChoice::default(),
            strategy: BuyingStrategy::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PredictorOverride {
    pub n_seed: Option<usize>,
    pub budget: Option<u64>,
    pub budget_scale: Option<f64>,
    pub model: Option<ModelChoice>,
    pub strategy: Option<BuyingStrategy>,
    pub train: Option<TrainConfig>,
}

/// How a predictor's budget follows the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BudgetRule {
    /// `floor(scale * n_b)`
    Scaled(f64),
    Fixed(u64),
}

impl BudgetRule {
    pub fn resolve(&self, grid_budget: u64) -> u64 {
        match *self {
            BudgetRule::Scaled(s) => (s * grid_budget as f64).floor() as u64,
            BudgetRule::Fixed(b) => b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorTemplate {
    pub n_seed: usize,
    pub budget: BudgetRule,
    pub model: ModelChoice,
    pub strategy: BuyingStrategy,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawConfig {
    name: Option<String>,
    rounds: u64,
    predictors: usize,
    alpha_grid: Vec<f64>,
    budget_grid: Vec<u64>,
    repeats: usize,
    seed: u64,
    eval_subsample: Option<usize>,
    histogram_bins: usize,
    workers: usize,
    audit: bool,
    quality: QualityFunction,
    output_dir: Option<PathBuf>,
    dataset: Option<DatasetConfig>,
    predictor: PredictorDefaults,
    overrides: Option<Vec<PredictorOverride>>,
}

impl Default for RawConfig {
    fn default() -> Self {
        Self {
            name: None,
            rounds: 10_000,
            predictors: 18,
            alpha_grid: vec![0.0, 1.0, 2.0, 4.0],
            budget_grid: vec![0, 100, 200, 400],
            repeats: 30,
            seed: 0,
            eval_subsample: None,
            histogram_bins: DEFAULT_BINS,
            workers: 0,
            audit: false,
            quality: QualityFunction::Correctness,
            output_dir: None,
            dataset: None,
            predictor: PredictorDefaults::default(),
            overrides: None,
        }
    }
}

/// A fully resolved experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetConfig,
    pub rounds: u64,
    pub predictors: Vec<PredictorTemplate>,
    pub alpha_grid: Vec<f64>,
    pub budget_grid: Vec<u64>,
    pub repeats: usize,
    pub seed: u64,
    pub eval_subsample: Option<usize>,
    pub histogram_bins: usize,
    pub workers: usize,
    pub audit: bool,
    pub quality: QualityFunction,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn m(&self) -> usize {
        self.predictors.len()
    }
}

pub fn parse_config_str(text: &str, base_dir: Option<&Path>) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    resolve(raw, base_dir)
}

/// Reads and resolves a config file. Relative CSV paths are taken relative
/// to the config file's directory.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text, path.parent())
}

fn cfg_err<T>(m: String) -> Result<T> {
    Err(Error::Config(m))
}

fn resolve(raw: RawConfig, base_dir: Option<&Path>) -> Result<ExperimentConfig> {
    let Some(mut dataset) = raw.dataset else {
        return cfg_err("missing [dataset] table".into());
    };
    match (&dataset.csv, &dataset.synthetic) {
        (Some(_), Some(_)) => return cfg_err("dataset: set only one of `csv` and `synthetic`".into()),
        (None, None) => return cfg_err("dataset: one of `csv` or `synthetic` is required".into()),
        _ => {}
    }
    if let (Some(csv), Some(dir)) = (&mut dataset.csv, base_dir) {
        if csv.path.is_relative() {
            csv.path = dir.join(&csv.path);
        }
    }
    if !(0.0..=1.0).contains(&dataset.label_noise) {
        return cfg_err(format!("dataset.label_noise = {} outside [0, 1]", dataset.label_noise));
    }
    if raw.predictors < 2 {
        return cfg_err(format!("predictors = {} must be at least 2", raw.predictors));
    }
    if raw.alpha_grid.is_empty() {
        return cfg_err("alpha_grid must not be empty".into());
    }
    if let Some(a) = raw.alpha_grid.iter().find(|a| !(**a >= 0.0) || a.is_infinite()) {
        return cfg_err(format!("alpha_grid: {a} is not a finite non-negative number"));
    }
    if raw.budget_grid.is_empty() {
        return cfg_err("budget_grid must not be empty".into());
    }
    if raw.repeats < 1 {
        return cfg_err("repeats must be at least 1".into());
    }
    if raw.histogram_bins < 1 {
        return cfg_err("histogram_bins must be at least 1".into());
    }
    if raw.eval_subsample == Some(0) {
        return cfg_err("eval_subsample must be positive".into());
    }
    let d = &raw.predictor;
    if d.n_seed < 1 {
        return cfg_err("predictor.n_seed must be at least 1".into());
    }
    d.train.validate().map_err(|e| Error::Config(format!("predictor.train: {e}")))?;
    d.strategy.validate().map_err(|e| Error::Config(format!("predictor.strategy: {e}")))?;

    let template = PredictorTemplate {
        n_seed: d.n_seed,
        budget: BudgetRule::Scaled(1.0),
        model: d.model,
        strategy: d.strategy,
        train: d.train.clone(),
    };
    let predictors = match raw.overrides {
        None => vec![template; raw.predictors],
        Some(list) => {
            if list.len() != raw.predictors {
                return cfg_err(format!(
                    "overrides has {} entries but predictors = {}",
                    list.len(),
                    raw.predictors
                ));
            }
            list.into_iter()
                .enumerate()
                .map(|(i, o)| {
                    let budget = match (o.budget, o.budget_scale) {
                        (Some(_), Some(_)) => {
                            return cfg_err(format!("overrides[{i}]: set only one of budget and budget_scale"))
                        }
                        (Some(b), None) => BudgetRule::Fixed(b),
                        (None, Some(s)) if s >= 0.0 && s.is_finite() => BudgetRule::Scaled(s),
                        (None, Some(s)) => return cfg_err(format!("overrides[{i}].budget_scale = {s} is invalid")),
                        (None, None) => BudgetRule::Scaled(1.0),
                    };
                    let p = PredictorTemplate {
                        n_seed: o.n_seed.unwrap_or(template.n_seed),
                        budget,
                        model: o.model.unwrap_or(template.model),
                        strategy: o.strategy.unwrap_or(template.strategy),
                        train: o.train.unwrap_or_else(|| template.train.clone()),
                    };
                    if p.n_seed < 1 {
                        return cfg_err(format!("overrides[{i}].n_seed must be at least 1"));
                    }
                    p.train
                        .validate()
                        .and(p.strategy.validate())
                        .map_err(|e| Error::Config(format!("overrides[{i}]: {e}")))?;
                    Ok(p)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };

    let name = raw.name.unwrap_or_else(|| match (&dataset.csv, &dataset.synthetic) {
        (Some(c), _) => c
            .path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "csv".into()),
        _ => "synthetic".into(),
    });

    Ok(ExperimentConfig {
        name,
        dataset,
        rounds: raw.rounds,
        predictors,
        alpha_grid: raw.alpha_grid,
        budget_grid: raw.budget_grid,
        repeats: raw.repeats,
        seed: raw.seed,
        eval_subsample: raw.eval_subsample,
        histogram_bins: raw.histogram_bins,
        workers: raw.workers,
        audit: raw.audit,
        quality: raw.quality,
        output_dir: raw.output_dir,
    })
}

/// Loads or generates the data, then standardizes, adds label noise and
/// splits off the evaluation set. Shared by every cell of a grid.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<SplitPair> {
    let dc = &cfg.dataset;
    let mut data = match (&dc.csv, &dc.synthetic) {
        (Some(csv), _) => dataset::load_csv(&csv.path, &csv.label_column, csv.has_header)?,
        (_, Some(spec)) => dataset::synth_gaussian_mixture(spec, seed::derive(cfg.seed, streams::SYNTH))?,
        _ => return Err(Error::Config("no dataset source".into())),
    };
    if dc.standardize {
        data = dataset::standardize(&data)?;
    }
    let noise = NoiseConfig {
        flip_probability: dc.label_noise,
        rng_seed: seed::derive(cfg.seed, streams::NOISE),
    };
    data = dataset::inject_label_noise(&data, &noise)?;
    let eval_count = dc.eval_count.unwrap_or_else(|| (data.len() / 5).min(5000));
    dataset::split(&data, eval_count, seed::derive(cfg.seed, streams::SPLIT))
}

/// Cell coordinates inside a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellIndex {
    pub budget: usize,
    pub alpha: usize,
    pub repeat: usize,
}

impl CellIndex {
    pub fn file_stem(&self) -> String {
        format!("nb{}_a{}_r{}", self.budget, self.alpha, self.repeat)
    }
}

/// Run seed of a cell. For a fixed base seed this is injective over cell
/// coordinates below 2^21 each: the coordinates are packed into disjoint
/// bit ranges and passed through [`seed::derive`], itself injective in its
/// label.
pub fn cell_seed(base: u64, cell: CellIndex) -> u64 {
    const BITS: u32 = 21;
    debug_assert!(cell.budget < 1 << BITS && cell.alpha < 1 << BITS && cell.repeat < 1 << BITS);
    let packed = ((cell.budget as u64) << (2 * BITS)) | ((cell.alpha as u64) << BITS) | cell.repeat as u64;
    seed::derive(base, packed)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellOutcome {
    pub report: MetricReport,
    /// Purchase-mode wins per predictor.
    pub purchases: Vec<u64>,
    pub initial_budgets: Vec<u64>,
    /// Rounds whose set of changed models was not exactly `{winner}`
    /// (`None` unless auditing).
    pub audit_violations: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub index: CellIndex,
    pub n_b: u64,
    pub alpha: f64,
    pub seed: u64,
    pub outcome: std::result::Result<CellOutcome, String>,
}

pub fn market_config(cfg: &ExperimentConfig, n_b: u64, alpha: f64, run_seed: u64) -> MarketConfig {
    MarketConfig {
        predictors: cfg
            .predictors
            .iter()
            .map(|p| PredictorConfig {
                n_seed: p.n_seed,
                budget: p.budget.resolve(n_b),
                model: p.model,
                strategy: p.strategy,
                train: p.train.clone(),
            })
            .collect(),
        alpha,
        quality: cfg.quality.clone(),
        seed: run_seed,
        audit: cfg.audit,
    }
}

/// Everything produced by one cell, including the full round history.
pub struct CellRun {
    pub outcome: CellOutcome,
    pub history: Vec<RoundRecord>,
    pub models: Vec<ModelState>,
}

pub fn run_cell(cfg: &ExperimentConfig, data: &SplitPair, cell: CellIndex) -> Result<CellRun> {
    let n_b = cfg.budget_grid[cell.budget];
    let alpha = cfg.alpha_grid[cell.alpha];
    let run_seed = cell_seed(cfg.seed, cell);
    let mcfg = market_config(cfg, n_b, alpha, run_seed);
    let stream = UserStream::new(&data.competition, seed::derive(run_seed, streams::USERS))?;
    let (market, history) = run_competition(&mcfg, &stream, cfg.rounds)?;

    let models: Vec<ModelState> = market.predictors.into_iter().map(|p| p.model).collect();
    let eval = eval_subset(&data.evaluation, cfg.eval_subsample, seed::derive(run_seed, EVAL_STREAM))?;
    let table = PredictionTable::build(&models, &eval)?;
    let report = MetricReport::from_table(&table, &cfg.quality, alpha, cfg.histogram_bins)?;

    let mut purchases = vec![0u64; models.len()];
    for r in history.iter().filter(|r| r.mode == SelectionMode::Purchase) {
        purchases[r.winner] += 1;
    }
    let audit_violations = cfg.audit.then(|| {
        history
            .iter()
            .filter(|r| r.changed.as_deref() != Some(&[r.winner][..]))
            .count() as u64
    });
    Ok(CellRun {
        outcome: CellOutcome {
            report,
            purchases,
            initial_budgets: mcfg.predictors.iter().map(|p| p.budget).collect(),
            audit_violations,
        },
        history,
        models,
    })
}

fn eval_subset(eval: &Dataset, size: Option<usize>, seed_value: u64) -> Result<Dataset> {
    match size {
        Some(k) if k < eval.len() => {
            let mut idx = rand::seq::index::sample(&mut seed::rng(seed_value), eval.len(), k).into_vec();
            idx.sort_unstable();
            Ok(eval.select(&idx))
        }
        _ => Ok(eval.clone()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridResult {
    pub name: String,
    pub m: usize,
    pub cells: Vec<CellResult>,
}

impl GridResult {
    pub fn raw_rows(&self) -> Vec<RawRow> {
        self.cells
            .iter()
            .filter_map(|c| {
                let o = c.outcome.as_ref().ok()?;
                Some(RawRow {
                    dataset: self.name.clone(),
                    m: self.m,
                    n_b: c.n_b,
                    alpha: c.alpha,
                    repeat: c.index.repeat,
                    seed: c.seed,
                    overall_quality: o.report.overall_quality,
                    qoe: o.report.qoe,
                    diversity: o.report.diversity,
                    z_low_mass: o.report.z_low_mass,
                    n_eval: o.report.n_eval,
                    purchases: o.purchases.iter().sum(),
                    audit_violations: o.audit_violations,
                })
            })
            .collect()
    }

    pub fn aggregates(&self) -> Vec<AggregateRow> {
        aggregate_rows(&self.raw_rows())
    }

    pub fn failures(&self) -> impl Iterator<Item = (&CellResult, &str)> {
        self.cells
            .iter()
            .filter_map(|c| c.outcome.as_ref().err().map(|e| (c, e.as_str())))
    }
}

/// Every cell of the grid, in `(budget, alpha, repeat)` order.
pub fn grid_cells(cfg: &ExperimentConfig) -> Vec<CellIndex> {
    let mut cells = Vec::new();
    for budget in 0..cfg.budget_grid.len() {
        for alpha in 0..cfg.alpha_grid.len() {
            for repeat in 0..cfg.repeats {
                cells.push(CellIndex { budget, alpha, repeat });
            }
        }
    }
    cells
}

/// Runs the given cells on up to `workers` threads (0 = rayon default).
/// A failing cell is recorded and does not stop the others.
pub fn run_cells(cfg: &ExperimentConfig, data: &SplitPair, cells: &[CellIndex], workers: usize) -> Result<GridResult> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let results = pool.install(|| {
        cells
            .par_iter()
            .map(|&index| CellResult {
                index,
                n_b: cfg.budget_grid[index.budget],
                alpha: cfg.alpha_grid[index.alpha],
                seed: cell_seed(cfg.seed, index),
                outcome: run_cell(cfg, data, index).map(|r| r.outcome).map_err(|e| e.to_string()),
            })
            .collect()
    });
    Ok(GridResult {
        name: cfg.name.clone(),
        m: cfg.m(),
        cells: results,
    })
}

pub fn run_grid(cfg: &ExperimentConfig) -> Result<GridResult> {
    let data = prepare_data(cfg)?;
    run_cells(cfg, &data, &grid_cells(cfg), cfg.workers)
}

pub const RAW_COLUMNS: [&str; 13] = [
    "dataset",
    "m",
    "n_b",
    "alpha",
    "repeat",
    "seed",
    "overall_quality",
    "qoe",
    "diversity",
    "z_low_mass",
    "n_eval",
    "purchases",
    "audit_violations",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRow {
    pub dataset: String,
    pub m: usize,
    pub n_b: u64,
    pub alpha: f64,
    pub repeat: usize,
    pub seed: u64,
    pub overall_quality: f64,
    pub qoe: f64,
    pub diversity: f64,
    pub z_low_mass: f64,
    pub n_eval: usize,
    pub purchases: u64,
    pub audit_violations: Option<u64>,
}

/// Mean, sample standard deviation and 99% half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub band: f64,
}

impl Summary {
    /// `sd` uses the `n - 1` denominator (0 for a single value);
    /// `band = 2.58 * sd / sqrt(n)`.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            sd,
            band: Z99 * sd / n.sqrt(),
        }
    }
}

pub const METRIC_NAMES: [&str; 4] = ["overall_quality", "qoe", "diversity", "z_low_mass"];

pub fn aggregate_columns() -> Vec<String> {
    let mut cols: Vec<String> = ["dataset", "m", "n_b", "alpha", "repeats"].iter().map(|s| s.to_string()).collect();
    for m in METRIC_NAMES {
        for s in ["mean", "sd", "band"] {
            cols.push(format!("{m}_{s}"));
        }
    }
    cols
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub dataset: String,
    pub m: usize,
    pub n_b: u64,
    pub alpha: f64,
    pub repeats: usize,
    /// In [`METRIC_NAMES`] order.
    pub metrics: [Summary; 4],
}

impl AggregateRow {
    pub fn metric(&self, name: &str) -> Option<Summary> {
        METRIC_NAMES.iter().position(|n| *n == name).map(|i| self.metrics[i])
    }

    fn record(&self) -> Vec<String> {
        let mut out = vec![
            self.dataset.clone(),
            self.m.to_string(),
            self.n_b.to_string(),
            self.alpha.to_string(),
            self.repeats.to_string(),
        ];
        for s in &self.metrics {
            out.extend([s.mean.to_string(), s.sd.to_string(), s.band.to_string()]);
        }
        out
    }
}

/// Groups raw rows by `(dataset, m, n_b, alpha)` in order of first
/// appearance and summarizes each metric.
pub fn aggregate_rows(rows: &[RawRow]) -> Vec<AggregateRow> {
    let mut keys: Vec<(String, usize, u64, u64)> = Vec::new();
    for r in rows {
        let k = (r.dataset.clone(), r.m, r.n_b, r.alpha.to_bits());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(dataset, m, n_b, alpha_bits)| {
            let group: Vec<&RawRow> = rows
                .iter()
                .filter(|r| r.dataset == dataset && r.m == m && r.n_b == n_b && r.alpha.to_bits() == alpha_bits)
                .collect();
            let col = |f: fn(&RawRow) -> f64| Summary::of(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
            AggregateRow {
                dataset,
                m,
                n_b,
                alpha: f64::from_bits(alpha_bits),
                repeats: group.len(),
                metrics: [
                    col(|r| r.overall_quality),
                    col(|r| r.qoe),
                    col(|r| r.diversity),
                    col(|r| r.z_low_mass),
                ],
            }
        })
        .collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(file))
}

pub fn write_raw_csv(rows: &[RawRow], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(RAW_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_raw_csv(path: &Path) -> Result<Vec<RawRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    })?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_aggregate_csv(rows: &[AggregateRow], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(aggregate_columns())?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct CellDetail<'a> {
    n_b: u64,
    alpha: f64,
    repeat: usize,
    seed: u64,
    purchases: &'a [u64],
    initial_budgets: &'a [u64],
    class_quality: &'a Option<ClassQuality>,
    z_histogram: &'a DensityHistogram,
}

fn write_cell_files(dir: &Path, cell: &CellResult, o: &CellOutcome) -> Result<()> {
    let stem = cell.index.file_stem();
    let json_path = dir.join(format!("{stem}.json"));
    let detail = CellDetail {
        n_b: cell.n_b,
        alpha: cell.alpha,
        repeat: cell.index.repeat,
        seed: cell.seed,
        purchases: &o.purchases,
        initial_budgets: &o.initial_budgets,
        class_quality: &o.report.class_quality,
        z_histogram: &o.report.z_histogram,
    };
    let text = serde_json::to_string_pretty(&detail)?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;

    let hist_path = dir.join(format!("{stem}_hist.csv"));
    let mut w = csv_writer(&hist_path)?;
    w.write_record(["bin_lo", "bin_hi", "density"])?;
    let h = &o.report.z_histogram;
    for (b, d) in h.densities.iter().enumerate() {
        w.write_record([h.edges[b].to_string(), h.edges[b + 1].to_string(), d.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&hist_path, e))
}

/// Writes every report file for `g` under `outdir`.
pub fn emit_reports(g: &GridResult, outdir: &Path) -> Result<()> {
    create_dir(outdir)?;
    let cells_dir = outdir.join("cells");
    create_dir(&cells_dir)?;

    let raw = g.raw_rows();
    write_raw_csv(&raw, &outdir.join("raw.csv"))?;
    write_aggregate_csv(&aggregate_rows(&raw), &outdir.join("aggregate.csv"))?;
    for c in &g.cells {
        if let Ok(o) = &c.outcome {
            write_cell_files(&cells_dir, c, o)?;
        }
    }

    let err_path = outdir.join("errors.csv");
    let mut w = csv_writer(&err_path)?;
    w.write_record(["n_b", "alpha", "repeat", "error"])?;
    for (c, e) in g.failures() {
        w.write_record([c.n_b.to_string(), c.alpha.to_string(), c.index.repeat.to_string(), e.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&err_path, e))
}

/// Re-aggregates an existing `raw.csv` into `aggregate.csv` next to it
/// (or at `out`).
pub fn reaggregate(raw_csv: &Path, out: &Path) -> Result<Vec<AggregateRow>> {
    let rows = aggregate_rows(&read_raw_csv(raw_csv)?);
    write_aggregate_csv(&rows, out)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    const MINIMAL: &str = r#"
        [dataset.synthetic]
        means = [[-1.0, 0.0], [1.0, 0.0]]
        cov_scale = 1.0
        n = 500
    "#;

    #[test]
    fn minimal_config_gets_documented_defaults() {
        let cfg = parse_config_str(MINIMAL, None).unwrap();
        assert_eq!(cfg.m(), 18);
        assert_eq!(cfg.alpha_grid, vec![0.0, 1.0, 2.0, 4.0]);
        assert_eq!(cfg.budget_grid, vec![0, 100, 200, 400]);
        assert_eq!(cfg.repeats, 30);
        assert_eq!(cfg.rounds, 10_000);
        assert_eq!(cfg.dataset.label_noise, 0.3);
        assert_eq!(cfg.predictors[0].strategy, BuyingStrategy::Entropy { c_ent: 0.3 });
        assert_eq!(cfg.predictors[0].train.batch_size, 64);
        assert_eq!(cfg.name, "synthetic");
    }

    #[test]
    fn unknown_key_is_named() {
        let text = format!("predictorz = 3\n{MINIMAL}");
        let err = parse_config_str(&text, None).unwrap_err().to_string();
        assert!(err.contains("predictorz"), "{err}");
        assert!(err.contains("line 1"), "{err}");

        let text = format!("{MINIMAL}\n[predictor.train]\nepochz = 3\n");
        let err = parse_config_str(&text, None).unwrap_err().to_string();
        assert!(err.contains("epochz"), "{err}");
    }

    #[test]
    fn override_length_must_match() {
        let text = format!("predictors = 3\noverrides = [{{}}, {{}}]\n{MINIMAL}");
        let err = parse_config_str(&text, None).unwrap_err().to_string();
        assert!(err.contains("overrides"), "{err}");

        let text = format!(
            "predictors = 2\noverrides = [{{budget_scale = 0.5}}, {{budget = 7, strategy = {{type = \"entropy\", c_ent = 0.6}}}}]\n{MINIMAL}"
        );
        let cfg = parse_config_str(&text, None).unwrap();
        assert_eq!(cfg.predictors[0].budget.resolve(101), 50);
        assert_eq!(cfg.predictors[1].budget.resolve(101), 7);
        assert_eq!(cfg.predictors[1].strategy, BuyingStrategy::Entropy { c_ent: 0.6 });
    }

    #[test]
    fn invariant_violations_are_rejected() {
        for bad in ["repeats = 0", "alpha_grid = []", "budget_grid = []", "predictors = 1", "alpha_grid = [-1.0]"] {
            let text = format!("{bad}\n{MINIMAL}");
            assert!(parse_config_str(&text, None).is_err(), "{bad}");
        }
        assert!(parse_config_str("rounds = 5", None).is_err());
    }

    #[test]
    fn cell_seeds_are_distinct() {
        let mut seen = HashSet::new();
        for budget in 0..8 {
            for alpha in 0..8 {
                for repeat in 0..40 {
                    assert!(seen.insert(cell_seed(99, CellIndex { budget, alpha, repeat })));
                }
            }
        }
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((s.sd - sd).abs() < 1e-15);
        assert!((s.band - 2.58 * sd / 2.0).abs() < 1e-15);
        assert_eq!(Summary::of(&[0.7]).sd, 0.0);
    }

    #[test]
    fn empty_grid_writes_header_only_files() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridResult {
            name: "x".into(),
            m: 2,
            cells: vec![],
        };
        emit_reports(&g, dir.path()).unwrap();
        for f in ["raw.csv", "aggregate.csv", "errors.csv"] {
            let text = fs::read_to_string(dir.path().join(f)).unwrap();
            assert_eq!(text.lines().count(), 1, "{f}");
        }
    }
}
