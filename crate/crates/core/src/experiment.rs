//! Sweep runner: models x methods x contamination ratios x repetitions.
//!
//! Every cell derives its seeds from the base seed and its own coordinates,
//! so a cell's row does not depend on which other cells run or in which
//! order. The contaminated training set and the training seed are shared by
//! all methods of the same (model, ratio, repetition), which makes the
//! method comparison paired.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, inject_contamination, load_csv, make_windows, ContaminationSpec,
    MultivariateSeries, Normalizer, SyntheticConfig, WindowSet, CONTAMINATION_GRID,
    MAX_CONTAMINATION,
};
use crate::eval::{auc_roc, best_f1, coverage};
use crate::filter::{
    robust_train, FilterMethod, RobustTrainConfig, DEFAULT_TAU, DEFAULT_TRIAL_EPOCHS,
};
use crate::models::{ModelKind, ModelSpec, TrainConfig};
use crate::{seed, Error, Result};

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const FAILURES_FILE: &str = "failures.csv";

/// Overrides the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "ROBUST_TSAD_OUTPUT_DIR";

pub const RESULTS_HEADER: [&str; 9] = [
    "model",
    "method",
    "ratio",
    "seed",
    "auc",
    "best_f1",
    "coverage",
    "discard_size",
    "wall_time_s",
];
pub const SUMMARY_HEADER: [&str; 9] = [
    "model",
    "method",
    "ratio",
    "auc_mean",
    "auc_std",
    "f1_mean",
    "f1_std",
    "coverage_mean",
    "coverage_std",
];

const NA: &str = "NA";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticConfig),
    Csv { train: PathBuf, test: PathBuf },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticConfig::default())
    }
}

/// Sweep configuration; also the schema of the TOML config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub dataset: DatasetSource,
    pub models: Vec<ModelKind>,
    pub methods: Vec<FilterMethod>,
    pub ratios: Vec<f64>,
    pub repetitions: usize,
    pub seed: u64,
    pub tau: f64,
    pub trial_epochs: usize,
    pub window: usize,
    /// Predicted steps for prediction models.
    pub horizon: usize,
    pub hidden: Vec<usize>,
    /// Stride used when cutting training windows. Test scoring always uses 1.
    pub train_stride: usize,
    pub train: TrainConfig,
    /// Write measured wall times into the results CSV. Off by default so
    /// that reruns produce byte-identical files.
    pub record_wall_time: bool,
    pub output_dir: Option<PathBuf>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            models: ModelKind::ALL.to_vec(),
            methods: FilterMethod::ALL.to_vec(),
            ratios: CONTAMINATION_GRID.to_vec(),
            repetitions: 5,
            seed: 0,
            tau: DEFAULT_TAU,
            trial_epochs: DEFAULT_TRIAL_EPOCHS,
            window: 12,
            horizon: 1,
            hidden: vec![16],
            train_stride: 1,
            train: TrainConfig::default(),
            record_wall_time: false,
            output_dir: None,
        }
    }
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SweepConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.models.is_empty() || self.methods.is_empty() || self.ratios.is_empty() {
            return bad("models, methods and ratios must be non-empty".into());
        }
        if let Some(r) = self
            .ratios
            .iter()
            .find(|r| !(0.0..=MAX_CONTAMINATION).contains(*r))
        {
            return bad(format!("ratio {r} outside [0, {MAX_CONTAMINATION}]"));
        }
        if self.repetitions == 0 {
            return bad("repetitions must be >= 1".into());
        }
        if self.window == 0 || self.train_stride == 0 {
            return bad("window and train_stride must be positive".into());
        }
        if self.models.contains(&ModelKind::Prediction)
            && (self.horizon == 0 || self.horizon >= self.window)
        {
            return bad(format!(
                "horizon must satisfy 1 <= h < window, got h={}, window={}",
                self.horizon, self.window
            ));
        }
        let robust = RobustTrainConfig {
            tau: self.tau,
            trial_epochs: self.trial_epochs,
            method: FilterMethod::Combined,
            train: self.train.clone(),
        };
        robust.validate()?;
        if let DatasetSource::Synthetic(s) = &self.dataset {
            s.validate()?;
            for kind in &self.models {
                self.model_spec(*kind, s.channels).build(0)?;
            }
        }
        Ok(())
    }

    pub fn model_spec(&self, kind: ModelKind, channels: usize) -> ModelSpec {
        ModelSpec {
            kind,
            window: self.window,
            channels,
            horizon: self.horizon,
            hidden: self.hidden.clone(),
        }
    }

    /// Output directory: the environment override, then the config value,
    /// then `results/`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        std::env::var_os(OUTPUT_DIR_ENV)
            .map(PathBuf::from)
            .or_else(|| self.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("results"))
    }
}

/// Normalized training windows, normalized labeled test series and the pool
/// of anomalous test windows used for contamination.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub normalizer: Normalizer,
    pub train_windows: WindowSet,
    pub test: MultivariateSeries,
    pub pool: WindowSet,
}

pub fn load_dataset(source: &DatasetSource) -> Result<(MultivariateSeries, MultivariateSeries)> {
    match source {
        DatasetSource::Synthetic(cfg) => generate_synthetic(cfg),
        DatasetSource::Csv { train, test } => Ok((load_csv(train)?, load_csv(test)?)),
    }
}

pub fn prepare(config: &SweepConfig) -> Result<PreparedData> {
    let (train, test) = load_dataset(&config.dataset)?;
    prepare_series(config, &train, &test)
}

pub fn prepare_series(
    config: &SweepConfig,
    train: &MultivariateSeries,
    test: &MultivariateSeries,
) -> Result<PreparedData> {
    if train.channels() != test.channels() {
        return Err(Error::Shape(format!(
            "train has {} channels, test has {}",
            train.channels(),
            test.channels()
        )));
    }
    if test.labels().is_none() {
        return Err(Error::Config("test series needs a label column".into()));
    }
    let normalizer = Normalizer::fit(train)?;
    let train_n = normalizer.apply(train)?;
    let test_n = normalizer.apply(test)?;
    let train_windows = make_windows(&train_n, config.window, config.train_stride)?;
    let pool = make_windows(&test_n, config.window, 1)?.anomalous();
    Ok(PreparedData {
        normalizer,
        train_windows,
        test: test_n,
        pool,
    })
}

/// Coordinates of one sweep cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub model: ModelKind,
    pub method: FilterMethod,
    pub ratio: f64,
    pub repetition: usize,
}

/// Ratio in basis points; stable across float formatting.
fn ratio_key(ratio: f64) -> u64 {
    (ratio * 10_000.0).round() as u64
}

impl Cell {
    /// Seed reported in the results row; unique per cell.
    pub fn seed(&self, base: u64) -> u64 {
        seed::derive(
            base,
            &[
                seed::label(self.model.as_str()),
                seed::label(self.method.as_str()),
                ratio_key(self.ratio),
                self.repetition as u64,
            ],
        )
    }

    fn data_seed(&self, base: u64) -> u64 {
        seed::derive(
            base,
            &[
                seed::label("data"),
                ratio_key(self.ratio),
                self.repetition as u64,
            ],
        )
    }

    fn train_seed(&self, base: u64) -> u64 {
        seed::derive(
            base,
            &[
                seed::label("train"),
                seed::label(self.model.as_str()),
                ratio_key(self.ratio),
                self.repetition as u64,
            ],
        )
    }

    fn sort_key(&self) -> (ModelKind, FilterMethod, u64, usize) {
        (
            self.model,
            self.method,
            ratio_key(self.ratio),
            self.repetition,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellMetrics {
    pub auc: f64,
    pub best_f1: f64,
    pub coverage: Option<f64>,
    pub discard_size: usize,
}

/// One results row. `outcome` holds the error message of a failed cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub cell: Cell,
    pub seed: u64,
    pub outcome: std::result::Result<CellMetrics, String>,
    pub wall_time_s: Option<f64>,
}

/// Contaminates, trains, scores and evaluates one cell.
pub fn run_cell(config: &SweepConfig, data: &PreparedData, cell: Cell) -> Result<CellMetrics> {
    let (windows, injected) = inject_contamination(
        &data.train_windows,
        &ContaminationSpec {
            ratio: cell.ratio,
            seed: cell.data_seed(config.seed),
            pool: &data.pool,
        },
    )?;
    let spec = config.model_spec(cell.model, data.train_windows.channels());
    let robust = RobustTrainConfig {
        tau: config.tau,
        trial_epochs: config.trial_epochs,
        method: cell.method,
        train: TrainConfig {
            seed: cell.train_seed(config.seed),
            ..config.train.clone()
        },
    };
    let (model, report) = robust_train(&spec, &windows, &robust)?;
    let scores = model.anomaly_scores(&data.test, 1)?;
    let labels = data
        .test
        .labels()
        .ok_or_else(|| Error::Config("test series has no labels".into()))?;
    let auc = auc_roc(&scores, labels)?;
    let (f1, _) = best_f1(&scores, labels)?;
    let cov = if cell.ratio > 0.0 && cell.method != FilterMethod::Vanilla {
        coverage(&injected, &report.discard)
    } else {
        None
    };
    Ok(CellMetrics {
        auc,
        best_f1: f1,
        coverage: cov,
        discard_size: report.discard.len(),
    })
}

pub fn cells(config: &SweepConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &model in &config.models {
        for &method in &config.methods {
            for &ratio in &config.ratios {
                for repetition in 0..config.repetitions {
                    out.push(Cell {
                        model,
                        method,
                        ratio,
                        repetition,
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
}

/// Runs every cell not already present in `completed` (rows from an earlier
/// run, matched by model, method, ratio and seed). Failed cells become
/// error rows; the sweep carries on.
pub fn run_sweep(config: &SweepConfig, completed: &[ResultRow]) -> Result<ExperimentResult> {
    config.validate()?;
    let data = prepare(config)?;
    run_sweep_prepared(config, &data, completed)
}

pub fn run_sweep_prepared(
    config: &SweepConfig,
    data: &PreparedData,
    completed: &[ResultRow],
) -> Result<ExperimentResult> {
    let done: HashMap<(ModelKind, FilterMethod, u64, u64), &ResultRow> = completed
        .iter()
        .filter(|r| r.outcome.is_ok())
        .map(|r| {
            (
                (r.cell.model, r.cell.method, ratio_key(r.cell.ratio), r.seed),
                r,
            )
        })
        .collect();

    let mut rows: Vec<ResultRow> = cells(config)
        .into_par_iter()
        .map(|cell| {
            let seed_value = cell.seed(config.seed);
            let key = (cell.model, cell.method, ratio_key(cell.ratio), seed_value);
            if let Some(prev) = done.get(&key) {
                return ResultRow {
                    cell,
                    ..(*prev).clone()
                };
            }
            let start = Instant::now();
            let outcome = run_cell(config, data, cell).map_err(|e| e.to_string());
            let elapsed = start.elapsed().as_secs_f64();
            match &outcome {
                Ok(m) => log::info!(
                    "{} {} ratio={} rep={}: auc={:.4} f1={:.4} discard={} ({elapsed:.1}s)",
                    cell.model,
                    cell.method,
                    cell.ratio,
                    cell.repetition,
                    m.auc,
                    m.best_f1,
                    m.discard_size
                ),
                Err(e) => log::warn!(
                    "{} {} ratio={} rep={} failed: {e}",
                    cell.model,
                    cell.method,
                    cell.ratio,
                    cell.repetition
                ),
            }
            ResultRow {
                cell,
                seed: seed_value,
                outcome,
                wall_time_s: config.record_wall_time.then_some(elapsed),
            }
        })
        .collect();
    rows.sort_by_key(|r| r.cell.sort_key());
    Ok(ExperimentResult { rows })
}

/// Aggregate of one (model, method, ratio) group over its successful rows.
/// Standard deviations are population standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub model: ModelKind,
    pub method: FilterMethod,
    pub ratio: f64,
    pub auc: Option<(f64, f64)>,
    pub f1: Option<(f64, f64)>,
    pub coverage: Option<(f64, f64)>,
}

fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

impl ExperimentResult {
    pub fn summarize(&self) -> Vec<SummaryRow> {
        let mut groups: BTreeMap<(ModelKind, FilterMethod, u64), (f64, Vec<&CellMetrics>)> =
            BTreeMap::new();
        for row in &self.rows {
            let entry = groups
                .entry((row.cell.model, row.cell.method, ratio_key(row.cell.ratio)))
                .or_insert_with(|| (row.cell.ratio, Vec::new()));
            if let Ok(m) = &row.outcome {
                entry.1.push(m);
            }
        }
        groups
            .into_iter()
            .map(|((model, method, _), (ratio, ms))| {
                let aucs: Vec<f64> = ms.iter().map(|m| m.auc).collect();
                let f1s: Vec<f64> = ms.iter().map(|m| m.best_f1).collect();
                let covs: Vec<f64> = ms.iter().filter_map(|m| m.coverage).collect();
                SummaryRow {
                    model,
                    method,
                    ratio,
                    auc: mean_std(&aucs),
                    f1: mean_std(&f1s),
                    coverage: mean_std(&covs),
                }
            })
            .collect()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_owned(), |x| x.to_string())
}

pub fn write_results_csv<W: Write>(result: &ExperimentResult, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RESULTS_HEADER)?;
    for row in &result.rows {
        let (auc, f1, cov, size) = match &row.outcome {
            Ok(m) => (
                m.auc.to_string(),
                m.best_f1.to_string(),
                fmt_opt(m.coverage),
                m.discard_size.to_string(),
            ),
            Err(_) => (NA.into(), NA.into(), NA.into(), NA.into()),
        };
        w.write_record([
            row.cell.model.as_str().to_owned(),
            row.cell.method.as_str().to_owned(),
            row.cell.ratio.to_string(),
            row.seed.to_string(),
            auc,
            f1,
            cov,
            size,
            fmt_opt(row.wall_time_s),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<results>", e))?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(summary: &[SummaryRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SUMMARY_HEADER)?;
    let pair = |p: Option<(f64, f64)>| match p {
        Some((m, s)) => (m.to_string(), s.to_string()),
        None => (NA.to_owned(), NA.to_owned()),
    };
    for row in summary {
        let (am, asd) = pair(row.auc);
        let (fm, fsd) = pair(row.f1);
        let (cm, csd) = pair(row.coverage);
        w.write_record([
            row.model.as_str().to_owned(),
            row.method.as_str().to_owned(),
            row.ratio.to_string(),
            am,
            asd,
            fm,
            fsd,
            cm,
            csd,
        ])?;
    }
    w.flush().map_err(|e| Error::io("<summary>", e))?;
    Ok(())
}

fn write_failures_csv<W: Write>(result: &ExperimentResult, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["model", "method", "ratio", "seed", "error"])?;
    for row in &result.rows {
        if let Err(e) = &row.outcome {
            w.write_record([
                row.cell.model.as_str(),
                row.cell.method.as_str(),
                &row.cell.ratio.to_string(),
                &row.seed.to_string(),
                e,
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<failures>", e))?;
    Ok(())
}

fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes `results.csv`, `summary.csv` and `failures.csv` into `dir`.
pub fn write_results(result: &ExperimentResult, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(RESULTS_FILE), |b| write_results_csv(result, b))?;
    write_file(&dir.join(SUMMARY_FILE), |b| {
        write_summary_csv(&result.summarize(), b)
    })?;
    write_file(&dir.join(FAILURES_FILE), |b| write_failures_csv(result, b))
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s == NA {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Config(format!("bad number {s:?} in results file")))
}

/// Reads rows written by [`write_results_csv`]. Error rows are returned as
/// failures so a resumed sweep reruns them. Repetition indices are not
/// stored; they are recovered by matching seeds against `config`.
pub fn read_results(path: impl AsRef<Path>, config: &SweepConfig) -> Result<Vec<ResultRow>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != RESULTS_HEADER {
        return Err(Error::Config(format!(
            "{} has an unexpected header",
            path.display()
        )));
    }
    let by_seed: HashMap<u64, Cell> = cells(config)
        .into_iter()
        .map(|c| (c.seed(config.seed), c))
        .collect();
    let mut rows = Vec::new();
    for record in rdr.records() {
        let r = record?;
        let seed_value: u64 = r[3]
            .parse()
            .map_err(|_| Error::Config(format!("bad seed {:?}", &r[3])))?;
        let Some(&cell) = by_seed.get(&seed_value) else {
            continue;
        };
        let outcome = match (parse_opt(&r[4])?, parse_opt(&r[5])?) {
            (Some(auc), Some(best_f1)) => Ok(CellMetrics {
                auc,
                best_f1,
                coverage: parse_opt(&r[6])?,
                discard_size: r[7]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad discard size {:?}", &r[7])))?,
            }),
            _ => Err("failed in previous run".to_owned()),
        };
        rows.push(ResultRow {
            cell,
            seed: seed_value,
            outcome,
            wall_time_s: parse_opt(&r[8])?,
        });
    }
    Ok(rows)
}
