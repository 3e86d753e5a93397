//! Command-line front end.
//!
//! ```text
//! robust-tsad generate --out-dir data/ [--config c.toml] [--seed 3]
//! robust-tsad train    --train data/train.csv --out-dir run/ [--method combined --tau 0.2 --trial-epochs 10]
//! robust-tsad evaluate --checkpoint run/checkpoint.json --test data/test.csv
//! robust-tsad sweep    --config c.toml --seed 1 [--out-dir results/] [--resume]
//! ```
//!
//! All subcommands read the same TOML schema ([`SweepConfig`]); flags
//! override config values. Inputs and configuration are validated before
//! anything is written.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    inject_contamination, load_csv, make_windows, write_csv, AnomalyKind, ContaminationSpec,
    Normalizer,
};
use crate::eval::{auc_roc, best_f1, coverage};
use crate::experiment::{
    read_results, run_sweep, write_results, DatasetSource, SweepConfig, RESULTS_FILE,
};
use crate::filter::{robust_train, FilterMethod, RobustTrainConfig};
use crate::models::{Checkpoint, ModelKind, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "robust-tsad",
    version,
    about = "Robust training of window-based time-series anomaly detectors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic train/test pair as CSV.
    Generate(GenerateArgs),
    /// Train one model (optionally filtering), write checkpoint and filter report.
    Train(TrainArgs),
    /// Score a CSV series with a checkpoint.
    Evaluate(EvaluateArgs),
    /// Run the full models x methods x ratios x repetitions grid.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    periods: Option<Vec<f64>>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    anomaly_rate: Option<f64>,
    /// Comma-separated: spike, level_shift, frequency_change.
    #[arg(long, value_delimiter = ',')]
    anomaly_kinds: Option<Vec<String>>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args, Default)]
struct ModelArgs {
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// vanilla, m, v or combined.
    #[arg(long, default_value = "combined")]
    method: String,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    trial_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Inject this fraction of anomalous windows drawn from --test before training.
    #[arg(long, requires = "test")]
    contamination: Option<f64>,
    /// Labeled series to draw contamination from and to report AUC/F1 on.
    #[arg(long)]
    test: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Write per-timestep scores here.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    trial_epochs: Option<usize>,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long)]
    jobs: Option<usize>,
    /// Skip cells already present in an existing results file.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    record_wall_time: bool,
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code: 0 on success, 2 for usage or configuration errors,
/// 1 for everything else.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Sweep(a) => sweep(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<SweepConfig> {
    path.map_or_else(|| Ok(SweepConfig::default()), SweepConfig::load)
}

fn parse_list<T: std::str::FromStr<Err = Error>>(items: &[String]) -> Result<Vec<T>> {
    items.iter().map(|s| s.trim().parse()).collect()
}

fn parse_anomaly_kind(s: &str) -> Result<AnomalyKind> {
    match s.trim() {
        "spike" => Ok(AnomalyKind::Spike),
        "level_shift" => Ok(AnomalyKind::LevelShift),
        "frequency_change" => Ok(AnomalyKind::FrequencyChange),
        other => Err(Error::Config(format!("unknown anomaly kind {other:?}"))),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn generate(a: GenerateArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let mut syn = match cfg.dataset {
        DatasetSource::Synthetic(s) => s,
        DatasetSource::Csv { .. } => Default::default(),
    };
    if let Some(v) = a.channels {
        syn.channels = v;
    }
    if let Some(v) = a.length {
        syn.length = v;
    }
    if let Some(v) = a.periods {
        syn.periods = v;
    }
    if let Some(v) = a.noise {
        syn.noise_std = v;
    }
    if let Some(v) = a.anomaly_rate {
        syn.anomaly_rate = v;
    }
    if let Some(v) = a.anomaly_kinds {
        syn.anomaly_kinds = v
            .iter()
            .map(|s| parse_anomaly_kind(s))
            .collect::<Result<_>>()?;
    }
    if let Some(v) = a.seed {
        syn.seed = v;
    }
    let (train, test) = crate::data::generate_synthetic(&syn)?;
    ensure_dir(&a.out_dir)?;
    write_csv(&train, a.out_dir.join("train.csv"))?;
    write_csv(&test, a.out_dir.join("test.csv"))?;
    println!(
        "wrote {} and {} ({} timesteps, {} channels)",
        a.out_dir.join("train.csv").display(),
        a.out_dir.join("test.csv").display(),
        syn.length,
        syn.channels
    );
    Ok(())
}

fn apply_model_args(cfg: &mut SweepConfig, m: &ModelArgs) -> Result<Option<ModelKind>> {
    if let Some(v) = m.window {
        cfg.window = v;
    }
    if let Some(v) = m.horizon {
        cfg.horizon = v;
    }
    if let Some(v) = &m.hidden {
        cfg.hidden = v.clone();
    }
    if let Some(v) = m.stride {
        cfg.train_stride = v;
    }
    let t: &mut TrainConfig = &mut cfg.train;
    if let Some(v) = m.epochs {
        t.epochs = v;
    }
    if let Some(v) = m.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = m.lr {
        t.learning_rate = v;
    }
    if let Some(v) = m.patience {
        t.patience = v;
    }
    m.model.as_deref().map(str::parse).transpose()
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    let kind = apply_model_args(&mut cfg, &a.model)?.unwrap_or_else(|| {
        cfg.models
            .first()
            .copied()
            .unwrap_or(ModelKind::Reconstruction)
    });
    let method: FilterMethod = a.method.parse()?;
    if let Some(v) = a.tau {
        cfg.tau = v;
    }
    if let Some(v) = a.trial_epochs {
        cfg.trial_epochs = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.models = vec![kind];
    let robust = RobustTrainConfig {
        tau: cfg.tau,
        trial_epochs: cfg.trial_epochs,
        method,
        train: TrainConfig {
            seed: cfg.seed,
            ..cfg.train.clone()
        },
    };
    robust.validate()?;
    if let Some(r) = a.contamination {
        if !(0.0..=crate::data::MAX_CONTAMINATION).contains(&r) {
            return Err(Error::Config(format!(
                "contamination ratio {r} outside [0, 0.2]"
            )));
        }
    }

    let train_series = load_csv(&a.train)?;
    let test_series = a.test.as_deref().map(load_csv).transpose()?;
    let normalizer = Normalizer::fit(&train_series)?;
    let train_n = normalizer.apply(&train_series)?;
    let spec = cfg.model_spec(kind, train_series.channels());
    spec.build(0)?;
    let clean = make_windows(&train_n, cfg.window, cfg.train_stride)?;
    let test_n = test_series
        .as_ref()
        .map(|t| normalizer.apply(t))
        .transpose()?;

    let (windows, injected) = match (a.contamination, &test_n) {
        (Some(ratio), Some(test)) => {
            let pool = make_windows(test, cfg.window, 1)?.anomalous();
            let spec = ContaminationSpec {
                ratio,
                seed: crate::seed::derive(cfg.seed, &[crate::seed::label("cli-contaminate")]),
                pool: &pool,
            };
            inject_contamination(&clean, &spec)?
        }
        _ => (clean, Vec::new()),
    };

    let (model, report) = robust_train(&spec, &windows, &robust)?;
    ensure_dir(&a.out_dir)?;
    let ck = Checkpoint::new(model, Some(normalizer), train_series.names().to_vec());
    ck.save(a.out_dir.join("checkpoint.json"))?;
    let report_path = a.out_dir.join("filter_report.json");
    fs::write(&report_path, report.to_json()?).map_err(|e| Error::io(&report_path, e))?;

    println!(
        "{method}: trained on {} of {} windows (discarded {})",
        windows.len() - report.discard.len(),
        windows.len(),
        report.discard.len()
    );
    if !injected.is_empty() {
        if let Some(c) = coverage(&injected, &report.discard) {
            println!(
                "coverage of {} injected windows: {:.2}%",
                injected.len(),
                100.0 * c
            );
        }
    }
    if let Some(test) = &test_n {
        report_detection(&ck, test)?;
    }
    Ok(())
}

fn report_detection(ck: &Checkpoint, test: &crate::data::MultivariateSeries) -> Result<Vec<f64>> {
    let scores = ck.model.anomaly_scores(test, 1)?;
    if let Some(labels) = test.labels() {
        match (auc_roc(&scores, labels), best_f1(&scores, labels)) {
            (Ok(auc), Ok((f1, t))) => println!("auc={auc:.6} best_f1={f1:.6} threshold={t}"),
            (Err(e), _) | (_, Err(e)) => println!("metrics unavailable: {e}"),
        }
    }
    Ok(scores)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let test = load_csv(&a.test)?;
    if test.channels() != ck.model.channels() {
        return Err(Error::Shape(format!(
            "test file has {} channels, checkpoint expects {}",
            test.channels(),
            ck.model.channels()
        )));
    }
    let test = match &ck.normalizer {
        Some(n) => n.apply(&test)?,
        None => test,
    };
    let scores = report_detection(&ck, &test)?;
    if let Some(path) = &a.scores {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "score"])?;
        for (t, s) in scores.iter().enumerate() {
            w.write_record([t.to_string(), s.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    cfg.seed = a.seed;
    if let Some(v) = a.repetitions {
        cfg.repetitions = v;
    }
    if let Some(v) = a.ratios {
        cfg.ratios = v;
    }
    if let Some(v) = &a.methods {
        cfg.methods = parse_list(v)?;
    }
    if let Some(v) = &a.models {
        cfg.models = parse_list(v)?;
    }
    if let Some(v) = a.tau {
        cfg.tau = v;
    }
    if let Some(v) = a.trial_epochs {
        cfg.trial_epochs = v;
    }
    if a.record_wall_time {
        cfg.record_wall_time = true;
    }
    let out_dir = a
        .out_dir
        .clone()
        .unwrap_or_else(|| cfg.resolved_output_dir());
    cfg.validate()?;

    let completed = if a.resume && out_dir.join(RESULTS_FILE).exists() {
        read_results(out_dir.join(RESULTS_FILE), &cfg)?
    } else {
        Vec::new()
    };

    let run = || run_sweep(&cfg, &completed);
    let result = match a.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    write_results(&result, &out_dir)?;
    let failed = result.rows.iter().filter(|r| r.outcome.is_err()).count();
    println!(
        "{} cells ({} failed); results in {}",
        result.rows.len(),
        failed,
        out_dir.display()
    );
    Ok(())
}
