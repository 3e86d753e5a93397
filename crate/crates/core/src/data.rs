//! Series ingestion, normalization, windowing, the synthetic benchmark and
//! contamination injection.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{seed, Error, Result};

/// Name of the optional trailing label column in CSV files.
pub const LABEL_COLUMN: &str = "label";

/// Floor applied to fitted standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// A `T x d` real-valued series stored row-major (one row per timestep).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultivariateSeries {
    names: Vec<String>,
    values: Vec<f64>,
    labels: Option<Vec<bool>>,
}

impl MultivariateSeries {
    pub fn new(names: Vec<String>, values: Vec<f64>, labels: Option<Vec<bool>>) -> Result<Self> {
        let d = names.len();
        if d == 0 {
            return Err(Error::Shape("series needs at least one channel".into()));
        }
        if !values.len().is_multiple_of(d) {
            return Err(Error::Shape(format!(
                "{} values do not divide into {d} channels",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value at timestep {}, channel {}",
                pos / d,
                pos % d
            )));
        }
        let len = values.len() / d;
        if let Some(l) = &labels {
            if l.len() != len {
                return Err(Error::Shape(format!(
                    "{} labels for {len} timesteps",
                    l.len()
                )));
            }
        }
        Ok(Self {
            names,
            values,
            labels,
        })
    }

    pub fn channels(&self) -> usize {
        self.names.len()
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn labels(&self) -> Option<&[bool]> {
        self.labels.as_deref()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let d = self.channels();
        &self.values[t * d..(t + 1) * d]
    }

    pub fn value(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.channels() + c]
    }
}

fn default_names(d: usize) -> Vec<String> {
    (0..d).map(|c| format!("ch{c}")).collect()
}

/// Reads a series from CSV. Row numbers in errors count data rows from 1;
/// column numbers count from 1.
pub fn load_csv(path: impl AsRef<Path>) -> Result<MultivariateSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file)
}

pub fn read_csv<R: Read>(reader: R) -> Result<MultivariateSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Format {
            row: 0,
            msg: "missing header row".into(),
        });
    }
    let has_label = header.last().map(String::as_str) == Some(LABEL_COLUMN);
    let d = header.len() - usize::from(has_label);
    if d == 0 {
        return Err(Error::Format {
            row: 0,
            msg: "no value columns".into(),
        });
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record?;
        if record.len() != header.len() {
            return Err(Error::Format {
                row,
                msg: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        for (c, cell) in record.iter().take(d).enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                col: c + 1,
                msg: format!("not a number: {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    col: c + 1,
                    msg: format!("non-finite value {cell:?}"),
                });
            }
            values.push(v);
        }
        if has_label {
            let cell = &record[d];
            labels.push(match cell {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::Parse {
                        row,
                        col: d + 1,
                        msg: format!("label must be 0 or 1, got {other:?}"),
                    })
                }
            });
        }
    }
    if values.is_empty() {
        return Err(Error::Format {
            row: 1,
            msg: "no data rows".into(),
        });
    }

    let names = header.into_iter().take(d).collect();
    MultivariateSeries::new(names, values, has_label.then_some(labels))
}

pub fn write_csv(series: &MultivariateSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_csv_to(series, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Floats are written with Rust's shortest round-trip formatting, so a
/// written series parses back bit-identically.
pub fn write_csv_to<W: Write>(series: &MultivariateSeries, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = series.names.iter().map(String::as_str).collect();
    if series.labels.is_some() {
        header.push(LABEL_COLUMN);
    }
    wtr.write_record(&header)?;
    let mut fields = Vec::with_capacity(header.len());
    for t in 0..series.len() {
        fields.clear();
        fields.extend(series.row(t).iter().map(|v| v.to_string()));
        if let Some(labels) = &series.labels {
            fields.push(if labels[t] { "1" } else { "0" }.to_owned());
        }
        wtr.write_record(&fields)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// Per-channel z-score normalizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fits population mean and standard deviation per channel. Standard
    /// deviations below [`STD_FLOOR`] are raised to it.
    pub fn fit(train: &MultivariateSeries) -> Result<Self> {
        let t = train.len();
        if t < 2 {
            return Err(Error::Shape(format!(
                "normalizer needs at least 2 timesteps, got {t}"
            )));
        }
        let d = train.channels();
        let n = t as f64;
        let mut mean = vec![0.0; d];
        for row in train.values.chunks_exact(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in train.values.chunks_exact(d) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| (s / n).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, series: &MultivariateSeries) -> Result<MultivariateSeries> {
        let d = series.channels();
        if d != self.mean.len() {
            return Err(Error::Shape(format!(
                "normalizer fitted on {} channels, series has {d}",
                self.mean.len()
            )));
        }
        let values = series
            .values
            .chunks_exact(d)
            .flat_map(|row| {
                row.iter()
                    .zip(self.mean.iter().zip(&self.std))
                    .map(|(v, (m, s))| (v - m) / s)
            })
            .collect();
        Ok(MultivariateSeries {
            names: series.names.clone(),
            values,
            labels: series.labels.clone(),
        })
    }
}

pub fn fit_normalizer(train: &MultivariateSeries) -> Result<Normalizer> {
    Normalizer::fit(train)
}

pub fn apply_normalizer(
    normalizer: &Normalizer,
    series: &MultivariateSeries,
) -> Result<MultivariateSeries> {
    normalizer.apply(series)
}

/// A `w x d` slice of a series, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub values: Vec<f64>,
    pub anomalous: bool,
    /// Start timestep in the source series (or slot position after injection).
    pub origin: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    window: usize,
    channels: usize,
    windows: Vec<Window>,
}

impl WindowSet {
    pub fn new(window: usize, channels: usize, windows: Vec<Window>) -> Result<Self> {
        if window == 0 || channels == 0 {
            return Err(Error::Shape(
                "window length and channels must be positive".into(),
            ));
        }
        if let Some(k) = windows
            .iter()
            .position(|w| w.values.len() != window * channels)
        {
            return Err(Error::Shape(format!(
                "window {k} has {} values, expected {}",
                windows[k].values.len(),
                window * channels
            )));
        }
        Ok(Self {
            window,
            channels,
            windows,
        })
    }

    pub fn window_len(&self) -> usize {
        self.window
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn windows(&self) -> &[Window] {
        &self.windows
    }

    pub fn get(&self, i: usize) -> &Window {
        &self.windows[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Window> {
        self.windows.iter()
    }

    /// Windows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> WindowSet {
        WindowSet {
            window: self.window,
            channels: self.channels,
            windows: indices.iter().map(|&i| self.windows[i].clone()).collect(),
        }
    }

    /// Only the windows flagged anomalous.
    pub fn anomalous(&self) -> WindowSet {
        WindowSet {
            window: self.window,
            channels: self.channels,
            windows: self
                .windows
                .iter()
                .filter(|w| w.anomalous)
                .cloned()
                .collect(),
        }
    }
}

/// Number of windows `make_windows` produces.
pub fn window_count(length: usize, window: usize, stride: usize) -> usize {
    if window == 0 || stride == 0 || window > length {
        0
    } else {
        (length - window) / stride + 1
    }
}

/// Cuts windows at origins `0, stride, 2*stride, ...`. A window is flagged
/// anomalous iff any timestep it covers is labeled anomalous.
pub fn make_windows(
    series: &MultivariateSeries,
    window: usize,
    stride: usize,
) -> Result<WindowSet> {
    if window == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "window ({window}) and stride ({stride}) must be positive"
        )));
    }
    let t = series.len();
    if window > t {
        return Err(Error::EmptyWindowSet { window, length: t });
    }
    let d = series.channels();
    // prefix counts of labeled timesteps make the any-overlap test O(1)
    let prefix: Option<Vec<usize>> = series.labels.as_ref().map(|labels| {
        std::iter::once(0)
            .chain(labels.iter().scan(0, |acc, &l| {
                *acc += usize::from(l);
                Some(*acc)
            }))
            .collect()
    });
    let windows = (0..window_count(t, window, stride))
        .map(|k| {
            let origin = k * stride;
            let anomalous = prefix
                .as_ref()
                .is_some_and(|p| p[origin + window] > p[origin]);
            Window {
                values: series.values[origin * d..(origin + window) * d].to_vec(),
                anomalous,
                origin,
            }
        })
        .collect();
    Ok(WindowSet {
        window,
        channels: d,
        windows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Additive constant-sign bursts of at least five channel standard deviations.
    Spike,
    /// Constant offset over the segment.
    LevelShift,
    /// Seasonal components replaced by faster oscillations.
    FrequencyChange,
}

/// Synthetic benchmark parameters. Train and test series each have `length`
/// timesteps; the test series continues the train series in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub channels: usize,
    pub length: usize,
    pub periods: Vec<f64>,
    pub noise_std: f64,
    pub anomaly_kinds: Vec<AnomalyKind>,
    /// Target fraction of labeled-anomalous test timesteps.
    pub anomaly_rate: f64,
    /// Segment length range for level shifts and frequency changes.
    pub min_segment: usize,
    pub max_segment: usize,
    /// Longest spike burst; spikes use `min_segment.min(max_spike)..=max_spike`.
    pub max_spike: usize,
    /// Spike height in channel standard deviations.
    pub spike_magnitude: f64,
    /// Level shift height in channel standard deviations.
    pub shift_magnitude: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            length: 20_000,
            periods: vec![50.0, 120.0],
            noise_std: 0.05,
            anomaly_kinds: vec![
                AnomalyKind::Spike,
                AnomalyKind::LevelShift,
                AnomalyKind::FrequencyChange,
            ],
            anomaly_rate: 0.05,
            min_segment: 5,
            max_segment: 20,
            max_spike: 20,
            spike_magnitude: 6.0,
            shift_magnitude: 3.0,
            seed: 0,
        }
    }
}

const FREQUENCY_FACTOR: f64 = 3.0;

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.channels == 0 {
            return bad("channels must be >= 1".into());
        }
        if self.periods.is_empty() {
            return bad("at least one seasonal period is required".into());
        }
        if let Some(p) = self.periods.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return bad(format!("periods must be positive, got {p}"));
        }
        let longest = self.periods.iter().cloned().fold(0.0, f64::max);
        if (self.length as f64) < 10.0 * longest {
            return bad(format!(
                "length {} must be at least 10x the longest period ({longest})",
                self.length
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        if !(0.0..=0.5).contains(&self.anomaly_rate) {
            return bad(format!(
                "anomaly_rate must be in [0, 0.5], got {}",
                self.anomaly_rate
            ));
        }
        if self.anomaly_rate > 0.0 && self.anomaly_kinds.is_empty() {
            return bad("anomaly_rate > 0 needs at least one anomaly kind".into());
        }
        if self.min_segment == 0 || self.max_segment < self.min_segment {
            return bad(format!(
                "segment range [{}, {}] is invalid",
                self.min_segment, self.max_segment
            ));
        }
        if self.max_spike == 0 {
            return bad("max_spike must be >= 1".into());
        }
        if !(self.spike_magnitude.is_finite() && self.spike_magnitude >= 5.0) {
            return bad(format!(
                "spike_magnitude must be >= 5 standard deviations, got {}",
                self.spike_magnitude
            ));
        }
        if !(self.shift_magnitude.is_finite() && self.shift_magnitude > 0.0) {
            return bad(format!(
                "shift_magnitude must be positive, got {}",
                self.shift_magnitude
            ));
        }
        Ok(())
    }
}

struct Segment {
    start: usize,
    len: usize,
    kind: AnomalyKind,
    channels: Vec<usize>,
    sign: f64,
}

/// Generates an anomaly-free training series and a labeled test series.
///
/// Each channel is a sum of sinusoids (one per period, random amplitude and
/// phase) plus Gaussian noise. Anomalous test segments never touch each
/// other, and the labeled fraction hits `round(anomaly_rate * length)`
/// unless placement runs out of room.
pub fn generate_synthetic(
    config: &SyntheticConfig,
) -> Result<(MultivariateSeries, MultivariateSeries)> {
    config.validate()?;
    let d = config.channels;
    let t_len = config.length;
    let mut rng = seed::rng(seed::derive(config.seed, &[seed::label("synthetic")]));

    let amps: Vec<Vec<f64>> = (0..d)
        .map(|_| {
            config
                .periods
                .iter()
                .map(|_| rng.random_range(0.5..1.5))
                .collect()
        })
        .collect();
    let phases: Vec<Vec<f64>> = (0..d)
        .map(|_| {
            config
                .periods
                .iter()
                .map(|_| rng.random_range(0.0..TAU))
                .collect()
        })
        .collect();
    let channel_std: Vec<f64> = amps
        .iter()
        .map(|a| (a.iter().map(|x| x * x / 2.0).sum::<f64>() + config.noise_std.powi(2)).sqrt())
        .collect();
    let noise = Normal::new(0.0, config.noise_std)
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;

    let seasonal = |c: usize, t: f64, speedup: f64| -> f64 {
        config
            .periods
            .iter()
            .enumerate()
            .map(|(k, p)| amps[c][k] * (TAU * t * speedup / p + phases[c][k]).sin())
            .sum()
    };

    let mut train = Vec::with_capacity(t_len * d);
    for t in 0..t_len {
        for c in 0..d {
            train.push(seasonal(c, t as f64, 1.0) + noise.sample(&mut rng));
        }
    }

    let segments = place_segments(config, &mut rng);
    let mut labels = vec![false; t_len];
    // per-timestep, per-channel: (additive offset, speedup)
    let mut offset = vec![0.0; t_len * d];
    let mut speed = vec![1.0; t_len * d];
    for seg in &segments {
        for t in seg.start..seg.start + seg.len {
            labels[t] = true;
            for &c in &seg.channels {
                match seg.kind {
                    AnomalyKind::Spike => {
                        offset[t * d + c] += seg.sign * config.spike_magnitude * channel_std[c]
                    }
                    AnomalyKind::LevelShift => {
                        offset[t * d + c] += seg.sign * config.shift_magnitude * channel_std[c]
                    }
                    AnomalyKind::FrequencyChange => speed[t * d + c] = FREQUENCY_FACTOR,
                }
            }
        }
    }

    let mut test = Vec::with_capacity(t_len * d);
    for t in 0..t_len {
        let abs_t = (t_len + t) as f64;
        for c in 0..d {
            let i = t * d + c;
            test.push(seasonal(c, abs_t, speed[i]) + offset[i] + noise.sample(&mut rng));
        }
    }

    let names = default_names(d);
    Ok((
        MultivariateSeries::new(names.clone(), train, Some(vec![false; t_len]))?,
        MultivariateSeries::new(names, test, Some(labels))?,
    ))
}

fn place_segments(config: &SyntheticConfig, rng: &mut impl Rng) -> Vec<Segment> {
    let t_len = config.length;
    let target = (config.anomaly_rate * t_len as f64).round() as usize;
    let mut occupied = vec![false; t_len];
    let mut segments = Vec::new();
    let mut labeled = 0;
    let mut failures = 0;
    while labeled < target && failures < 1000 {
        let kind = config.anomaly_kinds[rng.random_range(0..config.anomaly_kinds.len())];
        let max_len = match kind {
            AnomalyKind::Spike => config.max_spike,
            _ => config.max_segment,
        };
        let min_len = config.min_segment.min(max_len);
        let len = rng.random_range(min_len..=max_len).min(target - labeled);
        if len > t_len {
            break;
        }
        let start = rng.random_range(0..=t_len - len);
        // keep one free timestep on each side so segments stay distinct
        let lo = start.saturating_sub(1);
        let hi = (start + len + 1).min(t_len);
        if occupied[lo..hi].iter().any(|&o| o) {
            failures += 1;
            continue;
        }
        occupied[start..start + len]
            .iter_mut()
            .for_each(|o| *o = true);
        let mut channels: Vec<usize> = (0..config.channels)
            .filter(|_| rng.random_bool(0.5))
            .collect();
        if channels.is_empty() {
            channels.push(rng.random_range(0..config.channels));
        }
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        segments.push(Segment {
            start,
            len,
            kind,
            channels,
            sign,
        });
        labeled += len;
    }
    segments
}

/// Contamination parameters: replace `round(ratio * n)` training windows by
/// windows drawn from `pool`.
#[derive(Debug, Clone, Copy)]
pub struct ContaminationSpec<'a> {
    pub ratio: f64,
    pub seed: u64,
    pub pool: &'a WindowSet,
}

pub const MAX_CONTAMINATION: f64 = 0.2;

/// The contamination grid used throughout the experiments.
pub const CONTAMINATION_GRID: [f64; 11] = [
    0.0, 0.01, 0.02, 0.03, 0.04, 0.06, 0.08, 0.10, 0.13, 0.16, 0.20,
];

/// Number of windows replaced at `ratio` out of `n` (half away from zero).
pub fn injection_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64).round() as usize
}

/// Replaces `round(ratio * n)` uniformly chosen windows by anomalous windows
/// from the pool, keeping the total count. Replacement windows keep the
/// origin of the slot they fill. Pool windows are drawn without replacement
/// while the pool is large enough, with replacement otherwise. Returns the
/// contaminated set and the sorted injected positions.
pub fn inject_contamination(
    train: &WindowSet,
    spec: &ContaminationSpec<'_>,
) -> Result<(WindowSet, Vec<usize>)> {
    if !(0.0..=MAX_CONTAMINATION).contains(&spec.ratio) {
        return Err(Error::Contamination(format!(
            "ratio must be in [0, {MAX_CONTAMINATION}], got {}",
            spec.ratio
        )));
    }
    if let Some(k) = train.windows.iter().position(|w| w.anomalous) {
        return Err(Error::Contamination(format!(
            "training window {k} is already flagged anomalous"
        )));
    }
    let n = train.len();
    let k = injection_count(spec.ratio, n);
    if k == 0 {
        return Ok((train.clone(), Vec::new()));
    }
    let pool = spec.pool;
    if pool.is_empty() {
        return Err(Error::Contamination("anomaly pool is empty".into()));
    }
    if pool.window != train.window || pool.channels != train.channels {
        return Err(Error::Contamination(format!(
            "pool windows are {}x{}, training windows are {}x{}",
            pool.window, pool.channels, train.window, train.channels
        )));
    }
    if pool.windows.iter().any(|w| !w.anomalous) {
        return Err(Error::Contamination(
            "pool contains windows not flagged anomalous".into(),
        ));
    }

    let mut rng = seed::rng(seed::derive(spec.seed, &[seed::label("contaminate")]));
    let mut positions = index::sample(&mut rng, n, k).into_vec();
    positions.sort_unstable();
    let picks: Vec<usize> = if pool.len() >= k {
        index::sample(&mut rng, pool.len(), k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..pool.len())).collect()
    };

    let mut out = train.clone();
    for (&pos, &pick) in positions.iter().zip(&picks) {
        let slot = &mut out.windows[pos];
        slot.values.clone_from(&pool.windows[pick].values);
        slot.anomalous = true;
    }
    Ok((out, positions))
}

/// Random 4:1 partition of `0..n`: `round(n / 5)` validation indices. Both
/// halves come back sorted.
pub fn split_indices(n: usize, seed_value: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 5 {
        return Err(Error::Split(format!(
            "need at least 5 windows to split, got {n}"
        )));
    }
    let n_val = (n as f64 / 5.0).round() as usize;
    let mut rng = seed::rng(seed::derive(seed_value, &[seed::label("split")]));
    let mut val = index::sample(&mut rng, n, n_val).into_vec();
    val.sort_unstable();
    let mut is_val = vec![false; n];
    val.iter().for_each(|&i| is_val[i] = true);
    let train = (0..n).filter(|&i| !is_val[i]).collect();
    Ok((train, val))
}

pub fn split_train_val(windows: &WindowSet, seed_value: u64) -> Result<(WindowSet, WindowSet)> {
    let (train, val) = split_indices(windows.len(), seed_value)?;
    Ok((windows.subset(&train), windows.subset(&val)))
}
