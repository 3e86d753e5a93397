//! Window-based anomaly detectors.
//!
//! Both model kinds wrap a [`DenseNet`] over a flattened `w x d` window:
//!
//! - reconstruction: the whole window is encoded through a bottleneck and
//!   decoded back; the loss is the reconstruction MSE.
//! - prediction: the first `w - h` steps predict the last `h`; the loss is
//!   the MSE of the predicted steps.
//!
//! Per-window losses feed both training and the loss-trace filter; anomaly
//! scores are the same losses mapped back onto timesteps.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_windows, MultivariateSeries, Normalizer, WindowSet};
use crate::nn::{mse_per_sample, Activation, Adam, DenseNet, Gradients};
use crate::{seed, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Reconstruction,
    Prediction,
}

impl ModelKind {
    pub const ALL: [ModelKind; 2] = [ModelKind::Reconstruction, ModelKind::Prediction];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Reconstruction => "reconstruction",
            ModelKind::Prediction => "prediction",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reconstruction" | "recon" => Ok(ModelKind::Reconstruction),
            "prediction" | "pred" => Ok(ModelKind::Prediction),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Architecture of a window model, minus its parameters. Building it with a
/// seed gives a freshly initialized model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub window: usize,
    pub channels: usize,
    /// Predicted steps; ignored for reconstruction.
    pub horizon: usize,
    pub hidden: Vec<usize>,
}

impl ModelSpec {
    pub fn build(&self, seed_value: u64) -> Result<TsadModel> {
        build_model(
            self.kind,
            self.window,
            self.channels,
            self.horizon,
            &self.hidden,
            seed_value,
        )
    }
}

/// Produces fresh, independently initialized models.
pub trait ModelFactory {
    fn build(&self, seed: u64) -> Result<TsadModel>;
}

impl ModelFactory for ModelSpec {
    fn build(&self, seed_value: u64) -> Result<TsadModel> {
        ModelSpec::build(self, seed_value)
    }
}

impl<F> ModelFactory for F
where
    F: Fn(u64) -> Result<TsadModel>,
{
    fn build(&self, seed_value: u64) -> Result<TsadModel> {
        self(seed_value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsadModel {
    kind: ModelKind,
    window: usize,
    channels: usize,
    horizon: usize,
    net: DenseNet,
}

/// Builds a model with tanh hidden layers and a linear output layer.
///
/// Reconstruction models map `w*d -> hidden.. -> w*d` and need a bottleneck
/// strictly narrower than `w*d`. Prediction models map `(w-h)*d -> hidden..
/// -> h*d` with `1 <= h < w`.
pub fn build_model(
    kind: ModelKind,
    window: usize,
    channels: usize,
    horizon: usize,
    hidden: &[usize],
    seed_value: u64,
) -> Result<TsadModel> {
    if window == 0 || channels == 0 {
        return Err(Error::Config("window and channels must be positive".into()));
    }
    let (n_in, n_out) = match kind {
        ModelKind::Reconstruction => {
            let n = window * channels;
            match hidden.iter().min() {
                None => {
                    return Err(Error::Config(
                        "reconstruction model needs at least one hidden layer".into(),
                    ))
                }
                Some(&b) if b >= n => {
                    return Err(Error::Config(format!(
                        "bottleneck {b} must be smaller than window size {n}"
                    )))
                }
                _ => {}
            }
            (n, n)
        }
        ModelKind::Prediction => {
            if horizon == 0 || horizon >= window {
                return Err(Error::Config(format!(
                    "horizon must satisfy 1 <= h < w, got h={horizon}, w={window}"
                )));
            }
            ((window - horizon) * channels, horizon * channels)
        }
    };
    let sizes: Vec<usize> = std::iter::once(n_in)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(n_out))
        .collect();
    let mut acts = vec![Activation::Tanh; hidden.len()];
    acts.push(Activation::Identity);
    let net = DenseNet::init(&sizes, &acts, seed_value)?;
    Ok(TsadModel {
        kind,
        window,
        channels,
        horizon: if kind == ModelKind::Prediction {
            horizon
        } else {
            0
        },
        net,
    })
}

/// Training hyperparameters shared by trial and final training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: crate::nn::DEFAULT_LEARNING_RATE,
            patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config(
                "epochs, batch_size and patience must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

impl TsadModel {
    /// Wraps an existing network, checking it has the right input and output
    /// widths for `kind`.
    pub fn from_parts(
        kind: ModelKind,
        window: usize,
        channels: usize,
        horizon: usize,
        net: DenseNet,
    ) -> Result<Self> {
        let net = DenseNet::from_layers(net.layers().to_vec(), net.seed())?;
        let (n_in, n_out) = match kind {
            ModelKind::Reconstruction => (window * channels, window * channels),
            ModelKind::Prediction => {
                if horizon == 0 || horizon >= window {
                    return Err(Error::Config(format!(
                        "horizon must satisfy 1 <= h < w, got h={horizon}, w={window}"
                    )));
                }
                ((window - horizon) * channels, horizon * channels)
            }
        };
        if net.input_size() != n_in || net.output_size() != n_out || n_in == 0 {
            return Err(Error::Shape(format!(
                "{kind} model with w={window}, d={channels} needs a {n_in} -> {n_out} network, got {} -> {}",
                net.input_size(),
                net.output_size()
            )));
        }
        Ok(Self {
            kind,
            window,
            channels,
            horizon: if kind == ModelKind::Prediction {
                horizon
            } else {
                0
            },
            net,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    fn split<'a>(&self, values: &'a [f64]) -> Result<(&'a [f64], &'a [f64])> {
        let n = self.window * self.channels;
        if values.len() != n {
            return Err(Error::Shape(format!(
                "window has {} values, model expects {n} ({}x{})",
                values.len(),
                self.window,
                self.channels
            )));
        }
        Ok(match self.kind {
            ModelKind::Reconstruction => (values, values),
            ModelKind::Prediction => values.split_at((self.window - self.horizon) * self.channels),
        })
    }

    /// Loss of one flattened window.
    pub fn sample_loss(&self, values: &[f64]) -> Result<f64> {
        let (input, target) = self.split(values)?;
        mse_per_sample(&self.net.forward(input)?, target)
    }

    /// Loss of every window, in order.
    pub fn losses(&self, windows: &WindowSet) -> Result<Vec<f64>> {
        self.check_windows(windows)?;
        windows
            .windows()
            .par_iter()
            .map(|w| self.sample_loss(&w.values))
            .collect()
    }

    fn mean_loss(&self, windows: &WindowSet, indices: &[usize]) -> Result<f64> {
        let losses: Vec<f64> = indices
            .par_iter()
            .map(|&i| self.sample_loss(&windows.get(i).values))
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    fn check_windows(&self, windows: &WindowSet) -> Result<()> {
        if windows.window_len() != self.window || windows.channels() != self.channels {
            return Err(Error::Shape(format!(
                "windows are {}x{}, model expects {}x{}",
                windows.window_len(),
                windows.channels(),
                self.window,
                self.channels
            )));
        }
        Ok(())
    }

    /// One shuffled pass of minibatch Adam steps over `windows[mask]`.
    ///
    /// The visiting order is a permutation of mask positions drawn from
    /// `(config.seed, epoch)`, so training on a mask is identical to training
    /// on the physically reduced set holding the same windows in the same
    /// order. Returns the mean pre-update minibatch loss.
    pub fn train_epoch(
        &mut self,
        optimizer: &mut Adam,
        windows: &WindowSet,
        mask: &[usize],
        config: &TrainConfig,
        epoch: usize,
    ) -> Result<f64> {
        if mask.is_empty() {
            return Err(Error::Training("training mask is empty".into()));
        }
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.check_windows(windows)?;
        if let Some(&bad) = mask.iter().find(|&&i| i >= windows.len()) {
            return Err(Error::Training(format!(
                "mask index {bad} out of range for {} windows",
                windows.len()
            )));
        }

        let mut order: Vec<usize> = (0..mask.len()).collect();
        let mut rng = seed::rng(seed::derive(
            config.seed,
            &[seed::label("epoch"), epoch as u64],
        ));
        order.shuffle(&mut rng);

        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut grads = Gradients::zeros_like(&self.net);
            let mut batch_loss = 0.0;
            for &pos in batch {
                let (input, target) = self.split(&windows.get(mask[pos]).values)?;
                let (loss, g) = self.net.backward(input, target)?;
                grads.add_assign(&g);
                batch_loss += loss;
            }
            let scale = 1.0 / batch.len() as f64;
            grads.scale(scale);
            optimizer.step(&mut self.net, &grads)?;
            total += batch_loss * scale;
            batches += 1;
        }
        Ok(total / batches as f64)
    }

    /// Per-timestep anomaly scores: the maximum loss over all windows
    /// (at the given stride) covering the timestep. Timesteps no window
    /// covers get the minimum score.
    pub fn anomaly_scores(&self, series: &MultivariateSeries, stride: usize) -> Result<Vec<f64>> {
        if series.channels() != self.channels {
            return Err(Error::Shape(format!(
                "series has {} channels, model expects {}",
                series.channels(),
                self.channels
            )));
        }
        let t_len = series.len();
        if t_len < self.window {
            return Err(Error::Shape(format!(
                "series length {t_len} is shorter than window {}",
                self.window
            )));
        }
        let windows = make_windows(series, self.window, stride)?;
        let losses = self.losses(&windows)?;

        let mut scores = vec![f64::NEG_INFINITY; t_len];
        for (w, loss) in windows.iter().zip(&losses) {
            for s in &mut scores[w.origin..w.origin + self.window] {
                *s = s.max(*loss);
            }
        }
        let floor = losses.iter().cloned().fold(f64::INFINITY, f64::min);
        for s in scores.iter_mut().filter(|s| **s == f64::NEG_INFINITY) {
            *s = floor;
        }
        Ok(scores)
    }
}

/// Outcome of [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Best validation loss, or the last training loss when there is no
    /// validation set.
    pub best_loss: f64,
}

/// Trains on `train_idx` with early stopping on the mean loss of
/// `val_idx`, restoring the best parameters seen. With no validation
/// indices all `config.epochs` epochs run.
pub fn fit(
    model: &mut TsadModel,
    windows: &WindowSet,
    train_idx: &[usize],
    val_idx: &[usize],
    config: &TrainConfig,
) -> Result<FitSummary> {
    config.validate()?;
    let mut optimizer = Adam::new(&model.net, config.learning_rate)?;
    let mut best = model.net.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut epochs_run = 0;
    for epoch in 0..config.epochs {
        let train_loss = model.train_epoch(&mut optimizer, windows, train_idx, config, epoch)?;
        epochs_run += 1;
        let loss = if val_idx.is_empty() {
            train_loss
        } else {
            model.mean_loss(windows, val_idx)?
        };
        log::debug!("epoch {epoch}: train {train_loss:.6}, monitored {loss:.6}");
        if loss < best_loss {
            best_loss = loss;
            best_epoch = epoch;
            best.clone_from(&model.net);
            stale = 0;
        } else {
            stale += 1;
            if !val_idx.is_empty() && stale >= config.patience {
                break;
            }
        }
    }
    if !val_idx.is_empty() {
        model.net = best;
    }
    Ok(FitSummary {
        epochs_run,
        best_epoch,
        best_loss,
    })
}

pub const CHECKPOINT_FORMAT: &str = "robust-tsad-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to score new data with a trained model: architecture
/// and parameters, the training normalizer, and the channel names.
///
/// Stored as JSON; floats use round-trip formatting so reloads are
/// bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub channel_names: Vec<String>,
    pub normalizer: Option<Normalizer>,
    pub model: TsadModel,
}

impl Checkpoint {
    pub fn new(
        model: TsadModel,
        normalizer: Option<Normalizer>,
        channel_names: Vec<String>,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            channel_names,
            normalizer,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Checkpoint = serde_json::from_str(text)?;
        if raw.format != CHECKPOINT_FORMAT || raw.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                raw.format, raw.version
            )));
        }
        let m = raw.model;
        let model = TsadModel::from_parts(m.kind, m.window, m.channels, m.horizon, m.net)?;
        if raw.channel_names.len() != model.channels {
            return Err(Error::Shape(format!(
                "checkpoint lists {} channel names for a {}-channel model",
                raw.channel_names.len(),
                model.channels
            )));
        }
        if let Some(n) = &raw.normalizer {
            if n.mean.len() != model.channels || n.std.len() != model.channels {
                return Err(Error::Shape(
                    "normalizer does not match model channels".into(),
                ));
            }
        }
        Ok(Self { model, ..raw })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
