use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientBounds;
use crate::datagen::{split, Dataset};
use crate::dynamics::{Coef, ControlInput, Vehicle, VelocityState};
use crate::error::{Error, Result};

use super::model::{Estimate, Model, ModelKind};
use super::network::NetworkParams;
use super::window::{HistoryWindow, Normalizer, FEATURES};

/// Samples per work unit when a batch is spread over threads. Fixed so the
/// reduction order, and therefore every bit of the result, does not depend on
/// the thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// When set, the step size follows a cosine from `learning_rate` down to
    /// this value over the run; otherwise it stays constant.
    pub final_learning_rate: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub tau: usize,
    pub hidden_sizes: Vec<usize>,
    pub recurrent_layers: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Independent initialisations trained on the same split; the run with
    /// the lowest validation loss is kept.
    pub restarts: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay on weight matrices (biases are exempt).
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            final_learning_rate: Some(1e-6),
            batch_size: 4,
            epochs: 2000,
            tau: 4,
            hidden_sizes: vec![64, 64],
            recurrent_layers: 0,
            seed: 0,
            validation_fraction: 0.2,
            restarts: 3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", "must be positive and finite"));
        }
        if let Some(f) = self.final_learning_rate {
            if !(f > 0.0 && f.is_finite()) {
                return Err(Error::invalid("final_learning_rate", "must be positive and finite"));
            }
        }
        if self.restarts == 0 {
            return Err(Error::invalid("restarts", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::invalid("validation_fraction", "must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("beta1/beta2", "must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay", "must be non-negative and finite"));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::invalid("hidden_sizes", "layer widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean loss over the epoch's batches (`null` for the initial entry).
    pub train_loss: Option<f64>,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientMean {
    pub symbol: String,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub model: String,
    pub train_windows: usize,
    pub validation_windows: usize,
    pub parameters: usize,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    /// Index of the kept restart; `epochs` and `best_*` describe that run.
    pub restart: usize,
    /// Best validation loss of every restart, in order.
    pub restart_validation_losses: Vec<f64>,
    /// Mean estimates of the selected model over the validation windows.
    pub mean_validation_coefficients: Vec<CoefficientMean>,
    /// Mean direct longitudinal force, baseline models only.
    pub mean_validation_f_rx: Option<f64>,
}

#[derive(Debug)]
pub enum TrainError {
    Invalid(Error),
    /// Non-finite loss or parameters; carries the last finite model.
    Diverged {
        epoch: usize,
        reason: String,
        last_finite: Box<Model>,
        report: Box<TrainingReport>,
    },
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::Invalid(e) => e.fmt(f),
            TrainError::Diverged { epoch, reason, .. } => write!(f, "training diverged in epoch {epoch}: {reason}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<Error> for TrainError {
    fn from(e: Error) -> Self {
        TrainError::Invalid(e)
    }
}

/// A training example with its input already normalised.
#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    pub features: Vec<f64>,
    pub state: VelocityState,
    pub input: ControlInput,
    pub target: VelocityState,
}

pub(crate) fn prepare(
    dataset: &Dataset,
    ends: &[usize],
    tau: usize,
    norm: &Normalizer,
    vehicle: &Vehicle,
) -> Result<Vec<Prepared>> {
    ends.iter()
        .map(|&t| {
            let w = HistoryWindow::from_dataset(dataset, t, tau)?;
            w.check_floor(vehicle.vx_floor)?;
            let (state, input) = *w.current();
            Ok(Prepared {
                features: norm.features(&w),
                state,
                input,
                target: dataset.records[t + 1].state,
            })
        })
        .collect()
}

/// Loss summed over `samples`, with the gradient sum accumulated into a
/// fresh buffer. Work is split into fixed chunks and reduced pairwise in
/// index order.
fn batch_loss_grad(
    model: &Model,
    vehicle: &Vehicle,
    samples: &[&Prepared],
    ts: f64,
) -> Result<(f64, NetworkParams, Vec<Estimate>)> {
    let parts: Vec<Result<(f64, NetworkParams, Vec<Estimate>)>> = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = model.network.zeros_like();
            let mut l = 0.0;
            let mut ests = Vec::with_capacity(chunk.len());
            for p in chunk {
                let (li, e) =
                    model.loss_grad_features(vehicle, &p.features, &p.state, &p.input, &p.target, ts, &mut g)?;
                l += li;
                ests.push(e);
            }
            Ok((l, g, ests))
        })
        .collect();
    let mut level: Vec<(f64, NetworkParams, Vec<Estimate>)> = parts.into_iter().collect::<Result<_>>()?;
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        let mut it = level.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.0 += b.0;
                a.1.add_assign(&b.1);
                a.2.extend(b.2);
            }
            next.push(a);
        }
        level = next;
    }
    Ok(level.pop().unwrap_or_else(|| (0.0, model.network.zeros_like(), Vec::new())))
}

fn evaluate(model: &Model, vehicle: &Vehicle, samples: &[Prepared], ts: f64) -> Result<(f64, Vec<Estimate>)> {
    let losses: Vec<Result<(f64, Estimate)>> = samples
        .par_iter()
        .map(|p| {
            let est = model.estimate_features(&p.features)?;
            let next = super::model::predict_next(vehicle, &p.state, &p.input, &est, ts)?;
            Ok((super::model::loss(&next, &p.target), est))
        })
        .collect();
    let mut sum = 0.0;
    let mut ests = Vec::with_capacity(samples.len());
    for r in losses {
        let (l, e) = r?;
        sum += l;
        ests.push(e);
    }
    Ok((sum / samples.len() as f64, ests))
}

pub(crate) fn mean_estimates(ests: &[Estimate]) -> (Vec<CoefficientMean>, Option<f64>) {
    let n = ests.len() as f64;
    let coeffs = Coef::ALL
        .iter()
        .filter_map(|&c| {
            let vals: Option<Vec<f64>> = ests.iter().map(|e| e.get(c)).collect();
            vals.map(|v| CoefficientMean {
                symbol: c.symbol().to_string(),
                mean: v.iter().sum::<f64>() / n,
            })
        })
        .collect();
    let f_rx = ests
        .iter()
        .map(|e| match e {
            Estimate::Direct { f_rx, .. } => Some(*f_rx),
            Estimate::Coefficients(_) => None,
        })
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / n);
    (coeffs, f_rx)
}

struct Adam {
    decay: Vec<bool>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(decay: Vec<bool>) -> Self {
        let n = decay.len();
        Self {
            decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], cfg: &TrainConfig, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            if self.decay[i] {
                theta[i] -= lr * cfg.weight_decay * theta[i];
            }
            theta[i] -= lr * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
}

/// Step size used throughout `epoch` (1-based).
pub fn learning_rate_at(config: &TrainConfig, epoch: usize) -> f64 {
    match config.final_learning_rate {
        None => config.learning_rate,
        Some(end) => {
            let frac = if config.epochs > 1 {
                (epoch.saturating_sub(1)) as f64 / (config.epochs - 1) as f64
            } else {
                0.0
            };
            end + 0.5 * (config.learning_rate - end) * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

/// Fresh model with network initialised from `config.seed`. The guarded
/// model starts with a zero head, i.e. at the interval midpoints.
pub fn initial_model(
    config: &TrainConfig,
    kind: ModelKind,
    bounds: &CoefficientBounds,
    normalizer: Normalizer,
) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let net = NetworkParams::init(
        FEATURES,
        config.tau + 1,
        &config.hidden_sizes,
        config.recurrent_layers,
        kind.outputs(),
        kind.is_guarded(),
        &mut rng,
    );
    Model::new(kind, config.tau, *bounds, normalizer, net)
}

/// Mini-batch Adam on the one-step loss; returns the epoch with the lowest
/// validation loss (epoch 0 is the untrained model). With several restarts,
/// all runs share the split and normaliser and the best one is returned; a
/// divergence in any run aborts training.
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    bounds: &CoefficientBounds,
    kind: ModelKind,
    vehicle: &Vehicle,
) -> std::result::Result<(Model, TrainingReport), TrainError> {
    config.validate()?;
    kind.validate()?;
    let ws = split(dataset, config.tau, config.validation_fraction, config.seed)?;
    if ws.train.len() < config.batch_size {
        return Err(Error::InsufficientData(format!(
            "{} training windows, fewer than batch_size {}",
            ws.train.len(),
            config.batch_size
        ))
        .into());
    }
    let norm = Normalizer::fit(dataset, &ws.train, config.tau)?;
    let data = RunData {
        train: prepare(dataset, &ws.train, config.tau, &norm, vehicle)?,
        validation: prepare(dataset, &ws.validation, config.tau, &norm, vehicle)?,
        ts: dataset.ts(),
        vehicle,
    };

    let mut kept: Option<(Model, TrainingReport)> = None;
    let mut losses = Vec::with_capacity(config.restarts);
    for r in 0..config.restarts {
        let run_config = TrainConfig {
            seed: restart_seed(config.seed, r),
            ..config.clone()
        };
        let initial = initial_model(&run_config, kind, bounds, norm.clone())?;
        let (model, mut report) = run(initial, &run_config, &data).map_err(|e| match e {
            TrainError::Diverged {
                epoch,
                reason,
                last_finite,
                mut report,
            } => {
                report.restart = r;
                TrainError::Diverged {
                    epoch,
                    reason,
                    last_finite,
                    report,
                }
            }
            other => other,
        })?;
        losses.push(report.best_validation_loss);
        report.restart = r;
        if kept.as_ref().is_none_or(|(_, k)| report.best_validation_loss < k.best_validation_loss) {
            kept = Some((model, report));
        }
    }
    let (model, mut report) = kept.expect("at least one restart");
    report.restart_validation_losses = losses;
    Ok((model, report))
}

/// Seed of restart `r`; restart 0 uses the configured seed unchanged.
pub fn restart_seed(seed: u64, r: usize) -> u64 {
    seed.wrapping_add((r as u64) << 32)
}

struct RunData<'a> {
    train: Vec<Prepared>,
    validation: Vec<Prepared>,
    ts: f64,
    vehicle: &'a Vehicle,
}

fn run(
    mut model: Model,
    config: &TrainConfig,
    data: &RunData,
) -> std::result::Result<(Model, TrainingReport), TrainError> {
    let RunData {
        train: train_set,
        validation: val_set,
        ts,
        vehicle,
    } = data;
    let (ts, vehicle) = (*ts, *vehicle);
    let kind = model.kind;
    let mut theta = model.network.to_flat();
    let mut adam = Adam::new(model.network.weight_mask());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));

    let (v0, e0) = evaluate(&model, vehicle, val_set, ts)?;
    let mut report = TrainingReport {
        model: kind.variant.name().to_string(),
        train_windows: train_set.len(),
        validation_windows: val_set.len(),
        parameters: theta.len(),
        epochs: vec![EpochStats {
            epoch: 0,
            train_loss: None,
            validation_loss: v0,
        }],
        best_epoch: 0,
        best_validation_loss: v0,
        restart: 0,
        restart_validation_losses: Vec::new(),
        mean_validation_coefficients: Vec::new(),
        mean_validation_f_rx: None,
    };
    let mut best = model.clone();
    let mut best_ests = e0;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        let lr = learning_rate_at(config, epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let samples: Vec<&Prepared> = batch.iter().map(|&i| &train_set[i]).collect();
            let outcome = batch_loss_grad(&model, vehicle, &samples, ts);
            let (l, mut g, ests) = match outcome {
                Ok(v) => v,
                Err(Error::NonFinite(what)) => {
                    return Err(diverged(epoch, what.to_string(), best, report, &best_ests));
                }
                Err(e) => return Err(e.into()),
            };
            if kind.is_guarded() {
                for e in &ests {
                    match e {
                        Estimate::Coefficients(c) if model.bounds.contains_all(c) => {}
                        _ => {
                            return Err(Error::invalid("guard", "estimate left its nominal interval").into());
                        }
                    }
                }
            }
            if !l.is_finite() {
                return Err(diverged(epoch, "non-finite batch loss".into(), best, report, &best_ests));
            }
            epoch_loss += l;
            g.scale(1.0 / batch.len() as f64);
            adam.step(&mut theta, &g.to_flat(), config, lr);
            if theta.iter().any(|v| !v.is_finite()) {
                return Err(diverged(epoch, "non-finite parameters".into(), best, report, &best_ests));
            }
            model.network.set_flat(&theta)?;
        }
        let val = evaluate(&model, vehicle, val_set, ts);
        let (vl, ests) = match val {
            Ok(v) if v.0.is_finite() => v,
            Ok(_) | Err(Error::NonFinite(_)) => {
                return Err(diverged(epoch, "non-finite validation loss".into(), best, report, &best_ests));
            }
            Err(e) => return Err(e.into()),
        };
        report.epochs.push(EpochStats {
            epoch,
            train_loss: Some(epoch_loss / train_set.len() as f64),
            validation_loss: vl,
        });
        if vl < report.best_validation_loss {
            report.best_validation_loss = vl;
            report.best_epoch = epoch;
            best = model.clone();
            best_ests = ests;
        }
    }
    let (means, f_rx) = mean_estimates(&best_ests);
    report.mean_validation_coefficients = means;
    report.mean_validation_f_rx = f_rx;
    Ok((best, report))
}

fn diverged(epoch: usize, reason: String, best: Model, mut report: TrainingReport, ests: &[Estimate]) -> TrainError {
    let (means, f_rx) = mean_estimates(ests);
    report.mean_validation_coefficients = means;
    report.mean_validation_f_rx = f_rx;
    TrainError::Diverged {
        epoch,
        reason,
        last_finite: Box::new(best),
        report: Box::new(report),
    }
}
