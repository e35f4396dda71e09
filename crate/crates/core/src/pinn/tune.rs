use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientBounds;
use crate::datagen::Dataset;
use crate::dynamics::Vehicle;
use crate::error::{Error, Result};

use super::model::ModelKind;
use super::train::{train, TrainConfig, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    /// Log-uniform range.
    pub learning_rate: (f64, f64),
    pub batch_size: Vec<usize>,
    /// Inclusive range of dense hidden layer counts.
    pub hidden_layers: (usize, usize),
    pub width: Vec<usize>,
    pub recurrent_layers: Vec<usize>,
    pub tau: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            learning_rate: (1e-4, 1e-2),
            batch_size: vec![8, 16, 32, 64, 128],
            hidden_layers: (1, 3),
            width: vec![32, 64, 128, 256],
            recurrent_layers: vec![0, 1, 2],
            tau: vec![1, 2, 4, 8],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.learning_rate;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid("search.learning_rate", "need 0 < low <= high"));
        }
        if self.hidden_layers.0 == 0 || self.hidden_layers.0 > self.hidden_layers.1 {
            return Err(Error::invalid("search.hidden_layers", "need 1 <= low <= high"));
        }
        for (name, v) in [
            ("search.batch_size", &self.batch_size),
            ("search.width", &self.width),
            ("search.recurrent_layers", &self.recurrent_layers),
            ("search.tau", &self.tau),
        ] {
            if v.is_empty() {
                return Err(Error::invalid(name, "must list at least one choice"));
            }
        }
        if self.batch_size.contains(&0) || self.width.contains(&0) {
            return Err(Error::invalid("search", "batch sizes and widths must be positive"));
        }
        Ok(())
    }

    /// Draws one configuration; every other field comes from `base`.
    pub fn sample(&self, base: &TrainConfig, rng: &mut impl Rng) -> TrainConfig {
        let (lo, hi) = self.learning_rate;
        let learning_rate = (rng.gen_range(lo.ln()..=hi.ln())).exp();
        let batch_size = *self.batch_size.choose(rng).expect("validated");
        let layers = rng.gen_range(self.hidden_layers.0..=self.hidden_layers.1);
        let width = *self.width.choose(rng).expect("validated");
        let recurrent_layers = *self.recurrent_layers.choose(rng).expect("validated");
        let tau = *self.tau.choose(rng).expect("validated");
        TrainConfig {
            learning_rate,
            batch_size,
            hidden_sizes: vec![width; layers],
            recurrent_layers,
            tau,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    Diverged,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub config: TrainConfig,
    pub status: TrialStatus,
    pub validation_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    pub parameters: Option<usize>,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: TrainConfig,
    pub best_trial: usize,
    pub trials: Vec<Trial>,
}

impl TuneResult {
    pub fn trials_csv(&self) -> String {
        let mut out = String::from(
            "trial,status,learning_rate,batch_size,hidden_layers,width,recurrent_layers,tau,parameters,best_epoch,validation_loss\n",
        );
        for t in &self.trials {
            let c = &t.config;
            let opt = |v: Option<String>| v.unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{:e},{},{},{},{},{},{},{},{}",
                t.index,
                serde_json::to_value(t.status).expect("status").as_str().expect("string"),
                c.learning_rate,
                c.batch_size,
                c.hidden_sizes.len(),
                c.hidden_sizes.first().copied().unwrap_or(0),
                c.recurrent_layers,
                c.tau,
                opt(t.parameters.map(|p| p.to_string())),
                opt(t.best_epoch.map(|p| p.to_string())),
                opt(t.validation_loss.map(|v| format!("{v:e}"))),
            );
        }
        out
    }

    pub fn save_trials_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.trials_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Random search: `budget` configurations are drawn up front from `seed`,
/// trained independently (in parallel, results kept in draw order) and
/// ranked by best validation loss. Ties go to the earlier trial.
#[allow(clippy::too_many_arguments)]
pub fn tune(
    dataset: &Dataset,
    base: &TrainConfig,
    space: &SearchSpace,
    budget: usize,
    seed: u64,
    bounds: &CoefficientBounds,
    kind: ModelKind,
    vehicle: &Vehicle,
) -> Result<TuneResult> {
    if budget == 0 {
        return Err(Error::invalid("budget", "must be at least 1"));
    }
    space.validate()?;
    base.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let configs: Vec<TrainConfig> = (0..budget).map(|_| space.sample(base, &mut rng)).collect();
    let trials: Vec<Trial> = configs
        .into_par_iter()
        .enumerate()
        .map(|(index, config)| {
            let outcome = train(dataset, &config, bounds, kind, vehicle);
            let mut trial = Trial {
                index,
                config,
                status: TrialStatus::Ok,
                validation_loss: None,
                best_epoch: None,
                parameters: None,
                message: None,
            };
            match outcome {
                Ok((_, r)) => {
                    trial.validation_loss = Some(r.best_validation_loss);
                    trial.best_epoch = Some(r.best_epoch);
                    trial.parameters = Some(r.parameters);
                }
                Err(TrainError::Diverged { epoch, reason, report, .. }) => {
                    trial.status = TrialStatus::Diverged;
                    trial.validation_loss = Some(report.best_validation_loss);
                    trial.best_epoch = Some(report.best_epoch);
                    trial.parameters = Some(report.parameters);
                    trial.message = Some(format!("epoch {epoch}: {reason}"));
                }
                Err(TrainError::Invalid(e)) => {
                    trial.status = TrialStatus::Failed;
                    trial.message = Some(e.to_string());
                }
            }
            trial
        })
        .collect();
    let best = trials
        .iter()
        .filter_map(|t| t.validation_loss.filter(|v| v.is_finite()).map(|v| (t.index, v)))
        .fold(None::<(usize, f64)>, |acc, (i, v)| match acc {
            Some((_, bv)) if bv <= v => acc,
            _ => Some((i, v)),
        });
    let Some((best_trial, _)) = best else {
        let reasons: Vec<String> = trials.iter().filter_map(|t| t.message.clone()).collect();
        return Err(Error::InsufficientData(format!(
            "no tuning trial produced a finite validation loss ({})",
            reasons.join("; ")
        )));
    };
    Ok(TuneResult {
        best: trials[best_trial].config.clone(),
        best_trial,
        trials,
    })
}
