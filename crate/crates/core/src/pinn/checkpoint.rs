use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::UnknownCoefficients;
use crate::error::{Error, Result};

use super::model::{Estimate, Model};
use super::train::TrainConfig;
use super::window::HistoryWindow;

pub const CHECKPOINT_FORMAT: &str = "vdyn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Anything that turns a history window into coefficients: a trained
/// network, or a fixed coefficient vector that ignores its input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Estimator {
    Network(Box<Model>),
    Fixed { tau: usize, coefficients: UnknownCoefficients },
}

impl Estimator {
    pub fn fixed(coefficients: UnknownCoefficients) -> Self {
        Estimator::Fixed { tau: 0, coefficients }
    }

    pub fn tau(&self) -> usize {
        match self {
            Estimator::Network(m) => m.tau,
            Estimator::Fixed { tau, .. } => *tau,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Network(m) => m.kind.variant.name(),
            Estimator::Fixed { .. } => "fixed",
        }
    }

    /// Whether the estimate carries drivetrain coefficients (as opposed to a
    /// direct force), i.e. whether throttle can be planned through physics.
    pub fn has_drivetrain(&self) -> bool {
        match self {
            Estimator::Network(m) => m.kind.is_guarded(),
            Estimator::Fixed { .. } => true,
        }
    }

    pub fn estimate(&self, window: &HistoryWindow) -> Result<Estimate> {
        match self {
            Estimator::Network(m) => m.estimate(window),
            Estimator::Fixed { coefficients, .. } => Ok(Estimate::Coefficients(*coefficients)),
        }
    }
}

/// On-disk container: format tag, version, the estimator (network weights,
/// bounds, input normalisation and model kind) and the training config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub estimator: Estimator,
    pub train_config: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn new(estimator: Estimator, train_config: Option<TrainConfig>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            estimator,
            train_config,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("not JSON: {e}")))?;
        match value.get("format").and_then(|f| f.as_str()) {
            Some(CHECKPOINT_FORMAT) => {}
            other => return Err(Error::Checkpoint(format!("format tag is {other:?}, expected {CHECKPOINT_FORMAT:?}"))),
        }
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
            other => {
                return Err(Error::Checkpoint(format!(
                    "version {other:?}, this build reads version {CHECKPOINT_VERSION}"
                )))
            }
        }
        let ck: Checkpoint = serde_json::from_value(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if let Estimator::Network(m) = &ck.estimator {
            Model::new(m.kind, m.tau, m.bounds, m.normalizer.clone(), m.network.clone())?;
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{sim_nominal_bounds, SimRanges};
    use crate::pinn::{initial_model, ModelKind, Normalizer, Variant};

    fn model(kind: ModelKind) -> Model {
        let gt = UnknownCoefficients::sim_ground_truth();
        let b = sim_nominal_bounds(&gt, &SimRanges::default()).unwrap();
        let cfg = TrainConfig {
            hidden_sizes: vec![5, 3],
            recurrent_layers: 1,
            tau: 2,
            seed: 4,
            ..Default::default()
        };
        let mut norm = Normalizer::identity();
        norm.mean[0] = 1.0 / 3.0;
        norm.std[2] = std::f64::consts::PI;
        let mut m = initial_model(&cfg, kind, &b, norm).unwrap();
        // make every weight an awkward float
        let flat: Vec<f64> = m.network.to_flat().iter().enumerate().map(|(i, v)| v + 1e-17 * i as f64 + 0.1 / 7.0).collect();
        m.network.set_flat(&flat).unwrap();
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for kind in [ModelKind::ddm(), ModelKind::new(Variant::DpmMinus20, 2.78e-5).unwrap()] {
            let ck = Checkpoint::new(Estimator::Network(Box::new(model(kind))), Some(TrainConfig::default()));
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.json");
            ck.save(&p).unwrap();
            let back = Checkpoint::load(&p).unwrap();
            assert_eq!(back, ck);
            let (Estimator::Network(a), Estimator::Network(b)) = (&ck.estimator, &back.estimator) else {
                unreachable!()
            };
            let bits = |m: &Model| m.network.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
            assert_eq!(back.to_json(), ck.to_json());
        }
    }

    #[test]
    fn fixed_estimator_round_trip() {
        let ck = Checkpoint::new(Estimator::fixed(UnknownCoefficients::sim_ground_truth()), None);
        assert_eq!(Checkpoint::from_json(&ck.to_json()).unwrap(), ck);
    }

    #[test]
    fn rejects_foreign_or_future_files() {
        let ck = Checkpoint::new(Estimator::fixed(UnknownCoefficients::sim_ground_truth()), None);
        let text = ck.to_json();
        let future = text.replace("\"version\": 1", "\"version\": 2");
        assert!(matches!(Checkpoint::from_json(&future), Err(Error::Checkpoint(m)) if m.contains("version")));
        let foreign = text.replace(CHECKPOINT_FORMAT, "something-else");
        assert!(matches!(Checkpoint::from_json(&foreign), Err(Error::Checkpoint(m)) if m.contains("format")));
        assert!(Checkpoint::from_json("{").is_err());
    }

    #[test]
    fn mismatched_network_is_rejected() {
        let mut m = model(ModelKind::ddm());
        m.tau = 5;
        let ck = Checkpoint::new(Estimator::Network(Box::new(m)), None);
        assert!(matches!(Checkpoint::from_json(&ck.to_json()), Err(Error::Dimension { .. })));
    }
}
