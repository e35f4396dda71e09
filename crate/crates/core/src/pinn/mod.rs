mod checkpoint;
mod model;
mod network;
mod train;
mod tune;
mod window;

pub use checkpoint::{Checkpoint, Estimator, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use model::{loss, predict_next, Estimate, Model, ModelKind, Variant, DPM_OUTPUTS};
pub use network::{mish, mish_grad, mish_with_grad, Dense, ForwardCache, GruLayer, NetworkParams};
pub use train::{
    initial_model, learning_rate_at, train, CoefficientMean, EpochStats, TrainConfig, TrainError, TrainingReport,
};
pub use tune::{tune, SearchSpace, Trial, TrialStatus, TuneResult};
pub use window::{HistoryWindow, Normalizer, FEATURES};
