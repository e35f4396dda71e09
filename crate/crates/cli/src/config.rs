use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vdyn_core::coefficients::{sim_nominal_bounds, CoefficientBounds, SimRanges};
use vdyn_core::datagen::{make_tracks, DriveConfig, Track};
use vdyn_core::dynamics::{UnknownCoefficients, Vehicle};
use vdyn_core::mpc::{MpcConfig, RaceConfig};
use vdyn_core::pinn::{SearchSpace, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train_data: PathBuf,
    pub test_data: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            train_data: "data/train.csv".into(),
            test_data: "data/test.csv".into(),
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `track1`, `track2`, or a path to a track JSON file.
    pub train_track: String,
    pub test_track: String,
    pub train_drive: DriveConfig,
    pub test_drive: DriveConfig,
    /// Rows kept from the end of each generated run.
    pub train_rows: usize,
    pub test_rows: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_track: "track1".into(),
            test_track: "track2".into(),
            // hard cornering on the training track, so the tires leave their
            // linear range
            train_drive: DriveConfig {
                v_max: 4.0,
                a_lat_max: 7.0,
                lookahead_gain: 0.1,
                lookahead_min: 0.15,
                ..DriveConfig::default()
            },
            test_drive: DriveConfig::default(),
            train_rows: 1000,
            test_rows: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub horizon_ms: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { horizon_ms: 300.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Master seed; every stochastic stage derives its own seed from it.
    pub seed: u64,
    pub paths: Paths,
    pub vehicle: Vehicle,
    /// Simulator truth, also the reference for coefficient reports.
    pub ground_truth: UnknownCoefficients,
    pub ranges: SimRanges,
    /// Replaces the bounds derived from `ground_truth` and `ranges`.
    pub bounds: Option<CoefficientBounds>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub search: SearchSpace,
    pub mpc: MpcConfig,
    pub race: RaceConfig,
    pub race_track: String,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            paths: Paths::default(),
            vehicle: Vehicle::default(),
            ground_truth: UnknownCoefficients::sim_ground_truth(),
            ranges: SimRanges::default(),
            bounds: None,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            search: SearchSpace::default(),
            mpc: MpcConfig::default(),
            race: RaceConfig::default(),
            race_track: "track2".into(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug)]
pub enum ConfigError {
    Io(PathBuf, std::io::Error),
    Parse(PathBuf, String),
    Invalid(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Io(p, e) => write!(f, "{}: {e}", p.display()),
            ConfigError::Parse(p, e) => write!(f, "{}: {e}", p.display()),
            ConfigError::Invalid(e) => f.write_str(e),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
        Self::from_json(&text).map_err(|e| match e {
            ConfigError::Parse(_, m) => ConfigError::Parse(path.to_path_buf(), m),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::Parse(PathBuf::from("<config>"), format!("at `{path}`: {}", e.into_inner()))
        })?;
        if cfg.version != CONFIG_VERSION {
            return Err(ConfigError::Invalid(format!(
                "version: config schema {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Pushes the master seed into every stage.
    pub fn resolve_seeds(&mut self) {
        self.train.seed = self.seed;
        self.data.train_drive.seed = self.seed.wrapping_mul(2).wrapping_add(1);
        self.data.test_drive.seed = self.seed.wrapping_mul(2).wrapping_add(2);
    }

    pub fn validate(&self) -> Result<(), String> {
        let field = |name: &str, e: vdyn_core::Error| format!("{name}: {e}");
        self.vehicle.known.validate().map_err(|e| field("vehicle.known", e))?;
        self.train.validate().map_err(|e| field("train", e))?;
        self.search.validate().map_err(|e| field("search", e))?;
        self.mpc.validate().map_err(|e| field("mpc", e))?;
        self.race.validate().map_err(|e| field("race", e))?;
        self.bounds().map_err(|e| field("bounds", e))?;
        if self.eval.horizon_ms.is_nan() || self.eval.horizon_ms <= 0.0 {
            return Err("eval.horizon_ms: must be positive".into());
        }
        if self.data.train_rows == 0 || self.data.test_rows == 0 {
            return Err("data.train_rows/test_rows: must be positive".into());
        }
        Ok(())
    }

    pub fn bounds(&self) -> vdyn_core::Result<CoefficientBounds> {
        match &self.bounds {
            Some(b) => Ok(*b),
            None => sim_nominal_bounds(&self.ground_truth, &self.ranges),
        }
    }
}

/// `track1`, `track2` or a track JSON file.
pub fn resolve_track(spec: &str) -> vdyn_core::Result<Track> {
    let (t1, t2) = make_tracks();
    match spec {
        "track1" => Ok(t1),
        "track2" => Ok(t2),
        path => Track::load_json(path),
    }
}
