use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::dynamics::{ControlInput, VelocityState};
use crate::error::{Error, Result};

/// Features per timestep, in order: v_x, v_y, omega, throttle, steer,
/// dthrottle, dsteer.
pub const FEATURES: usize = 7;

fn raw_features(state: &VelocityState, input: &ControlInput) -> [f64; FEATURES] {
    [
        state.v_x,
        state.v_y,
        state.omega,
        state.throttle,
        state.steer,
        input.dthrottle,
        input.dsteer,
    ]
}

/// `tau + 1` consecutive (state, input) pairs, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryWindow {
    samples: Vec<(VelocityState, ControlInput)>,
}

impl HistoryWindow {
    pub fn new(samples: Vec<(VelocityState, ControlInput)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InsufficientData("history window needs at least one sample".into()));
        }
        Ok(Self { samples })
    }

    /// Rows `end - tau ..= end`, which must share one session.
    pub fn from_dataset(dataset: &Dataset, end: usize, tau: usize) -> Result<Self> {
        if end < tau || end >= dataset.len() {
            return Err(Error::InsufficientData(format!(
                "window ending at row {end} with history {tau} does not fit {} rows",
                dataset.len()
            )));
        }
        let rows = &dataset.records[end - tau..=end];
        if rows.iter().any(|r| r.session != rows[0].session) {
            return Err(Error::InsufficientData(format!(
                "window ending at row {end} crosses a session boundary"
            )));
        }
        Self::new(rows.iter().map(|r| (r.state, r.input)).collect())
    }

    pub fn tau(&self) -> usize {
        self.samples.len() - 1
    }

    pub fn samples(&self) -> &[(VelocityState, ControlInput)] {
        &self.samples
    }

    /// The most recent pair; its input is the one applied at the current step.
    pub fn current(&self) -> &(VelocityState, ControlInput) {
        self.samples.last().expect("non-empty by construction")
    }

    pub fn check_floor(&self, floor: f64) -> Result<()> {
        for (s, _) in &self.samples {
            if !(s.v_x >= floor) {
                return Err(Error::VelocityFloor { v_x: s.v_x, floor });
            }
        }
        Ok(())
    }

    /// Flattened raw features, oldest timestep first.
    pub fn raw_features(&self) -> Vec<f64> {
        self.samples.iter().flat_map(|(s, u)| raw_features(s, u)).collect()
    }
}

/// Per-channel standardisation fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f64; FEATURES],
    pub std: [f64; FEATURES],
}

impl Normalizer {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; FEATURES],
            std: [1.0; FEATURES],
        }
    }

    /// Fits on every row covered by at least one of the given windows.
    pub fn fit(dataset: &Dataset, window_ends: &[usize], tau: usize) -> Result<Self> {
        let mut used = vec![false; dataset.len()];
        for &t in window_ends {
            if t < tau || t >= dataset.len() {
                return Err(Error::InsufficientData(format!("window end {t} out of range")));
            }
            used[t - tau..=t].iter_mut().for_each(|u| *u = true);
        }
        let rows: Vec<[f64; FEATURES]> = dataset
            .records
            .iter()
            .zip(&used)
            .filter(|(_, &u)| u)
            .map(|(r, _)| raw_features(&r.state, &r.input))
            .collect();
        if rows.is_empty() {
            return Err(Error::InsufficientData("no rows to fit input normalisation".into()));
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; FEATURES];
        let mut std = [0.0; FEATURES];
        for k in 0..FEATURES {
            mean[k] = rows.iter().map(|r| r[k]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
            std[k] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, raw: &mut [f64]) {
        for (i, v) in raw.iter_mut().enumerate() {
            let k = i % FEATURES;
            *v = (*v - self.mean[k]) / self.std[k];
        }
    }

    pub fn features(&self, window: &HistoryWindow) -> Vec<f64> {
        let mut x = window.raw_features();
        self.apply(&mut x);
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Record;
    use crate::dynamics::PoseState;

    fn toy(n: usize, split_at: usize) -> Dataset {
        let records = (0..n)
            .map(|i| Record {
                t: i as f64 * 0.02,
                pose: PoseState::new(0.0, 0.0, 0.0),
                state: VelocityState::new(1.0 + i as f64, 0.0, 0.0, 0.5, 0.0),
                input: ControlInput::new(0.01 * i as f64, 0.0),
                session: u32::from(i >= split_at),
            })
            .collect();
        Dataset::new(50.0, records)
    }

    #[test]
    fn window_layout_and_boundaries() {
        let d = toy(10, 6);
        let w = HistoryWindow::from_dataset(&d, 4, 2).unwrap();
        assert_eq!(w.tau(), 2);
        let f = w.raw_features();
        assert_eq!(f.len(), 3 * FEATURES);
        assert_eq!(f[0], 3.0);
        assert_eq!(f[FEATURES], 4.0);
        assert_eq!(w.current().0.v_x, 5.0);
        assert!((f[2 * FEATURES + 5] - 0.04).abs() < 1e-15);
        assert!(HistoryWindow::from_dataset(&d, 7, 2).is_err());
        assert!(HistoryWindow::from_dataset(&d, 1, 2).is_err());
        assert!(HistoryWindow::from_dataset(&d, 8, 2).is_ok());
    }

    #[test]
    fn normalizer_standardises_covered_rows() {
        let d = toy(10, 100);
        let norm = Normalizer::fit(&d, &[2, 3], 2).unwrap();
        // rows 0..=3: v_x = 1, 2, 3, 4
        assert!((norm.mean[0] - 2.5).abs() < 1e-15);
        assert!((norm.std[0] - 1.25f64.sqrt()).abs() < 1e-15);
        // constant throttle column falls back to unit scale
        assert_eq!(norm.std[3], 1.0);
        let w = HistoryWindow::from_dataset(&d, 3, 2).unwrap();
        let x = norm.features(&w);
        assert!((x[0] - (2.0 - 2.5) / 1.25f64.sqrt()).abs() < 1e-15);
        assert_eq!(x[3], 0.0);
    }

    #[test]
    fn floor_check() {
        let d = toy(4, 100);
        let w = HistoryWindow::from_dataset(&d, 3, 3).unwrap();
        assert!(w.check_floor(0.5).is_ok());
        assert!(w.check_floor(1.5).is_err());
    }
}
