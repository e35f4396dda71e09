//! Open-loop accuracy and coefficient reports.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientBounds;
use crate::datagen::Dataset;
use crate::dynamics::{step_pose, Coef, PoseState, UnknownCoefficients, Vehicle};
use crate::error::{Error, Result};
use crate::pinn::{predict_next, Estimate, Estimator, HistoryWindow};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Channels {
    pub v_x: f64,
    pub v_y: f64,
    pub omega: f64,
}

impl Channels {
    fn from_array(a: [f64; 3]) -> Self {
        Self {
            v_x: a[0],
            v_y: a[1],
            omega: a[2],
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.v_x, self.v_y, self.omega]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneStepMetrics {
    pub samples: usize,
    pub rmse: Channels,
    pub eps_max: Channels,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon_s: f64,
    pub steps: usize,
    pub starts: usize,
    /// Starts whose horizon would cross a session boundary.
    pub skipped: usize,
    /// Starts whose predicted rollout fell below the speed floor.
    pub failed: usize,
    pub ade: f64,
    pub fde: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopReport {
    pub model: String,
    pub one_step: OneStepMetrics,
    pub horizon: HorizonMetrics,
}

impl OpenLoopReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

fn estimate_at(estimator: &Estimator, dataset: &Dataset, t: usize) -> Result<Estimate> {
    let w = HistoryWindow::from_dataset(dataset, t, estimator.tau())?;
    estimator.estimate(&w)
}

/// Signed one-step errors (predicted minus observed) for every window, in
/// row order.
pub fn one_step_errors(estimator: &Estimator, vehicle: &Vehicle, dataset: &Dataset) -> Result<Vec<(usize, [f64; 3])>> {
    let ends = dataset.window_ends(estimator.tau(), 1);
    if ends.is_empty() {
        return Err(Error::InsufficientData("no window fits the dataset".into()));
    }
    let ts = dataset.ts();
    ends.par_iter()
        .map(|&t| {
            let est = estimate_at(estimator, dataset, t)?;
            let r = &dataset.records[t];
            let p = predict_next(vehicle, &r.state, &r.input, &est, ts)?;
            let o = &dataset.records[t + 1].state;
            Ok((t, [p.v_x - o.v_x, p.v_y - o.v_y, p.omega - o.omega]))
        })
        .collect()
}

/// Per-channel RMSE and maximum absolute one-step error.
pub fn one_step_metrics(estimator: &Estimator, vehicle: &Vehicle, dataset: &Dataset) -> Result<OneStepMetrics> {
    let errs = one_step_errors(estimator, vehicle, dataset)?;
    let n = errs.len() as f64;
    let mut sq = [0.0; 3];
    let mut mx = [0.0f64; 3];
    for (_, e) in &errs {
        for k in 0..3 {
            sq[k] += e[k] * e[k];
            mx[k] = mx[k].max(e[k].abs());
        }
    }
    Ok(OneStepMetrics {
        samples: errs.len(),
        rmse: Channels::from_array(sq.map(|s| (s / n).sqrt())),
        eps_max: Channels::from_array(mx),
    })
}

/// Displacement errors of one horizon rollout from row `t`, steps 1..=n.
/// The estimate is taken once from the window ending at `t` and held;
/// recorded inputs drive the rollout; logged poses are the reference.
pub fn rollout_displacements(
    estimator: &Estimator,
    vehicle: &Vehicle,
    dataset: &Dataset,
    t: usize,
    steps: usize,
) -> Result<Vec<f64>> {
    if t + steps >= dataset.len() {
        return Err(Error::InsufficientData(format!("horizon from row {t} runs past the data")));
    }
    let est = estimate_at(estimator, dataset, t)?;
    let ts = dataset.ts();
    let r0 = &dataset.records[t];
    let mut pose: PoseState = r0.pose;
    let mut state = r0.state;
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        let input = dataset.records[t + k].input;
        let next = predict_next(vehicle, &state, &input, &est, ts)?;
        pose = step_pose(&pose, &state, ts);
        state = next;
        let obs = dataset.records[t + k + 1].pose;
        out.push((pose.x - obs.x).hypot(pose.y - obs.y));
    }
    Ok(out)
}

/// ADE and FDE over every start whose history and horizon fit in one
/// session.
pub fn horizon_rollout_metrics(
    estimator: &Estimator,
    vehicle: &Vehicle,
    dataset: &Dataset,
    horizon_s: f64,
) -> Result<HorizonMetrics> {
    let ts = dataset.ts();
    let steps = (horizon_s / ts).round();
    if !(steps >= 1.0) || (steps * ts - horizon_s).abs() > 1e-9 {
        return Err(Error::invalid(
            "horizon",
            format!("{horizon_s} s is not a positive multiple of the {ts} s sample period"),
        ));
    }
    let steps = steps as usize;
    let tau = estimator.tau();
    let starts = dataset.window_ends(tau, steps);
    if starts.is_empty() {
        return Err(Error::InsufficientData(format!("no {steps}-step horizon fits the dataset")));
    }
    let results: Vec<Option<(f64, f64)>> = starts
        .par_iter()
        .map(|&t| match rollout_displacements(estimator, vehicle, dataset, t, steps) {
            Ok(d) => Ok(Some((d.iter().sum::<f64>() / steps as f64, d[steps - 1]))),
            Err(Error::VelocityFloor { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let ok: Vec<(f64, f64)> = results.iter().flatten().copied().collect();
    let n = ok.len().max(1) as f64;
    Ok(HorizonMetrics {
        horizon_s,
        steps,
        starts: ok.len(),
        skipped: dataset.skipped_windows(tau, steps),
        failed: results.len() - ok.len(),
        ade: ok.iter().map(|r| r.0).sum::<f64>() / n,
        fde: ok.iter().map(|r| r.1).sum::<f64>() / n,
    })
}

pub fn open_loop_report(
    estimator: &Estimator,
    vehicle: &Vehicle,
    dataset: &Dataset,
    horizon_s: f64,
) -> Result<OpenLoopReport> {
    Ok(OpenLoopReport {
        model: estimator.name().to_string(),
        one_step: one_step_metrics(estimator, vehicle, dataset)?,
        horizon: horizon_rollout_metrics(estimator, vehicle, dataset, horizon_s)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub symbol: String,
    /// Mean estimate; `None` when the model does not estimate it.
    pub estimate: Option<f64>,
    pub lower: f64,
    pub upper: f64,
    pub ground_truth: Option<f64>,
    pub in_range: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientReport {
    pub model: String,
    pub windows: usize,
    pub rows: Vec<CoefficientRow>,
    /// Mean direct longitudinal force, baseline models only.
    pub mean_f_rx: Option<f64>,
    /// Yaw inertia the model assumed instead of estimating.
    pub assumed_iz: Option<f64>,
}

impl CoefficientReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn out_of_range(&self) -> Vec<&str> {
        self.rows
            .iter()
            .filter(|r| r.in_range == Some(false))
            .map(|r| r.symbol.as_str())
            .collect()
    }

    /// Plain-text table; missing entries print as `NA` and out-of-range
    /// estimates are marked with `*`.
    pub fn table(&self) -> String {
        let mut out = format!("{:<6} {:>14} {:>12} {:>12} {:>14}\n", "coef", "estimate", "lower", "upper", "actual");
        let na = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6e}"));
        for r in &self.rows {
            let mark = if r.in_range == Some(false) { "*" } else { "" };
            let _ = writeln!(
                out,
                "{:<6} {:>14} {:>12.4e} {:>12.4e} {:>14}",
                r.symbol,
                format!("{}{mark}", na(r.estimate)),
                r.lower,
                r.upper,
                na(r.ground_truth)
            );
        }
        out
    }
}

/// Mean per-window estimates over `dataset`, against the bounds and (when
/// known) the true values.
pub fn coefficient_report(
    estimator: &Estimator,
    dataset: &Dataset,
    bounds: &CoefficientBounds,
    ground_truth: Option<&UnknownCoefficients>,
) -> Result<CoefficientReport> {
    let ends = dataset.window_ends(estimator.tau(), 0);
    if ends.is_empty() {
        return Err(Error::InsufficientData("no window fits the dataset".into()));
    }
    let ests: Vec<Estimate> = ends
        .par_iter()
        .map(|&t| estimate_at(estimator, dataset, t))
        .collect::<Result<_>>()?;
    let n = ests.len() as f64;
    let rows = Coef::ALL
        .iter()
        .map(|&c| {
            let vals: Option<Vec<f64>> = ests.iter().map(|e| e.get(c)).collect();
            let estimate = vals.map(|v| v.iter().sum::<f64>() / n);
            let (lower, upper) = bounds.get(c);
            CoefficientRow {
                symbol: c.symbol().to_string(),
                estimate,
                lower,
                upper,
                ground_truth: ground_truth.map(|g| g[c]),
                in_range: estimate.map(|v| v > lower && v < upper),
            }
        })
        .collect();
    let (mean_f_rx, assumed_iz) = match ests[0] {
        Estimate::Direct { i_z, .. } => {
            let f = ests
                .iter()
                .map(|e| match e {
                    Estimate::Direct { f_rx, .. } => *f_rx,
                    Estimate::Coefficients(_) => unreachable!("one model, one estimate kind"),
                })
                .sum::<f64>()
                / n;
            (Some(f), Some(i_z))
        }
        Estimate::Coefficients(_) => (None, None),
    };
    Ok(CoefficientReport {
        model: estimator.name().to_string(),
        windows: ests.len(),
        rows,
        mean_f_rx,
        assumed_iz,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{sim_nominal_bounds, SimRanges};
    use crate::datagen::{make_tracks, pure_pursuit_drive, DriveConfig, Record};
    use crate::dynamics::{ControlInput, VelocityState};
    use crate::pinn::{initial_model, ModelKind, Normalizer, TrainConfig, Variant};

    fn sim(n: usize) -> Dataset {
        let (_, t2) = make_tracks();
        let cfg = DriveConfig {
            max_samples: Some(n),
            ..Default::default()
        };
        pure_pursuit_drive(&t2, &Vehicle::default(), &UnknownCoefficients::sim_ground_truth(), &cfg).unwrap()
    }

    fn gt_estimator() -> Estimator {
        Estimator::fixed(UnknownCoefficients::sim_ground_truth())
    }

    fn perturbed() -> Estimator {
        let mut c = UnknownCoefficients::sim_ground_truth();
        c[Coef::Bf] *= 1.3;
        c[Coef::Cm1] *= 0.9;
        c[Coef::Iz] *= 1.2;
        Estimator::fixed(c)
    }

    #[test]
    fn ground_truth_is_exact() {
        let d = sim(300);
        let v = Vehicle::default();
        let m = one_step_metrics(&gt_estimator(), &v, &d).unwrap();
        assert!(m.rmse.to_array().iter().all(|&r| r < 1e-10));
        let h = horizon_rollout_metrics(&gt_estimator(), &v, &d, 0.3).unwrap();
        assert_eq!(h.steps, 15);
        assert!(h.ade < 1e-9 && h.fde < 1e-9);
    }

    #[test]
    fn one_step_matches_naive_loop() {
        let d = sim(100);
        let v = Vehicle::default();
        let est = perturbed();
        let Estimator::Fixed { coefficients, .. } = &est else { unreachable!() };
        let m = one_step_metrics(&est, &v, &d).unwrap();
        let mut sq = [0.0; 3];
        let mut mx = [0.0f64; 3];
        let mut n = 0.0;
        for t in 0..d.len() - 1 {
            let r = &d.records[t];
            let p = v.step_velocity(&r.state, &r.input, coefficients, d.ts()).unwrap();
            let o = d.records[t + 1].state;
            let e = [p.v_x - o.v_x, p.v_y - o.v_y, p.omega - o.omega];
            for k in 0..3 {
                sq[k] += e[k] * e[k];
                mx[k] = mx[k].max(e[k].abs());
            }
            n += 1.0;
        }
        assert_eq!(m.samples, 99);
        for k in 0..3 {
            assert!(((sq[k] / n).sqrt() - m.rmse.to_array()[k]).abs() < 1e-12);
            assert!((mx[k] - m.eps_max.to_array()[k]).abs() < 1e-12);
            assert!(m.eps_max.to_array()[k] >= m.rmse.to_array()[k]);
        }
    }

    #[test]
    fn constant_state_predictor_rmse_is_step_change_rms() {
        // with D = 0, zero drivetrain and infinite inertia nothing changes,
        // so the one-step error is the observed change itself
        let d = sim(80);
        let v = Vehicle::default();
        let mut c = UnknownCoefficients::sim_ground_truth();
        for k in [Coef::Df, Coef::Dr, Coef::Kf, Coef::Kr, Coef::Cm1, Coef::Cm2, Coef::Cr0, Coef::Cd] {
            c[k] = 0.0;
        }
        c[Coef::Iz] = 1e300;
        let est = Estimator::fixed(c);
        let m = one_step_metrics(&est, &v, &d).unwrap();
        let mut sq = [0.0; 3];
        for t in 0..d.len() - 1 {
            let (a, b) = (d.records[t].state, d.records[t + 1].state);
            let ts = d.ts();
            // the kinematic coupling terms remain
            let ex = a.v_x + a.v_y * a.omega * ts - b.v_x;
            let ey = a.v_y - a.v_x * a.omega * ts - b.v_y;
            let ew = a.omega - b.omega;
            sq[0] += ex * ex;
            sq[1] += ey * ey;
            sq[2] += ew * ew;
        }
        let n = (d.len() - 1) as f64;
        for k in 0..3 {
            assert!(((sq[k] / n).sqrt() - m.rmse.to_array()[k]).abs() < 1e-12);
        }
    }

    fn toy_sequence() -> Dataset {
        let mut records = Vec::new();
        let mut state = VelocityState::new(1.0, 0.05, 0.4, 0.3, 0.1);
        let mut pose = PoseState::new(0.0, 0.0, 0.2);
        let gt = UnknownCoefficients::sim_ground_truth();
        let v = Vehicle::default();
        for k in 0..4 {
            let input = ControlInput::new(0.01 * k as f64, -0.005);
            records.push(Record {
                t: k as f64 * 0.02,
                pose,
                state,
                input,
                session: 0,
            });
            let next = v.step_velocity(&state, &input, &gt, 0.02).unwrap();
            pose = step_pose(&pose, &state, 0.02);
            state = next;
        }
        Dataset::new(50.0, records)
    }

    #[test]
    fn three_step_toy_matches_brute_force() {
        let d = toy_sequence();
        let v = Vehicle::default();
        let est = perturbed();
        let Estimator::Fixed { coefficients, .. } = &est else { unreachable!() };
        let h = horizon_rollout_metrics(&est, &v, &d, 0.06).unwrap();
        assert_eq!((h.steps, h.starts), (3, 1));
        // brute force: unrolled by hand
        let r = &d.records;
        let ts = 0.02;
        let s1 = v.step_velocity(&r[0].state, &r[0].input, coefficients, ts).unwrap();
        let s2 = v.step_velocity(&s1, &r[1].input, coefficients, ts).unwrap();
        let p1 = step_pose(&r[0].pose, &r[0].state, ts);
        let p2 = step_pose(&p1, &s1, ts);
        let p3 = step_pose(&p2, &s2, ts);
        let e: Vec<f64> = [p1, p2, p3]
            .iter()
            .zip(&r[1..4])
            .map(|(p, o)| (p.x - o.pose.x).hypot(p.y - o.pose.y))
            .collect();
        assert_eq!(e[0], 0.0);
        assert!((h.ade - (e[0] + e[1] + e[2]) / 3.0).abs() < 1e-12);
        assert!((h.fde - e[2]).abs() < 1e-12);
    }

    #[test]
    fn one_step_horizon_is_single_displacement() {
        let d = sim(60);
        let v = Vehicle::default();
        let est = perturbed();
        let h = horizon_rollout_metrics(&est, &v, &d, 0.02).unwrap();
        assert_eq!(h.ade, h.fde);
        let mut sum = 0.0;
        for t in 0..d.len() - 1 {
            let r = &d.records[t];
            let p = step_pose(&r.pose, &r.state, d.ts());
            let o = d.records[t + 1].pose;
            sum += (p.x - o.x).hypot(p.y - o.y);
        }
        assert!((h.ade - sum / (d.len() - 1) as f64).abs() < 1e-12);
    }

    #[test]
    fn horizon_must_be_a_whole_number_of_steps() {
        let d = sim(60);
        assert!(horizon_rollout_metrics(&gt_estimator(), &Vehicle::default(), &d, 0.031).is_err());
        assert!(horizon_rollout_metrics(&gt_estimator(), &Vehicle::default(), &d, 0.0).is_err());
    }

    #[test]
    fn session_boundaries_are_skipped() {
        let mut d = sim(60);
        for r in d.records.iter_mut().skip(30) {
            r.session = 1;
        }
        let h = horizon_rollout_metrics(&gt_estimator(), &Vehicle::default(), &d, 0.1).unwrap();
        assert_eq!(h.starts, 2 * (30 - 5));
        assert_eq!(h.skipped, 60 - 5 - h.starts);
    }

    #[test]
    fn coefficient_reports() {
        let d = sim(120);
        let gt = UnknownCoefficients::sim_ground_truth();
        let b = sim_nominal_bounds(&gt, &SimRanges::default()).unwrap();
        let r = coefficient_report(&gt_estimator(), &d, &b, Some(&gt)).unwrap();
        assert!(r.rows.iter().all(|row| row.in_range == Some(true)));
        let iz = r.rows.iter().find(|row| row.symbol == "I_z").unwrap();
        assert_eq!(iz.ground_truth, Some(2.78e-5));
        assert_eq!(r.to_json(), coefficient_report(&gt_estimator(), &d, &b, Some(&gt)).unwrap().to_json());

        let cfg = TrainConfig {
            hidden_sizes: vec![4],
            tau: 2,
            ..Default::default()
        };
        let kind = ModelKind::new(Variant::DpmPlus20, 2.78e-5).unwrap();
        let dpm = Estimator::Network(Box::new(initial_model(&cfg, kind, &b, Normalizer::identity()).unwrap()));
        let r = coefficient_report(&dpm, &d, &b, Some(&gt)).unwrap();
        let iz = r.rows.iter().find(|row| row.symbol == "I_z").unwrap();
        assert_eq!(iz.estimate, None);
        assert_eq!(iz.in_range, None);
        assert!(r.table().lines().any(|l| l.starts_with("I_z") && l.contains("NA")));
        assert!((r.assumed_iz.unwrap() - 1.2 * 2.78e-5).abs() < 1e-18);
        assert!(r.mean_f_rx.is_some());
        assert_eq!(r.windows, 118);

        let ddm = Estimator::Network(Box::new(
            initial_model(&cfg, ModelKind::ddm(), &b, Normalizer::identity()).unwrap(),
        ));
        let r = coefficient_report(&ddm, &d, &b, None).unwrap();
        assert!(r.out_of_range().is_empty());
        assert!(r.rows.iter().all(|row| row.ground_truth.is_none()));
    }
}
