use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{speed_profile, Track};
use crate::dynamics::{step_pose, wrap_angle, ControlInput, PoseState, UnknownCoefficients, Vehicle, VelocityState};
use crate::error::{Error, Result};
use crate::pinn::{Estimator, HistoryWindow};

use super::{reference_points, shift_warm_start, solve, MpcConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaceConfig {
    pub laps: usize,
    pub rate_hz: f64,
    pub initial_speed: f64,
    pub initial_throttle: f64,
    /// Steering is held straight until v_x reaches this speed; slip angles
    /// at walking pace are too sensitive to plan through.
    pub launch_speed: f64,
    /// Abort after this much simulated time.
    pub max_time: f64,
    /// Reference preview speeds come from this curvature-limited profile.
    pub v_max: f64,
    pub a_lat_max: f64,
    pub a_accel: f64,
    pub a_brake: f64,
    /// Throttle PID gains, used by models without a drivetrain estimate.
    pub pid: [f64; 3],
}

impl Default for RaceConfig {
    fn default() -> Self {
        Self {
            laps: 1,
            rate_hz: 50.0,
            initial_speed: 0.1,
            initial_throttle: 0.2,
            launch_speed: 0.5,
            max_time: 60.0,
            v_max: 3.0,
            a_lat_max: 5.0,
            a_accel: 2.5,
            a_brake: 1.0,
            pid: [0.5, 0.5, 0.0],
        }
    }
}

impl RaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.laps == 0 {
            return Err(Error::invalid("race.laps", "must be at least 1"));
        }
        for (name, v) in [
            ("race.rate_hz", self.rate_hz),
            ("race.max_time", self.max_time),
            ("race.v_max", self.v_max),
            ("race.a_lat_max", self.a_lat_max),
            ("race.a_accel", self.a_accel),
            ("race.a_brake", self.a_brake),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.initial_throttle) {
            return Err(Error::invalid("race.initial_throttle", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub vx: f64,
    pub vy: f64,
    pub omega: f64,
    pub throttle: f64,
    pub steer: f64,
    pub cost: f64,
    pub offset: f64,
    pub violation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceReport {
    pub estimator: String,
    pub completed: bool,
    pub laps_completed: usize,
    pub lap_times: Vec<f64>,
    /// First lap time, when one was completed.
    pub lap_time: Option<f64>,
    /// Path length driven divided by elapsed time.
    pub avg_speed: f64,
    /// Number of separate excursions of the centre of gravity beyond the
    /// track half-width.
    pub violations: usize,
    pub steps_outside: usize,
    pub max_offset: f64,
    pub elapsed: f64,
    pub steps: usize,
    pub mean_solver_iterations: f64,
    pub solver_fallbacks: usize,
    pub abort_reason: Option<String>,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

impl RaceReport {
    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn trace_csv(&self) -> String {
        let mut out = String::from("t,x,y,theta,vx,vy,omega,throttle,steer,cost,offset,violation\n");
        for r in &self.trace {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.t,
                r.x,
                r.y,
                r.theta,
                r.vx,
                r.vy,
                r.omega,
                r.throttle,
                r.steer,
                r.cost,
                r.offset,
                u8::from(r.violation)
            );
        }
        out
    }

    pub fn save_trace_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.trace_csv()).map_err(|e| Error::io(path, e))
    }
}

struct Pid {
    gains: [f64; 3],
    integral: f64,
    previous: Option<f64>,
}

impl Pid {
    fn update(&mut self, error: f64, dt: f64) -> f64 {
        self.integral += error * dt;
        let deriv = self.previous.map_or(0.0, |p| (error - p) / dt);
        self.previous = Some(error);
        self.gains[0] * error + self.gains[1] * self.integral + self.gains[2] * deriv
    }
}

/// Closed loop on the ground-truth simulator: at every step the estimator
/// sees the history up to the previous step, the MPC plans with those
/// coefficients held fixed, and the first planned input is applied.
/// Spinning out or running out of time ends the run early with
/// `completed = false` and the reason recorded.
pub fn race(
    track: &Track,
    estimator: &Estimator,
    vehicle: &Vehicle,
    ground_truth: &UnknownCoefficients,
    mpc: &MpcConfig,
    config: &RaceConfig,
) -> Result<RaceReport> {
    mpc.validate()?;
    config.validate()?;
    vehicle.check_speed(config.initial_speed)?;
    let ts = 1.0 / config.rate_hz;
    let line = track.raceline();
    let lap_len = line.length();
    let profile = speed_profile(line, config.v_max, config.a_lat_max, config.a_accel, config.a_brake);
    let tau = estimator.tau();

    let start = line.point_at(0.0);
    let mut pose = PoseState::new(start[0], start[1], wrap_angle(line.heading_at(0.0)));
    let mut state = VelocityState::new(config.initial_speed, 0.0, 0.0, config.initial_throttle, 0.0);
    let mut history: VecDeque<(VelocityState, ControlInput)> = VecDeque::with_capacity(tau + 1);
    let mut warm: Option<Vec<ControlInput>> = None;
    let mut pid = Pid {
        gains: config.pid,
        integral: 0.0,
        previous: None,
    };

    let mut report = RaceReport {
        estimator: estimator.name().to_string(),
        completed: false,
        laps_completed: 0,
        lap_times: Vec::new(),
        lap_time: None,
        avg_speed: 0.0,
        violations: 0,
        steps_outside: 0,
        max_offset: 0.0,
        elapsed: 0.0,
        steps: 0,
        mean_solver_iterations: 0.0,
        solver_fallbacks: 0,
        abort_reason: None,
        trace: Vec::new(),
    };
    let mut s_prev = line.project([pose.x, pose.y]).s;
    let mut progress = 0.0;
    let mut last_lap_t = 0.0;
    let mut distance = 0.0;
    let mut outside = false;
    let mut iterations = 0usize;
    let max_steps = (config.max_time * config.rate_hz).ceil() as usize;
    let mut k = 0usize;

    let abort = loop {
        let t = k as f64 * ts;
        if k >= max_steps {
            break Some(format!("no lap finished within {} s", config.max_time));
        }
        // history ends at the previous step; before it fills, the oldest
        // available sample (or the start state) is repeated
        let mut samples: Vec<(VelocityState, ControlInput)> = history.iter().copied().collect();
        let pad = samples.first().copied().unwrap_or((state, ControlInput::new(0.0, 0.0)));
        while samples.len() < tau + 1 {
            samples.insert(0, pad);
        }
        let window = HistoryWindow::new(samples)?;
        let est = match estimator.estimate(&window) {
            Ok(e) if e.is_finite() => e,
            Ok(_) => break Some("estimator returned non-finite coefficients".to_string()),
            Err(e) => break Some(format!("estimator failed: {e}")),
        };
        let params = est.physics();
        let proj = line.project([pose.x, pose.y]);
        let preview = profile.at(proj.s);
        let refs = reference_points(line, &pose, preview, mpc.horizon, ts)?;
        let sol = solve(vehicle, mpc, &pose, &state, &refs, &params, warm.as_deref(), ts)?;
        iterations += sol.iterations_used;
        if sol.fallback.is_some() {
            report.solver_fallbacks += 1;
        }
        let mut u = sol.controls[0];
        if !estimator.has_drivetrain() {
            let target = pid.update(preview - state.v_x, ts).clamp(0.0, 1.0);
            u.dthrottle = target - state.throttle;
        }
        if state.v_x < config.launch_speed {
            u.dsteer = -state.steer;
        }
        let u = vehicle.limits.clamp_input(u);

        let offset = track.centerline().project([pose.x, pose.y]).distance;
        let violation = offset > track.half_width();
        if violation {
            report.steps_outside += 1;
            if !outside {
                report.violations += 1;
            }
        }
        outside = violation;
        report.max_offset = report.max_offset.max(offset);
        report.trace.push(TraceRow {
            t,
            x: pose.x,
            y: pose.y,
            theta: pose.theta,
            vx: state.v_x,
            vy: state.v_y,
            omega: state.omega,
            throttle: state.throttle,
            steer: state.steer,
            cost: sol.cost,
            offset,
            violation,
        });

        let next = match vehicle.step_velocity(&state, &u, ground_truth, ts) {
            Ok(n) => n,
            Err(e) => break Some(format!("simulator step failed: {e}")),
        };
        let new_pose = step_pose(&pose, &state, ts);
        distance += (new_pose.x - pose.x).hypot(new_pose.y - pose.y);
        pose = new_pose;
        if history.len() == tau + 1 {
            history.pop_front();
        }
        history.push_back((state, u));
        state = next;
        warm = Some(shift_warm_start(&sol.controls));
        k += 1;

        if !(state.v_x >= vehicle.vx_floor) {
            break Some(format!("spun out: v_x = {:.4} m/s", state.v_x));
        }
        let s_now = line.project([pose.x, pose.y]).s;
        let mut ds = s_now - s_prev;
        if ds < -0.5 * lap_len {
            ds += lap_len;
        } else if ds > 0.5 * lap_len {
            ds -= lap_len;
        }
        progress += ds;
        s_prev = s_now;
        if progress >= lap_len * (report.laps_completed + 1) as f64 {
            let now = k as f64 * ts;
            report.lap_times.push(now - last_lap_t);
            last_lap_t = now;
            report.laps_completed += 1;
            if report.laps_completed == config.laps {
                break None;
            }
        }
    };

    report.steps = k;
    report.elapsed = k as f64 * ts;
    report.avg_speed = if report.elapsed > 0.0 { distance / report.elapsed } else { 0.0 };
    report.mean_solver_iterations = if k > 0 { iterations as f64 / k as f64 } else { 0.0 };
    report.lap_time = report.lap_times.first().copied();
    report.completed = abort.is_none();
    report.abort_reason = abort;
    Ok(report)
}
