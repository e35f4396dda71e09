use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::track::{Polyline, Track};
use super::{Dataset, Record};
use crate::dynamics::{step_pose, wrap_angle, Coef, ControlInput, PoseState, UnknownCoefficients, Vehicle, VelocityState};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriveConfig {
    pub laps: usize,
    pub rate_hz: f64,
    pub seed: u64,
    /// Lookahead distance is `lookahead_gain * v_x + lookahead_min`.
    pub lookahead_gain: f64,
    pub lookahead_min: f64,
    pub v_max: f64,
    pub a_lat_max: f64,
    pub a_accel: f64,
    pub a_brake: f64,
    /// Proportional gain of the speed loop, throttle per m/s.
    pub speed_gain: f64,
    /// Each lap's target speeds are scaled by a factor drawn from
    /// `1 +- speed_jitter`.
    pub speed_jitter: f64,
    /// Uniform throttle excitation added to every command.
    pub throttle_dither: f64,
    pub initial_speed: f64,
    /// Stop early after this many rows.
    pub max_samples: Option<usize>,
}

impl Default for DriveConfig {
    fn default() -> Self {
        Self {
            laps: 20,
            rate_hz: 50.0,
            seed: 1,
            lookahead_gain: 0.3,
            lookahead_min: 0.1,
            v_max: 3.0,
            a_lat_max: 5.0,
            a_accel: 2.5,
            a_brake: 1.0,
            speed_gain: 0.5,
            speed_jitter: 0.15,
            throttle_dither: 0.02,
            initial_speed: 1.0,
            max_samples: None,
        }
    }
}

/// Target speed at each raceline vertex, limited by lateral acceleration
/// and by the achievable acceleration and braking around the loop.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedProfile {
    speeds: Vec<f64>,
    line: Polyline,
}

impl SpeedProfile {
    /// Linear interpolation at arc length `s`.
    pub fn at(&self, s: f64) -> f64 {
        let s = self.line.wrap_s(s);
        let n = self.speeds.len();
        let spacing = self.line.length() / n as f64;
        let f = s / spacing;
        let i = (f.floor() as usize).min(n - 1);
        let t = f - i as f64;
        self.speeds[i] * (1.0 - t) + self.speeds[(i + 1) % n] * t
    }

    pub fn speeds(&self) -> &[f64] {
        &self.speeds
    }

    pub fn scaled(&self, k: f64) -> SpeedProfile {
        SpeedProfile {
            speeds: self.speeds.iter().map(|v| v * k).collect(),
            line: self.line.clone(),
        }
    }
}

/// `v = min(v_max, sqrt(a_lat / |kappa|))`, then forward/backward passes
/// enforcing the longitudinal limits around the closed loop.
pub fn speed_profile(line: &Polyline, v_max: f64, a_lat_max: f64, a_accel: f64, a_brake: f64) -> SpeedProfile {
    let kappa = line.vertex_curvature();
    let n = kappa.len();
    let mut v: Vec<f64> = kappa
        .iter()
        .map(|k| {
            if k.abs() > 1e-9 {
                (a_lat_max / k.abs()).sqrt().min(v_max)
            } else {
                v_max
            }
        })
        .collect();
    let seg = |i: usize| line.arc_length_at_vertex(i + 1) - line.arc_length_at_vertex(i);
    for _ in 0..2 {
        for i in 0..n {
            let j = (i + 1) % n;
            let lim = (v[i] * v[i] + 2.0 * a_accel * seg(i)).sqrt();
            v[j] = v[j].min(lim);
        }
        for i in (0..n).rev() {
            let j = (i + 1) % n;
            let lim = (v[j] * v[j] + 2.0 * a_brake * seg(i)).sqrt();
            v[i] = v[i].min(lim);
        }
    }
    SpeedProfile {
        speeds: v,
        line: line.clone(),
    }
}

fn feedforward_throttle(v: f64, gt: &UnknownCoefficients) -> f64 {
    let motor = gt[Coef::Cm1] - gt[Coef::Cm2] * v;
    if motor <= 0.0 {
        return 1.0;
    }
    ((gt[Coef::Cr0] + gt[Coef::Cd] * v * v) / motor).clamp(0.0, 1.0)
}

/// Drives the ground-truth simulator around `track` with a geometric
/// pure-pursuit steering law and a proportional speed loop, recording one
/// row per step.
pub fn pure_pursuit_drive(
    track: &Track,
    vehicle: &Vehicle,
    ground_truth: &UnknownCoefficients,
    config: &DriveConfig,
) -> Result<Dataset> {
    if !(config.rate_hz > 0.0) {
        return Err(Error::invalid("rate_hz", "must be positive"));
    }
    if config.laps < 1 {
        return Err(Error::invalid("laps", "must be at least 1"));
    }
    vehicle.check_speed(config.initial_speed)?;
    let ts = 1.0 / config.rate_hz;
    let line = track.raceline();
    let lap_len = line.length();
    let base = speed_profile(line, config.v_max, config.a_lat_max, config.a_accel, config.a_brake);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut lap_scale = 1.0 + rng.gen_range(-1.0..=1.0) * config.speed_jitter;

    let start = line.point_at(0.0);
    let mut pose = PoseState::new(start[0], start[1], wrap_angle(line.heading_at(0.0)));
    let mut state = VelocityState::new(
        config.initial_speed,
        0.0,
        0.0,
        feedforward_throttle(config.initial_speed, ground_truth),
        0.0,
    );
    let limits = vehicle.limits;
    let wheelbase = vehicle.known.wheelbase();

    let mut records = Vec::new();
    let mut s_prev = line.project([pose.x, pose.y]).s;
    let mut progress = 0.0;
    let mut laps_done = 0;
    let cap = config.max_samples.unwrap_or(usize::MAX);
    let mut k: u64 = 0;

    while laps_done < config.laps && records.len() < cap {
        let t = k as f64 * ts;
        let proj = line.project([pose.x, pose.y]);

        // steering: pure pursuit toward the lookahead point
        let lookahead = config.lookahead_gain * state.v_x + config.lookahead_min;
        let target = line.point_at(proj.s + lookahead);
        let (dx, dy) = (target[0] - pose.x, target[1] - pose.y);
        let ld = dx.hypot(dy).max(1e-6);
        let alpha = wrap_angle(dy.atan2(dx) - pose.theta);
        let curvature = 2.0 * alpha.sin() / ld;
        let steer_target = (curvature * wheelbase).atan().clamp(-limits.steer_max, limits.steer_max);
        let dsteer = (steer_target - state.steer).clamp(-limits.dsteer_max, limits.dsteer_max);

        // throttle: feedforward plus proportional correction, with dither
        let v_target = base.at(proj.s + 0.5 * lookahead) * lap_scale;
        let throttle_target = feedforward_throttle(v_target, ground_truth) + config.speed_gain * (v_target - state.v_x);
        let dither = if config.throttle_dither > 0.0 {
            rng.gen_range(-config.throttle_dither..=config.throttle_dither)
        } else {
            0.0
        };
        let dthrottle = (throttle_target - state.throttle + dither).clamp(-limits.dthrottle_max, limits.dthrottle_max);
        // keep the applied change exactly representable in the next state
        let dthrottle = (state.throttle + dthrottle).clamp(0.0, 1.0) - state.throttle;
        let dsteer = (state.steer + dsteer).clamp(-limits.steer_max, limits.steer_max) - state.steer;
        let input = ControlInput::new(dthrottle, dsteer);

        records.push(Record {
            t,
            pose,
            state,
            input,
            session: 0,
        });

        let next = vehicle
            .step_velocity(&state, &input, ground_truth, ts)
            .map_err(|e| Error::Generation {
                t,
                reason: e.to_string(),
            })?;
        pose = step_pose(&pose, &state, ts);
        state = next;
        k += 1;

        if state.v_x < vehicle.vx_floor {
            return Err(Error::Generation {
                t: k as f64 * ts,
                reason: format!("v_x fell to {:.4} m/s, below the floor", state.v_x),
            });
        }
        let off = track.centerline().project([pose.x, pose.y]).distance;
        if off > track.half_width() {
            return Err(Error::Generation {
                t: k as f64 * ts,
                reason: format!("left the track ({off:.3} m from the centerline)"),
            });
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
        if progress >= lap_len * (laps_done + 1) as f64 {
            laps_done += 1;
            lap_scale = 1.0 + rng.gen_range(-1.0..=1.0) * config.speed_jitter;
        }
    }
    Ok(Dataset::new(config.rate_hz, records))
}

#[cfg(test)]
mod tests {
    use super::super::make_tracks;
    use super::*;

    fn stadium(straight: f64, radius: f64) -> Track {
        let mut pts = Vec::new();
        let n = 400;
        for k in 0..n {
            pts.push([straight * k as f64 / n as f64, 0.0]);
        }
        for k in 0..n {
            let a = -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * k as f64 / n as f64;
            pts.push([straight + radius * a.cos(), radius + radius * a.sin()]);
        }
        for k in 0..n {
            pts.push([straight * (1.0 - k as f64 / n as f64), 2.0 * radius]);
        }
        for k in 0..n {
            let a = std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * k as f64 / n as f64;
            pts.push([radius * a.cos(), radius + radius * a.sin()]);
        }
        Track::new(Polyline::closed(pts).unwrap(), 0.3, None).unwrap()
    }

    #[test]
    fn straight_line_keeps_zero_steer() {
        let track = stadium(60.0, 5.0);
        let cfg = DriveConfig {
            laps: 1,
            max_samples: Some(300),
            speed_jitter: 0.0,
            throttle_dither: 0.0,
            v_max: 1.5,
            ..DriveConfig::default()
        };
        let d = pure_pursuit_drive(&track, &Vehicle::default(), &UnknownCoefficients::sim_ground_truth(), &cfg).unwrap();
        assert_eq!(d.len(), 300);
        for r in &d.records {
            assert!(r.state.steer.abs() < 1e-9);
            assert!(r.state.v_y.abs() < 1e-9);
            assert!(r.pose.y.abs() < 1e-9);
        }
        let last = d.records.last().unwrap();
        assert!((last.state.v_x - 1.5).abs() < 0.1, "{}", last.state.v_x);
    }

    #[test]
    fn generated_laps_are_consistent() {
        let (t1, _) = make_tracks();
        let cfg = DriveConfig {
            laps: 2,
            ..DriveConfig::default()
        };
        let veh = Vehicle::default();
        let gt = UnknownCoefficients::sim_ground_truth();
        let d = pure_pursuit_drive(&t1, &veh, &gt, &cfg).unwrap();
        assert!(d.len() > 200);
        for w in d.records.windows(2) {
            assert!((w[1].t - w[0].t - 0.02).abs() < 1e-6);
            assert!((w[1].state.throttle - w[0].state.throttle - w[0].input.dthrottle).abs() < 1e-12);
            assert!((w[1].state.steer - w[0].state.steer - w[0].input.dsteer).abs() < 1e-12);
            assert!(w[0].state.v_x >= veh.vx_floor);
            let next = veh.step_velocity(&w[0].state, &w[0].input, &gt, 0.02).unwrap();
            assert_eq!(next, w[1].state);
        }
        let again = pure_pursuit_drive(&t1, &veh, &gt, &cfg).unwrap();
        assert_eq!(again, d);
        let other = pure_pursuit_drive(&t1, &veh, &gt, &DriveConfig { seed: 2, ..cfg }).unwrap();
        assert_ne!(other, d);
    }

    #[test]
    fn profile_respects_limits() {
        let (t1, _) = make_tracks();
        let p = speed_profile(t1.raceline(), 3.0, 5.0, 2.5, 1.0);
        let k = t1.raceline().vertex_curvature();
        for (v, kk) in p.speeds().iter().zip(&k) {
            assert!(*v <= 3.0 + 1e-12);
            assert!(v * v * kk.abs() <= 5.0 + 1e-9);
        }
    }
}
