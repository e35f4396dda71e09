//! Raceline-tracking model-predictive control with coefficients held fixed
//! over the horizon.

mod race;

use serde::{Deserialize, Serialize};

use crate::ad::{Real, Tape, Var};
use crate::datagen::{Point, Polyline};
use crate::dynamics::{
    step_pose, step_pose_kernel, step_velocity_kernel, ControlInput, PhysicsParams, PoseState, Vehicle,
    VelocityState, N_UNKNOWN,
};
use crate::error::{Error, Result};

pub use race::{race, RaceConfig, RaceReport, TraceRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Position tracking weight, row-major 2x2.
    pub q: [[f64; 2]; 2],
    /// Weight on (dthrottle, dsteer), row-major 2x2.
    pub r: [[f64; 2]; 2],
    pub iterations: usize,
    /// Initial step, as a fraction of the actuator range moved by the largest
    /// (scaled) gradient component.
    pub step_size: f64,
    /// Stop once an accepted step improves the cost by less than this
    /// fraction.
    pub tolerance: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 25,
            q: [[10.0, 0.0], [0.0, 10.0]],
            r: [[1.0, 0.0], [0.0, 100.0]],
            iterations: 50,
            step_size: 0.5,
            tolerance: 1e-6,
        }
    }
}

fn sym_eigenvalues(m: &[[f64; 2]; 2]) -> (f64, f64) {
    let mean = 0.5 * (m[0][0] + m[1][1]);
    let rad = (0.25 * (m[0][0] - m[1][1]).powi(2) + m[0][1] * m[0][1]).sqrt();
    (mean - rad, mean + rad)
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::invalid("mpc.horizon", "must be at least 1"));
        }
        for (name, m) in [("mpc.q", &self.q), ("mpc.r", &self.r)] {
            if m.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::invalid(name, "entries must be finite"));
            }
            if m[0][1] != m[1][0] {
                return Err(Error::invalid(name, "must be symmetric"));
            }
        }
        if sym_eigenvalues(&self.q).0 < 0.0 {
            return Err(Error::invalid("mpc.q", "must be positive semidefinite"));
        }
        if sym_eigenvalues(&self.r).0 <= 0.0 {
            return Err(Error::invalid("mpc.r", "must be positive definite"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid("mpc.step_size", "must be positive"));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::invalid("mpc.tolerance", "must be non-negative"));
        }
        Ok(())
    }
}

/// `H` raceline points spaced `speed * ts` apart in arc length, starting one
/// spacing ahead of the projection of `pose`.
pub fn reference_points(line: &Polyline, pose: &PoseState, speed: f64, horizon: usize, ts: f64) -> Result<Vec<Point>> {
    if line.points().len() < 2 || !(line.length() > 0.0) {
        return Err(Error::invalid("raceline", "needs at least two distinct points"));
    }
    let s0 = line.project([pose.x, pose.y]).s;
    Ok((1..=horizon).map(|h| line.point_at(s0 + h as f64 * speed * ts)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    pub controls: Vec<ControlInput>,
    /// `H + 1` poses and states, starting with the initial ones.
    pub predicted: Vec<(PoseState, VelocityState)>,
    pub cost: f64,
    pub warm_start_cost: f64,
    pub iterations_used: usize,
    /// The coefficients every horizon step was evaluated with.
    pub params: PhysicsParams<f64>,
    /// Set when the solver gave up and returned zero controls.
    pub fallback: Option<String>,
}

fn quad(m: &[[f64; 2]; 2], a: f64, b: f64) -> f64 {
    m[0][0] * a * a + (m[0][1] + m[1][0]) * a * b + m[1][1] * b * b
}

/// Rollout through the f64 simulator surface; `None` if the speed floor is hit.
pub fn rollout(
    vehicle: &Vehicle,
    pose: &PoseState,
    state: &VelocityState,
    controls: &[ControlInput],
    params: &PhysicsParams<f64>,
    ts: f64,
) -> Option<Vec<(PoseState, VelocityState)>> {
    let mut out = Vec::with_capacity(controls.len() + 1);
    let (mut p, mut s) = (*pose, *state);
    out.push((p, s));
    for u in controls {
        let next = vehicle.step_velocity_with(&s, u, params, ts).ok()?;
        p = step_pose(&p, &s, ts);
        s = next;
        out.push((p, s));
    }
    Some(out)
}

/// Tracking cost of poses 1..=H plus actuation cost of controls 0..H-1;
/// infinite when the rollout hits the speed floor.
#[allow(clippy::too_many_arguments)]
pub fn rollout_cost(
    vehicle: &Vehicle,
    pose: &PoseState,
    state: &VelocityState,
    controls: &[ControlInput],
    refs: &[Point],
    params: &PhysicsParams<f64>,
    config: &MpcConfig,
    ts: f64,
) -> Result<f64> {
    if controls.len() != refs.len() {
        return Err(Error::Dimension {
            what: "mpc controls",
            expected: refs.len(),
            got: controls.len(),
        });
    }
    Ok(match rollout(vehicle, pose, state, controls, params, ts) {
        Some(traj) => cost_of(&traj, controls, refs, config),
        None => f64::INFINITY,
    })
}

fn cost_of(traj: &[(PoseState, VelocityState)], controls: &[ControlInput], refs: &[Point], config: &MpcConfig) -> f64 {
    let mut j = 0.0;
    for (h, r) in refs.iter().enumerate() {
        let p = &traj[h + 1].0;
        j += quad(&config.q, p.x - r[0], p.y - r[1]);
    }
    for u in controls {
        j += quad(&config.r, u.dthrottle, u.dsteer);
    }
    if j.is_finite() {
        j
    } else {
        f64::INFINITY
    }
}

/// Gradient of the cost with respect to the controls, through the generic
/// physics kernels recorded on a tape.
#[allow(clippy::too_many_arguments)]
fn cost_gradient(
    vehicle: &Vehicle,
    pose: &PoseState,
    state: &VelocityState,
    controls: &[ControlInput],
    refs: &[Point],
    params: &PhysicsParams<f64>,
    config: &MpcConfig,
    ts: f64,
) -> Vec<[f64; 2]> {
    let tape = Tape::with_capacity(200 * controls.len());
    let us: Vec<[Var<'_>; 2]> = controls.iter().map(|u| tape.vars([u.dthrottle, u.dsteer])).collect();
    let anchor = us[0][0];
    let c: [Var<'_>; N_UNKNOWN] = params.coeffs.map(|v| anchor.lift(v));
    let tp = PhysicsParams {
        coeffs: c,
        f_rx: params.f_rx.map(|f| anchor.lift(f)),
    };
    let mut s = state.to_array().map(|v| anchor.lift(v));
    let mut p = [pose.x, pose.y, pose.theta].map(|v| anchor.lift(v));
    let mut j = anchor.lift(0.0);
    let q = &config.q;
    let r = &config.r;
    for (h, u) in us.iter().enumerate() {
        let next = step_velocity_kernel(s, *u, &vehicle.known, &vehicle.limits, &tp, ts);
        p = step_pose_kernel(p, s[0], s[1], s[2], ts);
        s = next;
        let ex = p[0] - refs[h][0];
        let ey = p[1] - refs[h][1];
        j = j + ex * ex * q[0][0] + ex * ey * (q[0][1] + q[1][0]) + ey * ey * q[1][1];
        j = j + u[0] * u[0] * r[0][0] + u[0] * u[1] * (r[0][1] + r[1][0]) + u[1] * u[1] * r[1][1];
    }
    let adj = tape.gradient(j);
    us.iter().map(|u| [adj[u[0].index()], adj[u[1].index()]]).collect()
}

/// Projected gradient descent on the control sequence. Steps are taken in
/// actuator-normalised coordinates, scaled so the largest gradient component
/// moves by the current step length, and are only accepted if they lower the
/// cost; the result is therefore never worse than the (clamped) warm start.
#[allow(clippy::too_many_arguments)]
pub fn solve(
    vehicle: &Vehicle,
    config: &MpcConfig,
    pose: &PoseState,
    state: &VelocityState,
    refs: &[Point],
    params: &PhysicsParams<f64>,
    warm_start: Option<&[ControlInput]>,
    ts: f64,
) -> Result<MpcSolution> {
    config.validate()?;
    let h = config.horizon;
    if refs.len() != h {
        return Err(Error::Dimension {
            what: "mpc reference points",
            expected: h,
            got: refs.len(),
        });
    }
    vehicle.check_speed(state.v_x)?;
    let lim = vehicle.limits;
    let scale = [lim.dthrottle_max, lim.dsteer_max];
    let fixed = *params;

    let mut u: Vec<ControlInput> = match warm_start {
        Some(w) if w.len() == h => w.iter().map(|&c| lim.clamp_input(c)).collect(),
        Some(w) => {
            return Err(Error::Dimension {
                what: "mpc warm start",
                expected: h,
                got: w.len(),
            })
        }
        None => vec![ControlInput::new(0.0, 0.0); h],
    };
    let mut cost = rollout_cost(vehicle, pose, state, &u, refs, &fixed, config, ts)?;
    let warm_start_cost = cost;
    let mut iterations_used = 0;
    let mut fallback = None;

    // work in actuator-normalised coordinates u = scale * z
    let normalised = |g: &[[f64; 2]]| -> Vec<[f64; 2]> { g.iter().map(|gi| [gi[0] * scale[0], gi[1] * scale[1]]).collect() };
    let step_to = |u: &[ControlInput], gz: &[[f64; 2]], alpha: f64| -> Vec<ControlInput> {
        u.iter()
            .zip(gz)
            .map(|(ui, gi)| {
                lim.clamp_input(ControlInput::new(
                    ui.dthrottle - alpha * gi[0] * scale[0],
                    ui.dsteer - alpha * gi[1] * scale[1],
                ))
            })
            .collect()
    };
    let finite = |g: &[[f64; 2]]| g.iter().flatten().all(|v| v.is_finite());

    if !cost.is_finite() {
        fallback = Some("warm start hits the speed floor".to_string());
    } else if config.iterations > 0 {
        let mut g = cost_gradient(vehicle, pose, state, &u, refs, &fixed, config, ts);
        iterations_used = 1;
        if !finite(&g) {
            fallback = Some("non-finite cost gradient".to_string());
        }
        let mut gz = normalised(&g);
        let gmax = gz.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        // first step moves the largest component by `step_size` of its range
        let mut alpha = if gmax > 0.0 { config.step_size / gmax } else { 0.0 };
        while fallback.is_none() && alpha > 0.0 {
            let mut accepted = None;
            for _ in 0..40 {
                let cand = step_to(&u, &gz, alpha);
                let c = rollout_cost(vehicle, pose, state, &cand, refs, &fixed, config, ts)?;
                if c < cost {
                    accepted = Some((cand, c));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((cand, c)) = accepted else { break };
            let gain = cost - c;
            let g_new = cost_gradient(vehicle, pose, state, &cand, refs, &fixed, config, ts);
            if !finite(&g_new) {
                fallback = Some("non-finite cost gradient".to_string());
                break;
            }
            let gz_new = normalised(&g_new);
            // Barzilai-Borwein step length for the next iteration
            let mut ss = 0.0;
            let mut sy = 0.0;
            for k in 0..h {
                let sd = [
                    (cand[k].dthrottle - u[k].dthrottle) / scale[0],
                    (cand[k].dsteer - u[k].dsteer) / scale[1],
                ];
                for j in 0..2 {
                    ss += sd[j] * sd[j];
                    sy += sd[j] * (gz_new[k][j] - gz[k][j]);
                }
            }
            alpha = if sy > 0.0 { ss / sy } else { alpha * 2.0 };
            u = cand;
            cost = c;
            g = g_new;
            gz = gz_new;
            if iterations_used >= config.iterations || gain <= config.tolerance * cost.abs().max(f64::MIN_POSITIVE) {
                break;
            }
            iterations_used += 1;
        }
        let _ = g;
    }

    if fallback.is_some() {
        let zero = vec![ControlInput::new(0.0, 0.0); h];
        let zc = rollout_cost(vehicle, pose, state, &zero, refs, &fixed, config, ts)?;
        if zc <= cost || !cost.is_finite() {
            u = zero;
            cost = zc;
        }
    }
    assert!(
        fixed.coeffs.iter().zip(&params.coeffs).all(|(a, b)| a.to_bits() == b.to_bits()),
        "coefficients changed during a solve"
    );
    let predicted = rollout(vehicle, pose, state, &u, &fixed, ts).unwrap_or_else(|| vec![(*pose, *state)]);
    Ok(MpcSolution {
        controls: u,
        predicted,
        cost,
        warm_start_cost,
        iterations_used,
        params: fixed,
        fallback,
    })
}

/// Previous plan advanced one step, repeating its last control.
pub fn shift_warm_start(previous: &[ControlInput]) -> Vec<ControlInput> {
    let mut w: Vec<ControlInput> = previous.iter().skip(1).copied().collect();
    if let Some(&last) = previous.last() {
        w.push(last);
    }
    w
}

#[cfg(test)]
mod tests;
