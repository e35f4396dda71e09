use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::coefficients::{sim_nominal_bounds, SimRanges};
use crate::datagen::make_tracks;
use crate::dynamics::UnknownCoefficients;
use crate::pinn::{initial_model, Estimator, ModelKind, Normalizer, TrainConfig, Variant};

const TS: f64 = 0.02;

fn gt() -> PhysicsParams<f64> {
    PhysicsParams::from_coefficients(&UnknownCoefficients::sim_ground_truth())
}

fn square_line(side: f64, per_side: usize) -> Polyline {
    let step = side / per_side as f64;
    let mut pts = Vec::new();
    for k in 0..per_side {
        pts.push([k as f64 * step, 0.0]);
    }
    for k in 0..per_side {
        pts.push([side, k as f64 * step]);
    }
    for k in 0..per_side {
        pts.push([side - k as f64 * step, side]);
    }
    for k in 0..per_side {
        pts.push([0.0, side - k as f64 * step]);
    }
    Polyline::closed(pts).unwrap()
}

fn random_instance(rng: &mut ChaCha8Rng, h: usize) -> (PoseState, VelocityState, Vec<Point>, Vec<ControlInput>) {
    let v = Vehicle::default();
    let pose = PoseState::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-3.0..3.0));
    let state = VelocityState::new(
        rng.gen_range(0.5..3.0),
        rng.gen_range(-0.1..0.1),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(0.0..1.0),
        rng.gen_range(-0.3..0.3),
    );
    let (s, c) = pose.theta.sin_cos();
    let refs = (1..=h)
        .map(|k| {
            let d = k as f64 * state.v_x * TS;
            [
                pose.x + d * c + rng.gen_range(-0.05..0.05),
                pose.y + d * s + rng.gen_range(-0.05..0.05),
            ]
        })
        .collect();
    let warm = (0..h)
        .map(|_| {
            ControlInput::new(
                rng.gen_range(-1.5..1.5) * v.limits.dthrottle_max,
                rng.gen_range(-1.5..1.5) * v.limits.dsteer_max,
            )
        })
        .collect();
    (pose, state, refs, warm)
}

#[test]
fn config_checks() {
    assert!(MpcConfig::default().validate().is_ok());
    let bad = |f: fn(&mut MpcConfig)| {
        let mut c = MpcConfig::default();
        f(&mut c);
        c.validate().is_err()
    };
    assert!(bad(|c| c.horizon = 0));
    assert!(bad(|c| c.q = [[1.0, 2.0], [2.0, 1.0]]));
    assert!(bad(|c| c.r = [[1.0, 0.0], [0.0, 0.0]]));
    assert!(bad(|c| c.r = [[1.0, 0.1], [0.0, 1.0]]));
    assert!(bad(|c| c.step_size = 0.0));
    let psd = MpcConfig {
        q: [[1.0, 1.0], [1.0, 1.0]],
        ..Default::default()
    };
    assert!(psd.validate().is_ok());
}

#[test]
fn aligned_reference_sampling() {
    let line = square_line(4.0, 40);
    let spacing = 0.1;
    let pose = PoseState::new(1.0, 0.0, 0.0);
    let refs = reference_points(&line, &pose, spacing / TS, 5, TS).unwrap();
    for (h, r) in refs.iter().enumerate() {
        let v = line.points()[10 + h + 1];
        assert!((r[0] - v[0]).abs() < 1e-12 && (r[1] - v[1]).abs() < 1e-12);
    }
    let one = reference_points(&line, &pose, 1.7, 1, TS).unwrap();
    assert_eq!(one.len(), 1);
    assert!((line.project(one[0]).s - (1.0 + 1.7 * TS)).abs() < 1e-12);
}

#[test]
fn off_track_projection_matches_brute_force() {
    let (t1, _) = make_tracks();
    let line = t1.raceline();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let s = rng.gen_range(0.0..line.length());
        let p = line.point_at(s);
        let a = rng.gen_range(0.0..std::f64::consts::TAU);
        let pose = PoseState::new(p[0] + a.cos(), p[1] + a.sin(), 0.0);
        let refs = reference_points(line, &pose, 0.0, 1, TS).unwrap();
        let n = 200_000;
        let brute = (0..n)
            .map(|k| line.point_at(line.length() * k as f64 / n as f64))
            .map(|q| (q[0] - pose.x).hypot(q[1] - pose.y))
            .fold(f64::INFINITY, f64::min);
        let got = (refs[0][0] - pose.x).hypot(refs[0][1] - pose.y);
        assert!((got - brute).abs() < 1e-4, "{got} vs {brute}");
    }
}

#[test]
fn cost_trivial_cases() {
    let v = Vehicle::default();
    let pose = PoseState::new(0.0, 0.0, 0.3);
    let state = VelocityState::new(1.5, 0.02, 0.1, 0.4, 0.05);
    let zero = vec![ControlInput::new(0.0, 0.0); 6];
    let cfg = MpcConfig {
        q: [[0.0; 2]; 2],
        ..Default::default()
    };
    let far = vec![[5.0, 5.0]; 6];
    assert_eq!(rollout_cost(&v, &pose, &state, &zero, &far, &gt(), &cfg, TS).unwrap(), 0.0);

    let cfg = MpcConfig {
        q: [[1.0, 0.0], [0.0, 1.0]],
        r: [[0.0; 2]; 2],
        ..cfg
    };
    let controls: Vec<ControlInput> = (0..6).map(|k| ControlInput::new(0.01 * k as f64, -0.003)).collect();
    let traj = rollout(&v, &pose, &state, &controls, &gt(), TS).unwrap();
    let refs: Vec<Point> = traj[1..].iter().map(|(p, _)| [p.x, p.y]).collect();
    assert_eq!(rollout_cost(&v, &pose, &state, &controls, &refs, &gt(), &cfg, TS).unwrap(), 0.0);
}

#[test]
fn cost_matches_naive_loop() {
    let v = Vehicle::default();
    let gtc = UnknownCoefficients::sim_ground_truth();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let (pose, state, refs, warm) = random_instance(&mut rng, 10);
        let cfg = MpcConfig {
            horizon: 10,
            q: [[3.0, 0.5], [0.5, 2.0]],
            r: [[1.0, -0.2], [-0.2, 50.0]],
            ..Default::default()
        };
        // naive: explicit matrix products, simulator stepped by hand
        let (mut p, mut s) = (pose, state);
        let mut expect = 0.0;
        for (h, u) in warm.iter().enumerate() {
            let next = v.step_velocity(&s, u, &gtc, TS).unwrap();
            p = crate::dynamics::step_pose(&p, &s, TS);
            s = next;
            let e = [p.x - refs[h][0], p.y - refs[h][1]];
            for i in 0..2 {
                for j in 0..2 {
                    expect += e[i] * cfg.q[i][j] * e[j];
                }
            }
            let uu = [u.dthrottle, u.dsteer];
            for i in 0..2 {
                for j in 0..2 {
                    expect += uu[i] * cfg.r[i][j] * uu[j];
                }
            }
        }
        let got = rollout_cost(&v, &pose, &state, &warm, &refs, &gt(), &cfg, TS).unwrap();
        assert!((got - expect).abs() <= 1e-12 * expect.max(1.0), "{got} vs {expect}");
    }
}

#[test]
fn cost_gradient_matches_finite_differences() {
    let v = Vehicle::default();
    let cfg = MpcConfig {
        horizon: 8,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let (pose, state, refs, warm) = random_instance(&mut rng, 8);
        // stay strictly inside the actuator box so the clamp is smooth
        let u: Vec<ControlInput> = warm.iter().map(|c| ControlInput::new(c.dthrottle * 0.5, c.dsteer * 0.5)).collect();
        let u: Vec<ControlInput> = u
            .iter()
            .map(|c| {
                ControlInput::new(
                    c.dthrottle.clamp(-0.04, 0.04),
                    c.dsteer.clamp(-0.015, 0.015),
                )
            })
            .collect();
        let mut st = state;
        st.throttle = 0.5;
        st.steer = 0.0;
        let g = cost_gradient(&v, &pose, &st, &u, &refs, &gt(), &cfg, TS);
        let f = |uu: &[ControlInput]| rollout_cost(&v, &pose, &st, uu, &refs, &gt(), &cfg, TS).unwrap();
        let gmax = g.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
        for h in 0..u.len() {
            for k in 0..2 {
                let eps = 1e-7;
                let mut up = u.clone();
                let mut dn = u.clone();
                if k == 0 {
                    up[h].dthrottle += eps;
                    dn[h].dthrottle -= eps;
                } else {
                    up[h].dsteer += eps;
                    dn[h].dsteer -= eps;
                }
                let fd = (f(&up) - f(&dn)) / (2.0 * eps);
                assert!((fd - g[h][k]).abs() <= 1e-5 * gmax.max(1e-3), "h={h} k={k} fd={fd} ad={}", g[h][k]);
            }
        }
    }
}

#[test]
fn solve_descends_stays_feasible_and_reports_its_rollout() {
    let v = Vehicle::default();
    let cfg = MpcConfig {
        horizon: 12,
        ..Default::default()
    };
    let params = gt();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let (pose, state, refs, warm) = random_instance(&mut rng, 12);
        let sol = solve(&v, &cfg, &pose, &state, &refs, &params, Some(&warm), TS).unwrap();
        assert!(sol.cost <= sol.warm_start_cost);
        let clamped: Vec<ControlInput> = warm.iter().map(|&c| v.limits.clamp_input(c)).collect();
        let wc = rollout_cost(&v, &pose, &state, &clamped, &refs, &params, &cfg, TS).unwrap();
        assert_eq!(sol.warm_start_cost, wc);
        for u in &sol.controls {
            assert!(u.dthrottle.abs() <= v.limits.dthrottle_max);
            assert!(u.dsteer.abs() <= v.limits.dsteer_max);
        }
        assert_eq!(sol.predicted, rollout(&v, &pose, &state, &sol.controls, &params, TS).unwrap());
        assert_eq!(sol.params, params);
        let recomputed = rollout_cost(&v, &pose, &state, &sol.controls, &refs, &params, &cfg, TS).unwrap();
        assert_eq!(recomputed, sol.cost);
    }
}

/// Dense search over the first control with the rest held at zero. With
/// the one-step actuator delay, later controls cannot reach the tracked
/// positions within three steps, so this is the exact optimum.
fn grid_optimum(
    v: &Vehicle,
    cfg: &MpcConfig,
    pose: &PoseState,
    state: &VelocityState,
    refs: &[Point],
    n: usize,
) -> (ControlInput, f64, f64) {
    let (tm, sm) = (v.limits.dthrottle_max, v.limits.dsteer_max);
    let mut best = (ControlInput::new(0.0, 0.0), f64::INFINITY);
    for i in 0..=n {
        for j in 0..=n {
            let u0 = ControlInput::new(-tm + 2.0 * tm * i as f64 / n as f64, -sm + 2.0 * sm * j as f64 / n as f64);
            let mut u = vec![ControlInput::new(0.0, 0.0); cfg.horizon];
            u[0] = u0;
            let c = rollout_cost(v, pose, state, &u, refs, &gt(), cfg, TS).unwrap();
            if c < best.1 {
                best = (u0, c);
            }
        }
    }
    (best.0, 2.0 * tm / n as f64, 2.0 * sm / n as f64)
}

#[test]
fn single_step_matches_grid_search() {
    let v = Vehicle::default();
    let cfg = MpcConfig {
        horizon: 1,
        tolerance: 0.0,
        iterations: 500,
        ..Default::default()
    };
    let pose = PoseState::new(0.0, 0.0, 0.0);
    let state = VelocityState::new(1.0, 0.0, 0.0, 0.3, 0.001);
    let refs = vec![[0.03, 0.001]];
    let (g, dt, ds) = grid_optimum(&v, &cfg, &pose, &state, &refs, 100);
    let sol = solve(&v, &cfg, &pose, &state, &refs, &gt(), Some(&[ControlInput::new(0.03, -0.01)]), TS).unwrap();
    assert!((sol.controls[0].dthrottle - g.dthrottle).abs() <= dt);
    assert!((sol.controls[0].dsteer - g.dsteer).abs() <= ds);
}

#[test]
fn three_step_matches_grid_search() {
    let v = Vehicle::default();
    let cfg = MpcConfig {
        horizon: 3,
        tolerance: 0.0,
        iterations: 2000,
        r: [[1e-3, 0.0], [0.0, 1e-2]],
        ..Default::default()
    };
    let pose = PoseState::new(0.0, 0.0, 0.0);
    let state = VelocityState::new(1.0, 0.0, 0.0, 0.3, 0.001);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..5 {
        let target = ControlInput::new(rng.gen_range(-0.04..0.04), rng.gen_range(-0.015..0.015));
        let mut u = vec![ControlInput::new(0.0, 0.0); 3];
        u[0] = target;
        let traj = rollout(&v, &pose, &state, &u, &gt(), TS).unwrap();
        let refs: Vec<Point> = traj[1..].iter().map(|(p, _)| [p.x, p.y]).collect();
        let (g, dt, ds) = grid_optimum(&v, &cfg, &pose, &state, &refs, 200);
        let sol = solve(&v, &cfg, &pose, &state, &refs, &gt(), None, TS).unwrap();
        assert!((sol.controls[0].dthrottle - g.dthrottle).abs() <= dt, "{:?} vs {:?}", sol.controls[0], g);
        assert!((sol.controls[0].dsteer - g.dsteer).abs() <= ds, "{:?} vs {:?}", sol.controls[0], g);
    }
}

#[test]
fn shifted_warm_start_converges_faster() {
    let (t1, _) = make_tracks();
    let v = Vehicle::default();
    let cfg = MpcConfig::default();
    let line = t1.raceline();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut warm_iters = Vec::new();
    let mut cold_iters = Vec::new();
    for _ in 0..20 {
        let s = rng.gen_range(0.0..line.length());
        let p = line.point_at(s);
        let mut pose = PoseState::new(p[0], p[1], line.heading_at(s));
        let mut state = VelocityState::new(rng.gen_range(1.0..2.0), 0.0, 0.0, 0.5, 0.0);
        let refs = reference_points(line, &pose, state.v_x, cfg.horizon, TS).unwrap();
        let first = solve(&v, &cfg, &pose, &state, &refs, &gt(), None, TS).unwrap();
        let next = v.step_velocity_with(&state, &first.controls[0], &gt(), TS).unwrap();
        pose = step_pose(&pose, &state, TS);
        state = next;
        let refs = reference_points(line, &pose, state.v_x, cfg.horizon, TS).unwrap();
        let shifted = shift_warm_start(&first.controls);
        warm_iters.push(solve(&v, &cfg, &pose, &state, &refs, &gt(), Some(&shifted), TS).unwrap().iterations_used);
        cold_iters.push(solve(&v, &cfg, &pose, &state, &refs, &gt(), None, TS).unwrap().iterations_used);
    }
    warm_iters.sort_unstable();
    cold_iters.sort_unstable();
    assert!(warm_iters[10] < cold_iters[10], "warm {warm_iters:?} cold {cold_iters:?}");
}

#[test]
fn broken_coefficients_fall_back_to_zero_controls() {
    let v = Vehicle::default();
    let cfg = MpcConfig::default();
    let mut params = gt();
    params.coeffs[crate::dynamics::Coef::Iz.index()] = 0.0;
    let pose = PoseState::new(0.0, 0.0, 0.0);
    let state = VelocityState::new(1.0, 0.01, 0.1, 0.3, 0.05);
    let refs = vec![[0.1, 0.0]; cfg.horizon];
    let sol = solve(&v, &cfg, &pose, &state, &refs, &params, None, TS).unwrap();
    assert!(sol.fallback.is_some());
    assert!(sol.controls.iter().all(|u| u.dthrottle == 0.0 && u.dsteer == 0.0));
}

#[test]
fn dimension_errors() {
    let v = Vehicle::default();
    let cfg = MpcConfig::default();
    let pose = PoseState::new(0.0, 0.0, 0.0);
    let state = VelocityState::new(1.0, 0.0, 0.0, 0.3, 0.0);
    assert!(solve(&v, &cfg, &pose, &state, &[[0.0, 0.0]], &gt(), None, TS).is_err());
    let refs = vec![[0.0, 0.0]; cfg.horizon];
    let short = vec![ControlInput::new(0.0, 0.0); 2];
    assert!(solve(&v, &cfg, &pose, &state, &refs, &gt(), Some(&short), TS).is_err());
}

#[test]
fn ground_truth_race_is_clean_and_repeatable() {
    let (t1, _) = make_tracks();
    let gtc = UnknownCoefficients::sim_ground_truth();
    let est = Estimator::fixed(gtc);
    let v = Vehicle::default();
    let r = race(&t1, &est, &v, &gtc, &MpcConfig::default(), &RaceConfig::default()).unwrap();
    assert!(r.completed, "{:?}", r.abort_reason);
    assert_eq!(r.violations, 0);
    assert_eq!(r.laps_completed, 1);
    assert_eq!(r.trace.len(), r.steps);
    assert_eq!(r.trace[0].vx, 0.1);
    let again = race(&t1, &est, &v, &gtc, &MpcConfig::default(), &RaceConfig::default()).unwrap();
    assert_eq!(r, again);
    assert_eq!(r.trace_csv(), again.trace_csv());
    let summary: serde_json::Value = serde_json::from_str(&r.summary_json()).unwrap();
    for key in ["lap_time", "avg_speed", "violations"] {
        assert!(summary.get(key).is_some(), "{key}");
    }
}

#[test]
fn baseline_race_uses_pid_throttle_and_reports() {
    let (_, t2) = make_tracks();
    let gtc = UnknownCoefficients::sim_ground_truth();
    let b = sim_nominal_bounds(&gtc, &SimRanges::default()).unwrap();
    let cfg = TrainConfig {
        hidden_sizes: vec![4],
        tau: 1,
        ..Default::default()
    };
    let kind = ModelKind::new(Variant::DpmGt, gtc[crate::dynamics::Coef::Iz]).unwrap();
    let model = initial_model(&cfg, kind, &b, Normalizer::identity()).unwrap();
    let est = Estimator::Network(Box::new(model));
    let rc = RaceConfig {
        max_time: 3.0,
        ..Default::default()
    };
    let r = race(&t2, &est, &Vehicle::default(), &gtc, &MpcConfig::default(), &rc).unwrap();
    assert_eq!(r.estimator, "dpm-gt");
    assert!(r.steps > 0);
    assert!(r.violations <= r.steps_outside);
    // the PID drives throttle up from its initial value while below the preview speed
    assert!(r.trace.iter().any(|row| row.throttle > rc.initial_throttle));
}
