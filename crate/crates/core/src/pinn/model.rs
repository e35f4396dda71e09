use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ad::{Real, Tape};
use crate::coefficients::{physics_guard, physics_guard_grad, CoefficientBounds};
use crate::dynamics::{
    step_velocity_kernel, Coef, ControlInput, PhysicsParams, UnknownCoefficients, Vehicle, VelocityState,
    N_UNKNOWN,
};
use crate::error::{Error, Result};

use super::network::NetworkParams;
use super::window::{HistoryWindow, Normalizer, FEATURES};

/// Width of the baseline head: B, C, D, E per axle plus the rear
/// longitudinal force.
pub const DPM_OUTPUTS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Ddm,
    DpmGt,
    DpmPlus20,
    DpmMinus20,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ddm, Variant::DpmGt, Variant::DpmPlus20, Variant::DpmMinus20];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ddm => "ddm",
            Variant::DpmGt => "dpm-gt",
            Variant::DpmPlus20 => "dpm-plus20",
            Variant::DpmMinus20 => "dpm-minus20",
        }
    }

    /// Multiplier applied to the reference I_z by the baseline variants.
    pub fn iz_factor(self) -> Option<f64> {
        match self {
            Variant::Ddm => None,
            Variant::DpmGt => Some(1.0),
            Variant::DpmPlus20 => Some(1.2),
            Variant::DpmMinus20 => Some(0.8),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid("model", format!("unknown model `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelKind {
    pub variant: Variant,
    /// Yaw inertia assumed by the baseline; `None` for the guarded model.
    pub fixed_iz: Option<f64>,
}

impl ModelKind {
    pub fn ddm() -> Self {
        Self {
            variant: Variant::Ddm,
            fixed_iz: None,
        }
    }

    /// Builds `variant`, scaling `reference_iz` for the baseline variants.
    pub fn new(variant: Variant, reference_iz: f64) -> Result<Self> {
        let kind = Self {
            variant,
            fixed_iz: variant.iz_factor().map(|k| k * reference_iz),
        };
        kind.validate()?;
        Ok(kind)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.variant, self.fixed_iz) {
            (Variant::Ddm, None) => Ok(()),
            (Variant::Ddm, Some(_)) => Err(Error::invalid("fixed_iz", "the guarded model estimates I_z")),
            (_, Some(iz)) if iz.is_finite() && iz > 0.0 => Ok(()),
            (_, _) => Err(Error::invalid("fixed_iz", "baseline variants need a positive fixed I_z")),
        }
    }

    pub fn is_guarded(&self) -> bool {
        self.variant == Variant::Ddm
    }

    pub fn outputs(&self) -> usize {
        if self.is_guarded() {
            N_UNKNOWN
        } else {
            DPM_OUTPUTS
        }
    }
}

/// Output of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimate {
    /// Guarded estimate of every unknown coefficient.
    Coefficients(UnknownCoefficients),
    /// Baseline estimate: Magic Formula shape coefficients in
    /// [`Coef::PACEJKA`] order, a direct longitudinal force and the assumed I_z.
    Direct { pacejka: [f64; 8], f_rx: f64, i_z: f64 },
}

impl Estimate {
    pub fn physics(&self) -> PhysicsParams<f64> {
        match *self {
            Estimate::Coefficients(c) => PhysicsParams::from_coefficients(&c),
            Estimate::Direct { pacejka, f_rx, i_z } => {
                let mut coeffs = [0.0; N_UNKNOWN];
                for (c, v) in Coef::PACEJKA.iter().zip(pacejka) {
                    coeffs[c.index()] = v;
                }
                coeffs[Coef::Iz.index()] = i_z;
                PhysicsParams {
                    coeffs,
                    f_rx: Some(f_rx),
                }
            }
        }
    }

    /// Estimated value of `c`, or `None` when the model does not estimate it.
    pub fn get(&self, c: Coef) -> Option<f64> {
        match self {
            Estimate::Coefficients(k) => Some(k[c]),
            Estimate::Direct { pacejka, .. } => Coef::PACEJKA.iter().position(|&p| p == c).map(|i| pacejka[i]),
        }
    }

    pub fn is_finite(&self) -> bool {
        let p = self.physics();
        p.coeffs.iter().all(|v| v.is_finite()) && p.f_rx.is_none_or(f64::is_finite)
    }
}

/// Next velocity state under an estimate; the seam between network and physics.
pub fn predict_next(
    vehicle: &Vehicle,
    state: &VelocityState,
    input: &ControlInput,
    estimate: &Estimate,
    ts: f64,
) -> Result<VelocityState> {
    vehicle.step_velocity_with(state, input, &estimate.physics(), ts)
}

/// Mean squared error over v_x, v_y and omega.
pub fn loss(predicted: &VelocityState, observed: &VelocityState) -> f64 {
    let e = [
        predicted.v_x - observed.v_x,
        predicted.v_y - observed.v_y,
        predicted.omega - observed.omega,
    ];
    (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]) / 3.0
}

/// Loss of one Euler step and its gradient with respect to the physics
/// parameters (and the direct force, when present).
pub(crate) struct PhysicsGradient {
    pub loss: f64,
    pub coeffs: [f64; N_UNKNOWN],
    pub f_rx: f64,
}

pub(crate) fn physics_loss_grad(
    vehicle: &Vehicle,
    state: &VelocityState,
    input: &ControlInput,
    params: &PhysicsParams<f64>,
    observed: &VelocityState,
    ts: f64,
) -> Result<PhysicsGradient> {
    vehicle.check_speed(state.v_x)?;
    let tape = Tape::with_capacity(160);
    let c = tape.vars(params.coeffs);
    let f_rx = params.f_rx.map(|f| tape.var(f));
    let s = tape.vars(state.to_array());
    let u = tape.vars([input.dthrottle, input.dsteer]);
    let p = PhysicsParams { coeffs: c, f_rx };
    let next = step_velocity_kernel(s, u, &vehicle.known, &vehicle.limits, &p, ts);
    let l = ((next[0] - observed.v_x).square() + (next[1] - observed.v_y).square()
        + (next[2] - observed.omega).square())
        / 3.0;
    let adj = tape.gradient(l);
    let mut coeffs = [0.0; N_UNKNOWN];
    for (g, v) in coeffs.iter_mut().zip(&c) {
        *g = adj[v.index()];
    }
    Ok(PhysicsGradient {
        loss: l.value(),
        coeffs,
        f_rx: f_rx.map_or(0.0, |v| adj[v.index()]),
    })
}

/// A trained (or freshly initialised) coefficient estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub kind: ModelKind,
    pub tau: usize,
    pub bounds: CoefficientBounds,
    pub normalizer: Normalizer,
    pub network: NetworkParams,
}

impl Model {
    pub fn new(
        kind: ModelKind,
        tau: usize,
        bounds: CoefficientBounds,
        normalizer: Normalizer,
        network: NetworkParams,
    ) -> Result<Self> {
        kind.validate()?;
        if network.features != FEATURES || network.steps != tau + 1 {
            return Err(Error::Dimension {
                what: "network input width",
                expected: FEATURES * (tau + 1),
                got: network.input_width(),
            });
        }
        if network.output_width() != kind.outputs() {
            return Err(Error::Dimension {
                what: "network output width",
                expected: kind.outputs(),
                got: network.output_width(),
            });
        }
        Ok(Self {
            kind,
            tau,
            bounds,
            normalizer,
            network,
        })
    }

    pub fn features(&self, window: &HistoryWindow) -> Result<Vec<f64>> {
        if window.tau() != self.tau {
            return Err(Error::Dimension {
                what: "history window length",
                expected: self.tau + 1,
                got: window.tau() + 1,
            });
        }
        Ok(self.normalizer.features(window))
    }

    fn decode(&self, raw: &[f64]) -> Result<Estimate> {
        if self.kind.is_guarded() {
            Ok(Estimate::Coefficients(physics_guard(raw, &self.bounds)?))
        } else {
            let mut pacejka = [0.0; 8];
            pacejka.copy_from_slice(&raw[..8]);
            Ok(Estimate::Direct {
                pacejka,
                f_rx: raw[8],
                i_z: self.kind.fixed_iz.expect("validated"),
            })
        }
    }

    pub fn estimate(&self, window: &HistoryWindow) -> Result<Estimate> {
        let x = self.features(window)?;
        self.estimate_features(&x)
    }

    pub(crate) fn estimate_features(&self, features: &[f64]) -> Result<Estimate> {
        self.decode(&self.network.forward(features)?)
    }

    /// One-step loss for `window` and the observed next state.
    pub fn window_loss(
        &self,
        vehicle: &Vehicle,
        window: &HistoryWindow,
        observed: &VelocityState,
        ts: f64,
    ) -> Result<f64> {
        let (state, input) = window.current();
        let est = self.estimate(window)?;
        Ok(loss(&predict_next(vehicle, state, input, &est, ts)?, observed))
    }

    /// Loss and full-chain gradient for pre-normalised features; the
    /// gradient is accumulated into `grad`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn loss_grad_features(
        &self,
        vehicle: &Vehicle,
        features: &[f64],
        state: &VelocityState,
        input: &ControlInput,
        observed: &VelocityState,
        ts: f64,
        grad: &mut NetworkParams,
    ) -> Result<(f64, Estimate)> {
        let (raw, cache) = self.network.forward_cached(features)?;
        let est = self.decode(&raw)?;
        let pg = physics_loss_grad(vehicle, state, input, &est.physics(), observed, ts)?;
        let d_raw = if self.kind.is_guarded() {
            physics_guard_grad(&raw, &self.bounds, &pg.coeffs)?
        } else {
            let mut d: Vec<f64> = Coef::PACEJKA.iter().map(|c| pg.coeffs[c.index()]).collect();
            d.push(pg.f_rx);
            d
        };
        if !pg.loss.is_finite() || d_raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("loss gradient"));
        }
        self.network.backward(&cache, &d_raw, grad);
        Ok((pg.loss, est))
    }

    /// Loss and gradient with respect to every network parameter.
    pub fn loss_and_gradient(
        &self,
        vehicle: &Vehicle,
        window: &HistoryWindow,
        observed: &VelocityState,
        ts: f64,
    ) -> Result<(f64, NetworkParams)> {
        let x = self.features(window)?;
        let (state, input) = window.current();
        let mut grad = self.network.zeros_like();
        let (l, _) = self.loss_grad_features(vehicle, &x, state, input, observed, ts, &mut grad)?;
        Ok((l, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{sim_nominal_bounds, SimRanges};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt() -> UnknownCoefficients {
        UnknownCoefficients::sim_ground_truth()
    }

    fn window(rng: &mut ChaCha8Rng, tau: usize) -> HistoryWindow {
        HistoryWindow::new(
            (0..=tau)
                .map(|_| {
                    (
                        VelocityState::new(
                            rng.gen_range(0.8..2.5),
                            rng.gen_range(-0.1..0.1),
                            rng.gen_range(-1.5..1.5),
                            rng.gen_range(0.1..0.9),
                            rng.gen_range(-0.3..0.3),
                        ),
                        ControlInput::new(rng.gen_range(-0.04..0.04), rng.gen_range(-0.015..0.015)),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    fn model(kind: ModelKind, tau: usize, zero: bool, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = NetworkParams::init(FEATURES, tau + 1, &[16, 16], 0, kind.outputs(), zero, &mut rng);
        let bounds = sim_nominal_bounds(&gt(), &SimRanges::default()).unwrap();
        Model::new(kind, tau, bounds, Normalizer::identity(), net).unwrap()
    }

    #[test]
    fn loss_examples() {
        let a = VelocityState::new(1.0, 0.2, 0.3, 0.5, 0.1);
        assert_eq!(loss(&a, &a), 0.0);
        let b = VelocityState::new(1.3, 0.2, 0.3, 0.9, -0.2);
        assert!((loss(&b, &a) - 0.03).abs() < 1e-15);
        // throttle and steer never enter
        let c = VelocityState { throttle: 0.0, steer: 0.3, ..a };
        assert_eq!(loss(&c, &a), 0.0);
    }

    #[test]
    fn zero_head_gives_midpoints() {
        let m = model(ModelKind::ddm(), 2, true, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let est = m.estimate(&window(&mut rng, 2)).unwrap();
        let mid = m.bounds.midpoint();
        match est {
            Estimate::Coefficients(c) => {
                for i in 0..N_UNKNOWN {
                    assert!((c.0[i] - mid.0[i]).abs() <= 1e-12 * mid.0[i].abs().max(1e-300));
                }
            }
            _ => panic!("guarded model"),
        }
    }

    #[test]
    fn predict_next_at_midpoints_is_finite() {
        let m = model(ModelKind::ddm(), 1, true, 1);
        let est = Estimate::Coefficients(m.bounds.midpoint());
        let s = VelocityState::new(1.5, 0.05, 0.8, 0.4, 0.1);
        let next = predict_next(&Vehicle::default(), &s, &ControlInput::new(0.0, 0.0), &est, 0.02).unwrap();
        assert!(next.to_array().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn straight_driving_ignores_tire_peak() {
        let s = VelocityState::new(1.5, 0.0, 0.0, 0.4, 0.0);
        let u = ControlInput::new(0.01, 0.0);
        let mut c = gt();
        let a = predict_next(&Vehicle::default(), &s, &u, &Estimate::Coefficients(c), 0.02).unwrap();
        c[Coef::Df] *= 1.1;
        let b = predict_next(&Vehicle::default(), &s, &u, &Estimate::Coefficients(c), 0.02).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn baseline_physics_layout() {
        let est = Estimate::Direct {
            pacejka: [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
            f_rx: 0.5,
            i_z: 3e-5,
        };
        let p = est.physics();
        assert_eq!(p.coeffs[Coef::Dr.index()], 7.0);
        assert_eq!(p.coeffs[Coef::Iz.index()], 3e-5);
        assert_eq!(p.coeffs[Coef::Gf.index()], 0.0);
        assert_eq!(p.f_rx, Some(0.5));
        assert_eq!(est.get(Coef::Er), Some(8.0));
        assert_eq!(est.get(Coef::Iz), None);
    }

    #[test]
    fn kinds() {
        let k = ModelKind::new(Variant::DpmPlus20, 2.0).unwrap();
        assert_eq!(k.fixed_iz, Some(2.4));
        assert_eq!(k.outputs(), 9);
        assert!(ModelKind::new(Variant::DpmGt, -1.0).is_err());
        assert_eq!("dpm-minus20".parse::<Variant>().unwrap(), Variant::DpmMinus20);
        assert!("dpm".parse::<Variant>().is_err());
        assert_eq!(serde_json::to_string(&Variant::DpmGt).unwrap(), "\"dpm-gt\"");
    }

    #[test]
    fn physics_gradient_matches_scalar_chain() {
        // d loss / d I_z for the omega channel only: with v_x, v_y matched,
        // loss = (omega' - obs)^2 / 3 and omega' = omega + M / I_z * ts.
        let v = Vehicle::default();
        let s = VelocityState::new(1.5, 0.05, 0.8, 0.4, 0.1);
        let u = ControlInput::new(0.0, 0.0);
        let c = gt();
        let next = v.step_velocity(&s, &u, &c, 0.02).unwrap();
        let obs = VelocityState {
            omega: next.omega - 0.1,
            ..next
        };
        let pg = physics_loss_grad(&v, &s, &u, &c.into(), &obs, 0.02).unwrap();
        let iz = c[Coef::Iz];
        let moment_ts = (next.omega - s.omega) * iz;
        let expected = 2.0 * 0.1 / 3.0 * (-moment_ts / (iz * iz));
        assert!((pg.coeffs[Coef::Iz.index()] - expected).abs() < 1e-9 * expected.abs());
        assert!((pg.loss - 0.01 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn gradient_vanishes_at_exact_fit() {
        let v = Vehicle::default();
        let m = model(ModelKind::ddm(), 1, false, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = window(&mut rng, 1);
        let (s, u) = w.current();
        let est = m.estimate(&w).unwrap();
        let obs = predict_next(&v, s, u, &est, 0.02).unwrap();
        let (l, g) = m.loss_and_gradient(&v, &w, &obs, 0.02).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.to_flat().iter().all(|&x| x == 0.0));
    }

    fn full_chain_error(m: &Model, w: &HistoryWindow, obs: &VelocityState) -> f64 {
        let v = Vehicle::default();
        let (_, g) = m.loss_and_gradient(&v, w, obs, 0.02).unwrap();
        let analytic = g.to_flat();
        let flat = m.network.to_flat();
        let norm = analytic.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut worst: f64 = 0.0;
        for i in 0..flat.len() {
            let h = 1e-5 * flat[i].abs().max(1.0);
            let eval = |delta: f64| {
                let mut p = m.clone();
                let mut f = flat.clone();
                f[i] += delta;
                p.network.set_flat(&f).unwrap();
                p.window_loss(&v, w, obs, 0.02).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / analytic[i].abs().max(fd.abs()).max(1e-3 * norm);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn full_chain_gradient_small_networks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..6 {
            let kind = if trial % 3 == 2 {
                ModelKind::new(Variant::DpmGt, 2.78e-5).unwrap()
            } else {
                ModelKind::ddm()
            };
            let m = model(kind, 1, false, 100 + trial);
            let w = window(&mut rng, 1);
            let (s, _) = w.current();
            let obs = VelocityState::new(s.v_x + 0.01, s.v_y - 0.02, s.omega + 0.05, 0.0, 0.0);
            let e = full_chain_error(&m, &w, &obs);
            assert!(e < 1e-4, "trial {trial}: {e}");
        }
    }
}
