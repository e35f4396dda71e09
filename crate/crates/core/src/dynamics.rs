//! Discrete-time dynamic single-track vehicle model.
//!
//! The same generic kernels drive the ground-truth simulator (`f64`) and the
//! differentiable physics layer (`ad::Var`), so a model fed the true
//! coefficients reproduces the simulator bit for bit.

use std::f64::consts::PI;
use std::fmt;
use std::ops::{Index, IndexMut};

use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::ad::Real;
use crate::error::{Error, Result};

/// Number of estimated coefficients.
pub const N_UNKNOWN: usize = 17;

/// Identification state `[v_x, v_y, omega, throttle, steer]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VelocityState {
    pub v_x: f64,
    pub v_y: f64,
    pub omega: f64,
    /// Fraction in `[0, 1]`.
    pub throttle: f64,
    pub steer: f64,
}

impl VelocityState {
    pub fn new(v_x: f64, v_y: f64, omega: f64, throttle: f64, steer: f64) -> Self {
        Self {
            v_x,
            v_y,
            omega,
            throttle,
            steer,
        }
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.v_x, self.v_y, self.omega, self.throttle, self.steer]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseState {
    pub x: f64,
    pub y: f64,
    /// Heading, kept in `(-pi, pi]`.
    pub theta: f64,
}

impl PoseState {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }
}

/// Per-step change of throttle and steering.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub dthrottle: f64,
    pub dsteer: f64,
}

impl ControlInput {
    pub fn new(dthrottle: f64, dsteer: f64) -> Self {
        Self { dthrottle, dsteer }
    }
}

/// Coefficients measurable in a garage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnownCoefficients {
    pub m: f64,
    pub l_f: f64,
    pub l_r: f64,
}

impl KnownCoefficients {
    /// 1:43-scale car used by the simulator.
    pub fn sim_default() -> Self {
        Self {
            m: 0.041,
            l_f: 0.029,
            l_r: 0.033,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("m", self.m), ("l_f", self.l_f), ("l_r", self.l_r)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn wheelbase(&self) -> f64 {
        self.l_f + self.l_r
    }
}

/// Index into [`UnknownCoefficients`], in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(usize)]
pub enum Coef {
    Bf = 0,
    Cf,
    Df,
    Ef,
    Gf,
    Kf,
    Br,
    Cr,
    Dr,
    Er,
    Gr,
    Kr,
    Cm1,
    Cm2,
    Cr0,
    Cd,
    Iz,
}

impl Coef {
    pub const ALL: [Coef; N_UNKNOWN] = [
        Coef::Bf,
        Coef::Cf,
        Coef::Df,
        Coef::Ef,
        Coef::Gf,
        Coef::Kf,
        Coef::Br,
        Coef::Cr,
        Coef::Dr,
        Coef::Er,
        Coef::Gr,
        Coef::Kr,
        Coef::Cm1,
        Coef::Cm2,
        Coef::Cr0,
        Coef::Cd,
        Coef::Iz,
    ];

    /// The Magic Formula shape coefficients estimated by the baseline head.
    pub const PACEJKA: [Coef; 8] = [
        Coef::Bf,
        Coef::Cf,
        Coef::Df,
        Coef::Ef,
        Coef::Br,
        Coef::Cr,
        Coef::Dr,
        Coef::Er,
    ];

    pub const fn symbol(self) -> &'static str {
        match self {
            Coef::Bf => "B_f",
            Coef::Cf => "C_f",
            Coef::Df => "D_f",
            Coef::Ef => "E_f",
            Coef::Gf => "G_f",
            Coef::Kf => "K_f",
            Coef::Br => "B_r",
            Coef::Cr => "C_r",
            Coef::Dr => "D_r",
            Coef::Er => "E_r",
            Coef::Gr => "G_r",
            Coef::Kr => "K_r",
            Coef::Cm1 => "C_m1",
            Coef::Cm2 => "C_m2",
            Coef::Cr0 => "C_r0",
            Coef::Cd => "C_d",
            Coef::Iz => "I_z",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Coef> {
        Coef::ALL.into_iter().find(|c| c.symbol() == s)
    }

    pub const fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Coef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// Pacejka, drivetrain and inertia coefficients, indexed by [`Coef`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnknownCoefficients(pub [f64; N_UNKNOWN]);

impl UnknownCoefficients {
    pub fn zeros() -> Self {
        Self([0.0; N_UNKNOWN])
    }

    /// Ground truth of the 1:43-scale simulator. Pacejka shape and inertia
    /// follow the published reference car; the drivetrain constants are
    /// this crate's choice and the offsets are zero.
    pub fn sim_ground_truth() -> Self {
        let mut c = Self::zeros();
        c[Coef::Bf] = 5.579;
        c[Coef::Cf] = 1.200;
        c[Coef::Df] = 0.192;
        c[Coef::Ef] = -0.083;
        c[Coef::Br] = 5.385;
        c[Coef::Cr] = 1.269;
        c[Coef::Dr] = 0.173;
        c[Coef::Er] = -0.019;
        c[Coef::Cm1] = 0.287;
        c[Coef::Cm2] = 0.0545;
        c[Coef::Cr0] = 0.0518;
        c[Coef::Cd] = 0.00035;
        c[Coef::Iz] = 2.78e-5;
        c
    }

    pub fn as_array(&self) -> &[f64; N_UNKNOWN] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = (Coef, f64)> + '_ {
        Coef::ALL.into_iter().map(|c| (c, self[c]))
    }
}

impl Index<Coef> for UnknownCoefficients {
    type Output = f64;
    fn index(&self, c: Coef) -> &f64 {
        &self.0[c.index()]
    }
}

impl IndexMut<Coef> for UnknownCoefficients {
    fn index_mut(&mut self, c: Coef) -> &mut f64 {
        &mut self.0[c.index()]
    }
}

impl Serialize for UnknownCoefficients {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(N_UNKNOWN))?;
        for (c, v) in self.iter() {
            map.serialize_entry(c.symbol(), &v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for UnknownCoefficients {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let values: [f64; N_UNKNOWN] = deserialize_symbol_map(deserializer)?;
        Ok(UnknownCoefficients(values))
    }
}

/// Reads a JSON object keyed by coefficient symbols; every symbol must be
/// present exactly once.
pub(crate) fn deserialize_symbol_map<'de, D, V>(
    deserializer: D,
) -> std::result::Result<[V; N_UNKNOWN], D::Error>
where
    D: Deserializer<'de>,
    V: Deserialize<'de> + Copy + Default,
{
    struct SymbolMap<V>(std::marker::PhantomData<V>);

    impl<'de, V: Deserialize<'de> + Copy + Default> Visitor<'de> for SymbolMap<V> {
        type Value = [V; N_UNKNOWN];

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("an object keyed by coefficient symbols (B_f, ..., I_z)")
        }

        fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
            let mut out = [V::default(); N_UNKNOWN];
            let mut seen = [false; N_UNKNOWN];
            while let Some(key) = map.next_key::<String>()? {
                let c = Coef::from_symbol(&key)
                    .ok_or_else(|| de::Error::custom(format!("unknown coefficient `{key}`")))?;
                if seen[c.index()] {
                    return Err(de::Error::custom(format!("duplicate coefficient `{key}`")));
                }
                seen[c.index()] = true;
                out[c.index()] = map.next_value()?;
            }
            if let Some(missing) = Coef::ALL.iter().find(|c| !seen[c.index()]) {
                return Err(de::Error::custom(format!("missing coefficient `{missing}`")));
            }
            Ok(out)
        }
    }

    deserializer.deserialize_map(SymbolMap(std::marker::PhantomData))
}

/// Actuator limits applied when integrating throttle and steering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuatorLimits {
    pub steer_max: f64,
    pub dthrottle_max: f64,
    pub dsteer_max: f64,
}

impl Default for ActuatorLimits {
    fn default() -> Self {
        Self {
            steer_max: 0.35,
            dthrottle_max: 0.05,
            dsteer_max: 0.02,
        }
    }
}

impl ActuatorLimits {
    pub fn clamp_input(&self, u: ControlInput) -> ControlInput {
        ControlInput {
            dthrottle: u.dthrottle.clamp(-self.dthrottle_max, self.dthrottle_max),
            dsteer: u.dsteer.clamp(-self.dsteer_max, self.dsteer_max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TireForces {
    pub f_fy: f64,
    pub f_ry: f64,
    pub f_rx: f64,
    pub alpha_f: f64,
    pub alpha_r: f64,
}

/// Coefficients as consumed by the physics kernels. `f_rx` replaces the
/// drivetrain model when a caller estimates the longitudinal force directly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicsParams<T> {
    pub coeffs: [T; N_UNKNOWN],
    pub f_rx: Option<T>,
}

impl PhysicsParams<f64> {
    pub fn from_coefficients(c: &UnknownCoefficients) -> Self {
        Self {
            coeffs: c.0,
            f_rx: None,
        }
    }
}

impl From<UnknownCoefficients> for PhysicsParams<f64> {
    fn from(c: UnknownCoefficients) -> Self {
        Self::from_coefficients(&c)
    }
}

// ---- generic kernels ----

pub fn slip_angles_kernel<T: Real>(
    v_x: T,
    v_y: T,
    omega: T,
    steer: T,
    known: &KnownCoefficients,
    c: &[T; N_UNKNOWN],
) -> (T, T) {
    let alpha_f = steer - ((omega * known.l_f + v_y) / v_x).atan() + c[Coef::Gf.index()];
    let alpha_r = ((omega * known.l_r - v_y) / v_x).atan() + c[Coef::Gr.index()];
    (alpha_f, alpha_r)
}

/// `K + D sin(C atan(B a - E (B a - atan(B a))))`
pub fn magic_formula<T: Real>(alpha: T, b: T, c: T, d: T, e: T, k: T) -> T {
    let ba = b * alpha;
    k + d * (c * (ba - e * (ba - ba.atan())).atan()).sin()
}

pub fn lateral_forces_kernel<T: Real>(alpha_f: T, alpha_r: T, c: &[T; N_UNKNOWN]) -> (T, T) {
    let p = |i: Coef| c[i.index()];
    let f_fy = magic_formula(alpha_f, p(Coef::Bf), p(Coef::Cf), p(Coef::Df), p(Coef::Ef), p(Coef::Kf));
    let f_ry = magic_formula(alpha_r, p(Coef::Br), p(Coef::Cr), p(Coef::Dr), p(Coef::Er), p(Coef::Kr));
    (f_fy, f_ry)
}

pub fn drivetrain_kernel<T: Real>(v_x: T, throttle: T, c: &[T; N_UNKNOWN]) -> T {
    let p = |i: Coef| c[i.index()];
    (p(Coef::Cm1) - p(Coef::Cm2) * v_x) * throttle - p(Coef::Cr0) - p(Coef::Cd) * v_x * v_x
}

/// One forward-Euler step of `[v_x, v_y, omega, throttle, steer]`.
pub fn step_velocity_kernel<T: Real>(
    s: [T; 5],
    u: [T; 2],
    known: &KnownCoefficients,
    limits: &ActuatorLimits,
    params: &PhysicsParams<T>,
    ts: f64,
) -> [T; 5] {
    let [v_x, v_y, omega, throttle, steer] = s;
    let c = &params.coeffs;
    let (alpha_f, alpha_r) = slip_angles_kernel(v_x, v_y, omega, steer, known, c);
    let (f_fy, f_ry) = lateral_forces_kernel(alpha_f, alpha_r, c);
    let f_rx = params
        .f_rx
        .unwrap_or_else(|| drivetrain_kernel(v_x, throttle, c));
    let (sin_d, cos_d) = (steer.sin(), steer.cos());
    let m = known.m;

    let v_x_next = v_x + (f_rx - f_fy * sin_d + v_y * omega * m) * (ts / m);
    let v_y_next = v_y + (f_ry + f_fy * cos_d - v_x * omega * m) * (ts / m);
    let omega_next =
        omega + (f_fy * cos_d * known.l_f - f_ry * known.l_r) / c[Coef::Iz.index()] * ts;

    let dthrottle = u[0].clamp_to(-limits.dthrottle_max, limits.dthrottle_max);
    let dsteer = u[1].clamp_to(-limits.dsteer_max, limits.dsteer_max);
    let throttle_next = (throttle + dthrottle).clamp_to(0.0, 1.0);
    let steer_next = (steer + dsteer).clamp_to(-limits.steer_max, limits.steer_max);

    [v_x_next, v_y_next, omega_next, throttle_next, steer_next]
}

/// One forward-Euler step of the pose; heading is not wrapped here.
pub fn step_pose_kernel<T: Real>(pose: [T; 3], v_x: T, v_y: T, omega: T, ts: f64) -> [T; 3] {
    let [x, y, theta] = pose;
    let (s, c) = (theta.sin(), theta.cos());
    [
        x + (v_x * c - v_y * s) * ts,
        y + (v_x * s + v_y * c) * ts,
        theta + omega * ts,
    ]
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

// ---- f64 surface ----

/// Ground-truth vehicle description shared by simulator, learner and
/// controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub known: KnownCoefficients,
    pub limits: ActuatorLimits,
    /// Slip angles are not evaluated below this longitudinal speed.
    pub vx_floor: f64,
}

impl Default for Vehicle {
    fn default() -> Self {
        Self {
            known: KnownCoefficients::sim_default(),
            limits: ActuatorLimits::default(),
            vx_floor: 0.05,
        }
    }
}

impl Vehicle {
    pub fn check_speed(&self, v_x: f64) -> Result<()> {
        if v_x.is_finite() && v_x >= self.vx_floor {
            Ok(())
        } else {
            Err(Error::VelocityFloor {
                v_x,
                floor: self.vx_floor,
            })
        }
    }

    pub fn slip_angles(&self, state: &VelocityState, coeffs: &UnknownCoefficients) -> Result<(f64, f64)> {
        self.check_speed(state.v_x)?;
        Ok(slip_angles_kernel(
            state.v_x,
            state.v_y,
            state.omega,
            state.steer,
            &self.known,
            &coeffs.0,
        ))
    }

    pub fn tire_forces(&self, state: &VelocityState, coeffs: &UnknownCoefficients) -> Result<TireForces> {
        let (alpha_f, alpha_r) = self.slip_angles(state, coeffs)?;
        let (f_fy, f_ry) = lateral_tire_forces(alpha_f, alpha_r, coeffs);
        Ok(TireForces {
            f_fy,
            f_ry,
            f_rx: drivetrain_force(state, coeffs),
            alpha_f,
            alpha_r,
        })
    }

    pub fn step_velocity(
        &self,
        state: &VelocityState,
        input: &ControlInput,
        coeffs: &UnknownCoefficients,
        ts: f64,
    ) -> Result<VelocityState> {
        self.step_velocity_with(state, input, &PhysicsParams::from_coefficients(coeffs), ts)
    }

    pub fn step_velocity_with(
        &self,
        state: &VelocityState,
        input: &ControlInput,
        params: &PhysicsParams<f64>,
        ts: f64,
    ) -> Result<VelocityState> {
        self.check_speed(state.v_x)?;
        if !(ts > 0.0) {
            return Err(Error::invalid("ts", format!("must be positive, got {ts}")));
        }
        let next = step_velocity_kernel(
            state.to_array(),
            [input.dthrottle, input.dsteer],
            &self.known,
            &self.limits,
            params,
            ts,
        );
        Ok(VelocityState::from_array(next))
    }
}

pub fn lateral_tire_forces(alpha_f: f64, alpha_r: f64, coeffs: &UnknownCoefficients) -> (f64, f64) {
    lateral_forces_kernel(alpha_f, alpha_r, &coeffs.0)
}

pub fn drivetrain_force(state: &VelocityState, coeffs: &UnknownCoefficients) -> f64 {
    drivetrain_kernel(state.v_x, state.throttle, &coeffs.0)
}

pub fn step_pose(pose: &PoseState, state: &VelocityState, ts: f64) -> PoseState {
    let [x, y, theta] = step_pose_kernel([pose.x, pose.y, pose.theta], state.v_x, state.v_y, state.omega, ts);
    PoseState {
        x,
        y,
        theta: wrap_angle(theta),
    }
}
