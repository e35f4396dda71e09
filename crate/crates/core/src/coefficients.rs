//! Nominal coefficient ranges and the bounded output transform that keeps
//! every estimate inside them.

use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dynamics::{deserialize_symbol_map, Coef, UnknownCoefficients, N_UNKNOWN};
use crate::error::{Error, Result};

/// Closed description of the open box `lower < c < upper`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientBounds {
    lower: [f64; N_UNKNOWN],
    upper: [f64; N_UNKNOWN],
}

impl CoefficientBounds {
    pub fn new(lower: [f64; N_UNKNOWN], upper: [f64; N_UNKNOWN]) -> Result<Self> {
        for c in Coef::ALL {
            let (l, u) = (lower[c.index()], upper[c.index()]);
            if !(l.is_finite() && u.is_finite()) {
                return Err(Error::invalid(c.symbol(), "bounds must be finite"));
            }
            if !(l < u) {
                return Err(Error::invalid(
                    c.symbol(),
                    format!("lower bound {l} must be below upper bound {u}"),
                ));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn from_pairs(pairs: [(f64, f64); N_UNKNOWN]) -> Result<Self> {
        Self::new(pairs.map(|p| p.0), pairs.map(|p| p.1))
    }

    pub fn lower(&self) -> &[f64; N_UNKNOWN] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64; N_UNKNOWN] {
        &self.upper
    }

    pub fn get(&self, c: Coef) -> (f64, f64) {
        (self.lower[c.index()], self.upper[c.index()])
    }

    pub fn midpoint(&self) -> UnknownCoefficients {
        UnknownCoefficients(std::array::from_fn(|i| 0.5 * (self.lower[i] + self.upper[i])))
    }

    pub fn contains(&self, c: Coef, v: f64) -> bool {
        let (l, u) = self.get(c);
        l < v && v < u
    }

    pub fn contains_all(&self, coeffs: &UnknownCoefficients) -> bool {
        coeffs.iter().all(|(c, v)| self.contains(c, v))
    }
}

impl Serialize for CoefficientBounds {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(N_UNKNOWN))?;
        for c in Coef::ALL {
            map.serialize_entry(c.symbol(), &[self.lower[c.index()], self.upper[c.index()]])?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for CoefficientBounds {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let pairs: [[f64; 2]; N_UNKNOWN] = deserialize_symbol_map(deserializer)?;
        CoefficientBounds::from_pairs(pairs.map(|p| (p[0], p[1]))).map_err(serde::de::Error::custom)
    }
}

/// Bounded, strictly increasing map from the real line onto `(0, 1)`.
pub trait Squash {
    fn squash(&self, z: f64) -> f64;
    fn derivative(&self, z: f64) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Sigmoid;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Squash for Sigmoid {
    fn squash(&self, z: f64) -> f64 {
        sigmoid(z)
    }

    fn derivative(&self, z: f64) -> f64 {
        let s = sigmoid(z);
        s * (1.0 - s)
    }
}

/// Maps unbounded network outputs into the nominal ranges:
/// `lower + squash(z) * (upper - lower)`, nudged one ulp inward whenever
/// saturation rounds onto a bound.
pub fn physics_guard_with<S: Squash>(
    squash: &S,
    z: &[f64],
    bounds: &CoefficientBounds,
) -> Result<UnknownCoefficients> {
    if z.len() != N_UNKNOWN {
        return Err(Error::Dimension {
            what: "guard input",
            expected: N_UNKNOWN,
            got: z.len(),
        });
    }
    let mut out = [0.0; N_UNKNOWN];
    for i in 0..N_UNKNOWN {
        let (l, u) = (bounds.lower[i], bounds.upper[i]);
        let v = l + squash.squash(z[i]) * (u - l);
        out[i] = if v >= u {
            u.next_down()
        } else if v <= l {
            l.next_up()
        } else {
            v
        };
    }
    Ok(UnknownCoefficients(out))
}

pub fn physics_guard(z: &[f64], bounds: &CoefficientBounds) -> Result<UnknownCoefficients> {
    physics_guard_with(&Sigmoid, z, bounds)
}

/// Pulls `upstream` (d loss / d coefficient) back through the guard.
pub fn physics_guard_grad(z: &[f64], bounds: &CoefficientBounds, upstream: &[f64]) -> Result<Vec<f64>> {
    for (what, got) in [("guard input", z.len()), ("upstream gradient", upstream.len())] {
        if got != N_UNKNOWN {
            return Err(Error::Dimension {
                what,
                expected: N_UNKNOWN,
                got,
            });
        }
    }
    Ok((0..N_UNKNOWN)
        .map(|i| upstream[i] * Sigmoid.derivative(z[i]) * (bounds.upper[i] - bounds.lower[i]))
        .collect())
}

/// Sim-scale ranges that cannot be derived from the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimRanges {
    pub b: (f64, f64),
    pub c: (f64, f64),
    pub d: (f64, f64),
    pub e: (f64, f64),
    pub g: (f64, f64),
    pub k: (f64, f64),
}

impl Default for SimRanges {
    fn default() -> Self {
        Self {
            b: (5.0, 30.0),
            c: (0.5, 2.0),
            d: (0.1, 0.4),
            e: (-2.0, 0.0),
            g: (-0.01, 0.01),
            k: (-0.005, 0.005),
        }
    }
}

fn pacejka_range(c: Coef, r: &SimRanges) -> Option<(f64, f64)> {
    Some(match c {
        Coef::Bf | Coef::Br => r.b,
        Coef::Cf | Coef::Cr => r.c,
        Coef::Df | Coef::Dr => r.d,
        Coef::Ef | Coef::Er => r.e,
        Coef::Gf | Coef::Gr => r.g,
        Coef::Kf | Coef::Kr => r.k,
        _ => return None,
    })
}

/// Simulator regime: drivetrain and inertia get `[v/2, 2v]` around the
/// known truth; tire coefficients take the configured ranges.
pub fn sim_nominal_bounds(ground_truth: &UnknownCoefficients, ranges: &SimRanges) -> Result<CoefficientBounds> {
    let mut pairs = [(0.0, 0.0); N_UNKNOWN];
    for (c, v) in ground_truth.iter() {
        pairs[c.index()] = match pacejka_range(c, ranges) {
            Some(r) => r,
            None => {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::invalid(
                        c.symbol(),
                        format!("ground truth must be positive to halve/double, got {v}"),
                    ));
                }
                (0.5 * v, 2.0 * v)
            }
        };
    }
    CoefficientBounds::from_pairs(pairs)
}

/// Full-scale racecar ranges.
pub fn real_nominal_bounds() -> CoefficientBounds {
    let mut pairs = [(0.0, 0.0); N_UNKNOWN];
    for c in Coef::ALL {
        pairs[c.index()] = match c {
            Coef::Bf | Coef::Br => (5.0, 30.0),
            Coef::Cf | Coef::Cr => (0.5, 2.0),
            Coef::Df | Coef::Dr => (100.0, 10000.0),
            Coef::Ef | Coef::Er => (-2.0, 0.0),
            Coef::Gf | Coef::Gr => (-0.1, 0.1),
            Coef::Kf | Coef::Kr => (-200.0, 200.0),
            Coef::Cm1 => (500.0, 2000.0),
            Coef::Cm2 => (1e-6, 1.0),
            Coef::Cr0 => (0.1, 1.4),
            Coef::Cd => (0.1, 1.0),
            Coef::Iz => (500.0, 2000.0),
        };
    }
    CoefficientBounds::from_pairs(pairs).expect("static ranges are well formed")
}
