//! Minimal reverse-mode differentiation over scalar expressions.
//!
//! The physics kernels in [`crate::dynamics`] are written once, generically
//! over [`Real`]. Evaluated with `f64` they are the ground-truth simulator;
//! evaluated with [`Var`] they record a Wengert list on a [`Tape`] so the
//! adjoint of any output can be pulled back to every recorded input.
//!
//! ```
//! use vdyn_core::ad::{Real, Tape};
//!
//! let tape = Tape::new();
//! let x = tape.var(0.5);
//! let y = x.sin() * x;
//! let grad = tape.gradient(y);
//! let expected = 0.5f64.cos() * 0.5 + 0.5f64.sin();
//! assert!((grad[x.index()] - expected).abs() < 1e-15);
//! ```

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar type the dynamics kernels are generic over.
pub trait Real:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(self) -> f64;
    /// A constant living on the same tape as `self`.
    fn lift(self, v: f64) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn atan(self) -> Self;
    fn square(self) -> Self {
        self * self
    }
    /// Clamp with a unit derivative inside the interval and zero outside.
    fn clamp_to(self, lo: f64, hi: f64) -> Self;
}

impl Real for f64 {
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn lift(self, v: f64) -> Self {
        v
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn atan(self) -> Self {
        f64::atan(self)
    }
    #[inline]
    fn clamp_to(self, lo: f64, hi: f64) -> Self {
        self.clamp(lo, hi)
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    // (parent index, local partial); unused slots point at the node itself with weight 0
    parents: [(usize, f64); 2],
}

/// Append-only record of scalar operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(n)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
    }

    /// Independent input.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push([(usize::MAX, 0.0), (usize::MAX, 0.0)]);
        Var {
            tape: self,
            idx,
            val: value,
        }
    }

    pub fn vars<const N: usize>(&self, values: [f64; N]) -> [Var<'_>; N] {
        values.map(|v| self.var(v))
    }

    fn push(&self, parents: [(usize, f64); 2]) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        nodes.push(Node { parents });
        idx
    }

    fn unary(&self, a: &Var<'_>, da: f64, val: f64) -> Var<'_> {
        let idx = self.push([(a.idx, da), (usize::MAX, 0.0)]);
        Var {
            tape: self,
            idx,
            val,
        }
    }

    fn binary(&self, a: &Var<'_>, da: f64, b: &Var<'_>, db: f64, val: f64) -> Var<'_> {
        let idx = self.push([(a.idx, da), (b.idx, db)]);
        Var {
            tape: self,
            idx,
            val,
        }
    }

    /// Adjoints of `output` with respect to every node on the tape.
    pub fn gradient(&self, output: Var<'_>) -> Vec<f64> {
        self.gradient_seeded(&[(output, 1.0)])
    }

    /// Adjoints of `sum_k seed_k * output_k`.
    pub fn gradient_seeded(&self, seeds: &[(Var<'_>, f64)]) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        for (v, s) in seeds {
            debug_assert!(std::ptr::eq(v.tape, self));
            adj[v.idx] += s;
        }
        for i in (0..nodes.len()).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            for &(p, d) in &nodes[i].parents {
                if p != usize::MAX {
                    adj[p] += a * d;
                }
            }
        }
        adj
    }
}

/// A scalar recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
    val: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} = {})", self.idx, self.val)
    }
}

impl<'t> Var<'t> {
    pub fn index(&self) -> usize {
        self.idx
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn constant(&self, v: f64) -> Var<'t> {
        self.tape.var(v)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(&self, 1.0, &rhs, 1.0, self.val + rhs.val)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(&self, 1.0, &rhs, -1.0, self.val - rhs.val)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(&self, rhs.val, &rhs, self.val, self.val * rhs.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let q = self.val / rhs.val;
        self.tape.binary(&self, 1.0 / rhs.val, &rhs, -q / rhs.val, q)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(&self, -1.0, -self.val)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.tape.unary(&self, 1.0, self.val + rhs)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.tape.unary(&self, 1.0, self.val - rhs)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.tape.unary(&self, rhs, self.val * rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        self.tape.unary(&self, 1.0 / rhs, self.val / rhs)
    }
}

impl Real for Var<'_> {
    #[inline]
    fn value(self) -> f64 {
        self.val
    }
    fn lift(self, v: f64) -> Self {
        self.constant(v)
    }
    fn sin(self) -> Self {
        self.tape.unary(&self, self.val.cos(), self.val.sin())
    }
    fn cos(self) -> Self {
        self.tape.unary(&self, -self.val.sin(), self.val.cos())
    }
    fn atan(self) -> Self {
        self.tape
            .unary(&self, 1.0 / (1.0 + self.val * self.val), self.val.atan())
    }
    fn clamp_to(self, lo: f64, hi: f64) -> Self {
        let c = self.val.clamp(lo, hi);
        let d = if c == self.val { 1.0 } else { 0.0 };
        self.tape.unary(&self, d, c)
    }
}
