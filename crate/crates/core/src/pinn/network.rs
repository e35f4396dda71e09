//! Dense and gated-recurrent layers with cached forward passes and exact
//! backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coefficients::sigmoid;
use crate::error::{Error, Result};

/// Mish and its derivative from a single exponential:
/// `tanh(softplus(x)) = n / (n + 2)` with `n = e^x (e^x + 2)`.
pub fn mish_with_grad(x: f64) -> (f64, f64) {
    if x > 20.0 {
        // tanh(softplus(x)) rounds to 1
        return (x, 1.0);
    }
    let e = x.exp();
    let n = e * (e + 2.0);
    let d = n + 2.0;
    let t = n / d;
    let sech2 = 4.0 * (n + 1.0) / (d * d);
    (x * t, t + x * sech2 * e / (1.0 + e))
}

pub fn mish(x: f64) -> f64 {
    mish_with_grad(x).0
}

pub fn mish_grad(x: f64) -> f64 {
    mish_with_grad(x).1
}

/// `y = W x + b`, weights stored row-major (`outputs x inputs`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform fan-in initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let b = 1.0 / (inputs as f64).sqrt();
        Self {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| rng.gen_range(-b..b)).collect(),
            bias: (0..outputs).map(|_| rng.gen_range(-b..b)).collect(),
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| b + dot(row, x))
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut dx = vec![0.0; self.inputs];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut grad.weights[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }
}

/// Four interleaved partial sums, so the loop is not one long dependency
/// chain; the summation order is fixed.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (p, q) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += p[k] * q[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(p, q)| p * q).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Gated recurrent unit; gate rows are stacked `[reset, update, candidate]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruLayer {
    pub inputs: usize,
    pub hidden: usize,
    pub w_ih: Vec<f64>,
    pub w_hh: Vec<f64>,
    pub b_ih: Vec<f64>,
    pub b_hh: Vec<f64>,
}

struct GruStep {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    gh_n: Vec<f64>,
}

fn matvec_rows(w: &[f64], cols: usize, rows: std::ops::Range<usize>, x: &[f64]) -> Vec<f64> {
    rows.map(|r| {
        w[r * cols..(r + 1) * cols]
            .iter()
            .zip(x)
            .map(|(a, b)| a * b)
            .sum()
    })
    .collect()
}

impl GruLayer {
    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        Self {
            inputs,
            hidden,
            w_ih: vec![0.0; 3 * hidden * inputs],
            w_hh: vec![0.0; 3 * hidden * hidden],
            b_ih: vec![0.0; 3 * hidden],
            b_hh: vec![0.0; 3 * hidden],
        }
    }

    pub fn init<R: Rng>(inputs: usize, hidden: usize, rng: &mut R) -> Self {
        let b = 1.0 / (hidden as f64).sqrt();
        let mut u = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-b..b)).collect() };
        Self {
            inputs,
            hidden,
            w_ih: u(3 * hidden * inputs),
            w_hh: u(3 * hidden * hidden),
            b_ih: u(3 * hidden),
            b_hh: u(3 * hidden),
        }
    }

    fn step(&self, x: &[f64], h: &[f64]) -> GruStep {
        let hd = self.hidden;
        let gi = matvec_rows(&self.w_ih, self.inputs, 0..3 * hd, x);
        let gh = matvec_rows(&self.w_hh, hd, 0..3 * hd, h);
        let mut r = vec![0.0; hd];
        let mut z = vec![0.0; hd];
        let mut n = vec![0.0; hd];
        let mut gh_n = vec![0.0; hd];
        for j in 0..hd {
            r[j] = sigmoid(gi[j] + self.b_ih[j] + gh[j] + self.b_hh[j]);
            z[j] = sigmoid(gi[hd + j] + self.b_ih[hd + j] + gh[hd + j] + self.b_hh[hd + j]);
            gh_n[j] = gh[2 * hd + j] + self.b_hh[2 * hd + j];
            n[j] = (gi[2 * hd + j] + self.b_ih[2 * hd + j] + r[j] * gh_n[j]).tanh();
        }
        GruStep {
            x: x.to_vec(),
            h_prev: h.to_vec(),
            r,
            z,
            n,
            gh_n,
        }
    }

    fn output(step: &GruStep) -> Vec<f64> {
        (0..step.n.len())
            .map(|j| (1.0 - step.z[j]) * step.n[j] + step.z[j] * step.h_prev[j])
            .collect()
    }

    /// Backward through one step: returns `(dL/dx, dL/dh_prev)`.
    fn step_backward(&self, s: &GruStep, dh: &[f64], grad: &mut GruLayer) -> (Vec<f64>, Vec<f64>) {
        let hd = self.hidden;
        let ni = self.inputs;
        // pre-activation gradients for the input-side rows [r, z, n] and hidden-side rows
        let mut da_i = vec![0.0; 3 * hd];
        let mut da_h = vec![0.0; 3 * hd];
        let mut dh_prev = vec![0.0; hd];
        for j in 0..hd {
            let (r, z, n) = (s.r[j], s.z[j], s.n[j]);
            let dn = dh[j] * (1.0 - z);
            let dz = dh[j] * (s.h_prev[j] - n);
            dh_prev[j] += dh[j] * z;
            let da_n = dn * (1.0 - n * n);
            let dr = da_n * s.gh_n[j];
            let da_r = dr * r * (1.0 - r);
            let da_z = dz * z * (1.0 - z);
            da_i[j] = da_r;
            da_i[hd + j] = da_z;
            da_i[2 * hd + j] = da_n;
            da_h[j] = da_r;
            da_h[hd + j] = da_z;
            da_h[2 * hd + j] = da_n * r;
        }
        let mut dx = vec![0.0; ni];
        for row in 0..3 * hd {
            let gi = da_i[row];
            if gi != 0.0 {
                grad.b_ih[row] += gi;
                for c in 0..ni {
                    grad.w_ih[row * ni + c] += gi * s.x[c];
                    dx[c] += gi * self.w_ih[row * ni + c];
                }
            }
            let gh = da_h[row];
            if gh != 0.0 {
                grad.b_hh[row] += gh;
                for c in 0..hd {
                    grad.w_hh[row * hd + c] += gh * s.h_prev[c];
                    dh_prev[c] += gh * self.w_hh[row * hd + c];
                }
            }
        }
        (dx, dh_prev)
    }
}

/// Input sequence -> optional GRU stack -> Mish hidden layers -> linear head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    /// Features per timestep.
    pub features: usize,
    /// Timesteps per input window.
    pub steps: usize,
    pub recurrent: Vec<GruLayer>,
    pub hidden: Vec<Dense>,
    pub output: Dense,
}

/// Intermediate values of one forward pass.
pub struct ForwardCache {
    gru: Vec<Vec<GruStep>>,
    /// Input to each hidden layer and the activation slope at its
    /// pre-activation.
    hidden_in: Vec<Vec<f64>>,
    hidden_slope: Vec<Vec<f64>>,
    output_in: Vec<f64>,
}

impl NetworkParams {
    /// Builds a randomly initialised network. With `recurrent_layers > 0` the
    /// GRU width is `hidden_sizes[0]` (32 when no dense layers are given).
    pub fn init<R: Rng>(
        features: usize,
        steps: usize,
        hidden_sizes: &[usize],
        recurrent_layers: usize,
        outputs: usize,
        zero_output: bool,
        rng: &mut R,
    ) -> Self {
        let mut recurrent = Vec::new();
        let mut width = features * steps;
        if recurrent_layers > 0 {
            let h = hidden_sizes.first().copied().unwrap_or(32);
            let mut inp = features;
            for _ in 0..recurrent_layers {
                recurrent.push(GruLayer::init(inp, h, rng));
                inp = h;
            }
            width = h;
        }
        let mut hidden = Vec::new();
        for &h in hidden_sizes {
            hidden.push(Dense::init(width, h, rng));
            width = h;
        }
        let output = if zero_output {
            Dense::zeros(width, outputs)
        } else {
            Dense::init(width, outputs, rng)
        };
        Self {
            features,
            steps,
            recurrent,
            hidden,
            output,
        }
    }

    pub fn input_width(&self) -> usize {
        self.features * self.steps
    }

    pub fn output_width(&self) -> usize {
        self.output.outputs
    }

    /// Same architecture, every parameter zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            features: self.features,
            steps: self.steps,
            recurrent: self.recurrent.iter().map(|g| GruLayer::zeros(g.inputs, g.hidden)).collect(),
            hidden: self.hidden.iter().map(|d| Dense::zeros(d.inputs, d.outputs)).collect(),
            output: Dense::zeros(self.output.inputs, self.output.outputs),
        }
    }

    fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        for g in &self.recurrent {
            v.extend([&g.w_ih[..], &g.w_hh[..], &g.b_ih[..], &g.b_hh[..]]);
        }
        for d in self.hidden.iter().chain(std::iter::once(&self.output)) {
            v.extend([&d.weights[..], &d.bias[..]]);
        }
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        for g in &mut self.recurrent {
            v.push(&mut g.w_ih[..]);
            v.push(&mut g.w_hh[..]);
            v.push(&mut g.b_ih[..]);
            v.push(&mut g.b_hh[..]);
        }
        for d in self.hidden.iter_mut().chain(std::iter::once(&mut self.output)) {
            v.push(&mut d.weights[..]);
            v.push(&mut d.bias[..]);
        }
        v
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat mask marking weight matrices (as opposed to biases).
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.len());
        for g in &self.recurrent {
            m.extend(std::iter::repeat_n(true, g.w_ih.len() + g.w_hh.len()));
            m.extend(std::iter::repeat_n(false, g.b_ih.len() + g.b_hh.len()));
        }
        for d in self.hidden.iter().chain(std::iter::once(&self.output)) {
            m.extend(std::iter::repeat_n(true, d.weights.len()));
            m.extend(std::iter::repeat_n(false, d.bias.len()));
        }
        m
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.len();
        if flat.len() != n {
            return Err(Error::Dimension {
                what: "flat parameter vector",
                expected: n,
                got: flat.len(),
            });
        }
        let mut off = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
        Ok(())
    }

    /// `self += other`, element-wise.
    pub fn add_assign(&mut self, other: &NetworkParams) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for s in self.slices_mut() {
            for x in s.iter_mut() {
                *x *= k;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_width() {
            return Err(Error::Dimension {
                what: "network input",
                expected: self.input_width(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(x)?;
        let mut gru_cache = Vec::with_capacity(self.recurrent.len());
        let mut a: Vec<f64> = if self.recurrent.is_empty() {
            x.to_vec()
        } else {
            let mut seq: Vec<Vec<f64>> = x.chunks_exact(self.features).map(<[f64]>::to_vec).collect();
            for layer in &self.recurrent {
                let mut h = vec![0.0; layer.hidden];
                let mut steps = Vec::with_capacity(seq.len());
                let mut outs = Vec::with_capacity(seq.len());
                for xt in &seq {
                    let st = layer.step(xt, &h);
                    h = GruLayer::output(&st);
                    outs.push(h.clone());
                    steps.push(st);
                }
                gru_cache.push(steps);
                seq = outs;
            }
            seq.pop().expect("at least one timestep")
        };
        let mut hidden_in = Vec::with_capacity(self.hidden.len());
        let mut hidden_slope = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let (next, slope) = layer.forward(&a).into_iter().map(mish_with_grad).unzip();
            hidden_in.push(std::mem::replace(&mut a, next));
            hidden_slope.push(slope);
        }
        let out = self.output.forward(&a);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output"));
        }
        Ok((
            out,
            ForwardCache {
                gru: gru_cache,
                hidden_in,
                hidden_slope,
                output_in: a,
            },
        ))
    }

    /// Accumulates `dL/dtheta` into `grad` given `dL/d output`.
    pub fn backward(&self, cache: &ForwardCache, d_out: &[f64], grad: &mut NetworkParams) {
        let mut d = self.output.backward(&cache.output_in, d_out, &mut grad.output);
        for (k, layer) in self.hidden.iter().enumerate().rev() {
            let dpre: Vec<f64> = d
                .iter()
                .zip(&cache.hidden_slope[k])
                .map(|(g, &m)| g * m)
                .collect();
            d = layer.backward(&cache.hidden_in[k], &dpre, &mut grad.hidden[k]);
        }
        if self.recurrent.is_empty() {
            return;
        }
        // d is dL/d(final hidden state of the top GRU layer)
        let steps = self.steps;
        let mut d_seq: Vec<Vec<f64>> = vec![Vec::new(); steps];
        let top = self.recurrent.len() - 1;
        for l in (0..self.recurrent.len()).rev() {
            let layer = &self.recurrent[l];
            let mut d_inputs = vec![vec![0.0; layer.inputs]; steps];
            let mut dh = vec![0.0; layer.hidden];
            for t in (0..steps).rev() {
                if l == top {
                    if t == steps - 1 {
                        for (a, b) in dh.iter_mut().zip(&d) {
                            *a += b;
                        }
                    }
                } else {
                    for (a, b) in dh.iter_mut().zip(&d_seq[t]) {
                        *a += b;
                    }
                }
                let (dx, dh_prev) = layer.step_backward(&cache.gru[l][t], &dh, &mut grad.recurrent[l]);
                d_inputs[t] = dx;
                dh = dh_prev;
            }
            d_seq = d_inputs;
        }
    }
}
