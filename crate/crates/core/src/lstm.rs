//! Single LSTM cell with an extra persistent input line.
//!
//! The cell keeps a memory value `m` and an output `y`. Every gate and the
//! candidate see three input lines: the step input `x`, the previous output
//! `y`, and a persistent feature `p` that is supplied unchanged at every step
//! through its own weight set:
//!
//! ```text
//! i = σ(W_ix x + W_iy y' + W_ip p + b_i)
//! o = σ(W_ox x + W_oy y' + W_op p + b_o)
//! f = σ(W_fx x + W_fy y' + W_fp p + b_f)
//! m = f ⊙ m' + i ⊙ tanh(W_mx x + W_my y' + W_mp p + b_m)
//! y = o ⊙ m
//! ```
//!
//! The output is the gated memory itself, with no squashing of `m`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LstmError {
    #[error("hidden size must be at least 1")]
    ZeroHidden,
    #[error("{what}: expected length {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("cache does not match parameters: {0}")]
    CacheMismatch(&'static str),
}

/// Weights feeding one gate (or the candidate) from each input line.
#[derive(Debug, Clone, PartialEq)]
pub struct GateWeights {
    /// `hidden × input_dim`
    pub w_x: Array2<f64>,
    /// `hidden × hidden`
    pub w_y: Array2<f64>,
    /// `hidden × persist_dim`
    pub w_p: Array2<f64>,
    pub bias: Array1<f64>,
}

impl GateWeights {
    fn zeros(input_dim: usize, hidden: usize, persist_dim: usize) -> Self {
        GateWeights {
            w_x: Array2::zeros((hidden, input_dim)),
            w_y: Array2::zeros((hidden, hidden)),
            w_p: Array2::zeros((hidden, persist_dim)),
            bias: Array1::zeros(hidden),
        }
    }

    fn preactivation(&self, x: &Array1<f64>, y: &Array1<f64>, p: &Array1<f64>) -> Array1<f64> {
        let mut a = self.w_x.dot(x);
        a += &self.w_y.dot(y);
        if !p.is_empty() {
            a += &self.w_p.dot(p);
        }
        a += &self.bias;
        a
    }

    /// Adds `d_a ⊗ (x, y, p)` and `d_a` into `self`, treating it as a gradient.
    fn accumulate_outer(
        &mut self,
        d_a: &Array1<f64>,
        x: &Array1<f64>,
        y: &Array1<f64>,
        p: &Array1<f64>,
    ) {
        let col = d_a.view().insert_axis(Axis(1));
        general_mat_mul(1.0, &col, &x.view().insert_axis(Axis(0)), 1.0, &mut self.w_x);
        general_mat_mul(1.0, &col, &y.view().insert_axis(Axis(0)), 1.0, &mut self.w_y);
        if !p.is_empty() {
            general_mat_mul(1.0, &col, &p.view().insert_axis(Axis(0)), 1.0, &mut self.w_p);
        }
        self.bias += d_a;
    }
}

/// All trainable weights of the cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub input_gate: GateWeights,
    pub output_gate: GateWeights,
    pub forget_gate: GateWeights,
    pub candidate: GateWeights,
    input_dim: usize,
    hidden: usize,
    persist_dim: usize,
}

/// Memory cell value and output of the cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub m: Array1<f64>,
    pub y: Array1<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            m: Array1::zeros(hidden),
            y: Array1::zeros(hidden),
        }
    }
}

/// Everything the backward pass needs from one forward step.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub x: Array1<f64>,
    pub p: Array1<f64>,
    pub prev: LstmState,
    pub input_gate: Array1<f64>,
    pub output_gate: Array1<f64>,
    pub forget_gate: Array1<f64>,
    /// `tanh` of the candidate preactivation.
    pub candidate: Array1<f64>,
    pub m: Array1<f64>,
}

/// Gradients with respect to the non-parameter inputs of a step.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrads {
    pub d_prev: LstmState,
    pub d_x: Array1<f64>,
    pub d_p: Array1<f64>,
}

/// Full result of [`lstm_step_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepGrads {
    pub params: LstmParams,
    pub inputs: InputGrads,
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn check_len(what: &'static str, v: &Array1<f64>, expected: usize) -> Result<(), LstmError> {
    if v.len() != expected {
        return Err(LstmError::DimMismatch {
            what,
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

fn check_finite(what: &'static str, v: &Array1<f64>) -> Result<(), LstmError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(LstmError::NonFinite(what))
    }
}

/// Draws `rows × cols` entries uniformly from `[-1/√cols, 1/√cols]`.
pub(crate) fn uniform_fan_in(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    if cols == 0 || rows == 0 {
        return Array2::zeros((rows, cols));
    }
    let s = 1.0 / (cols as f64).sqrt();
    let dist = Uniform::new_inclusive(-s, s).expect("finite bound");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// Seeded parameter initialization.
///
/// Weights are uniform in `±1/√fan_in` of their own matrix, the forget bias
/// starts at 1 and the remaining biases at 0.
pub fn init_params(
    input_dim: usize,
    hidden: usize,
    persist_dim: usize,
    seed: u64,
) -> Result<LstmParams, LstmError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_params_with(input_dim, hidden, persist_dim, &mut rng)
}

pub(crate) fn init_params_with(
    input_dim: usize,
    hidden: usize,
    persist_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LstmParams, LstmError> {
    if hidden == 0 {
        return Err(LstmError::ZeroHidden);
    }
    let mut gate = |bias: f64| GateWeights {
        w_x: uniform_fan_in(hidden, input_dim, rng),
        w_y: uniform_fan_in(hidden, hidden, rng),
        w_p: uniform_fan_in(hidden, persist_dim, rng),
        bias: Array1::from_elem(hidden, bias),
    };
    let input_gate = gate(0.0);
    let output_gate = gate(0.0);
    let forget_gate = gate(1.0);
    let candidate = gate(0.0);
    Ok(LstmParams {
        input_gate,
        output_gate,
        forget_gate,
        candidate,
        input_dim,
        hidden,
        persist_dim,
    })
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden: usize, persist_dim: usize) -> Result<Self, LstmError> {
        if hidden == 0 {
            return Err(LstmError::ZeroHidden);
        }
        Ok(LstmParams {
            input_gate: GateWeights::zeros(input_dim, hidden, persist_dim),
            output_gate: GateWeights::zeros(input_dim, hidden, persist_dim),
            forget_gate: GateWeights::zeros(input_dim, hidden, persist_dim),
            candidate: GateWeights::zeros(input_dim, hidden, persist_dim),
            input_dim,
            hidden,
            persist_dim,
        })
    }

    /// Same dims, every entry zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim, self.hidden, self.persist_dim).expect("hidden ≥ 1")
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn persist_dim(&self) -> usize {
        self.persist_dim
    }

    pub fn gates(&self) -> [(&'static str, &GateWeights); 4] {
        [
            ("i", &self.input_gate),
            ("o", &self.output_gate),
            ("f", &self.forget_gate),
            ("m", &self.candidate),
        ]
    }

    /// Named flat views of every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::with_capacity(16);
        for (g, w) in self.gates() {
            out.push((format!("W_{g}x"), w.w_x.shape().to_vec(), slice2(&w.w_x)));
            out.push((format!("W_{g}y"), w.w_y.shape().to_vec(), slice2(&w.w_y)));
            out.push((format!("W_{g}p"), w.w_p.shape().to_vec(), slice2(&w.w_p)));
            out.push((format!("b_{g}"), w.bias.shape().to_vec(), slice1(&w.bias)));
        }
        out
    }

    /// Mutable flat views in the same order as [`LstmParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::with_capacity(16);
        for (g, w) in [
            ("i", &mut self.input_gate),
            ("o", &mut self.output_gate),
            ("f", &mut self.forget_gate),
            ("m", &mut self.candidate),
        ] {
            out.push((format!("W_{g}x"), w.w_x.as_slice_mut().expect("standard layout")));
            out.push((format!("W_{g}y"), w.w_y.as_slice_mut().expect("standard layout")));
            out.push((format!("W_{g}p"), w.w_p.as_slice_mut().expect("standard layout")));
            out.push((format!("b_{g}"), w.bias.as_slice_mut().expect("standard layout")));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, d)| d.iter().all(|v| v.is_finite()))
    }

    /// Builds params from named tensors, validating every shape against the dims.
    pub fn from_tensors(
        input_dim: usize,
        hidden: usize,
        persist_dim: usize,
        mut lookup: impl FnMut(&str, &[usize]) -> Option<Vec<f64>>,
    ) -> Result<Self, String> {
        let mut params = LstmParams::zeros(input_dim, hidden, persist_dim).map_err(|e| e.to_string())?;
        let shapes: Vec<(String, Vec<usize>)> = params
            .tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        for ((name, dst), (_, shape)) in params.tensors_mut().into_iter().zip(shapes) {
            let data = lookup(&name, &shape).ok_or_else(|| format!("missing or misshapen array {name}"))?;
            if data.len() != dst.len() {
                return Err(format!("array {name} has {} values, expected {}", data.len(), dst.len()));
            }
            dst.copy_from_slice(&data);
        }
        Ok(params)
    }

    /// Adds `scale * other` into `self`.
    pub fn scaled_add(&mut self, scale: f64, other: &LstmParams) {
        for ((_, dst), (_, _, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    fn check_inputs(&self, prev: &LstmState, x: &Array1<f64>, p: &Array1<f64>) -> Result<(), LstmError> {
        check_len("x", x, self.input_dim)?;
        check_len("p", p, self.persist_dim)?;
        check_len("m_prev", &prev.m, self.hidden)?;
        check_len("y_prev", &prev.y, self.hidden)?;
        check_finite("x", x)?;
        check_finite("p", p)?;
        check_finite("m_prev", &prev.m)?;
        check_finite("y_prev", &prev.y)
    }
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

/// One forward step. Pure: inputs are not modified.
pub fn lstm_step(
    params: &LstmParams,
    prev: &LstmState,
    x: &Array1<f64>,
    p: &Array1<f64>,
) -> Result<LstmState, LstmError> {
    let (state, _) = lstm_step_cached(params, prev, x, p)?;
    Ok(state)
}

/// Forward step that also returns the activations needed for the backward pass.
pub fn lstm_step_cached(
    params: &LstmParams,
    prev: &LstmState,
    x: &Array1<f64>,
    p: &Array1<f64>,
) -> Result<(LstmState, StepCache), LstmError> {
    params.check_inputs(prev, x, p)?;
    Ok(step_unchecked(params, prev, x, p))
}

pub(crate) fn step_unchecked(
    params: &LstmParams,
    prev: &LstmState,
    x: &Array1<f64>,
    p: &Array1<f64>,
) -> (LstmState, StepCache) {
    let i = params.input_gate.preactivation(x, &prev.y, p).mapv_into(sigmoid);
    let o = params.output_gate.preactivation(x, &prev.y, p).mapv_into(sigmoid);
    let f = params.forget_gate.preactivation(x, &prev.y, p).mapv_into(sigmoid);
    let g = params.candidate.preactivation(x, &prev.y, p).mapv_into(f64::tanh);
    let m = &f * &prev.m + &i * &g;
    let y = &o * &m;
    let cache = StepCache {
        x: x.clone(),
        p: p.clone(),
        prev: prev.clone(),
        input_gate: i,
        output_gate: o,
        forget_gate: f,
        candidate: g,
        m: m.clone(),
    };
    (LstmState { m, y }, cache)
}

/// Reverse-mode derivative of one step.
///
/// `d_y` and `d_m` are the loss gradients flowing into this step's output and
/// memory. Returns fresh parameter gradients together with the gradients for
/// the previous state and both inputs.
pub fn lstm_step_backward(
    params: &LstmParams,
    cache: &StepCache,
    d_y: &Array1<f64>,
    d_m: &Array1<f64>,
) -> Result<StepGrads, LstmError> {
    let mut grads = params.zeros_like();
    let inputs = accumulate_step_backward(params, cache, d_y.view(), d_m.view(), &mut grads)?;
    Ok(StepGrads { params: grads, inputs })
}

/// Like [`lstm_step_backward`], but adds parameter gradients into `grads`.
pub fn accumulate_step_backward(
    params: &LstmParams,
    cache: &StepCache,
    d_y: ArrayView1<f64>,
    d_m: ArrayView1<f64>,
    grads: &mut LstmParams,
) -> Result<InputGrads, LstmError> {
    let h = params.hidden;
    if cache.x.len() != params.input_dim {
        return Err(LstmError::CacheMismatch("x length"));
    }
    if cache.p.len() != params.persist_dim {
        return Err(LstmError::CacheMismatch("p length"));
    }
    if [
        cache.prev.m.len(),
        cache.prev.y.len(),
        cache.input_gate.len(),
        cache.output_gate.len(),
        cache.forget_gate.len(),
        cache.candidate.len(),
        cache.m.len(),
    ]
    .iter()
    .any(|&n| n != h)
    {
        return Err(LstmError::CacheMismatch("hidden length"));
    }
    if grads.hidden != h || grads.input_dim != params.input_dim || grads.persist_dim != params.persist_dim {
        return Err(LstmError::CacheMismatch("gradient accumulator dims"));
    }
    if d_y.len() != h {
        return Err(LstmError::DimMismatch { what: "d_y", expected: h, got: d_y.len() });
    }
    if d_m.len() != h {
        return Err(LstmError::DimMismatch { what: "d_m", expected: h, got: d_m.len() });
    }
    Ok(backward_unchecked(params, cache, d_y, d_m, grads))
}

pub(crate) fn backward_unchecked(
    params: &LstmParams,
    cache: &StepCache,
    d_y: ArrayView1<f64>,
    d_m: ArrayView1<f64>,
    grads: &mut LstmParams,
) -> InputGrads {
    let i = &cache.input_gate;
    let o = &cache.output_gate;
    let f = &cache.forget_gate;
    let g = &cache.candidate;

    // total gradient reaching m(t)
    let dm = &d_m + &(&d_y * o);

    let d_ao = &(&d_y * &cache.m) * &o.mapv(|v| v * (1.0 - v));
    let d_af = &(&dm * &cache.prev.m) * &f.mapv(|v| v * (1.0 - v));
    let d_ai = &(&dm * g) * &i.mapv(|v| v * (1.0 - v));
    let d_ag = &(&dm * i) * &g.mapv(|v| 1.0 - v * v);

    let x = &cache.x;
    let y_prev = &cache.prev.y;
    let p = &cache.p;
    grads.input_gate.accumulate_outer(&d_ai, x, y_prev, p);
    grads.output_gate.accumulate_outer(&d_ao, x, y_prev, p);
    grads.forget_gate.accumulate_outer(&d_af, x, y_prev, p);
    grads.candidate.accumulate_outer(&d_ag, x, y_prev, p);

    let mut d_x = Array1::zeros(params.input_dim);
    let mut d_y_prev = Array1::zeros(params.hidden);
    let mut d_p = Array1::zeros(params.persist_dim);
    for (w, d_a) in [
        (&params.input_gate, &d_ai),
        (&params.output_gate, &d_ao),
        (&params.forget_gate, &d_af),
        (&params.candidate, &d_ag),
    ] {
        d_x += &w.w_x.t().dot(d_a);
        d_y_prev += &w.w_y.t().dot(d_a);
        if params.persist_dim > 0 {
            d_p += &w.w_p.t().dot(d_a);
        }
    }

    InputGrads {
        d_prev: LstmState {
            m: &dm * f,
            y: d_y_prev,
        },
        d_x,
        d_p,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
        Array1::from_shape_simple_fn(n, || rng.random_range(-1.0..1.0))
    }

    fn unit(n: usize, k: usize) -> Array1<f64> {
        let mut v = Array1::zeros(n);
        v[k] = 1.0;
        v
    }

    /// Scalar-by-scalar evaluation of the cell equations, no ndarray algebra.
    fn oracle_step(params: &LstmParams, prev: &LstmState, x: &[f64], p: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h = params.hidden();
        let pre = |w: &GateWeights, r: usize| {
            let mut s = w.bias[r];
            for c in 0..x.len() {
                s += w.w_x[[r, c]] * x[c];
            }
            for c in 0..h {
                s += w.w_y[[r, c]] * prev.y[c];
            }
            for c in 0..p.len() {
                s += w.w_p[[r, c]] * p[c];
            }
            s
        };
        let mut m = vec![0.0; h];
        let mut y = vec![0.0; h];
        for r in 0..h {
            let i = 1.0 / (1.0 + (-pre(&params.input_gate, r)).exp());
            let o = 1.0 / (1.0 + (-pre(&params.output_gate, r)).exp());
            let f = 1.0 / (1.0 + (-pre(&params.forget_gate, r)).exp());
            let g = pre(&params.candidate, r).tanh();
            m[r] = f * prev.m[r] + i * g;
            y[r] = o * m[r];
        }
        (m, y)
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(4, 8, 0, 7).unwrap();
        let b = init_params(4, 8, 0, 7).unwrap();
        assert_eq!(a, b);
        let c = init_params(4, 8, 0, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_biases() {
        let a = init_params(4, 8, 0, 123).unwrap();
        assert!(a.forget_gate.bias.iter().all(|&b| b == 1.0));
        assert!(a.input_gate.bias.iter().all(|&b| b == 0.0));
        assert!(a.output_gate.bias.iter().all(|&b| b == 0.0));
        assert!(a.candidate.bias.iter().all(|&b| b == 0.0));
        assert_eq!(a.input_gate.w_p.shape(), &[8, 0]);
    }

    #[test]
    fn init_persistent_bounds() {
        let a = init_params(4, 8, 5, 7).unwrap();
        let s = 1.0 / 5f64.sqrt();
        assert_eq!(a.input_gate.w_p.shape(), &[8, 5]);
        assert!(a.input_gate.w_p.iter().all(|v| v.abs() <= s));
        let sx = 1.0 / 2.0;
        assert!(a.candidate.w_x.iter().all(|v| v.abs() <= sx));
    }

    #[test]
    fn init_rejects_zero_hidden() {
        assert_eq!(init_params(4, 0, 0, 1), Err(LstmError::ZeroHidden));
    }

    #[test]
    fn zero_weights_halve_memory() {
        let params = LstmParams::zeros(3, 4, 0).unwrap();
        let c = Array1::from(vec![1.0, -2.0, 0.5, 8.0]);
        let prev = LstmState { m: c.clone(), y: Array1::zeros(4) };
        let out = lstm_step(&params, &prev, &Array1::from(vec![0.3, 0.1, -4.0]), &Array1::zeros(0)).unwrap();
        assert_eq!(out.m, &c * 0.5);
        assert_eq!(out.y, &c * 0.25);
    }

    #[test]
    fn zero_persistent_line_is_inert() {
        let base = init_params(3, 4, 0, 5).unwrap();
        let mut with_p = LstmParams::zeros(3, 4, 3).unwrap();
        with_p.input_gate.w_x = base.input_gate.w_x.clone();
        with_p.input_gate.w_y = base.input_gate.w_y.clone();
        with_p.input_gate.bias = base.input_gate.bias.clone();
        with_p.output_gate.w_x = base.output_gate.w_x.clone();
        with_p.output_gate.w_y = base.output_gate.w_y.clone();
        with_p.output_gate.bias = base.output_gate.bias.clone();
        with_p.forget_gate.w_x = base.forget_gate.w_x.clone();
        with_p.forget_gate.w_y = base.forget_gate.w_y.clone();
        with_p.forget_gate.bias = base.forget_gate.bias.clone();
        with_p.candidate.w_x = base.candidate.w_x.clone();
        with_p.candidate.w_y = base.candidate.w_y.clone();
        with_p.candidate.bias = base.candidate.bias.clone();

        let prev = LstmState { m: Array1::from(vec![0.1, 0.2, 0.3, 0.4]), y: Array1::from(vec![-0.1, 0.0, 0.2, 0.5]) };
        let x = Array1::from(vec![1.0, -1.0, 0.5]);
        let a = lstm_step(&base, &prev, &x, &Array1::zeros(0)).unwrap();
        let b = lstm_step(&with_p, &prev, &x, &Array1::from(vec![3.0, -7.0, 0.25])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn matches_scalar_oracle_on_unit_inputs() {
        let params = init_params(3, 4, 2, 11).unwrap();
        let prev = LstmState::zeros(4);
        let x = unit(3, 0);
        let p = unit(2, 1);
        let out = lstm_step(&params, &prev, &x, &p).unwrap();
        let (m, y) = oracle_step(&params, &prev, x.as_slice().unwrap(), p.as_slice().unwrap());
        for r in 0..4 {
            assert!((out.m[r] - m[r]).abs() < 1e-12);
            assert!((out.y[r] - y[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let params = init_params(3, 4, 2, 1).unwrap();
        let prev = LstmState::zeros(4);
        let err = lstm_step(&params, &prev, &Array1::zeros(2), &Array1::zeros(2)).unwrap_err();
        assert!(matches!(err, LstmError::DimMismatch { what: "x", .. }));
        let err = lstm_step(&params, &prev, &Array1::zeros(3), &Array1::zeros(1)).unwrap_err();
        assert!(matches!(err, LstmError::DimMismatch { what: "p", .. }));
        let mut x = Array1::zeros(3);
        x[1] = f64::NAN;
        assert_eq!(lstm_step(&params, &prev, &x, &Array1::zeros(2)), Err(LstmError::NonFinite("x")));
    }

    #[test]
    fn backward_of_zero_upstream_is_zero() {
        let params = init_params(3, 4, 2, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prev = LstmState { m: random_vec(4, &mut rng), y: random_vec(4, &mut rng) };
        let (_, cache) = lstm_step_cached(&params, &prev, &random_vec(3, &mut rng), &random_vec(2, &mut rng)).unwrap();
        let g = lstm_step_backward(&params, &cache, &Array1::zeros(4), &Array1::zeros(4)).unwrap();
        assert!(g.params.tensors().iter().all(|(_, _, d)| d.iter().all(|&v| v == 0.0)));
        assert!(g.inputs.d_x.iter().all(|&v| v == 0.0));
        assert!(g.inputs.d_p.iter().all(|&v| v == 0.0));
        assert!(g.inputs.d_prev.m.iter().all(|&v| v == 0.0));
        assert!(g.inputs.d_prev.y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let params = init_params(3, 4, 2, 9).unwrap();
        let other = init_params(5, 4, 2, 9).unwrap();
        let (_, cache) = lstm_step_cached(&other, &LstmState::zeros(4), &Array1::zeros(5), &Array1::zeros(2)).unwrap();
        let err = lstm_step_backward(&params, &cache, &Array1::zeros(4), &Array1::zeros(4)).unwrap_err();
        assert!(matches!(err, LstmError::CacheMismatch(_)));
    }

    /// Scalar loss `c·y + d·m` of one step, and of two chained steps.
    struct Probe {
        prev: LstmState,
        xs: Vec<Array1<f64>>,
        ps: Vec<Array1<f64>>,
        c: Array1<f64>,
        d: Array1<f64>,
    }

    impl Probe {
        fn new(params: &LstmParams, steps: usize, rng: &mut ChaCha8Rng) -> Self {
            let h = params.hidden();
            Probe {
                prev: LstmState { m: random_vec(h, rng), y: random_vec(h, rng) },
                xs: (0..steps).map(|_| random_vec(params.input_dim(), rng)).collect(),
                ps: (0..steps).map(|_| random_vec(params.persist_dim(), rng)).collect(),
                c: random_vec(h, rng),
                d: random_vec(h, rng),
            }
        }

        fn loss(&self, params: &LstmParams, prev: &LstmState, xs: &[Array1<f64>], ps: &[Array1<f64>]) -> f64 {
            let mut s = prev.clone();
            for (x, p) in xs.iter().zip(ps) {
                s = lstm_step(params, &s, x, p).unwrap();
            }
            self.c.dot(&s.y) + self.d.dot(&s.m)
        }

        fn analytic(&self, params: &LstmParams) -> (LstmParams, InputGrads, Vec<Array1<f64>>, Vec<Array1<f64>>) {
            let mut caches = Vec::new();
            let mut s = self.prev.clone();
            for (x, p) in self.xs.iter().zip(&self.ps) {
                let (next, cache) = lstm_step_cached(params, &s, x, p).unwrap();
                caches.push(cache);
                s = next;
            }
            let mut grads = params.zeros_like();
            let mut d_y = self.c.clone();
            let mut d_m = self.d.clone();
            let mut dxs = vec![];
            let mut dps = vec![];
            let mut last = None;
            for cache in caches.iter().rev() {
                let g = accumulate_step_backward(params, cache, d_y.view(), d_m.view(), &mut grads).unwrap();
                d_y = g.d_prev.y.clone();
                d_m = g.d_prev.m.clone();
                dxs.push(g.d_x.clone());
                dps.push(g.d_p.clone());
                last = Some(g);
            }
            dxs.reverse();
            dps.reverse();
            (grads, last.unwrap(), dxs, dps)
        }
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        let scale = a.abs().max(n.abs());
        if scale < 1e-8 {
            (a - n).abs()
        } else {
            (a - n).abs() / scale
        }
    }

    fn check_fd(seed: u64, steps: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input_dim = rng.random_range(1..=4);
        let hidden = rng.random_range(1..=8);
        let persist_dim = rng.random_range(0..=3);
        let mut params = init_params(input_dim, hidden, persist_dim, seed).unwrap();
        // exercise non-trivial biases too
        for (_, t) in params.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let probe = Probe::new(&params, steps, &mut rng);
        let (grads, first, dxs, dps) = probe.analytic(&params);
        let eps = 1e-5;
        let mut worst: f64 = 0.0;

        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|(_, _, d)| d.to_vec()).collect();
        let n_tensors = analytic.len();
        for t in 0..n_tensors {
            for k in 0..analytic[t].len() {
                let mut plus = params.clone();
                plus.tensors_mut()[t].1[k] += eps;
                let mut minus = params.clone();
                minus.tensors_mut()[t].1[k] -= eps;
                let fd = (probe.loss(&plus, &probe.prev, &probe.xs, &probe.ps)
                    - probe.loss(&minus, &probe.prev, &probe.xs, &probe.ps))
                    / (2.0 * eps);
                worst = worst.max(rel_err(analytic[t][k], fd));
            }
        }

        let perturb_vec = |v: &Array1<f64>, k: usize, delta: f64| {
            let mut w = v.clone();
            w[k] += delta;
            w
        };
        for k in 0..hidden {
            for which in 0..2 {
                let shift = |delta: f64| {
                    let mut prev = probe.prev.clone();
                    if which == 0 {
                        prev.m = perturb_vec(&prev.m, k, delta);
                    } else {
                        prev.y = perturb_vec(&prev.y, k, delta);
                    }
                    probe.loss(&params, &prev, &probe.xs, &probe.ps)
                };
                let fd = (shift(eps) - shift(-eps)) / (2.0 * eps);
                let a = if which == 0 { first.d_prev.m[k] } else { first.d_prev.y[k] };
                worst = worst.max(rel_err(a, fd));
            }
        }
        for s in 0..steps {
            for k in 0..input_dim {
                let shift = |delta: f64| {
                    let mut xs = probe.xs.clone();
                    xs[s] = perturb_vec(&xs[s], k, delta);
                    probe.loss(&params, &probe.prev, &xs, &probe.ps)
                };
                worst = worst.max(rel_err(dxs[s][k], (shift(eps) - shift(-eps)) / (2.0 * eps)));
            }
            for k in 0..persist_dim {
                let shift = |delta: f64| {
                    let mut ps = probe.ps.clone();
                    ps[s] = perturb_vec(&ps[s], k, delta);
                    probe.loss(&params, &probe.prev, &probe.xs, &ps)
                };
                worst = worst.max(rel_err(dps[s][k], (shift(eps) - shift(-eps)) / (2.0 * eps)));
            }
        }
        worst
    }

    #[test]
    fn single_step_matches_finite_differences() {
        for seed in 0..100 {
            let err = check_fd(seed, 1);
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn two_steps_match_finite_differences() {
        for seed in 100..200 {
            let err = check_fd(seed, 2);
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }

    proptest! {
        // Open-interval bounds hold only away from f64 saturation of σ and tanh.
        #[test]
        fn gates_stay_in_open_interval(seed in 0u64..1000, scale in 0.1f64..3.0) {
            let params = init_params(3, 5, 2, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let prev = LstmState { m: random_vec(5, &mut rng), y: random_vec(5, &mut rng) };
            let x = random_vec(3, &mut rng) * scale;
            let p = random_vec(2, &mut rng) * scale;
            let (_, cache) = lstm_step_cached(&params, &prev, &x, &p).unwrap();
            for g in [&cache.input_gate, &cache.output_gate, &cache.forget_gate] {
                prop_assert!(g.iter().all(|&v| v > 0.0 && v < 1.0));
            }
            prop_assert!(cache.candidate.iter().all(|&v| v > -1.0 && v < 1.0));
        }

        #[test]
        fn step_is_pure(seed in 0u64..1000) {
            let params = init_params(2, 3, 1, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let prev = LstmState { m: random_vec(3, &mut rng), y: random_vec(3, &mut rng) };
            let x = random_vec(2, &mut rng);
            let p = random_vec(1, &mut rng);
            let a = lstm_step(&params, &prev, &x, &p).unwrap();
            let b = lstm_step(&params, &prev, &x, &p).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn zeroed_persistent_weights_ignore_p(seed in 0u64..1000) {
            let mut params = init_params(2, 3, 2, seed).unwrap();
            for g in [&mut params.input_gate, &mut params.output_gate, &mut params.forget_gate, &mut params.candidate] {
                g.w_p.fill(0.0);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let prev = LstmState { m: random_vec(3, &mut rng), y: random_vec(3, &mut rng) };
            let x = random_vec(2, &mut rng);
            let a = lstm_step(&params, &prev, &x, &random_vec(2, &mut rng)).unwrap();
            let b = lstm_step(&params, &prev, &x, &(random_vec(2, &mut rng) * 50.0)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
