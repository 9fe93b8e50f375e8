//! Standard LSTM cell, sequence unrolling, and backpropagation through time.
//!
//! Gates use the conventional placement with the bias inside the
//! nonlinearity, and the cell reads the concatenation `[h_{t-1}; x_t]`:
//!
//! ```text
//! f = σ(W_f·[h; x] + b_f)      i = σ(W_i·[h; x] + b_i)
//! g = tanh(W_c·[h; x] + b_c)   o = σ(W_o·[h; x] + b_o)
//! c' = f ⊙ c + i ⊙ g           h' = o ⊙ tanh(c')
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, sigmoid_scalar, visit_matrix, visit_matrix_mut, Matrix, Parameterized};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    input_size: usize,
    hidden_size: usize,
    pub w_f: Matrix,
    pub w_i: Matrix,
    pub w_c: Matrix,
    pub w_o: Matrix,
    pub b_f: Vec<f64>,
    pub b_i: Vec<f64>,
    pub b_c: Vec<f64>,
    pub b_o: Vec<f64>,
}

impl LstmParams {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        let cols = hidden_size + input_size;
        LstmParams {
            input_size,
            hidden_size,
            w_f: Matrix::zeros(hidden_size, cols),
            w_i: Matrix::zeros(hidden_size, cols),
            w_c: Matrix::zeros(hidden_size, cols),
            w_o: Matrix::zeros(hidden_size, cols),
            b_f: vec![0.0; hidden_size],
            b_i: vec![0.0; hidden_size],
            b_c: vec![0.0; hidden_size],
            b_o: vec![0.0; hidden_size],
        }
    }

    /// Weights uniform in ±1/√(H+D), biases zero.
    pub fn init<R: Rng>(input_size: usize, hidden_size: usize, rng: &mut R) -> Self {
        let cols = hidden_size + input_size;
        let bound = 1.0 / (cols as f64).sqrt();
        let mut p = LstmParams::zeros(input_size, hidden_size);
        p.w_f = Matrix::uniform(hidden_size, cols, bound, rng);
        p.w_i = Matrix::uniform(hidden_size, cols, bound, rng);
        p.w_c = Matrix::uniform(hidden_size, cols, bound, rng);
        p.w_o = Matrix::uniform(hidden_size, cols, bound, rng);
        p
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    pub fn validate(&self) -> Result<()> {
        let (h, d) = (self.hidden_size, self.input_size);
        for (name, m) in self.weights() {
            if m.shape() != [h, h + d] {
                return Err(Error::dim(
                    "LstmParams",
                    format!("{name} is {:?}, expected [{h}, {}]", m.shape(), h + d),
                ));
            }
        }
        for (name, b) in [
            ("b_f", &self.b_f),
            ("b_i", &self.b_i),
            ("b_c", &self.b_c),
            ("b_o", &self.b_o),
        ] {
            if b.len() != h {
                return Err(Error::dim(
                    "LstmParams",
                    format!("{name} has length {}, expected {h}", b.len()),
                ));
            }
        }
        Ok(())
    }

    fn weights(&self) -> [(&'static str, &Matrix); 4] {
        [
            ("w_f", &self.w_f),
            ("w_i", &self.w_i),
            ("w_c", &self.w_c),
            ("w_o", &self.w_o),
        ]
    }
}

impl Parameterized for LstmParams {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        visit_matrix(prefix, "w_f", &self.w_f, f);
        visit_matrix(prefix, "w_i", &self.w_i, f);
        visit_matrix(prefix, "w_c", &self.w_c, f);
        visit_matrix(prefix, "w_o", &self.w_o, f);
        let h = [self.hidden_size];
        f(format!("{prefix}b_f"), &h, &self.b_f);
        f(format!("{prefix}b_i"), &h, &self.b_i);
        f(format!("{prefix}b_c"), &h, &self.b_c);
        f(format!("{prefix}b_o"), &h, &self.b_o);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &mut [f64])) {
        visit_matrix_mut(prefix, "w_f", &mut self.w_f, f);
        visit_matrix_mut(prefix, "w_i", &mut self.w_i, f);
        visit_matrix_mut(prefix, "w_c", &mut self.w_c, f);
        visit_matrix_mut(prefix, "w_o", &mut self.w_o, f);
        let h = [self.hidden_size];
        f(format!("{prefix}b_f"), &h, &mut self.b_f);
        f(format!("{prefix}b_i"), &h, &mut self.b_i);
        f(format!("{prefix}b_c"), &h, &mut self.b_c);
        f(format!("{prefix}b_o"), &h, &mut self.b_o);
    }
}

/// Recurrent state `(h, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden_size: usize) -> Self {
        LstmState {
            h: vec![0.0; hidden_size],
            c: vec![0.0; hidden_size],
        }
    }
}

/// Fully connected scalar readout `w·features + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputHead {
    pub w: Vec<f64>,
    pub b: f64,
}

impl OutputHead {
    pub fn zeros(width: usize) -> Self {
        OutputHead {
            w: vec![0.0; width],
            b: 0.0,
        }
    }

    pub fn init<R: Rng>(width: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (width as f64).sqrt();
        OutputHead {
            w: (0..width).map(|_| rng.gen_range(-bound..=bound)).collect(),
            b: 0.0,
        }
    }

    pub fn apply(&self, features: &[f64]) -> f64 {
        dot(&self.w, features) + self.b
    }

    /// Accumulates the gradient of `dy · apply(features)` and writes `dy·w` into `dfeatures`.
    pub(crate) fn backward(
        &self,
        features: &[f64],
        dy: f64,
        grad: &mut OutputHead,
        dfeatures: &mut [f64],
    ) {
        for ((gw, &x), (df, &w)) in grad
            .w
            .iter_mut()
            .zip(features)
            .zip(dfeatures.iter_mut().zip(&self.w))
        {
            *gw += dy * x;
            *df = dy * w;
        }
        grad.b += dy;
    }
}

impl Parameterized for OutputHead {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        f(format!("{prefix}w"), &[self.w.len()], &self.w);
        f(format!("{prefix}b"), &[1], std::slice::from_ref(&self.b));
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &mut [f64])) {
        let n = [self.w.len()];
        f(format!("{prefix}w"), &n, &mut self.w);
        f(
            format!("{prefix}b"),
            &[1],
            std::slice::from_mut(&mut self.b),
        );
    }
}

/// Everything one step needs for its backward pass.
#[derive(Debug, Clone)]
struct StepCache {
    z: Vec<f64>,
    f: Vec<f64>,
    i: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c_prev: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

fn step_cached(p: &LstmParams, h_prev: &[f64], c_prev: &[f64], x: &[f64]) -> StepCache {
    let hs = p.hidden_size;
    let mut z = Vec::with_capacity(hs + p.input_size);
    z.extend_from_slice(h_prev);
    z.extend_from_slice(x);
    let mut f = vec![0.0; hs];
    let mut i = vec![0.0; hs];
    let mut g = vec![0.0; hs];
    let mut o = vec![0.0; hs];
    p.w_f.affine_into(&z, &p.b_f, &mut f);
    p.w_i.affine_into(&z, &p.b_i, &mut i);
    p.w_c.affine_into(&z, &p.b_c, &mut g);
    p.w_o.affine_into(&z, &p.b_o, &mut o);
    let mut c = vec![0.0; hs];
    let mut tanh_c = vec![0.0; hs];
    let mut h = vec![0.0; hs];
    for k in 0..hs {
        f[k] = sigmoid_scalar(f[k]);
        i[k] = sigmoid_scalar(i[k]);
        g[k] = g[k].tanh();
        o[k] = sigmoid_scalar(o[k]);
        c[k] = f[k] * c_prev[k] + i[k] * g[k];
        tanh_c[k] = c[k].tanh();
        h[k] = o[k] * tanh_c[k];
    }
    StepCache {
        z,
        f,
        i,
        g,
        o,
        c_prev: c_prev.to_vec(),
        c,
        tanh_c,
        h,
    }
}

fn check_step_shapes(p: &LstmParams, s: &LstmState, x: &[f64]) -> Result<()> {
    if x.len() != p.input_size {
        return Err(Error::dim(
            "lstm_cell_step",
            format!(
                "input has length {}, cell expects {}",
                x.len(),
                p.input_size
            ),
        ));
    }
    if s.h.len() != p.hidden_size || s.c.len() != p.hidden_size {
        return Err(Error::dim(
            "lstm_cell_step",
            format!(
                "state lengths (h {}, c {}) do not match hidden size {}",
                s.h.len(),
                s.c.len(),
                p.hidden_size
            ),
        ));
    }
    Ok(())
}

pub fn lstm_cell_step(p: &LstmParams, s: &LstmState, x: &[f64]) -> Result<LstmState> {
    check_step_shapes(p, s, x)?;
    let cache = step_cached(p, &s.h, &s.c, x);
    Ok(LstmState {
        h: cache.h,
        c: cache.c,
    })
}

/// Runs the cell over `xs`, returning the state after each input. `s0` defaults to zeros.
pub fn lstm_forward(
    p: &LstmParams,
    s0: Option<&LstmState>,
    xs: &[Vec<f64>],
) -> Result<Vec<LstmState>> {
    if xs.is_empty() {
        return Err(Error::Domain(
            "lstm_forward needs a nonempty input sequence".into(),
        ));
    }
    let mut state = s0
        .cloned()
        .unwrap_or_else(|| LstmState::zeros(p.hidden_size));
    let mut out = Vec::with_capacity(xs.len());
    for x in xs {
        state = lstm_cell_step(p, &state, x)?;
        out.push(state.clone());
    }
    Ok(out)
}

/// Unrolled forward pass from a zero state, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct LstmTrace {
    steps: Vec<StepCache>,
}

impl LstmTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn hidden(&self, t: usize) -> &[f64] {
        &self.steps[t].h
    }

    pub fn last_hidden(&self) -> &[f64] {
        &self.steps[self.steps.len() - 1].h
    }

    /// All hidden states concatenated, `len × H`.
    pub fn hidden_flat(&self) -> Vec<f64> {
        self.steps
            .iter()
            .flat_map(|s| s.h.iter().copied())
            .collect()
    }
}

impl LstmParams {
    /// Forward over a flat input of `T × input_size` values.
    pub fn trace(&self, inputs: &[f64]) -> Result<LstmTrace> {
        let d = self.input_size;
        if inputs.is_empty() {
            return Err(Error::Domain("LSTM input sequence is empty".into()));
        }
        if d == 0 || inputs.len() % d != 0 {
            return Err(Error::dim(
                "lstm trace",
                format!(
                    "{} input values is not a multiple of input size {d}",
                    inputs.len()
                ),
            ));
        }
        let zeros = vec![0.0; self.hidden_size];
        let mut steps: Vec<StepCache> = Vec::with_capacity(inputs.len() / d);
        for x in inputs.chunks_exact(d) {
            let cache = match steps.last() {
                Some(prev) => step_cached(self, &prev.h, &prev.c, x),
                None => step_cached(self, &zeros, &zeros, x),
            };
            steps.push(cache);
        }
        Ok(LstmTrace { steps })
    }

    /// Backpropagation through time.
    ///
    /// `dh_ext` holds `∂L/∂h_t` from outside the recurrence for every step
    /// (flat, `T × H`). Parameter gradients accumulate into `grad`; when
    /// `dx` is given it receives `∂L/∂x_t` (flat, `T × D`).
    pub fn backward(
        &self,
        trace: &LstmTrace,
        dh_ext: &[f64],
        grad: &mut LstmParams,
        mut dx: Option<&mut [f64]>,
    ) {
        let hs = self.hidden_size;
        let d = self.input_size;
        debug_assert_eq!(dh_ext.len(), trace.len() * hs);
        let mut dh_next = vec![0.0; hs];
        let mut dc_next = vec![0.0; hs];
        let mut da_f = vec![0.0; hs];
        let mut da_i = vec![0.0; hs];
        let mut da_g = vec![0.0; hs];
        let mut da_o = vec![0.0; hs];
        let mut dz = vec![0.0; hs + d];
        for (t, s) in trace.steps.iter().enumerate().rev() {
            let ext = &dh_ext[t * hs..(t + 1) * hs];
            for k in 0..hs {
                let dh = ext[k] + dh_next[k];
                da_o[k] = dh * s.tanh_c[k] * s.o[k] * (1.0 - s.o[k]);
                let dc = dh * s.o[k] * (1.0 - s.tanh_c[k] * s.tanh_c[k]) + dc_next[k];
                da_f[k] = dc * s.c_prev[k] * s.f[k] * (1.0 - s.f[k]);
                da_i[k] = dc * s.g[k] * s.i[k] * (1.0 - s.i[k]);
                da_g[k] = dc * s.i[k] * (1.0 - s.g[k] * s.g[k]);
                dc_next[k] = dc * s.f[k];
            }
            grad.w_f.add_outer(&da_f, &s.z);
            grad.w_i.add_outer(&da_i, &s.z);
            grad.w_c.add_outer(&da_g, &s.z);
            grad.w_o.add_outer(&da_o, &s.z);
            for k in 0..hs {
                grad.b_f[k] += da_f[k];
                grad.b_i[k] += da_i[k];
                grad.b_c[k] += da_g[k];
                grad.b_o[k] += da_o[k];
            }
            dz.fill(0.0);
            self.w_f.add_transpose_mul(&da_f, &mut dz);
            self.w_i.add_transpose_mul(&da_i, &mut dz);
            self.w_c.add_transpose_mul(&da_g, &mut dz);
            self.w_o.add_transpose_mul(&da_o, &mut dz);
            dh_next.copy_from_slice(&dz[..hs]);
            if let Some(dx) = dx.as_deref_mut() {
                dx[t * d..(t + 1) * d].copy_from_slice(&dz[hs..]);
            }
        }
    }
}

/// Plain LSTM forecaster: predicts from the last hidden state only.
///
/// Also the error-correction network, which has the same mechanics over
/// residual windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmModel {
    pub lstm: LstmParams,
    pub head: OutputHead,
}

impl LstmModel {
    pub fn zeros(hidden_size: usize) -> Self {
        LstmModel {
            lstm: LstmParams::zeros(1, hidden_size),
            head: OutputHead::zeros(hidden_size),
        }
    }

    pub fn init<R: Rng>(hidden_size: usize, rng: &mut R) -> Self {
        LstmModel {
            lstm: LstmParams::init(1, hidden_size, rng),
            head: OutputHead::init(hidden_size, rng),
        }
    }

    pub fn predict(&self, window: &[f64]) -> Result<f64> {
        lstm_predict(&self.lstm, &self.head, window)
    }

    pub fn check(&self) -> Result<()> {
        self.lstm.validate()?;
        if self.lstm.input_size() != 1 {
            return Err(Error::dim(
                "LstmModel",
                "scalar forecaster needs input size 1",
            ));
        }
        if self.head.w.len() != self.lstm.hidden_size() {
            return Err(Error::dim(
                "LstmModel",
                format!(
                    "head width {} vs hidden size {}",
                    self.head.w.len(),
                    self.lstm.hidden_size()
                ),
            ));
        }
        Ok(())
    }

    /// Forward with cache; returns the prediction.
    pub(crate) fn trace(&self, window: &[f64]) -> Result<(f64, LstmTrace)> {
        let trace = self.lstm.trace(window)?;
        Ok((self.head.apply(trace.last_hidden()), trace))
    }

    /// Accumulates `dy · ∂prediction/∂params` into `grad`.
    pub(crate) fn backward(&self, trace: &LstmTrace, dy: f64, grad: &mut LstmModel) {
        let hs = self.lstm.hidden_size();
        let mut dh_ext = vec![0.0; trace.len() * hs];
        let last = trace.len() - 1;
        self.head.backward(
            trace.last_hidden(),
            dy,
            &mut grad.head,
            &mut dh_ext[last * hs..],
        );
        self.lstm.backward(trace, &dh_ext, &mut grad.lstm, None);
    }
}

impl Parameterized for LstmModel {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        self.lstm.visit_params(&format!("{prefix}lstm."), f);
        self.head.visit_params(&format!("{prefix}head."), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &mut [f64])) {
        self.lstm.visit_params_mut(&format!("{prefix}lstm."), f);
        self.head.visit_params_mut(&format!("{prefix}head."), f);
    }
}

/// Prediction from the last hidden state after unrolling over a scalar window.
pub fn lstm_predict(p: &LstmParams, head: &OutputHead, window: &[f64]) -> Result<f64> {
    if window.is_empty() {
        return Err(Error::Domain("lstm_predict needs a nonempty window".into()));
    }
    if p.input_size() != 1 {
        return Err(Error::dim(
            "lstm_predict",
            format!("input size {} is not 1", p.input_size()),
        ));
    }
    if head.w.len() != p.hidden_size() {
        return Err(Error::dim(
            "lstm_predict",
            format!(
                "head width {} vs hidden size {}",
                head.w.len(),
                p.hidden_size()
            ),
        ));
    }
    let trace = p.trace(window)?;
    Ok(head.apply(trace.last_hidden()))
}

/// Stack of LSTM layers; layer k+1 reads the full hidden sequence of layer k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedLstmModel {
    pub layers: Vec<LstmParams>,
    pub head: OutputHead,
}

impl StackedLstmModel {
    pub fn init<R: Rng>(hidden_size: usize, depth: usize, rng: &mut R) -> Self {
        let layers = (0..depth)
            .map(|k| LstmParams::init(if k == 0 { 1 } else { hidden_size }, hidden_size, rng))
            .collect();
        StackedLstmModel {
            layers,
            head: OutputHead::init(hidden_size, rng),
        }
    }

    pub fn zeros(hidden_size: usize, depth: usize) -> Self {
        let layers = (0..depth)
            .map(|k| LstmParams::zeros(if k == 0 { 1 } else { hidden_size }, hidden_size))
            .collect();
        StackedLstmModel {
            layers,
            head: OutputHead::zeros(hidden_size),
        }
    }

    pub fn check(&self) -> Result<()> {
        check_stack(&self.layers, &self.head)
    }

    pub fn predict(&self, window: &[f64]) -> Result<f64> {
        stacked_lstm_predict(&self.layers, &self.head, window)
    }

    pub(crate) fn trace(&self, window: &[f64]) -> Result<(f64, Vec<LstmTrace>)> {
        let mut traces: Vec<LstmTrace> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let trace = match traces.last() {
                Some(below) => layer.trace(&below.hidden_flat())?,
                None => layer.trace(window)?,
            };
            traces.push(trace);
        }
        let top = traces
            .last()
            .ok_or_else(|| Error::dim("stacked lstm", "no layers"))?;
        Ok((self.head.apply(top.last_hidden()), traces))
    }

    pub(crate) fn backward(&self, traces: &[LstmTrace], dy: f64, grad: &mut StackedLstmModel) {
        let top = traces.len() - 1;
        let steps = traces[top].len();
        let hs = self.layers[top].hidden_size();
        let mut dh_ext = vec![0.0; steps * hs];
        self.head.backward(
            traces[top].last_hidden(),
            dy,
            &mut grad.head,
            &mut dh_ext[(steps - 1) * hs..],
        );
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            if k == 0 {
                layer.backward(&traces[0], &dh_ext, &mut grad.layers[0], None);
            } else {
                let mut dx = vec![0.0; steps * layer.input_size()];
                layer.backward(&traces[k], &dh_ext, &mut grad.layers[k], Some(&mut dx));
                dh_ext = dx;
            }
        }
    }
}

impl Parameterized for StackedLstmModel {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        for (k, layer) in self.layers.iter().enumerate() {
            layer.visit_params(&format!("{prefix}layer{k}."), f);
        }
        self.head.visit_params(&format!("{prefix}head."), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &mut [f64])) {
        for (k, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params_mut(&format!("{prefix}layer{k}."), f);
        }
        self.head.visit_params_mut(&format!("{prefix}head."), f);
    }
}

fn check_stack(layers: &[LstmParams], head: &OutputHead) -> Result<()> {
    let first = layers
        .first()
        .ok_or_else(|| Error::dim("stacked_lstm_predict", "stack has no layers"))?;
    if first.input_size() != 1 {
        return Err(Error::dim(
            "stacked_lstm_predict",
            format!("layer 0 input size {} is not 1", first.input_size()),
        ));
    }
    for (k, pair) in layers.windows(2).enumerate() {
        pair[0].validate()?;
        if pair[1].input_size() != pair[0].hidden_size() {
            return Err(Error::dim(
                "stacked_lstm_predict",
                format!(
                    "layer {} input size {} != layer {k} hidden size {}",
                    k + 1,
                    pair[1].input_size(),
                    pair[0].hidden_size()
                ),
            ));
        }
    }
    let top = &layers[layers.len() - 1];
    top.validate()?;
    if head.w.len() != top.hidden_size() {
        return Err(Error::dim(
            "stacked_lstm_predict",
            format!(
                "head width {} vs top hidden size {}",
                head.w.len(),
                top.hidden_size()
            ),
        ));
    }
    Ok(())
}

pub fn stacked_lstm_predict(
    layers: &[LstmParams],
    head: &OutputHead,
    window: &[f64],
) -> Result<f64> {
    check_stack(layers, head)?;
    if window.is_empty() {
        return Err(Error::Domain(
            "stacked_lstm_predict needs a nonempty window".into(),
        ));
    }
    let mut inputs = window.to_vec();
    for layer in layers {
        inputs = layer.trace(&inputs)?.hidden_flat();
    }
    let hs = layers[layers.len() - 1].hidden_size();
    Ok(head.apply(&inputs[inputs.len() - hs..]))
}
