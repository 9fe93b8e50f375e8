//! Difference-attention LSTM.
//!
//! Each step's hidden state is extended with the squared first differences
//! preceding that step, `h̃_t = [d_t; h_t]`. An additive score
//! `v_aᵀ tanh(W_a h̃_t + b_a)` is softmax-normalised over the window, and the
//! head reads the attention-weighted sum `θ = Σ α_t h̃_t`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::forecaster::Forecaster;
use crate::lstm::{LstmParams, LstmTrace, OutputHead};
use crate::numerics::{dot, softmax, visit_matrix, visit_matrix_mut, Matrix, Parameterized};

/// `((x_{t-1} − x_{t-2})², (x_t − x_{t-1})²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffFeature(pub [f64; 2]);

pub const DIFF_WIDTH: usize = 2;

/// Difference features for every window position. `lead_in` holds the two
/// observations just before `window[0]`, oldest first.
pub fn difference_features(lead_in: [f64; 2], window: &[f64]) -> Result<Vec<DiffFeature>> {
    if window.is_empty() {
        return Err(Error::Domain(
            "difference_features needs a nonempty window".into(),
        ));
    }
    let mut prev2 = lead_in[0];
    let mut prev1 = lead_in[1];
    Ok(window
        .iter()
        .map(|&x| {
            let d = DiffFeature([(prev1 - prev2).powi(2), (x - prev1).powi(2)]);
            prev2 = prev1;
            prev1 = x;
            d
        })
        .collect())
}

/// `[d; h]`, difference feature first.
pub fn concat_hidden(h: &[f64], d: &DiffFeature) -> Vec<f64> {
    let mut out = Vec::with_capacity(h.len() + DIFF_WIDTH);
    out.extend_from_slice(&d.0);
    out.extend_from_slice(h);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_a: Matrix,
    pub v_a: Vec<f64>,
    pub b_a: Vec<f64>,
}

impl AttentionParams {
    pub fn zeros(feature_width: usize, attention_width: usize) -> Self {
        AttentionParams {
            w_a: Matrix::zeros(attention_width, feature_width),
            v_a: vec![0.0; attention_width],
            b_a: vec![0.0; attention_width],
        }
    }

    pub fn init<R: Rng>(feature_width: usize, attention_width: usize, rng: &mut R) -> Self {
        let w_bound = 1.0 / (feature_width as f64).sqrt();
        let v_bound = 1.0 / (attention_width as f64).sqrt();
        AttentionParams {
            w_a: Matrix::uniform(attention_width, feature_width, w_bound, rng),
            v_a: (0..attention_width)
                .map(|_| rng.gen_range(-v_bound..=v_bound))
                .collect(),
            b_a: vec![0.0; attention_width],
        }
    }

    pub fn width(&self) -> usize {
        self.v_a.len()
    }

    fn check(&self, feature_width: usize) -> Result<()> {
        let a = self.v_a.len();
        if self.w_a.shape() != [a, feature_width] || self.b_a.len() != a {
            return Err(Error::dim(
                "attention",
                format!(
                    "W_a {:?}, v_a {}, b_a {} for feature width {feature_width}",
                    self.w_a.shape(),
                    a,
                    self.b_a.len()
                ),
            ));
        }
        Ok(())
    }

    /// Score for one concatenated feature; also returns `tanh(W_a h̃ + b_a)`.
    fn score(&self, ht: &[f64]) -> (f64, Vec<f64>) {
        let mut act = vec![0.0; self.v_a.len()];
        self.w_a.affine_into(ht, &self.b_a, &mut act);
        act.iter_mut().for_each(|v| *v = v.tanh());
        (dot(&self.v_a, &act), act)
    }
}

impl Parameterized for AttentionParams {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        visit_matrix(prefix, "w_a", &self.w_a, f);
        f(format!("{prefix}v_a"), &[self.v_a.len()], &self.v_a);
        f(format!("{prefix}b_a"), &[self.b_a.len()], &self.b_a);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &mut [f64])) {
        visit_matrix_mut(prefix, "w_a", &mut self.w_a, f);
        let a = [self.v_a.len()];
        f(format!("{prefix}v_a"), &a, &mut self.v_a);
        f(format!("{prefix}b_a"), &a, &mut self.b_a);
    }
}

/// Softmax-normalised attention over concatenated features.
pub fn attention_weights(attn: &AttentionParams, hts: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = hts
        .first()
        .ok_or_else(|| Error::Domain("attention over an empty sequence".into()))?;
    attn.check(first.len())?;
    if let Some(bad) = hts.iter().position(|h| h.len() != first.len()) {
        return Err(Error::dim(
            "attention_weights",
            format!("step {bad} has a different width"),
        ));
    }
    let scores: Vec<f64> = hts.iter().map(|h| attn.score(h).0).collect();
    softmax(&scores)
}

/// `θ = Σ_k weights[k] · hts[k]`.
pub fn context_vector(weights: &[f64], hts: &[Vec<f64>]) -> Result<Vec<f64>> {
    if weights.len() != hts.len() {
        return Err(Error::dim(
            "context_vector",
            format!("{} weights for {} steps", weights.len(), hts.len()),
        ));
    }
    let width = hts.first().map_or(0, |h| h.len());
    let mut theta = vec![0.0; width];
    for (&w, h) in weights.iter().zip(hts) {
        if h.len() != width {
            return Err(Error::dim("context_vector", "ragged features"));
        }
        for (t, &v) in theta.iter_mut().zip(h) {
            *t += w * v;
        }
    }
    Ok(theta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaLstmModel {
    pub lstm: LstmParams,
    pub attn: AttentionParams,
    pub head: OutputHead,
}

impl DaLstmModel {
    pub fn zeros(hidden_size: usize, attention_width: usize) -> Self {
        DaLstmModel {
            lstm: LstmParams::zeros(1, hidden_size),
            attn: AttentionParams::zeros(hidden_size + DIFF_WIDTH, attention_width),
            head: OutputHead::zeros(hidden_size + DIFF_WIDTH),
        }
    }

    pub fn init<R: Rng>(hidden_size: usize, attention_width: usize, rng: &mut R) -> Self {
        DaLstmModel {
            lstm: LstmParams::init(1, hidden_size, rng),
            attn: AttentionParams::init(hidden_size + DIFF_WIDTH, attention_width, rng),
            head: OutputHead::init(hidden_size + DIFF_WIDTH, rng),
        }
    }

    pub fn check(&self) -> Result<()> {
        self.lstm.validate()?;
        if self.lstm.input_size() != 1 {
            return Err(Error::dim("DaLstmModel", "LSTM input size must be 1"));
        }
        let width = self.lstm.hidden_size() + DIFF_WIDTH;
        self.attn.check(width)?;
        if self.head.w.len() != width {
            return Err(Error::dim(
                "DaLstmModel",
                format!("head width {} but θ has width {width}", self.head.w.len()),
            ));
        }
        Ok(())
    }
}

impl Parameterized for DaLstmModel {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        self.lstm.visit_params(&format!("{prefix}lstm."), f);
        self.attn.visit_params(&format!("{prefix}attn."), f);
        self.head.visit_params(&format!("{prefix}head."), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &mut [f64])) {
        self.lstm.visit_params_mut(&format!("{prefix}lstm."), f);
        self.attn.visit_params_mut(&format!("{prefix}attn."), f);
        self.head.visit_params_mut(&format!("{prefix}head."), f);
    }
}

/// Forward-pass intermediates of [`da_forward`].
#[derive(Debug, Clone)]
pub struct DaTrace {
    lstm: LstmTrace,
    hts: Vec<Vec<f64>>,
    acts: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    theta: Vec<f64>,
}

impl DaTrace {
    pub fn weights(&self) -> &[f64] {
        &self.alpha
    }

    pub fn context(&self) -> &[f64] {
        &self.theta
    }
}

impl Forecaster for DaLstmModel {
    type Trace = DaTrace;

    fn trace(&self, lead_in: [f64; 2], window: &[f64]) -> Result<(f64, DaTrace)> {
        self.check()?;
        let diffs = difference_features(lead_in, window)?;
        let lstm = self.lstm.trace(window)?;
        let hts: Vec<Vec<f64>> = diffs
            .iter()
            .enumerate()
            .map(|(t, d)| concat_hidden(lstm.hidden(t), d))
            .collect();
        let (scores, acts): (Vec<f64>, Vec<Vec<f64>>) =
            hts.iter().map(|h| self.attn.score(h)).unzip();
        let alpha = softmax(&scores)?;
        let theta = context_vector(&alpha, &hts)?;
        let y = self.head.apply(&theta);
        Ok((
            y,
            DaTrace {
                lstm,
                hts,
                acts,
                alpha,
                theta,
            },
        ))
    }

    fn backward(&self, tr: &DaTrace, dy: f64, grad: &mut DaLstmModel) {
        let hs = self.lstm.hidden_size();
        let width = hs + DIFF_WIDTH;
        let steps = tr.hts.len();
        let mut dtheta = vec![0.0; width];
        self.head
            .backward(&tr.theta, dy, &mut grad.head, &mut dtheta);

        // θ = Σ α_k h̃_k
        let dalpha: Vec<f64> = tr.hts.iter().map(|h| dot(&dtheta, h)).collect();
        let mean = dot(&tr.alpha, &dalpha);
        let mut dh_ext = vec![0.0; steps * hs];
        let mut dht = vec![0.0; width];
        let mut du = vec![0.0; self.attn.width()];
        for k in 0..steps {
            let ds = tr.alpha[k] * (dalpha[k] - mean);
            for (j, d) in dht.iter_mut().enumerate() {
                *d = tr.alpha[k] * dtheta[j];
            }
            // score = v_a · tanh(W_a h̃ + b_a)
            let act = &tr.acts[k];
            for a in 0..du.len() {
                grad.attn.v_a[a] += ds * act[a];
                du[a] = ds * self.attn.v_a[a] * (1.0 - act[a] * act[a]);
                grad.attn.b_a[a] += du[a];
            }
            grad.attn.w_a.add_outer(&du, &tr.hts[k]);
            self.attn.w_a.add_transpose_mul(&du, &mut dht);
            dh_ext[k * hs..(k + 1) * hs].copy_from_slice(&dht[DIFF_WIDTH..]);
        }
        self.lstm.backward(&tr.lstm, &dh_ext, &mut grad.lstm, None);
    }
}

/// One-step-ahead DA-LSTM prediction.
pub fn da_forward(m: &DaLstmModel, lead_in: [f64; 2], window: &[f64]) -> Result<f64> {
    m.forecast(lead_in, window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_gradient, gradient_check, GradientBundle};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn difference_feature_examples() {
        let d = difference_features([5.0, 5.0], &[5.0, 5.0, 5.0]).unwrap();
        assert!(d.iter().all(|f| f.0 == [0.0, 0.0]));
        let d = difference_features([1.0, 2.0], &[4.0, 7.0]).unwrap();
        assert_eq!(d[0].0, [1.0, 4.0]);
        assert_eq!(d[1].0, [4.0, 9.0]);
        let x = [0.3, -1.2, 2.5, 0.1];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(
            difference_features([0.5, 1.0], &x).unwrap(),
            difference_features([-0.5, -1.0], &neg).unwrap()
        );
        assert!(difference_features([0.0, 0.0], &[]).is_err());
    }

    #[test]
    fn concat_examples() {
        let d = DiffFeature([0.0, 0.0]);
        assert_eq!(concat_hidden(&[1.0, 2.0], &d), vec![0.0, 0.0, 1.0, 2.0]);
        assert_eq!(concat_hidden(&[0.0; 100], &d).len(), 102);
        let d = DiffFeature([0.25, 9.0]);
        assert_eq!(concat_hidden(&[3.0], &d)[..2], d.0);
    }

    #[test]
    fn attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let attn = AttentionParams::init(4, 3, &mut rng);
        let same = vec![vec![0.1, 0.2, 0.3, 0.4]; 5];
        for w in attention_weights(&attn, &same).unwrap() {
            assert!((w - 0.2).abs() < 1e-15);
        }
        let zero = AttentionParams::zeros(4, 3);
        let varied: Vec<Vec<f64>> = (0..4)
            .map(|k| vec![k as f64, -1.0, 2.0 * k as f64, 0.5])
            .collect();
        assert!(attention_weights(&zero, &varied)
            .unwrap()
            .iter()
            .all(|&w| w == 0.25));

        // score_k = v · tanh(W h̃_k): W picks coordinate 0, v scales so scores are (0, ln 2).
        let mut attn = AttentionParams::zeros(2, 1);
        attn.w_a.set(0, 0, 1.0);
        let t = 0.5f64;
        attn.v_a[0] = 2f64.ln() / t.tanh();
        let w = attention_weights(&attn, &[vec![0.0, 3.0], vec![t, -1.0]]).unwrap();
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-12 && (w[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!(attention_weights(&attn, &[]).is_err());
    }

    #[test]
    fn context_examples() {
        let h = vec![vec![0.3, -0.7, 1.5]];
        assert_eq!(context_vector(&[1.0], &h).unwrap(), h[0]);
        let hs = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]];
        assert_eq!(context_vector(&[1.0, 0.0], &hs).unwrap(), hs[0]);
        assert_eq!(
            context_vector(&[0.25, 0.75], &hs).unwrap(),
            vec![0.25, 0.75, 0.0, 0.0]
        );
        assert!(matches!(
            context_vector(&[1.0], &hs),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zero_model_predicts_bias() {
        let mut m = DaLstmModel::zeros(3, 3);
        m.head.b = 0.42;
        assert_eq!(da_forward(&m, [2.0, 2.0], &[2.0, 2.0, 2.0]).unwrap(), 0.42);
    }

    #[test]
    fn single_step_ignores_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = DaLstmModel::init(3, 3, &mut rng);
        let (y, tr) = m.trace([0.2, 0.5], &[0.9]).unwrap();
        assert_eq!(tr.weights(), &[1.0]);
        let expected = m.head.apply(&tr.hts[0]);
        assert_eq!(y, expected);
    }

    #[test]
    fn da_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = DaLstmModel::init(4, 3, &mut rng);
        let window: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lead_in = [0.1, -0.4];
        let target = 0.25;
        let (y, tr) = m.trace(lead_in, &window).unwrap();
        let mut grad = m.zeroed();
        m.backward(&tr, 2.0 * (y - target), &mut grad);
        let numeric = finite_diff_gradient(
            |p: &DaLstmModel| (target - da_forward(p, lead_in, &window).unwrap()).powi(2),
            &m,
            1e-5,
        )
        .unwrap();
        let err = gradient_check(&GradientBundle::of(&grad), &numeric).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn mismatched_head_is_rejected() {
        let mut m = DaLstmModel::zeros(3, 2);
        m.head = OutputHead::zeros(3);
        assert!(da_forward(&m, [0.0, 0.0], &[1.0]).is_err());
    }
}
