//! Adam, the additive cascade, and the three-phase training schedule:
//! fit the base forecaster, fit the error-correction LSTM on the base
//! model's residuals, then fine-tune both on the combined output.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::DaLstmModel;
use crate::data::{sample_at, ScalerParams, TimeSeries, WindowSample};
use crate::error::{Error, Result};
use crate::error_correction::{build_error_series, ec_forward, EcLstmModel, ErrorSeries};
use crate::forecaster::Forecaster;
use crate::numerics::{GradientBundle, Parameterized};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments, shape-matched to the parameters being optimized.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: GradientBundle,
    pub v: GradientBundle,
    pub t: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new<P: Parameterized + ?Sized>(params: &P, hyper: AdamHyper) -> Self {
        AdamState {
            m: GradientBundle::zeros_like(params),
            v: GradientBundle::zeros_like(params),
            t: 0,
            hyper,
        }
    }

    /// One update using gradients held in a parameter-shaped value.
    pub fn step<P: Parameterized>(&mut self, params: &mut P, grads: &P) {
        let mut flat = Vec::with_capacity(self.m.total_values());
        grads.visit_params("", &mut |_, _, g| flat.extend_from_slice(g));
        self.apply(params, &flat);
    }

    fn apply<P: Parameterized + ?Sized>(&mut self, params: &mut P, grads: &[f64]) {
        self.t += 1;
        let AdamHyper {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.hyper;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (ms, vs) = (self.m.arrays_mut(), self.v.arrays_mut());
        let mut offset = 0;
        let mut k = 0;
        params.visit_params_mut("", &mut |name, _, values| {
            debug_assert_eq!(ms[k].name, name);
            let (m, v) = (&mut ms[k].values, &mut vs[k].values);
            for (j, p) in values.iter_mut().enumerate() {
                let g = grads[offset + j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
            offset += values.len();
            k += 1;
        });
    }
}

/// Adam update of `params` from a named gradient bundle.
pub fn adam_step<P: Parameterized + ?Sized>(
    params: &mut P,
    grads: &GradientBundle,
    st: &mut AdamState,
) -> Result<()> {
    grads
        .check_same_layout(&st.m)
        .map_err(|e| Error::dim("adam_step", format!("gradient vs optimizer state: {e}")))?;
    GradientBundle::of(params)
        .check_same_layout(grads)
        .map_err(|e| Error::dim("adam_step", format!("parameters vs gradient: {e}")))?;
    st.apply(params, &grads.flatten());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub window_len: usize,
    pub hidden_size: usize,
    pub ec_hidden_size: usize,
    /// Attention width; `None` means the hidden size.
    pub attention_width: Option<usize>,
    pub stacked_layers: usize,
    /// Base-model epochs; single-phase models train for this many.
    pub epochs_da: usize,
    pub epochs_ec: usize,
    pub epochs_joint: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub split: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let h = AdamHyper::default();
        TrainConfig {
            window_len: 40,
            hidden_size: 100,
            ec_hidden_size: 100,
            attention_width: None,
            stacked_layers: 3,
            epochs_da: 200,
            epochs_ec: 200,
            epochs_joint: 100,
            lr: h.lr,
            beta1: h.beta1,
            beta2: h.beta2,
            epsilon: h.epsilon,
            seed: 42,
            split: 0.8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.window_len == 0 {
            return bad("window_len must be at least 1".into());
        }
        if self.hidden_size == 0 || self.ec_hidden_size == 0 || self.attention_width == Some(0) {
            return bad("hidden sizes and attention width must be at least 1".into());
        }
        if self.stacked_layers == 0 {
            return bad("stacked_layers must be at least 1".into());
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return bad(format!("split must lie in (0, 1), got {}", self.split));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.epsilon > 0.0) {
            return bad("lr and epsilon must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn attention_width(&self) -> usize {
        self.attention_width.unwrap_or(self.hidden_size)
    }
}

/// Training phase, also the `phase` column of loss-history files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Base,
    Ec,
    Joint,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Base => "base",
            Phase::Ec => "ec",
            Phase::Joint => "joint",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Phase::Base => 1,
            Phase::Ec => 2,
            Phase::Joint => 3,
        }
    }
}

/// Per-epoch mean losses of each phase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossHistory {
    pub base: Vec<f64>,
    pub ec: Vec<f64>,
    pub joint: Vec<f64>,
}

impl LossHistory {
    pub fn rows(&self) -> impl Iterator<Item = (Phase, usize, f64)> + '_ {
        [
            (Phase::Base, &self.base),
            (Phase::Ec, &self.ec),
            (Phase::Joint, &self.joint),
        ]
        .into_iter()
        .flat_map(|(phase, h)| h.iter().enumerate().map(move |(e, &l)| (phase, e + 1, l)))
    }

    /// `phase,epoch,mean_loss` CSV text.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,epoch,mean_loss\n");
        for (phase, epoch, loss) in self.rows() {
            out.push_str(&format!("{},{epoch},{loss}\n", phase.label()));
        }
        out
    }
}

fn shuffler(seed: u64, phase: Phase) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(phase.stream());
    rng
}

/// Per-sample Adam on squared one-step error, samples visited in a seeded
/// shuffled order each epoch. Returns the mean loss of every epoch.
pub fn fit_forecaster<F: Forecaster>(
    mut model: F,
    samples: &[WindowSample],
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<(F, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    let mut adam = AdamState::new(&model, cfg.adam());
    let mut rng = shuffler(cfg.seed, Phase::Base);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut grad = model.zeroed();
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &k in &order {
            let s = &samples[k];
            let (y, trace) = model.trace(s.lead_in, &s.input)?;
            let err = y - s.target;
            total += err * err;
            grad.fill_zero();
            model.backward(&trace, 2.0 * err, &mut grad);
            adam.step(&mut model, &grad);
        }
        history.push(total / samples.len() as f64);
    }
    Ok((model, history))
}

/// Base-model phase for the difference-attention network.
pub fn pretrain_da(
    model: DaLstmModel,
    samples: &[WindowSample],
    cfg: &TrainConfig,
) -> Result<(DaLstmModel, Vec<f64>)> {
    model.check()?;
    fit_forecaster(model, samples, cfg.epochs_da, cfg)
}

/// One residual-prediction example: `e_{T-W..T}` → `e_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSample {
    pub window: Vec<f64>,
    pub target: f64,
    pub index: usize,
}

/// Residual samples for every target in `targets` with a full residual history.
pub fn residual_samples(
    errors: &ErrorSeries,
    window_len: usize,
    targets: Range<usize>,
) -> Vec<ResidualSample> {
    targets
        .filter_map(|t| {
            let window = errors.window_before(t, window_len)?;
            Some(ResidualSample {
                window: window.to_vec(),
                target: errors.at(t)?,
                index: t,
            })
        })
        .collect()
}

/// Error-correction phase: residuals of `base` over `series[..targets.end]`,
/// then Adam on `(e_T − f_EC(e_{T-W..T}))²` for every target in `targets`.
pub fn pretrain_ec<B: Forecaster>(
    ec: EcLstmModel,
    base: &B,
    series: &[f64],
    targets: Range<usize>,
    cfg: &TrainConfig,
) -> Result<(EcLstmModel, Vec<f64>)> {
    let end = targets.end.min(series.len());
    let errors = build_error_series(base, &series[..end], cfg.window_len)?;
    pretrain_ec_on(ec, base, &errors, targets, cfg)
}

/// As [`pretrain_ec`] with a precomputed residual series, which must come from `base`.
pub fn pretrain_ec_on<B: Forecaster>(
    mut ec: EcLstmModel,
    base: &B,
    errors: &ErrorSeries,
    targets: Range<usize>,
    cfg: &TrainConfig,
) -> Result<(EcLstmModel, Vec<f64>)> {
    errors.ensure_origin(base)?;
    ec.check()?;
    let samples = residual_samples(errors, cfg.window_len, targets.clone());
    if samples.is_empty() {
        return Err(Error::Domain(format!(
            "no target in {targets:?} has {} preceding residuals; series too short for error correction",
            cfg.window_len
        )));
    }
    let mut adam = AdamState::new(&ec, cfg.adam());
    let mut rng = shuffler(cfg.seed, Phase::Ec);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut grad = ec.zeroed();
    let mut history = Vec::with_capacity(cfg.epochs_ec);
    for _ in 0..cfg.epochs_ec {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &k in &order {
            let s = &samples[k];
            let (y, trace) = ec.trace(&s.window)?;
            let err = y - s.target;
            total += err * err;
            grad.fill_zero();
            ec.backward(&trace, 2.0 * err, &mut grad);
            adam.step(&mut ec, &grad);
        }
        history.push(total / samples.len() as f64);
    }
    Ok((ec, history))
}

/// Additive cascade: base forecast plus predicted base residual.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel<B> {
    pub base: B,
    pub ec: EcLstmModel,
    pub window_len: usize,
}

/// Difference-attention base with error correction.
pub type DaecModel = CascadeModel<DaLstmModel>;

impl<B: Forecaster> CascadeModel<B> {
    pub fn new(base: B, ec: EcLstmModel, window_len: usize) -> Result<Self> {
        let m = CascadeModel {
            base,
            ec,
            window_len,
        };
        m.check()?;
        Ok(m)
    }

    pub fn check(&self) -> Result<()> {
        if self.window_len == 0 {
            return Err(Error::Config("cascade window length is 0".into()));
        }
        self.ec.check().map_err(|e| {
            Error::Config(format!("error-correction network is not initialized: {e}"))
        })?;
        if self.base.param_count() == 0 {
            return Err(Error::Config("base model has no parameters".into()));
        }
        Ok(())
    }

    /// `f_base(window) + f_EC(error_window)`.
    pub fn predict(&self, lead_in: [f64; 2], window: &[f64], error_window: &[f64]) -> Result<f64> {
        for (what, len) in [
            ("window", window.len()),
            ("error window", error_window.len()),
        ] {
            if len != self.window_len {
                return Err(Error::dim(
                    "cascade predict",
                    format!("{what} has length {len}, model expects {}", self.window_len),
                ));
            }
        }
        Ok(self.base.forecast(lead_in, window)? + ec_forward(&self.ec, error_window)?)
    }

    /// Squared error of the combined output and its gradient for both
    /// submodels, with `error_window` treated as a constant input.
    pub fn joint_loss_grad(
        &self,
        lead_in: [f64; 2],
        window: &[f64],
        error_window: &[f64],
        target: f64,
        grad: &mut Self,
    ) -> Result<f64> {
        let (yb, tb) = self.base.trace(lead_in, window)?;
        let (ye, te) = self.ec.trace(error_window)?;
        let err = yb + ye - target;
        let dy = 2.0 * err;
        self.base.backward(&tb, dy, &mut grad.base);
        self.ec.backward(&te, dy, &mut grad.ec);
        Ok(err * err)
    }
}

impl<B: Forecaster> Parameterized for CascadeModel<B> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        self.base.visit_params(&format!("{prefix}base."), f);
        self.ec.visit_params(&format!("{prefix}ec."), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &mut [f64])) {
        self.base.visit_params_mut(&format!("{prefix}base."), f);
        self.ec.visit_params_mut(&format!("{prefix}ec."), f);
    }
}

pub fn daec_predict(
    m: &DaecModel,
    lead_in: [f64; 2],
    window: &[f64],
    error_window: &[f64],
) -> Result<f64> {
    m.predict(lead_in, window, error_window)
}

/// Joint phase on targets in `targets`.
///
/// Every epoch recomputes the residual series from the current base
/// parameters. Those residuals feed the error-correction network as
/// constants: the base model is trained only through its own term of the sum.
pub fn joint_finetune<B: Forecaster>(
    mut m: CascadeModel<B>,
    series: &[f64],
    targets: Range<usize>,
    cfg: &TrainConfig,
) -> Result<(CascadeModel<B>, Vec<f64>)> {
    m.check()?;
    if m.window_len != cfg.window_len {
        return Err(Error::Config(format!(
            "model window {} differs from configured window {}",
            m.window_len, cfg.window_len
        )));
    }
    let w = m.window_len;
    let end = targets.end.min(series.len());
    let targets: Vec<usize> = (targets.start.max(2 * w + 2)..end).collect();
    if cfg.epochs_joint > 0 && targets.is_empty() {
        return Err(Error::Domain(
            "no joint-training target has a full residual history".into(),
        ));
    }
    let mut adam = AdamState::new(&m, cfg.adam());
    let mut rng = shuffler(cfg.seed, Phase::Joint);
    let mut grad = m.clone();
    let mut history = Vec::with_capacity(cfg.epochs_joint);
    for _ in 0..cfg.epochs_joint {
        let errors = build_error_series(&m.base, &series[..end], w)?;
        let mut order = targets.clone();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &t in &order {
            let s = sample_at(series, w, t);
            let ew = errors
                .window_before(t, w)
                .ok_or_else(|| Error::Domain(format!("no residual history for target {t}")))?
                .to_vec();
            grad.fill_zero();
            total += m.joint_loss_grad(s.lead_in, &s.input, &ew, s.target, &mut grad)?;
            adam.step(&mut m, &grad);
        }
        history.push(total / targets.len() as f64);
    }
    Ok((m, history))
}

/// Scaled series with a chronological split over window targets.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub raw: Vec<f64>,
    pub scaled: Vec<f64>,
    pub scaler: ScalerParams,
    pub window_len: usize,
    pub train_targets: Range<usize>,
    pub test_targets: Range<usize>,
}

impl PreparedData {
    /// Splits the window targets chronologically and fits the scaler on every
    /// value the training windows touch.
    pub fn new(series: &TimeSeries, window_len: usize, split: f64) -> Result<Self> {
        let samples = crate::data::make_windows(&series.values, window_len)?;
        let k = crate::data::train_count(samples.len(), split)?;
        let first = window_len + 2;
        let boundary = first + k;
        let scaler = ScalerParams::fit(&series.values[..boundary.max(first)])?;
        Self::with_scaler(series, window_len, split, scaler)
    }

    /// Same split, with a scaler fitted elsewhere (e.g. loaded from a checkpoint).
    pub fn with_scaler(
        series: &TimeSeries,
        window_len: usize,
        split: f64,
        scaler: ScalerParams,
    ) -> Result<Self> {
        let samples = crate::data::make_windows(&series.values, window_len)?;
        let k = crate::data::train_count(samples.len(), split)?;
        let first = window_len + 2;
        Ok(PreparedData {
            raw: series.values.clone(),
            scaled: scaler.apply_all(&series.values),
            scaler,
            window_len,
            train_targets: first..first + k,
            test_targets: first + k..series.len(),
        })
    }

    pub fn samples(&self, targets: Range<usize>) -> Vec<WindowSample> {
        targets
            .map(|t| sample_at(&self.scaled, self.window_len, t))
            .collect()
    }

    /// Targets with a full residual history, as cascades require.
    pub fn cascade_targets(&self, targets: Range<usize>) -> Range<usize> {
        targets.start.max(2 * self.window_len + 2)..targets.end
    }
}

/// Runs base pretraining, residual pretraining, and joint fine-tuning in order.
pub fn train_cascade<B: Forecaster>(
    base: B,
    ec: EcLstmModel,
    data: &PreparedData,
    cfg: &TrainConfig,
) -> Result<(CascadeModel<B>, LossHistory)> {
    cfg.validate()?;
    let train = data.samples(data.train_targets.clone());
    let (base, h) = fit_forecaster(base, &train, cfg.epochs_da, cfg)?;
    finish_cascade(base, h, ec, data, cfg)
}

/// The error-correction and joint phases after base pretraining, whose
/// per-epoch losses are `base_history`.
pub fn finish_cascade<B: Forecaster>(
    base: B,
    base_history: Vec<f64>,
    ec: EcLstmModel,
    data: &PreparedData,
    cfg: &TrainConfig,
) -> Result<(CascadeModel<B>, LossHistory)> {
    cfg.validate()?;
    let mut history = LossHistory {
        base: base_history,
        ..LossHistory::default()
    };
    let ec_targets = data.cascade_targets(data.train_targets.clone());
    let ec = if cfg.epochs_ec > 0 {
        let (ec, h) = pretrain_ec(ec, &base, &data.scaled, ec_targets.clone(), cfg)?;
        history.ec = h;
        ec
    } else {
        ec
    };
    let model = CascadeModel::new(base, ec, cfg.window_len)?;
    let (model, h) = joint_finetune(model, &data.scaled, ec_targets, cfg)?;
    history.joint = h;
    Ok((model, history))
}

/// Seeded initial DAEC model.
pub fn init_daec(cfg: &TrainConfig) -> DaecModel {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let da = DaLstmModel::init(cfg.hidden_size, cfg.attention_width(), &mut rng);
    let ec = EcLstmModel::init(cfg.ec_hidden_size, &mut rng);
    CascadeModel {
        base: da,
        ec,
        window_len: cfg.window_len,
    }
}

/// Full three-phase training of a DAEC model from its seeded initialization.
pub fn train_daec(data: &PreparedData, cfg: &TrainConfig) -> Result<(DaecModel, LossHistory)> {
    let init = init_daec(cfg);
    train_cascade(init.base, init.ec, data, cfg)
}

/// Predictions (scaled units) of a single forecaster at each target.
pub fn forecast_targets<F: Forecaster>(
    model: &F,
    scaled: &[f64],
    window_len: usize,
    targets: Range<usize>,
) -> Result<Vec<f64>> {
    targets
        .map(|t| {
            let s = sample_at(scaled, window_len, t);
            model.forecast(s.lead_in, &s.input)
        })
        .collect()
}

impl<B: Forecaster> CascadeModel<B> {
    /// Predictions (scaled units) at each target, residuals from the current base.
    pub fn forecast_targets(&self, scaled: &[f64], targets: Range<usize>) -> Result<Vec<f64>> {
        let w = self.window_len;
        if targets.start < 2 * w + 2 {
            return Err(Error::Domain(format!(
                "cascade predictions need targets at index {} or later, got {}",
                2 * w + 2,
                targets.start
            )));
        }
        let errors = build_error_series(&self.base, &scaled[..targets.end], w)?;
        targets
            .map(|t| {
                let s = sample_at(scaled, w, t);
                let ew = errors
                    .window_before(t, w)
                    .ok_or_else(|| Error::Domain(format!("no residual history for target {t}")))?;
                self.predict(s.lead_in, &s.input, ew)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::da_forward;
    use crate::data::{generate_synthetic, GeneratorSpec, SeriesKind};
    use crate::lstm::LstmModel;
    use crate::numerics::{finite_diff_gradient, gradient_check, NamedArray};
    use rand::Rng;

    fn scalar_bundle(name: &str, v: f64) -> GradientBundle {
        GradientBundle::new(vec![NamedArray {
            name: name.into(),
            shape: vec![1],
            values: vec![v],
        }])
        .unwrap()
    }

    #[derive(Clone, Debug)]
    struct P(f64);
    impl Parameterized for P {
        fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
            f(format!("{prefix}p"), &[1], std::slice::from_ref(&self.0));
        }
        fn visit_params_mut(
            &mut self,
            prefix: &str,
            f: &mut dyn FnMut(String, &[usize], &mut [f64]),
        ) {
            f(
                format!("{prefix}p"),
                &[1],
                std::slice::from_mut(&mut self.0),
            );
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = P(1.5);
        let mut st = AdamState::new(&p, AdamHyper::default());
        adam_step(&mut p, &scalar_bundle("p", 0.0), &mut st).unwrap();
        assert_eq!(p.0, 1.5);
        assert_eq!(st.t, 1);
        // also with nonzero history
        adam_step(&mut p, &scalar_bundle("p", 3.0), &mut st).unwrap();
        let before = p.0;
        let mut fresh_moments = st.clone();
        fresh_moments.m.arrays_mut()[0].values[0] = 0.0;
        fresh_moments.v.arrays_mut()[0].values[0] = 0.4;
        adam_step(&mut p, &scalar_bundle("p", 0.0), &mut fresh_moments).unwrap();
        assert_eq!(p.0, before);
    }

    #[test]
    fn adam_first_step_is_bias_corrected() {
        let mut p = P(0.0);
        let mut st = AdamState::new(&p, AdamHyper::default());
        adam_step(&mut p, &scalar_bundle("p", 2.0), &mut st).unwrap();
        let expected = -0.001 * (2.0 / (2.0 + 1e-8));
        assert!((p.0 - expected).abs() < 1e-18, "{}", p.0);
        let raw_m = st.m.arrays()[0].values[0];
        assert!((raw_m - 0.2).abs() < 1e-15);
        assert!((raw_m / (1.0 - 0.9) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn adam_rejects_mismatched_bundles() {
        let mut p = P(0.0);
        let mut st = AdamState::new(&p, AdamHyper::default());
        assert!(matches!(
            adam_step(&mut p, &scalar_bundle("q", 1.0), &mut st),
            Err(Error::Dimension { .. })
        ));
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            window_len: 5,
            hidden_size: 4,
            ec_hidden_size: 4,
            epochs_da: 3,
            epochs_ec: 3,
            epochs_joint: 2,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    fn sine_data(len: usize, w: usize) -> PreparedData {
        let values: Vec<f64> = (0..len).map(|i| 20.0 + (i as f64 * 0.2).sin()).collect();
        PreparedData::new(&TimeSeries::new("sine", values).unwrap(), w, 0.8).unwrap()
    }

    #[test]
    fn cascade_prediction_is_the_sum() {
        let cfg = tiny_cfg();
        let mut m = init_daec(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let window: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ew: Vec<f64> = (0..5).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let y = daec_predict(&m, [0.2, 0.3], &window, &ew).unwrap();
        assert_eq!(
            y,
            da_forward(&m.base, [0.2, 0.3], &window).unwrap() + ec_forward(&m.ec, &ew).unwrap()
        );

        m.ec.fill_zero();
        assert_eq!(
            daec_predict(&m, [0.2, 0.3], &window, &ew).unwrap(),
            da_forward(&m.base, [0.2, 0.3], &window).unwrap()
        );

        m.base.fill_zero();
        m.base.head.b = 1.0;
        m.ec.head.b = 0.25;
        assert_eq!(daec_predict(&m, [0.2, 0.3], &window, &ew).unwrap(), 1.25);
        assert!(matches!(
            daec_predict(&m, [0.2, 0.3], &window[..4], &ew),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        let cfg = tiny_cfg();
        let m = init_daec(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let window: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ew: Vec<f64> = (0..5).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let target = 0.6;
        let mut grad = m.clone();
        grad.fill_zero();
        m.joint_loss_grad([0.4, 0.5], &window, &ew, target, &mut grad)
            .unwrap();
        let numeric = finite_diff_gradient(
            |p: &DaecModel| (target - p.predict([0.4, 0.5], &window, &ew).unwrap()).powi(2),
            &m,
            1e-5,
        )
        .unwrap();
        let err = gradient_check(&GradientBundle::of(&grad), &numeric).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_epochs_change_nothing() {
        let cfg = TrainConfig {
            epochs_da: 0,
            epochs_ec: 0,
            epochs_joint: 0,
            ..tiny_cfg()
        };
        let data = sine_data(60, 5);
        let (m, hist) = train_daec(&data, &cfg).unwrap();
        assert_eq!(m, init_daec(&cfg));
        assert_eq!(hist, LossHistory::default());
        let samples = data.samples(data.train_targets.clone());
        let da = init_daec(&cfg).base;
        let (same, h) = pretrain_da(da.clone(), &samples, &cfg).unwrap();
        assert_eq!((same, h.len()), (da, 0));
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_cfg();
        let data = sine_data(80, 5);
        let a = train_daec(&data, &cfg).unwrap();
        let b = train_daec(&data, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.1.base.len(), 3);
        assert_eq!(a.1.ec.len(), 3);
        assert_eq!(a.1.joint.len(), 2);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let cfg = tiny_cfg();
        assert!(matches!(
            pretrain_da(init_daec(&cfg).base, &[], &cfg),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn stale_residuals_are_rejected() {
        let cfg = tiny_cfg();
        let data = sine_data(60, 5);
        let m = init_daec(&cfg);
        let errors = build_error_series(&m.base, &data.scaled, 5).unwrap();
        let mut moved = m.base.clone();
        moved.head.b += 0.1;
        let r = pretrain_ec_on(
            m.ec.clone(),
            &moved,
            &errors,
            data.cascade_targets(data.train_targets.clone()),
            &cfg,
        );
        assert!(matches!(r, Err(Error::StaleErrorSeries { .. })));
        pretrain_ec_on(
            m.ec,
            &m.base,
            &errors,
            data.cascade_targets(data.train_targets.clone()),
            &cfg,
        )
        .unwrap();
    }

    #[test]
    fn ec_on_perfect_residuals_moves_toward_zero() {
        // Base that predicts the scaled series exactly: residuals are all zero.
        #[derive(Clone)]
        struct Exact(Vec<f64>);
        impl Parameterized for Exact {
            fn visit_params(&self, _: &str, _: &mut dyn FnMut(String, &[usize], &[f64])) {}
            fn visit_params_mut(
                &mut self,
                _: &str,
                _: &mut dyn FnMut(String, &[usize], &mut [f64]),
            ) {
            }
        }
        impl Forecaster for Exact {
            type Trace = ();
            fn trace(&self, _: [f64; 2], window: &[f64]) -> Result<(f64, ())> {
                let pos = self
                    .0
                    .windows(window.len())
                    .position(|w| w == window)
                    .unwrap();
                Ok((self.0[pos + window.len()], ()))
            }
            fn backward(&self, _: &(), _: f64, _: &mut Self) {}
        }
        let cfg = TrainConfig {
            epochs_ec: 20,
            ..tiny_cfg()
        };
        let data = sine_data(120, 5);
        let base = Exact(data.scaled.clone());
        let targets = data.cascade_targets(data.train_targets.clone());
        let errors = build_error_series(&base, &data.scaled, 5).unwrap();
        assert!(errors.values().iter().all(|&e| e == 0.0));
        let ec = init_daec(&cfg).ec;
        let loss = |ec: &EcLstmModel| -> f64 {
            let s = residual_samples(&errors, 5, targets.clone());
            s.iter()
                .map(|s| ec_forward(ec, &s.window).unwrap().powi(2))
                .sum::<f64>()
                / s.len() as f64
        };
        let before = loss(&ec);
        let (trained, hist) = pretrain_ec(ec, &base, &data.scaled, targets.clone(), &cfg).unwrap();
        assert_eq!(hist.len(), 20);
        assert!(loss(&trained) <= before);
    }

    #[test]
    fn joint_reduces_to_base_loss_when_ec_is_silent() {
        let cfg = tiny_cfg();
        let mut m = init_daec(&cfg);
        m.ec.fill_zero();
        let data = sine_data(60, 5);
        let errors = build_error_series(&m.base, &data.scaled, 5).unwrap();
        for t in data.cascade_targets(data.train_targets.clone()) {
            let s = sample_at(&data.scaled, 5, t);
            let ew = errors.window_before(t, 5).unwrap();
            let mut g = m.clone();
            g.fill_zero();
            let joint = m
                .joint_loss_grad(s.lead_in, &s.input, ew, s.target, &mut g)
                .unwrap();
            let loss1 = (s.target - da_forward(&m.base, s.lead_in, &s.input).unwrap()).powi(2);
            assert_eq!(joint, loss1);
        }
    }

    #[test]
    fn joint_rejects_uninitialized_models() {
        let cfg = tiny_cfg();
        let data = sine_data(60, 5);
        let mut m = init_daec(&cfg);
        m.ec.head.w.clear();
        assert!(matches!(
            joint_finetune(m, &data.scaled, data.train_targets.clone(), &cfg),
            Err(Error::Config(_))
        ));
        let mut m = init_daec(&cfg);
        m.window_len = 0;
        assert!(matches!(
            joint_finetune(m, &data.scaled, data.train_targets.clone(), &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn lstm_loss_decreases_on_sine() {
        let cfg = TrainConfig {
            window_len: 8,
            hidden_size: 6,
            epochs_da: 15,
            ..tiny_cfg()
        };
        let spec = GeneratorSpec {
            kind: SeriesKind::JumpSine,
            length: 200,
            events: 0,
            noise: 0.0,
            period: 25.0,
            ..GeneratorSpec::default()
        };
        let data = PreparedData::new(&generate_synthetic(&spec).unwrap(), 8, 0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (_, hist) = fit_forecaster(
            LstmModel::init(6, &mut rng),
            &data.samples(data.train_targets.clone()),
            cfg.epochs_da,
            &cfg,
        )
        .unwrap();
        assert!(hist.last().unwrap() < hist.first().unwrap(), "{hist:?}");
    }

    #[test]
    fn history_csv_layout() {
        let h = LossHistory {
            base: vec![0.5, 0.25],
            ec: vec![],
            joint: vec![0.125],
        };
        assert_eq!(
            h.to_csv(),
            "phase,epoch,mean_loss\nbase,1,0.5\nbase,2,0.25\njoint,1,0.125\n"
        );
    }

    #[test]
    fn split_ranges_cover_targets() {
        let data = sine_data(100, 10);
        assert_eq!(data.train_targets, 12..12 + 70);
        assert_eq!(data.test_targets, 82..100);
        assert_eq!(data.cascade_targets(data.train_targets.clone()), 22..82);
    }
}
