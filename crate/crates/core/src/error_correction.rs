//! Residual series of a base forecaster and the LSTM that predicts it.

use crate::error::{Error, Result};
use crate::forecaster::Forecaster;
use crate::lstm::{lstm_predict, LstmModel};
use crate::numerics::param_fingerprint;

/// The error-correction network is a plain LSTM forecaster run over residuals.
pub type EcLstmModel = LstmModel;

/// Residuals `e_u = x_u − x̂_u`, indexed by series position.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSeries {
    start: usize,
    values: Vec<f64>,
    origin: String,
}

impl ErrorSeries {
    /// Series index of the first residual.
    pub fn start(&self) -> usize {
        self.start
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Fingerprint of the base-model parameters that produced these residuals.
    pub fn origin(&self) -> &str {
        &self.origin
    }

    pub fn at(&self, index: usize) -> Option<f64> {
        index
            .checked_sub(self.start)
            .and_then(|k| self.values.get(k).copied())
    }

    /// The `len` residuals at positions `target − len .. target`, if all exist.
    pub fn window_before(&self, target: usize, len: usize) -> Option<&[f64]> {
        let first = target.checked_sub(len)?.checked_sub(self.start)?;
        self.values.get(first..first + len)
    }

    /// Errors unless these residuals came from exactly `base`'s current parameters.
    pub fn ensure_origin<F: Forecaster>(&self, base: &F) -> Result<()> {
        let expected = param_fingerprint(base);
        if expected != self.origin {
            return Err(Error::StaleErrorSeries {
                expected,
                found: self.origin.clone(),
            });
        }
        Ok(())
    }
}

/// Smallest series that yields one prediction: two lead-in points, the window, and a target.
pub fn min_series_len(window_len: usize) -> usize {
    window_len + 3
}

/// Runs `base` over every position with a full history (`2 + window_len`
/// preceding points) and records `truth − prediction` there.
pub fn build_error_series<F: Forecaster>(
    base: &F,
    series: &[f64],
    window_len: usize,
) -> Result<ErrorSeries> {
    if window_len == 0 {
        return Err(Error::Config("window length must be at least 1".into()));
    }
    let need = min_series_len(window_len);
    if series.len() < need {
        return Err(Error::Domain(format!(
            "series of length {} is too short for window {window_len}: need at least {need}",
            series.len()
        )));
    }
    let start = window_len + 2;
    let values = (start..series.len())
        .map(|u| {
            let lead_in = [series[u - window_len - 2], series[u - window_len - 1]];
            let pred = base.forecast(lead_in, &series[u - window_len..u])?;
            Ok(series[u] - pred)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ErrorSeries {
        start,
        values,
        origin: param_fingerprint(base),
    })
}

/// Next-residual prediction from a window of past residuals.
pub fn ec_forward(m: &EcLstmModel, error_window: &[f64]) -> Result<f64> {
    lstm_predict(&m.lstm, &m.head, error_window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::DaLstmModel;
    use crate::lstm::LstmState;
    use crate::lstm::{lstm_forward, OutputHead};
    use crate::numerics::{finite_diff_gradient, gradient_check, GradientBundle, Parameterized};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Forecaster that returns the true next value of a known series.
    #[derive(Clone)]
    struct Oracle;

    impl Parameterized for Oracle {
        fn visit_params(&self, _: &str, _: &mut dyn FnMut(String, &[usize], &[f64])) {}
        fn visit_params_mut(&mut self, _: &str, _: &mut dyn FnMut(String, &[usize], &mut [f64])) {}
    }

    impl Forecaster for Oracle {
        type Trace = ();
        fn trace(&self, _: [f64; 2], window: &[f64]) -> Result<(f64, ())> {
            // series is x_u = u, so the next value is last + 1
            Ok((window[window.len() - 1] + 1.0, ()))
        }
        fn backward(&self, _: &(), _: f64, _: &mut Self) {}
    }

    fn ramp(n: usize) -> Vec<f64> {
        (0..n).map(|u| u as f64).collect()
    }

    #[test]
    fn perfect_predictor_gives_zero_residuals() {
        let e = build_error_series(&Oracle, &ramp(20), 4).unwrap();
        assert!(e.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_model_residual_is_truth() {
        let series: Vec<f64> = (0..30).map(|u| (u as f64 * 0.3).sin() + 2.0).collect();
        let da = DaLstmModel::zeros(3, 3);
        let e = build_error_series(&da, &series, 5).unwrap();
        for u in e.start()..series.len() {
            assert_eq!(e.at(u), Some(series[u]));
        }
        assert_eq!(e.at(e.start() - 1), None);
    }

    #[test]
    fn length_counts_positions_with_full_history() {
        let series: Vec<f64> = (0..50).map(|u| u as f64 * 0.1).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let da = DaLstmModel::init(3, 3, &mut rng);
        let e = build_error_series(&da, &series, 5).unwrap();
        assert_eq!(e.len(), 43);
        assert_eq!(e.start(), 7);
        let err = build_error_series(&da, &series[..7], 5).unwrap_err();
        assert!(err.to_string().contains("need at least 8"), "{err}");
        assert_eq!(build_error_series(&da, &series[..8], 5).unwrap().len(), 1);
    }

    #[test]
    fn error_series_is_pure_and_origin_tracks_params() {
        let series: Vec<f64> = (0..40).map(|u| (u as f64).cos()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut da = DaLstmModel::init(4, 4, &mut rng);
        let a = build_error_series(&da, &series, 6).unwrap();
        let b = build_error_series(&da, &series, 6).unwrap();
        assert_eq!(a, b);
        a.ensure_origin(&da).unwrap();
        da.head.b += 1e-3;
        assert!(matches!(
            a.ensure_origin(&da),
            Err(Error::StaleErrorSeries { .. })
        ));
    }

    #[test]
    fn window_before_aligns_to_targets() {
        let e = build_error_series(&Oracle, &ramp(20), 3).unwrap();
        assert_eq!(e.start(), 5);
        assert_eq!(e.window_before(8, 3).map(|w| w.len()), Some(3));
        assert!(e.window_before(7, 3).is_none());
        assert!(e.window_before(21, 3).is_none());
    }

    #[test]
    fn ec_forward_examples() {
        let m = EcLstmModel::zeros(4);
        assert_eq!(ec_forward(&m, &[0.3, -0.2, 0.9]).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = EcLstmModel::init(4, &mut rng);
        let w = [0.05, -0.02, 0.11, 0.0];
        assert_eq!(
            ec_forward(&m, &w).unwrap(),
            lstm_predict(&m.lstm, &m.head, &w).unwrap()
        );
        let xs: Vec<Vec<f64>> = w.iter().map(|&v| vec![v]).collect();
        let last: LstmState = lstm_forward(&m.lstm, None, &xs).unwrap().pop().unwrap();
        let manual = OutputHead::apply(&m.head, &last.h);
        assert!((ec_forward(&m, &w).unwrap() - manual).abs() < 1e-12);
        assert!(ec_forward(&m, &[]).is_err());
    }

    #[test]
    fn ec_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = EcLstmModel::init(4, &mut rng);
        let window: Vec<f64> = (0..5).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let target = 0.05;
        let (y, trace) = m.trace(&window).unwrap();
        let mut grad = m.zeroed();
        m.backward(&trace, 2.0 * (y - target), &mut grad);
        let numeric = finite_diff_gradient(
            |p: &EcLstmModel| (target - ec_forward(p, &window).unwrap()).powi(2),
            &m,
            1e-5,
        )
        .unwrap();
        assert!(gradient_check(&GradientBundle::of(&grad), &numeric).unwrap() < 1e-4);
    }
}
