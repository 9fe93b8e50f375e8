//! Accuracy criteria and table rendering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Truth values closer to zero than this make MAPE undefined.
pub const MAPE_ZERO_GUARD: f64 = 1e-12;

fn check_pair(truth: &[f64], pred: &[f64]) -> Result<()> {
    if truth.is_empty() {
        return Err(Error::Domain(
            "metrics need at least one observation".into(),
        ));
    }
    if truth.len() != pred.len() {
        return Err(Error::Domain(format!(
            "{} truth values but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    Ok(())
}

/// Mean squared error.
pub fn mse(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(truth, pred)?;
    let total: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p).powi(2)).sum();
    Ok(total / truth.len() as f64)
}

pub fn rmse(truth: &[f64], pred: &[f64]) -> Result<f64> {
    mse(truth, pred).map(f64::sqrt)
}

/// Mean absolute percentage error, as a fraction.
pub fn mape(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(truth, pred)?;
    let mut total = 0.0;
    for (i, (t, p)) in truth.iter().zip(pred).enumerate() {
        if t.abs() < MAPE_ZERO_GUARD {
            return Err(Error::Domain(format!(
                "MAPE undefined: truth value at index {i} is {t}"
            )));
        }
        total += (t - p).abs() / t.abs();
    }
    Ok(total / truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub rmse: f64,
    pub mape: f64,
    pub n: usize,
}

impl MetricsReport {
    pub fn mse_text(&self) -> String {
        format!("{:.4}", self.mse)
    }

    pub fn rmse_text(&self) -> String {
        format!("{:.4}", self.rmse)
    }

    pub fn mape_text(&self) -> String {
        format!("{:.2}%", self.mape * 100.0)
    }

    /// `"<mse>, <mape>"`, e.g. `0.0007, 0.10%`.
    pub fn row(&self) -> String {
        format!("{}, {}", self.mse_text(), self.mape_text())
    }
}

pub fn report(truth: &[f64], pred: &[f64]) -> Result<MetricsReport> {
    let mse = mse(truth, pred)?;
    Ok(MetricsReport {
        mse,
        rmse: mse.sqrt(),
        mape: mape(truth, pred)?,
        n: truth.len(),
    })
}

/// Aligned text table: one row per labelled report.
pub fn render_table(rows: &[(String, MetricsReport)]) -> String {
    let label_w = rows
        .iter()
        .map(|(l, _)| l.len())
        .max()
        .unwrap_or(0)
        .max("Method".len());
    let cells: Vec<[String; 3]> = rows
        .iter()
        .map(|(_, r)| [r.mse_text(), r.rmse_text(), r.mape_text()])
        .collect();
    let width = |k: usize, head: &str| {
        cells
            .iter()
            .map(|c| c[k].len())
            .max()
            .unwrap_or(0)
            .max(head.len())
    };
    let (w0, w1, w2) = (width(0, "MSE"), width(1, "RMSE"), width(2, "MAPE"));
    let mut out = format!(
        "{:<label_w$}  {:>w0$}  {:>w1$}  {:>w2$}\n",
        "Method", "MSE", "RMSE", "MAPE"
    );
    for ((label, _), c) in rows.iter().zip(&cells) {
        out.push_str(&format!(
            "{label:<label_w$}  {:>w0$}  {:>w1$}  {:>w2$}\n",
            c[0], c[1], c[2]
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0, 2.0], &[0.0, 2.0]).unwrap(), 0.5);
        assert_eq!(
            mse(&[1.0, 5.0], &[2.0, 3.0]).unwrap(),
            mse(&[2.0, 3.0], &[1.0, 5.0]).unwrap()
        );
        assert!(mse(&[], &[]).is_err());
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[4.0], &[4.0]).unwrap(), 0.0);
        assert!((rmse(&[1.0, 2.0], &[0.0, 2.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn mape_examples() {
        assert_eq!(mape(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        let r = report(&[100.0], &[99.0]).unwrap();
        assert!((r.mape - 0.01).abs() < 1e-15);
        assert_eq!(r.mape_text(), "1.00%");
        let err = mape(&[1.0, 0.0], &[1.0, 0.1]).unwrap_err();
        assert!(err.to_string().contains("index 1"), "{err}");
    }

    #[test]
    fn report_rendering() {
        let r = report(&[5.0, 6.0], &[5.0, 6.0]).unwrap();
        assert_eq!(
            (r.mse_text(), r.mape_text()),
            ("0.0000".into(), "0.00%".into())
        );
        assert_eq!(r.n, 2);
        let r = MetricsReport {
            mse: 0.0007,
            rmse: 0.0007f64.sqrt(),
            mape: 0.0010,
            n: 10,
        };
        assert_eq!(r.row(), "0.0007, 0.10%");
        let table = render_table(&[("DAEC-LSTM".into(), r), ("LSTM".into(), r)]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("Method"));
        assert!(lines[1].contains("0.0007") && lines[1].contains("0.10%"));
        assert_eq!(lines[1].len(), lines[2].len());
    }

    proptest! {
        #[test]
        fn constant_offset(c in prop::sample::select(vec![0.1, 1.0, 10.0]), a in prop::collection::vec(-5.0f64..5.0, 1..40)) {
            let b: Vec<f64> = a.iter().map(|v| v + c).collect();
            prop_assert!((mse(&a, &b).unwrap() - c * c).abs() < 1e-9 * c * c.max(1.0));
        }

        #[test]
        fn rmse_squared_is_mse(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..50)) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let r = report(&a.iter().map(|v| v + 20.0).collect::<Vec<_>>(), &b.iter().map(|v| v + 20.0).collect::<Vec<_>>()).unwrap();
            prop_assert!((r.rmse * r.rmse - r.mse).abs() < 1e-12 * r.mse.max(1.0));
            prop_assert!(r.mse >= 0.0 && r.rmse >= 0.0 && r.mape >= 0.0);
        }

        #[test]
        fn scale_equivariance(
            pairs in prop::collection::vec((1.0f64..10.0, 1.0f64..10.0), 1..30),
            s in 0.1f64..10.0,
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let sa: Vec<f64> = a.iter().map(|v| v * s).collect();
            let sb: Vec<f64> = b.iter().map(|v| v * s).collect();
            let base = report(&a, &b).unwrap();
            let scaled = report(&sa, &sb).unwrap();
            prop_assert!((scaled.mse - s * s * base.mse).abs() < 1e-9 * (1.0 + scaled.mse));
            prop_assert!((scaled.rmse - s * base.rmse).abs() < 1e-9 * (1.0 + scaled.rmse));
            prop_assert!((scaled.mape - base.mape).abs() < 1e-12);
        }
    }
}
