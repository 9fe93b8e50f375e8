use crate::error::Result;
use crate::numerics::Parameterized;

/// A one-step-ahead model over a scalar window with a two-point lead-in.
///
/// `trace` runs the forward pass and keeps what backpropagation needs;
/// `backward` accumulates `dy · ∂prediction/∂θ` into a gradient holder of
/// the same type (see [`Forecaster::zeroed`]).
pub trait Forecaster: Parameterized + Clone + Send + Sync {
    type Trace;

    fn trace(&self, lead_in: [f64; 2], window: &[f64]) -> Result<(f64, Self::Trace)>;

    fn backward(&self, trace: &Self::Trace, dy: f64, grad: &mut Self);

    fn forecast(&self, lead_in: [f64; 2], window: &[f64]) -> Result<f64> {
        Ok(self.trace(lead_in, window)?.0)
    }

    /// Same shapes, every value zero.
    fn zeroed(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }
}

mod impls {
    use super::Forecaster;
    use crate::error::Result;
    use crate::lstm::{LstmModel, LstmTrace, StackedLstmModel};

    impl Forecaster for LstmModel {
        type Trace = LstmTrace;

        fn trace(&self, _lead_in: [f64; 2], window: &[f64]) -> Result<(f64, LstmTrace)> {
            LstmModel::trace(self, window)
        }

        fn backward(&self, trace: &LstmTrace, dy: f64, grad: &mut Self) {
            LstmModel::backward(self, trace, dy, grad)
        }
    }

    impl Forecaster for StackedLstmModel {
        type Trace = Vec<LstmTrace>;

        fn trace(&self, _lead_in: [f64; 2], window: &[f64]) -> Result<(f64, Vec<LstmTrace>)> {
            StackedLstmModel::trace(self, window)
        }

        fn backward(&self, trace: &Vec<LstmTrace>, dy: f64, grad: &mut Self) {
            StackedLstmModel::backward(self, trace, dy, grad)
        }
    }
}
