//! The closed set of trainable model kinds behind one enum.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::DaLstmModel;
use crate::error::{Error, Result};
use crate::error_correction::EcLstmModel;
use crate::lstm::{LstmModel, StackedLstmModel};
use crate::numerics::Parameterized;
use crate::training::{
    fit_forecaster, forecast_targets, init_daec, train_cascade, CascadeModel, DaecModel,
    LossHistory, PreparedData, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Lstm,
    #[serde(rename = "s-lstm")]
    SLstm,
    DaLstm,
    /// LSTM base with error correction.
    EcLstm,
    DaecLstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Lstm,
        ModelKind::SLstm,
        ModelKind::DaLstm,
        ModelKind::EcLstm,
        ModelKind::DaecLstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lstm => "lstm",
            ModelKind::SLstm => "s-lstm",
            ModelKind::DaLstm => "da-lstm",
            ModelKind::EcLstm => "ec-lstm",
            ModelKind::DaecLstm => "daec-lstm",
        }
    }

    /// Table label, e.g. `DAEC-LSTM`.
    pub fn label(self) -> String {
        self.name().to_uppercase()
    }

    /// Cascades train in three phases and predict from residual history.
    pub fn is_cascade(self) -> bool {
        matches!(self, ModelKind::EcLstm | ModelKind::DaecLstm)
    }

    /// Epochs spent in each phase under `cfg`: `[base, ec, joint]`.
    pub fn epochs(self, cfg: &TrainConfig) -> [usize; 3] {
        if self.is_cascade() {
            [cfg.epochs_da, cfg.epochs_ec, cfg.epochs_joint]
        } else {
            [cfg.epochs_da, 0, 0]
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = ModelKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!(
                    "unknown model kind {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Lstm(LstmModel),
    SLstm(StackedLstmModel),
    DaLstm(DaLstmModel),
    EcLstm(CascadeModel<LstmModel>),
    DaecLstm(DaecModel),
}

impl AnyModel {
    /// Seeded initial model. One generator per model, seeded by `cfg.seed`.
    pub fn init(kind: ModelKind, cfg: &TrainConfig) -> AnyModel {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let h = cfg.hidden_size;
        match kind {
            ModelKind::Lstm => AnyModel::Lstm(LstmModel::init(h, &mut rng)),
            ModelKind::SLstm => {
                AnyModel::SLstm(StackedLstmModel::init(h, cfg.stacked_layers, &mut rng))
            }
            ModelKind::DaLstm => {
                AnyModel::DaLstm(DaLstmModel::init(h, cfg.attention_width(), &mut rng))
            }
            ModelKind::EcLstm => {
                let base = LstmModel::init(h, &mut rng);
                let ec = EcLstmModel::init(cfg.ec_hidden_size, &mut rng);
                AnyModel::EcLstm(CascadeModel {
                    base,
                    ec,
                    window_len: cfg.window_len,
                })
            }
            ModelKind::DaecLstm => AnyModel::DaecLstm(init_daec(cfg)),
        }
    }

    /// All-zero model with the shapes `cfg` implies; the target of checkpoint loading.
    pub fn skeleton(kind: ModelKind, cfg: &TrainConfig) -> AnyModel {
        let h = cfg.hidden_size;
        match kind {
            ModelKind::Lstm => AnyModel::Lstm(LstmModel::zeros(h)),
            ModelKind::SLstm => AnyModel::SLstm(StackedLstmModel::zeros(h, cfg.stacked_layers)),
            ModelKind::DaLstm => AnyModel::DaLstm(DaLstmModel::zeros(h, cfg.attention_width())),
            ModelKind::EcLstm => AnyModel::EcLstm(CascadeModel {
                base: LstmModel::zeros(h),
                ec: EcLstmModel::zeros(cfg.ec_hidden_size),
                window_len: cfg.window_len,
            }),
            ModelKind::DaecLstm => AnyModel::DaecLstm(CascadeModel {
                base: DaLstmModel::zeros(h, cfg.attention_width()),
                ec: EcLstmModel::zeros(cfg.ec_hidden_size),
                window_len: cfg.window_len,
            }),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Lstm(_) => ModelKind::Lstm,
            AnyModel::SLstm(_) => ModelKind::SLstm,
            AnyModel::DaLstm(_) => ModelKind::DaLstm,
            AnyModel::EcLstm(_) => ModelKind::EcLstm,
            AnyModel::DaecLstm(_) => ModelKind::DaecLstm,
        }
    }

    /// Seeded initialization followed by the kind's training schedule.
    pub fn train(
        kind: ModelKind,
        data: &PreparedData,
        cfg: &TrainConfig,
    ) -> Result<(AnyModel, LossHistory)> {
        AnyModel::init(kind, cfg).fit(data, cfg)
    }

    /// Trains this model: `epochs_da` epochs for single networks, all three
    /// phases for cascades.
    pub fn fit(self, data: &PreparedData, cfg: &TrainConfig) -> Result<(AnyModel, LossHistory)> {
        cfg.validate()?;
        if data.window_len != cfg.window_len {
            return Err(Error::Config(format!(
                "data windowed at {} but config says {}",
                data.window_len, cfg.window_len
            )));
        }
        let train = data.samples(data.train_targets.clone());
        let single = |h: Vec<f64>| LossHistory {
            base: h,
            ..LossHistory::default()
        };
        Ok(match self {
            AnyModel::Lstm(m) => {
                m.check()?;
                let (m, h) = fit_forecaster(m, &train, cfg.epochs_da, cfg)?;
                (AnyModel::Lstm(m), single(h))
            }
            AnyModel::SLstm(m) => {
                m.check()?;
                let (m, h) = fit_forecaster(m, &train, cfg.epochs_da, cfg)?;
                (AnyModel::SLstm(m), single(h))
            }
            AnyModel::DaLstm(m) => {
                m.check()?;
                let (m, h) = fit_forecaster(m, &train, cfg.epochs_da, cfg)?;
                (AnyModel::DaLstm(m), single(h))
            }
            AnyModel::EcLstm(m) => {
                let (m, h) = train_cascade(m.base, m.ec, data, cfg)?;
                (AnyModel::EcLstm(m), h)
            }
            AnyModel::DaecLstm(m) => {
                let (m, h) = train_cascade(m.base, m.ec, data, cfg)?;
                (AnyModel::DaecLstm(m), h)
            }
        })
    }

    /// Targets inside `range` this model can predict: cascades need a full
    /// residual history before each target.
    pub fn eval_targets(&self, data: &PreparedData, range: Range<usize>) -> Range<usize> {
        if self.kind().is_cascade() {
            data.cascade_targets(range)
        } else {
            range
        }
    }

    /// Predictions in scaled units at each target.
    pub fn predict_scaled(
        &self,
        scaled: &[f64],
        window_len: usize,
        targets: Range<usize>,
    ) -> Result<Vec<f64>> {
        match self {
            AnyModel::Lstm(m) => forecast_targets(m, scaled, window_len, targets),
            AnyModel::SLstm(m) => forecast_targets(m, scaled, window_len, targets),
            AnyModel::DaLstm(m) => forecast_targets(m, scaled, window_len, targets),
            AnyModel::EcLstm(m) => m.forecast_targets(scaled, targets),
            AnyModel::DaecLstm(m) => m.forecast_targets(scaled, targets),
        }
    }

    /// Predictions in original units at each target.
    pub fn predict(&self, data: &PreparedData, targets: Range<usize>) -> Result<Vec<f64>> {
        let scaled = self.predict_scaled(&data.scaled, data.window_len, targets)?;
        Ok(scaled.into_iter().map(|v| data.scaler.invert(v)).collect())
    }
}

impl Parameterized for AnyModel {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        match self {
            AnyModel::Lstm(m) => m.visit_params(prefix, f),
            AnyModel::SLstm(m) => m.visit_params(prefix, f),
            AnyModel::DaLstm(m) => m.visit_params(prefix, f),
            AnyModel::EcLstm(m) => m.visit_params(prefix, f),
            AnyModel::DaecLstm(m) => m.visit_params(prefix, f),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &mut [f64])) {
        match self {
            AnyModel::Lstm(m) => m.visit_params_mut(prefix, f),
            AnyModel::SLstm(m) => m.visit_params_mut(prefix, f),
            AnyModel::DaLstm(m) => m.visit_params_mut(prefix, f),
            AnyModel::EcLstm(m) => m.visit_params_mut(prefix, f),
            AnyModel::DaecLstm(m) => m.visit_params_mut(prefix, f),
        }
    }
}
