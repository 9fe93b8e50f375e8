//! Versioned JSON checkpoints of named parameter arrays.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ScalerParams;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{AnyModel, ModelKind};
use crate::numerics::{param_fingerprint, GradientBundle, NamedArray};
use crate::training::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

/// Metrics recorded when the checkpoint was written, in original units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SavedMetrics {
    pub train: MetricsReport,
    pub test: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub train_config: TrainConfig,
    pub scaler: ScalerParams,
    /// Fingerprint of the series the model was trained on.
    pub dataset_fingerprint: String,
    /// Fingerprint of `params`.
    pub content_hash: String,
    pub metrics: Option<SavedMetrics>,
    pub params: Vec<NamedArray>,
}

impl ModelCheckpoint {
    pub fn new(
        model: &AnyModel,
        train_config: &TrainConfig,
        scaler: ScalerParams,
        dataset_fingerprint: impl Into<String>,
        metrics: Option<SavedMetrics>,
    ) -> Self {
        ModelCheckpoint {
            format_version: FORMAT_VERSION,
            model_kind: model.kind(),
            train_config: train_config.clone(),
            scaler,
            dataset_fingerprint: dataset_fingerprint.into(),
            content_hash: param_fingerprint(model),
            metrics,
            params: GradientBundle::of(model).arrays().to_vec(),
        }
    }

    /// Rebuilds the model; shapes must match what the stored config implies.
    pub fn model(&self) -> Result<AnyModel> {
        let mut m = AnyModel::skeleton(self.model_kind, &self.train_config);
        let bundle = GradientBundle::new(self.params.clone())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        bundle.assign_to(&mut m).map_err(|e| {
            Error::Checkpoint(format!(
                "parameters do not fit a {} model: {e}",
                self.model_kind
            ))
        })?;
        let hash = param_fingerprint(&m);
        if hash != self.content_hash {
            return Err(Error::Checkpoint(format!(
                "content hash mismatch: stored {}, parameters hash to {hash}",
                self.content_hash
            )));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Parses a checkpoint, checking the format version before anything else.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("not valid JSON: {e}")))?;
        match raw
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
        {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "unsupported format version {v}; this build reads version {FORMAT_VERSION}"
                )))
            }
            None => return Err(Error::Checkpoint("missing format_version".into())),
        }
        let ckpt: ModelCheckpoint = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        let s = ckpt.scaler;
        if !(s.lo.is_finite() && s.hi.is_finite() && s.hi > s.lo) {
            return Err(Error::Checkpoint(format!(
                "invalid scaler range [{}, {}]",
                s.lo, s.hi
            )));
        }
        ckpt.train_config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("stored training config: {e}")))?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> TrainConfig {
        TrainConfig {
            window_len: 4,
            hidden_size: 3,
            ec_hidden_size: 2,
            stacked_layers: 2,
            ..TrainConfig::default()
        }
    }

    fn scaler() -> ScalerParams {
        ScalerParams { lo: -1.5, hi: 2.25 }
    }

    /// Initial model with awkward values: subnormals, signed zero, long mantissas.
    fn awkward(kind: ModelKind) -> AnyModel {
        let mut m = AnyModel::init(kind, &cfg());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut k = 0;
        crate::numerics::Parameterized::visit_params_mut(&mut m, "", &mut |_, _, vals| {
            for v in vals.iter_mut() {
                *v = match k % 4 {
                    0 => f64::from_bits(rng.gen::<u64>() >> 12),
                    1 => -0.0,
                    2 => rng.gen::<f64>() * 1e-300,
                    _ => rng.gen_range(-1.0..1.0) / 3.0,
                };
                k += 1;
            }
        });
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for kind in ModelKind::ALL {
            let m = awkward(kind);
            let ck = ModelCheckpoint::new(&m, &cfg(), scaler(), "abc", None);
            let back = ModelCheckpoint::from_json(&ck.to_json().unwrap()).unwrap();
            assert_eq!(back, ck);
            let restored = back.model().unwrap();
            assert_eq!(param_fingerprint(&restored), param_fingerprint(&m));
            assert_eq!(back.to_json().unwrap(), ck.to_json().unwrap());
        }
    }

    #[test]
    fn version_is_checked_first() {
        let ck = ModelCheckpoint::new(
            &AnyModel::init(ModelKind::Lstm, &cfg()),
            &cfg(),
            scaler(),
            "abc",
            None,
        );
        let mut v: serde_json::Value = serde_json::from_str(&ck.to_json().unwrap()).unwrap();
        v["format_version"] = 2.into();
        v["params"] = "garbage".into();
        let err = ModelCheckpoint::from_json(&v.to_string()).unwrap_err();
        assert!(
            err.to_string().contains("unsupported format version 2"),
            "{err}"
        );
        assert!(ModelCheckpoint::from_json("{}").is_err());
    }

    #[test]
    fn tampering_is_detected() {
        let ck = ModelCheckpoint::new(
            &AnyModel::init(ModelKind::DaLstm, &cfg()),
            &cfg(),
            scaler(),
            "abc",
            None,
        );
        let mut bad = ck.clone();
        bad.params[0].values[0] += 1.0;
        assert!(matches!(bad.model(), Err(Error::Checkpoint(m)) if m.contains("hash")));
        let mut bad = ck.clone();
        bad.train_config.hidden_size = 4;
        assert!(matches!(bad.model(), Err(Error::Checkpoint(_))));
        let mut bad = ck;
        bad.scaler = ScalerParams { lo: 1.0, hi: 1.0 };
        assert!(ModelCheckpoint::from_json(&bad.to_json().unwrap()).is_err());
    }
}
