//! Experiment description read from TOML.
//!
//! ```toml
//! seed = 42
//! model = "daec-lstm"
//! models = ["lstm", "da-lstm", "daec-lstm"]
//! seeds = [1, 2, 3]
//! output_dir = "runs/jump"
//!
//! [dataset.synthetic]
//! kind = "jump-sine"
//! length = 2000
//!
//! [train]
//! window_len = 40
//! hidden_size = 32
//! ```
//!
//! `[dataset] csv = "series.csv"` selects a file instead; relative paths are
//! resolved against the config file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_csv, GeneratorSpec, TimeSeries};
use crate::error::{Error, Result};
use crate::model::ModelKind;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Csv(PathBuf),
    Synthetic(GeneratorSpec),
}

impl DatasetSource {
    pub fn load(&self) -> Result<TimeSeries> {
        match self {
            DatasetSource::Csv(path) => load_csv(path),
            DatasetSource::Synthetic(spec) => generate_synthetic(spec),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<DatasetSource>,
    pub train: TrainConfig,
    /// Model for `train`.
    pub model: Option<ModelKind>,
    /// Models for `compare`, in output order.
    pub models: Vec<ModelKind>,
    /// Training seeds for `compare`; empty means the single training seed.
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    /// Training seed; overrides `train.seed`.
    pub seed: Option<u64>,
}

pub const DEFAULT_OUTPUT_DIR: &str = "runs/latest";

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let (Some(DatasetSource::Csv(p)), Some(dir)) = (&mut cfg.dataset, path.parent()) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Training settings with the top-level seed applied.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut t = self.train.clone();
        if let Some(seed) = self.seed {
            t.seed = seed;
        }
        t.validate()?;
        Ok(t)
    }

    pub fn dataset(&self) -> Result<&DatasetSource> {
        self.dataset.as_ref().ok_or_else(|| {
            Error::Config("no dataset: set [dataset] csv or [dataset.synthetic]".into())
        })
    }

    pub fn model(&self) -> ModelKind {
        self.model.unwrap_or(ModelKind::DaecLstm)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }

    /// Seeds for a comparison run.
    pub fn compare_seeds(&self) -> Result<Vec<u64>> {
        Ok(if self.seeds.is_empty() {
            vec![self.train_config()?.seed]
        } else {
            self.seeds.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SeriesKind;

    #[test]
    fn parses_documented_example() {
        let cfg = RunConfig::from_toml(
            r#"
            seed = 5
            model = "s-lstm"
            models = ["lstm", "daec-lstm"]
            [dataset.synthetic]
            kind = "piecewise-ramp"
            length = 300
            [train]
            hidden_size = 8
            "#,
        )
        .unwrap();
        assert_eq!(cfg.model(), ModelKind::SLstm);
        assert_eq!(cfg.models, vec![ModelKind::Lstm, ModelKind::DaecLstm]);
        let t = cfg.train_config().unwrap();
        assert_eq!((t.seed, t.hidden_size, t.window_len), (5, 8, 40));
        match cfg.dataset().unwrap() {
            DatasetSource::Synthetic(s) => {
                assert_eq!((s.kind, s.length), (SeriesKind::PiecewiseRamp, 300))
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(cfg.compare_seeds().unwrap(), vec![5]);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "model = \"gru\"",
            "colour = 1",
            "[train]\nwindow = 3",
            "[dataset]\ncsv = \"a.csv\"\n[dataset.synthetic]\nlength = 5",
        ] {
            assert!(
                matches!(RunConfig::from_toml(text), Err(Error::Config(_))),
                "{text}"
            );
        }
        let cfg = RunConfig::from_toml("[train]\nsplit = 1.5").unwrap();
        assert!(matches!(cfg.train_config(), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::default().dataset(),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn csv_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[dataset]\ncsv = \"series.csv\"\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(
            cfg.dataset,
            Some(DatasetSource::Csv(dir.path().join("series.csv")))
        );
    }
}
