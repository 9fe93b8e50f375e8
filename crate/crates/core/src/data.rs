//! Series sources, scaling, and sliding-window sample construction.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::hex;

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub name: String,
    pub values: Vec<f64>,
    /// Present for generated series.
    pub meta: Option<SeriesMeta>,
}

impl TimeSeries {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain(
                "a time series needs at least one value".into(),
            ));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("value {k} is not finite")));
        }
        Ok(TimeSeries {
            name: name.into(),
            values,
            meta: None,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// SHA-256 of the value bit patterns.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for v in &self.values {
            hasher.update(v.to_bits().to_le_bytes());
        }
        hex(&hasher.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeriesKind {
    /// Sinusoid with abrupt level shifts.
    JumpSine,
    /// Linear segments with slope breaks.
    PiecewiseRamp,
    /// Sawtooth plus Gaussian noise.
    NoisySawtooth,
}

impl FromStr for SeriesKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jump-sine" => Ok(SeriesKind::JumpSine),
            "piecewise-ramp" => Ok(SeriesKind::PiecewiseRamp),
            "noisy-sawtooth" => Ok(SeriesKind::NoisySawtooth),
            other => Err(Error::Config(format!(
                "unknown series kind {other:?} (expected jump-sine, piecewise-ramp, noisy-sawtooth)"
            ))),
        }
    }
}

impl fmt::Display for SeriesKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SeriesKind::JumpSine => "jump-sine",
            SeriesKind::PiecewiseRamp => "piecewise-ramp",
            SeriesKind::NoisySawtooth => "noisy-sawtooth",
        })
    }
}

/// Generator description. `events` is the number of level shifts (jump-sine)
/// or slope breaks (piecewise-ramp); the sawtooth ignores it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kind: SeriesKind,
    pub length: usize,
    pub seed: u64,
    pub period: f64,
    pub amplitude: f64,
    pub offset: f64,
    pub events: usize,
    pub event_scale: f64,
    pub noise: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            kind: SeriesKind::JumpSine,
            length: 2000,
            seed: 7,
            period: 50.0,
            amplitude: 1.0,
            offset: 20.0,
            events: 6,
            event_scale: 1.0,
            noise: 0.02,
        }
    }
}

impl GeneratorSpec {
    fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::Config("series length must be at least 1".into()));
        }
        for (name, v) in [
            ("period", self.period),
            ("amplitude", self.amplitude),
            ("offset", self.offset),
            ("event_scale", self.event_scale),
            ("noise", self.noise),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite, got {v}")));
            }
        }
        if self.period <= 0.0 {
            return Err(Error::Config(format!(
                "period must be positive, got {}",
                self.period
            )));
        }
        if self.noise < 0.0 {
            return Err(Error::Config(format!(
                "noise must be nonnegative, got {}",
                self.noise
            )));
        }
        if self.kind != SeriesKind::NoisySawtooth && self.events >= self.length {
            return Err(Error::Config(format!(
                "{} events do not fit in a series of length {}",
                self.events, self.length
            )));
        }
        Ok(())
    }
}

/// A recorded abrupt change: level shift, slope change, or sawtooth drop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesEvent {
    pub index: usize,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesMeta {
    pub generator: GeneratorSpec,
    pub events: Vec<SeriesEvent>,
}

fn event_positions(rng: &mut ChaCha8Rng, length: usize, count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = sample(rng, length - 1, count)
        .into_iter()
        .map(|k| k + 1)
        .collect();
    idx.sort_unstable();
    idx
}

fn signed_magnitude(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    let m = rng.gen_range(0.5..1.5) * scale;
    if rng.gen_bool(0.5) {
        m
    } else {
        -m
    }
}

pub fn generate_synthetic(spec: &GeneratorSpec) -> Result<TimeSeries> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.length;
    let tau = std::f64::consts::TAU;
    let mut events = Vec::new();
    let clean: Vec<f64> = match spec.kind {
        SeriesKind::JumpSine => {
            for index in event_positions(&mut rng, n, spec.events) {
                events.push(SeriesEvent {
                    index,
                    magnitude: signed_magnitude(&mut rng, spec.event_scale),
                });
            }
            let mut level = 0.0;
            let mut next = events.iter().peekable();
            (0..n)
                .map(|i| {
                    while let Some(e) = next.next_if(|e| e.index == i) {
                        level += e.magnitude;
                    }
                    spec.offset + spec.amplitude * (tau * i as f64 / spec.period).sin() + level
                })
                .collect()
        }
        SeriesKind::PiecewiseRamp => {
            let base_slope = spec.amplitude / spec.period;
            let initial = signed_magnitude(&mut rng, spec.event_scale) * base_slope;
            let mut slope = initial;
            for index in event_positions(&mut rng, n, spec.events) {
                let new_slope = signed_magnitude(&mut rng, spec.event_scale) * base_slope;
                events.push(SeriesEvent {
                    index,
                    magnitude: new_slope - slope,
                });
                slope = new_slope;
            }
            let mut value = spec.offset;
            let mut current = initial;
            let mut next = events.iter().peekable();
            (0..n)
                .map(|i| {
                    while let Some(e) = next.next_if(|e| e.index == i) {
                        current += e.magnitude;
                    }
                    if i > 0 {
                        value += current;
                    }
                    value
                })
                .collect()
        }
        SeriesKind::NoisySawtooth => {
            let phase = rng.gen_range(0.0..spec.period);
            let saw = |i: usize| {
                let x = (i as f64 + phase) / spec.period;
                2.0 * (x - x.floor()) - 1.0
            };
            let vals: Vec<f64> = (0..n)
                .map(|i| spec.offset + spec.amplitude * saw(i))
                .collect();
            for i in 1..n {
                if saw(i) < saw(i - 1) {
                    events.push(SeriesEvent {
                        index: i,
                        magnitude: vals[i] - vals[i - 1],
                    });
                }
            }
            vals
        }
    };
    let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let values = clean
        .into_iter()
        .map(|v| v + normal.sample(&mut rng))
        .collect();
    Ok(TimeSeries {
        name: spec.kind.to_string(),
        values,
        meta: Some(SeriesMeta {
            generator: spec.clone(),
            events,
        }),
    })
}

/// Sidecar path for a series CSV: same stem, `.json` extension.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub name: String,
    pub length: usize,
    pub fingerprint: String,
    pub generator: Option<GeneratorSpec>,
    pub events: Vec<SeriesEvent>,
}

/// Writes `index,value` rows, plus the JSON sidecar when the series carries metadata.
pub fn write_csv(series: &TimeSeries, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    wtr.write_record(["index", "value"])
        .map_err(|e| csv_io(path, e))?;
    for (i, v) in series.values.iter().enumerate() {
        wtr.write_record([i.to_string(), v.to_string()])
            .map_err(|e| csv_io(path, e))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    if let Some(meta) = &series.meta {
        let sidecar = Sidecar {
            name: series.name.clone(),
            length: series.len(),
            fingerprint: series.fingerprint(),
            generator: Some(meta.generator.clone()),
            events: meta.events.clone(),
        };
        let json = serde_json::to_string_pretty(&sidecar)?;
        let side = sidecar_path(path);
        fs::write(&side, json + "\n").map_err(|e| Error::io(side, e))?;
    }
    Ok(())
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        if let csv::ErrorKind::Io(io) = e.into_kind() {
            return Error::io(path, io);
        }
        unreachable!()
    }
    Error::Csv(e)
}

fn parse_value(field: &str, line: u64) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("{field:?} is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            msg: format!("{field:?} is not finite"),
        });
    }
    Ok(v)
}

/// Reads one observation per row. A non-numeric first row is a header; with
/// several columns the one named `value` is used (the last column when there
/// is no header).
pub fn load_csv(path: &Path) -> Result<TimeSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let mut column: Option<usize> = None;
    let mut values = Vec::new();
    for (k, record) in rdr.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(k as u64 + 1, |p| p.line());
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        if k == 0 && record.iter().any(|f| f.parse::<f64>().is_err()) {
            column = Some(if record.len() == 1 {
                0
            } else {
                record
                    .iter()
                    .position(|f| f.eq_ignore_ascii_case("value"))
                    .ok_or_else(|| Error::Parse {
                        line,
                        msg: "multi-column header has no \"value\" column".into(),
                    })?
            });
            continue;
        }
        let col = *column.get_or_insert(record.len() - 1);
        let field = record.get(col).ok_or_else(|| Error::Parse {
            line,
            msg: format!(
                "row has {} fields, expected column {}",
                record.len(),
                col + 1
            ),
        })?;
        values.push(parse_value(field, line)?);
    }
    if values.is_empty() {
        return Err(Error::Domain(format!(
            "{} contains no observations",
            path.display()
        )));
    }
    let name = path.file_stem().map_or_else(
        || "series".to_string(),
        |s| s.to_string_lossy().into_owned(),
    );
    TimeSeries::new(name, values)
}

/// Min-max scaling fitted on training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub lo: f64,
    pub hi: f64,
}

impl ScalerParams {
    pub fn fit(train: &[f64]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Domain("cannot fit a scaler on no data".into()));
        }
        let lo = train.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = train.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            return Err(Error::Domain(format!(
                "training data is constant ({lo}); min-max range is degenerate"
            )));
        }
        Ok(ScalerParams { lo, hi })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * (self.hi - self.lo) + self.lo
    }

    pub fn apply_all(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.apply(v)).collect()
    }
}

pub fn fit_scaler(train: &TimeSeries) -> Result<ScalerParams> {
    ScalerParams::fit(&train.values)
}

/// One supervised example: two lead-in points, the input window, and the next value.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub lead_in: [f64; 2],
    pub input: Vec<f64>,
    pub target: f64,
    /// Series position of `target`.
    pub index: usize,
}

/// Number of stride-1 windows a series of `len` values yields.
pub fn window_count(len: usize, window_len: usize) -> usize {
    len.saturating_sub(window_len + 2)
}

pub fn make_windows(values: &[f64], window_len: usize) -> Result<Vec<WindowSample>> {
    if window_len == 0 {
        return Err(Error::Config("window length must be at least 1".into()));
    }
    let need = window_len + 3;
    if values.len() < need {
        return Err(Error::Domain(format!(
            "series of length {} is too short for window {window_len}: need at least {need}",
            values.len()
        )));
    }
    Ok((window_len + 2..values.len())
        .map(|index| sample_at(values, window_len, index))
        .collect())
}

/// The sample whose target sits at `index` (requires `index ≥ window_len + 2`).
pub(crate) fn sample_at(values: &[f64], window_len: usize, index: usize) -> WindowSample {
    let start = index - window_len;
    WindowSample {
        lead_in: [values[start - 2], values[start - 1]],
        input: values[start..index].to_vec(),
        target: values[index],
        index,
    }
}

/// Size of the training part under a chronological split.
pub fn train_count(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    Ok((fraction * n as f64).floor() as usize)
}

/// First `⌊fraction·N⌋` samples train, the rest test; order is preserved.
pub fn train_test_split<T: Clone>(samples: &[T], fraction: f64) -> Result<(Vec<T>, Vec<T>)> {
    let k = train_count(samples.len(), fraction)?;
    Ok((samples[..k].to_vec(), samples[k..].to_vec()))
}
