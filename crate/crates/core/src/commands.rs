//! The operations behind each CLI subcommand. Every function here is
//! deterministic given its inputs; printing is left to the caller.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::DaLstmModel;
use crate::checkpoint::{ModelCheckpoint, SavedMetrics};
use crate::config::RunConfig;
use crate::data::{generate_synthetic, write_csv, GeneratorSpec, TimeSeries};
use crate::error::{Error, Result};
use crate::forecaster::Forecaster;
use crate::metrics::{report, MetricsReport};
use crate::model::{AnyModel, ModelKind};
use crate::numerics::{finite_diff_gradient, gradient_check, GradientBundle, Parameterized};
use crate::training::{
    finish_cascade, fit_forecaster, init_daec, CascadeModel, LossHistory, PreparedData, TrainConfig,
};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Generates a series and writes it with its sidecar.
pub fn cmd_generate(spec: &GeneratorSpec, out: &Path) -> Result<TimeSeries> {
    let series = generate_synthetic(spec)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_csv(&series, out)?;
    Ok(series)
}

/// Metrics in original units at `range` (narrowed to what the model can predict).
pub fn evaluate_range(
    model: &AnyModel,
    data: &PreparedData,
    range: Range<usize>,
) -> Result<(Range<usize>, Vec<f64>, MetricsReport)> {
    let targets = model.eval_targets(data, range);
    if targets.is_empty() {
        return Err(Error::Domain(format!(
            "no predictable targets in this split for a {} model with window {}",
            model.kind(),
            data.window_len
        )));
    }
    let pred = model.predict(data, targets.clone())?;
    let metrics = report(&data.raw[targets.clone()], &pred)?;
    Ok((targets, pred, metrics))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub history: LossHistory,
    pub metrics: SavedMetrics,
    pub output_dir: PathBuf,
}

#[derive(Serialize)]
struct TrainMetricsFile<'a> {
    model: ModelKind,
    train: &'a MetricsReport,
    test: &'a MetricsReport,
}

/// Trains the configured model and writes `checkpoint.json`,
/// `loss_history.csv`, and `metrics.json` to the output directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let train_cfg = cfg.train_config()?;
    let series = cfg.dataset()?.load()?;
    let kind = cfg.model();
    let data = PreparedData::new(&series, train_cfg.window_len, train_cfg.split)?;
    let (model, history) = AnyModel::train(kind, &data, &train_cfg)?;
    let (_, _, train) = evaluate_range(&model, &data, data.train_targets.clone())?;
    let (_, _, test) = evaluate_range(&model, &data, data.test_targets.clone())?;
    let metrics = SavedMetrics { train, test };
    let checkpoint = ModelCheckpoint::new(
        &model,
        &train_cfg,
        data.scaler,
        series.fingerprint(),
        Some(metrics),
    );
    let dir = cfg.output_dir();
    create_dir(&dir)?;
    checkpoint.save(&dir.join("checkpoint.json"))?;
    write_text(&dir.join("loss_history.csv"), &history.to_csv())?;
    write_json(
        &dir.join("metrics.json"),
        &TrainMetricsFile {
            model: kind,
            train: &metrics.train,
            test: &metrics.test,
        },
    )?;
    Ok(TrainOutcome {
        checkpoint,
        history,
        metrics,
        output_dir: dir,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    All,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            _ => Err(Error::Config(format!(
                "unknown split {s:?}; expected train, test, or all"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalOutcome {
    pub model: ModelKind,
    pub split: Split,
    /// Whether the evaluated series is the one the checkpoint was trained on.
    pub same_dataset: bool,
    pub metrics: MetricsReport,
    #[serde(skip)]
    pub indices: Vec<usize>,
    #[serde(skip)]
    pub truth: Vec<f64>,
    #[serde(skip)]
    pub predictions: Vec<f64>,
}

/// Evaluates a checkpoint on `series` with the checkpoint's own scaler and
/// split, writing `predictions.csv` and `metrics.json` to `out_dir`.
pub fn cmd_evaluate(
    checkpoint: &Path,
    series: &TimeSeries,
    split: Split,
    out_dir: &Path,
) -> Result<EvalOutcome> {
    let ck = ModelCheckpoint::load(checkpoint)?;
    let model = ck.model()?;
    let tc = &ck.train_config;
    let data = PreparedData::with_scaler(series, tc.window_len, tc.split, ck.scaler)?;
    let range = match split {
        Split::Train => data.train_targets.clone(),
        Split::Test => data.test_targets.clone(),
        Split::All => data.train_targets.start..data.test_targets.end,
    };
    let (targets, predictions, metrics) = evaluate_range(&model, &data, range)?;
    let outcome = EvalOutcome {
        model: ck.model_kind,
        split,
        same_dataset: series.fingerprint() == ck.dataset_fingerprint,
        metrics,
        indices: targets.clone().collect(),
        truth: data.raw[targets].to_vec(),
        predictions,
    };
    create_dir(out_dir)?;
    let path = out_dir.join("predictions.csv");
    let mut wtr = csv::Writer::from_path(&path)?;
    wtr.write_record(["index", "truth", "prediction"])?;
    for ((i, t), p) in outcome
        .indices
        .iter()
        .zip(&outcome.truth)
        .zip(&outcome.predictions)
    {
        wtr.write_record([i.to_string(), t.to_string(), p.to_string()])?;
    }
    wtr.flush().map_err(|e| Error::io(&path, e))?;
    write_json(&out_dir.join("metrics.json"), &outcome)?;
    Ok(outcome)
}

/// One comparison row; `seed` is `None` on median rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub model: ModelKind,
    pub seed: Option<u64>,
    /// Epochs in the base, error-correction, and joint phases.
    pub epochs: [usize; 3],
    pub test: MetricsReport,
}

impl CompareRow {
    pub fn label(&self) -> String {
        match self.seed {
            Some(s) => format!("{} seed {s}", self.model.label()),
            None => format!("{} median", self.model.label()),
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Trains every model under every seed on the same data and configuration,
/// and scores each on the test targets every model can predict. Rows are
/// grouped by model in the requested order: one per seed, then a median row
/// when there are several seeds. `progress` sees each row as it completes.
pub fn compare_models(
    series: &TimeSeries,
    models: &[ModelKind],
    seeds: &[u64],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&CompareRow),
) -> Result<Vec<CompareRow>> {
    if models.len() < 2 {
        return Err(Error::Config(format!(
            "compare needs at least 2 models, got {}",
            models.len()
        )));
    }
    if seeds.is_empty() {
        return Err(Error::Config("compare needs at least one seed".into()));
    }
    cfg.validate()?;
    let data = PreparedData::new(series, cfg.window_len, cfg.split)?;
    let targets = data.cascade_targets(data.test_targets.clone());
    if targets.is_empty() {
        return Err(Error::Domain(
            "no test target has a full residual history".into(),
        ));
    }
    let mut per_model: Vec<Vec<CompareRow>> = vec![Vec::new(); models.len()];
    for &seed in seeds {
        let run = TrainConfig {
            seed,
            ..cfg.clone()
        };
        // The difference-attention baseline is exactly the cascade's pretrained base.
        let mut da: Option<(DaLstmModel, Vec<f64>)> = None;
        for (k, &kind) in models.iter().enumerate() {
            let (model, history) = match kind {
                ModelKind::DaLstm | ModelKind::DaecLstm => {
                    let init = init_daec(&run);
                    if da.is_none() {
                        let train = data.samples(data.train_targets.clone());
                        da = Some(fit_forecaster(init.base, &train, run.epochs_da, &run)?);
                    }
                    let (base, h) = da.clone().expect("pretrained above");
                    if kind == ModelKind::DaLstm {
                        let history = LossHistory {
                            base: h,
                            ..LossHistory::default()
                        };
                        (AnyModel::DaLstm(base), history)
                    } else {
                        let (m, history) = finish_cascade(base, h, init.ec, &data, &run)?;
                        (AnyModel::DaecLstm(m), history)
                    }
                }
                _ => AnyModel::train(kind, &data, &run)?,
            };
            let pred = model.predict(&data, targets.clone())?;
            let row = CompareRow {
                model: kind,
                seed: Some(seed),
                epochs: [history.base.len(), history.ec.len(), history.joint.len()],
                test: report(&data.raw[targets.clone()], &pred)?,
            };
            progress(&row);
            per_model[k].push(row);
        }
    }
    let mut rows = Vec::new();
    for (k, group) in per_model.into_iter().enumerate() {
        if group.len() > 1 {
            let pick =
                |f: fn(&MetricsReport) -> f64| median(group.iter().map(|r| f(&r.test)).collect());
            let med = CompareRow {
                model: models[k],
                seed: None,
                epochs: group[0].epochs,
                test: MetricsReport {
                    mse: pick(|m| m.mse),
                    rmse: pick(|m| m.rmse),
                    mape: pick(|m| m.mape),
                    n: group[0].test.n,
                },
            };
            rows.extend(group);
            rows.push(med);
        } else {
            rows.extend(group);
        }
    }
    Ok(rows)
}

/// Aligned table of comparison rows with their epoch budgets.
pub fn render_compare(rows: &[CompareRow]) -> String {
    let cells: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.label(),
                format!("{}/{}/{}", r.epochs[0], r.epochs[1], r.epochs[2]),
                r.test.mse_text(),
                r.test.rmse_text(),
                r.test.mape_text(),
            ]
        })
        .collect();
    let heads = ["Method", "Epochs", "MSE", "RMSE", "MAPE"];
    let widths: Vec<usize> = (0..5)
        .map(|k| {
            cells
                .iter()
                .map(|c| c[k].len())
                .chain([heads[k].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |c: [&str; 5]| {
        let mut s = format!("{:<w$}", c[0], w = widths[0]);
        for k in 1..5 {
            s.push_str(&format!("  {:>w$}", c[k], w = widths[k]));
        }
        s + "\n"
    };
    let mut out = line(heads);
    for c in &cells {
        out.push_str(&line([&c[0], &c[1], &c[2], &c[3], &c[4]]));
    }
    out
}

#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub rows: Vec<CompareRow>,
    pub table: String,
    pub output_dir: PathBuf,
}

/// Runs [`compare_models`] for the configured models and seeds, writing
/// `compare.txt` and `compare.json` to the output directory.
pub fn cmd_compare(cfg: &RunConfig, progress: impl FnMut(&CompareRow)) -> Result<CompareOutcome> {
    if cfg.models.len() < 2 {
        return Err(Error::Config(format!(
            "compare needs at least 2 models, got {}",
            cfg.models.len()
        )));
    }
    let train_cfg = cfg.train_config()?;
    let series = cfg.dataset()?.load()?;
    let rows = compare_models(
        &series,
        &cfg.models,
        &cfg.compare_seeds()?,
        &train_cfg,
        progress,
    )?;
    let table = render_compare(&rows);
    let dir = cfg.output_dir();
    create_dir(&dir)?;
    write_text(&dir.join("compare.txt"), &table)?;
    write_json(&dir.join("compare.json"), &rows)?;
    Ok(CompareOutcome {
        rows,
        table,
        output_dir: dir,
    })
}

/// Gradient checks refuse models larger than this.
pub const GRADCHECK_MAX_PARAMS: usize = 2000;
pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckRequest {
    pub kind: ModelKind,
    pub hidden: usize,
    pub window: usize,
    pub layers: usize,
    pub seed: u64,
    /// Perturbs one analytic gradient entry; the check must then fail.
    pub corrupt: bool,
}

impl GradcheckRequest {
    pub fn new(kind: ModelKind, seed: u64) -> Self {
        GradcheckRequest {
            kind,
            hidden: 4,
            window: 5,
            layers: 2,
            seed,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub kind: ModelKind,
    pub param_count: usize,
    /// Maximum relative error of each checked loss.
    pub checks: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn summary(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        let parts: Vec<String> = self
            .checks
            .iter()
            .map(|(n, e)| format!("{n} {e:.3e}"))
            .collect();
        format!(
            "{verdict} {} ({} params): max relative error {:.3e} [{}]",
            self.kind,
            self.param_count,
            self.max_rel_error,
            parts.join(", ")
        )
    }
}

fn corrupt_first(bundle: &mut GradientBundle) {
    if let Some(v) = bundle
        .arrays_mut()
        .iter_mut()
        .flat_map(|a| a.values.iter_mut())
        .next()
    {
        *v += 1.0;
    }
}

/// Squared one-step error of a forecaster, analytic against numeric.
fn check_forecaster<F: Forecaster>(
    m: &F,
    lead_in: [f64; 2],
    window: &[f64],
    target: f64,
    corrupt: bool,
) -> Result<f64> {
    let (y, trace) = m.trace(lead_in, window)?;
    let mut grad = m.zeroed();
    m.backward(&trace, 2.0 * (y - target), &mut grad);
    let mut analytic = GradientBundle::of(&grad);
    if corrupt {
        corrupt_first(&mut analytic);
    }
    let numeric = finite_diff_gradient(
        |p: &F| {
            p.forecast(lead_in, window)
                .map_or(f64::NAN, |y| (y - target).powi(2))
        },
        m,
        GRADCHECK_EPS,
    )?;
    gradient_check(&analytic, &numeric)
}

/// Joint squared error of a cascade with the residual window held fixed.
fn check_joint<B: Forecaster>(
    m: &CascadeModel<B>,
    lead_in: [f64; 2],
    window: &[f64],
    error_window: &[f64],
    target: f64,
    corrupt: bool,
) -> Result<f64> {
    let mut grad = m.clone();
    grad.fill_zero();
    m.joint_loss_grad(lead_in, window, error_window, target, &mut grad)?;
    let mut analytic = GradientBundle::of(&grad);
    if corrupt {
        corrupt_first(&mut analytic);
    }
    let numeric = finite_diff_gradient(
        |p: &CascadeModel<B>| {
            p.predict(lead_in, window, error_window)
                .map_or(f64::NAN, |y| (y - target).powi(2))
        },
        m,
        GRADCHECK_EPS,
    )?;
    gradient_check(&analytic, &numeric)
}

fn check_cascade<B: Forecaster>(
    m: &CascadeModel<B>,
    lead_in: [f64; 2],
    window: &[f64],
    target: f64,
    error_window: &[f64],
    error_target: f64,
    corrupt: bool,
) -> Result<Vec<(String, f64)>> {
    Ok(vec![
        (
            "base".into(),
            check_forecaster(&m.base, lead_in, window, target, false)?,
        ),
        (
            "ec".into(),
            check_forecaster(&m.ec, [0.0; 2], error_window, error_target, false)?,
        ),
        (
            "joint".into(),
            check_joint(m, lead_in, window, error_window, target, corrupt)?,
        ),
    ])
}

/// Random tiny model and sample; compares backpropagated gradients of the
/// squared error against central finite differences. Cascades check the
/// base loss, the residual loss, and the joint loss.
pub fn cmd_gradcheck(req: &GradcheckRequest) -> Result<GradcheckReport> {
    let cfg = TrainConfig {
        window_len: req.window,
        hidden_size: req.hidden,
        ec_hidden_size: req.hidden,
        stacked_layers: req.layers,
        seed: req.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let mut model = AnyModel::init(req.kind, &cfg);
    let param_count = model.param_count();
    if param_count > GRADCHECK_MAX_PARAMS {
        return Err(Error::Config(format!(
            "{} model with hidden {} has {param_count} parameters; gradient checks allow at most {GRADCHECK_MAX_PARAMS}",
            req.kind, req.hidden
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    rng.set_stream(4);
    model.visit_params_mut("", &mut |_, _, vals| {
        for v in vals.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    });
    let series: Vec<f64> = (0..req.window + 3)
        .map(|_| rng.gen_range(0.0..1.0))
        .collect();
    let lead_in = [series[0], series[1]];
    let window = &series[2..2 + req.window];
    let target = series[2 + req.window];
    let error_window: Vec<f64> = (0..req.window).map(|_| rng.gen_range(-0.2..0.2)).collect();
    let error_target = rng.gen_range(-0.2..0.2);
    let c = req.corrupt;
    let checks = match &model {
        AnyModel::Lstm(m) => vec![(
            "loss".into(),
            check_forecaster(m, lead_in, window, target, c)?,
        )],
        AnyModel::SLstm(m) => vec![(
            "loss".into(),
            check_forecaster(m, lead_in, window, target, c)?,
        )],
        AnyModel::DaLstm(m) => vec![(
            "loss".into(),
            check_forecaster(m, lead_in, window, target, c)?,
        )],
        AnyModel::EcLstm(m) => {
            check_cascade(m, lead_in, window, target, &error_window, error_target, c)?
        }
        AnyModel::DaecLstm(m) => {
            check_cascade(m, lead_in, window, target, &error_window, error_target, c)?
        }
    };
    let max_rel_error = checks.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradcheckReport {
        kind: req.kind,
        param_count,
        checks,
        max_rel_error,
        passed: max_rel_error < GRADCHECK_TOLERANCE,
    })
}
