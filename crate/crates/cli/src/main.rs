use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use daec::commands::{
    cmd_compare, cmd_evaluate, cmd_generate, cmd_gradcheck, cmd_train, GradcheckRequest, Split,
};
use daec::config::{DatasetSource, RunConfig};
use daec::data::{load_csv, GeneratorSpec, SeriesKind};
use daec::metrics::render_table;
use daec::model::ModelKind;
use daec::{Error, Result};

/// Difference-attention LSTM forecasting with cascaded error correction.
#[derive(Debug, Parser)]
#[command(name = "daec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic series as CSV plus a JSON sidecar.
    Generate(GenerateArgs),
    /// Train one model and save its checkpoint, loss history, and metrics.
    Train(RunArgs),
    /// Score a checkpoint on a series and write per-index predictions.
    Evaluate(EvaluateArgs),
    /// Train several models on the same data and budget and tabulate test metrics.
    Compare(CompareArgs),
    /// Compare backpropagated gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Output CSV path; the sidecar goes next to it with a .json extension.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value = "jump-sine")]
    kind: SeriesKind,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    period: Option<f64>,
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long)]
    offset: Option<f64>,
    /// Number of level shifts or slope breaks.
    #[arg(long)]
    events: Option<usize>,
    #[arg(long)]
    event_scale: Option<f64>,
    /// Standard deviation of the additive Gaussian noise.
    #[arg(long)]
    noise: Option<f64>,
}

impl GenerateArgs {
    fn spec(&self) -> GeneratorSpec {
        let d = GeneratorSpec::default();
        GeneratorSpec {
            kind: self.kind,
            length: self.length.unwrap_or(d.length),
            seed: self.seed.unwrap_or(d.seed),
            period: self.period.unwrap_or(d.period),
            amplitude: self.amplitude.unwrap_or(d.amplitude),
            offset: self.offset.unwrap_or(d.offset),
            events: self.events.unwrap_or(d.events),
            event_scale: self.event_scale.unwrap_or(d.event_scale),
            noise: self.noise.unwrap_or(d.noise),
        }
    }
}

/// Experiment settings: a TOML file, then flags on top.
#[derive(Debug, Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Series CSV; replaces the configured dataset.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Generate the dataset with this generator's defaults.
    #[arg(long)]
    synthetic: Option<SeriesKind>,
    /// Length of the generated dataset.
    #[arg(long, requires = "synthetic")]
    length: Option<usize>,
    /// Seed of the generated dataset.
    #[arg(long, requires = "synthetic")]
    data_seed: Option<u64>,
    #[arg(long)]
    model: Option<ModelKind>,
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    ec_hidden: Option<usize>,
    #[arg(long)]
    attention_width: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    epochs_da: Option<usize>,
    #[arg(long)]
    epochs_ec: Option<usize>,
    #[arg(long)]
    epochs_joint: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Fraction of windows used for training.
    #[arg(long)]
    split: Option<f64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(path) = &self.data {
            cfg.dataset = Some(DatasetSource::Csv(path.clone()));
        }
        if let Some(kind) = self.synthetic {
            let d = GeneratorSpec::default();
            cfg.dataset = Some(DatasetSource::Synthetic(GeneratorSpec {
                kind,
                length: self.length.unwrap_or(d.length),
                seed: self.data_seed.unwrap_or(d.seed),
                ..d
            }));
        }
        let t = &mut cfg.train;
        set(&mut t.window_len, self.window);
        set(&mut t.hidden_size, self.hidden);
        set(&mut t.ec_hidden_size, self.ec_hidden);
        set(&mut t.stacked_layers, self.layers);
        set(&mut t.epochs_da, self.epochs_da);
        set(&mut t.epochs_ec, self.epochs_ec);
        set(&mut t.epochs_joint, self.epochs_joint);
        set(&mut t.lr, self.lr);
        set(&mut t.split, self.split);
        if self.attention_width.is_some() {
            t.attention_width = self.attention_width;
        }
        if self.model.is_some() {
            cfg.model = self.model;
        }
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        if self.output_dir.is_some() {
            cfg.output_dir = self.output_dir.clone();
        }
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Series CSV to evaluate on.
    #[arg(long, required_unless_present = "config", conflicts_with = "config")]
    data: Option<PathBuf>,
    /// Take the dataset from this run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Directory for predictions.csv and metrics.json; defaults to the checkpoint's directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated models, in output order.
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<ModelKind>>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long)]
    model: ModelKind,
    #[arg(long, default_value_t = 4)]
    hidden: usize,
    #[arg(long, default_value_t = 5)]
    window: usize,
    /// Depth of the stacked model.
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Perturb one analytic gradient entry so the check must fail.
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate(a) => {
            let series = cmd_generate(&a.spec(), &a.out)?;
            let events = series.meta.as_ref().map_or(0, |m| m.events.len());
            println!(
                "wrote {} values ({events} events) to {}",
                series.len(),
                a.out.display()
            );
        }
        Command::Train(a) => {
            let cfg = a.resolve()?;
            let out = cmd_train(&cfg)?;
            let label = out.checkpoint.model_kind.label();
            print!(
                "{}",
                render_table(&[
                    (format!("{label} train"), out.metrics.train),
                    (format!("{label} test"), out.metrics.test),
                ])
            );
            println!(
                "checkpoint: {}",
                out.output_dir.join("checkpoint.json").display()
            );
        }
        Command::Evaluate(a) => {
            let series = match (&a.data, &a.config) {
                (Some(path), _) => load_csv(path)?,
                (None, Some(cfg)) => RunConfig::load(cfg)?.dataset()?.load()?,
                (None, None) => unreachable!("clap requires one of --data and --config"),
            };
            let dir = a.output_dir.clone().unwrap_or_else(|| {
                a.checkpoint
                    .parent()
                    .unwrap_or(Path::new("."))
                    .to_path_buf()
            });
            let out = cmd_evaluate(&a.checkpoint, &series, a.split, &dir)?;
            if !out.same_dataset {
                eprintln!("note: series differs from the one the checkpoint was trained on");
            }
            print!(
                "{}",
                render_table(&[(
                    format!("{} {:?}", out.model.label(), out.split).to_lowercase(),
                    out.metrics
                )])
            );
            println!("predictions: {}", dir.join("predictions.csv").display());
        }
        Command::Compare(a) => {
            let mut cfg = a.run.resolve()?;
            if let Some(models) = a.models {
                cfg.models = models;
            }
            if let Some(seeds) = a.seeds {
                cfg.seeds = seeds;
            }
            let out = cmd_compare(&cfg, |row| {
                eprintln!("done: {} test MSE {}", row.label(), row.test.mse_text());
            })?;
            print!("{}", out.table);
            println!("results: {}", out.output_dir.join("compare.json").display());
        }
        Command::Gradcheck(a) => {
            let report = cmd_gradcheck(&GradcheckRequest {
                kind: a.model,
                hidden: a.hidden,
                window: a.window,
                layers: a.layers,
                seed: a.seed,
                corrupt: a.corrupt_gradient,
            })?;
            println!("{}", report.summary());
            if !report.passed {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code().clamp(1, 255) as u8
}
