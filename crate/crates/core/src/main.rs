// `!(x > 0.0)` style checks reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hvc::checkpoint::Checkpoint;
use hvc::data::{generate, manifest_path, read_records, write_manifest, write_records, DatasetSpec, Manifest};
use hvc::gradcheck::max_rel_error;
use hvc::metrics::gap_at_k;
use hvc::model::{ModelConfig, PRESETS};
use hvc::predictions::{average_predictions, PredictionFile};
use hvc::training::{dataset_dims, pipeline_gradcheck, predict, train_model_with};
use hvc::Error;

/// Multi-label video classification over frame-level features.
#[derive(Parser)]
#[command(name = "hvc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic SGV1 dataset (plus manifest sidecar).
    GenData {
        /// Dataset spec JSON; omitted fields take defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// Index of the first generated video, for disjoint splits of one world.
        #[arg(long, default_value_t = 0)]
        skip: u64,
    },
    /// Train a model and write its checkpoint and JSON report.
    Train {
        /// Model config JSON.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Named preset, used when no config file is given.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Write top-k predictions for a dataset.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print GAP@k of a prediction file against a dataset's labels.
    Eval {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 20)]
        k: usize,
    },
    /// Average prediction files.
    Ensemble {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Finite-difference check of the full training loss.
    Gradcheck {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the names of the built-in model presets.
    Presets,
    /// Print a preset as a JSON config.
    ShowPreset { name: String },
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::Argument(_) => Failure::Usage(msg),
            Error::Training { .. } | Error::Evaluation(_) => Failure::Numeric(msg),
            _ => Failure::Data(msg),
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn model_config(config: Option<PathBuf>, preset: Option<String>) -> Result<ModelConfig, Failure> {
    match (config, preset) {
        (Some(path), _) => read_json(&path),
        (None, Some(name)) => Ok(ModelConfig::preset(&name)?),
        (None, None) => Err(Failure::Usage("pass --config or --preset".into())),
    }
}

fn write_json<T: serde::Serialize>(path: &PathBuf, value: &T) -> Result<(), Failure> {
    let json = serde_json::to_string_pretty(value).map_err(Error::from)?;
    std::fs::write(path, json + "\n").map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { spec, out, count, skip } => {
            let spec: DatasetSpec = match spec {
                Some(p) => read_json(&p)?,
                None => DatasetSpec::default(),
            };
            let (world, examples) = generate(&spec, skip, count)?;
            let checksums = write_records(&out, &examples)?;
            let mut manifest = Manifest::new(checksums);
            manifest.first_index = Some(skip);
            manifest.spec = Some(spec);
            manifest.taxonomy = Some(world.taxonomy);
            write_manifest(manifest_path(&out), &manifest)?;
        }
        Command::Train {
            config,
            preset,
            train,
            valid,
            out,
            report,
            seed,
            epochs,
            quiet,
        } => {
            let mut config = model_config(config, preset)?;
            if let Some(s) = seed {
                config.seed = s;
            }
            if let Some(e) = epochs {
                config.optimizer.epochs = e;
            }
            let train_set = read_records(&train)?;
            let valid_set = read_records(&valid)?;
            let dims = dataset_dims(&train, &train_set)?;
            let (rep, model) = train_model_with(config, dims, &train_set, &valid_set, |e| {
                if !quiet {
                    eprintln!(
                        "epoch {:>3}  loss {:.6}  valid GAP {:.6}  lr {:.3e}  {:.1}s",
                        e.epoch, e.train_loss, e.valid_gap, e.learning_rate, e.wall_time_secs
                    );
                }
            })?;
            Checkpoint::from_model(&model).write(&out)?;
            if let Some(path) = report {
                write_json(&path, &rep)?;
            }
        }
        Command::Predict { ckpt, data, k, out } => {
            if k == 0 {
                return Err(Failure::Usage("--k must be at least 1".into()));
            }
            let model = Checkpoint::read(&ckpt)?.into_model()?;
            let examples = read_records(&data)?;
            predict(&model, &examples, k)?.write(&out)?;
        }
        Command::Eval { preds, truth, k } => {
            if k == 0 {
                return Err(Failure::Usage("--k must be at least 1".into()));
            }
            let preds = PredictionFile::read(&preds)?;
            let truth = hvc::data::ground_truth(&read_records(&truth)?);
            println!("{:.6}", gap_at_k(&preds.list, &truth, k)?);
        }
        Command::Ensemble { out, inputs } => {
            let files = inputs.iter().map(PredictionFile::read).collect::<Result<Vec<_>, _>>()?;
            average_predictions(&files)?.write(&out)?;
        }
        Command::Gradcheck {
            config,
            preset,
            trials,
            eps,
            seed,
        } => {
            let config = model_config(config, preset)?;
            let reports = pipeline_gradcheck(&config, trials, eps, seed)?;
            let worst = max_rel_error(&reports);
            println!("{worst:.3e}");
            if !(worst < 1e-4) {
                return Err(Failure::Numeric(format!("max relative error {worst:.3e} >= 1e-4")));
            }
        }
        Command::Presets => {
            for p in PRESETS {
                println!("{p}");
            }
        }
        Command::ShowPreset { name } => {
            let json = serde_json::to_string_pretty(&ModelConfig::preset(&name)?).map_err(Error::from)?;
            println!("{json}");
        }
    }
    Ok(())
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
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Usage(m) => (1, m),
                Failure::Data(m) => (2, m),
                Failure::Numeric(m) => (3, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
