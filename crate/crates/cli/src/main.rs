use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hybrid_ensemble::ingest::load_predictions_csv;
use hybrid_ensemble::{Label, RunConfig};
use hybrid_ensemble_cli::error::StageExt;
use hybrid_ensemble_cli::fusion::fuse_only;
use hybrid_ensemble_cli::pipeline::{self, BaseOutputs};
use hybrid_ensemble_cli::{synth_data, CliError, SynthSpec, DEFAULT_TASK};

#[derive(Parser)]
#[command(name = "hybrid-ensemble", version, about = "Hybrid deep ensembles with Grad-CAM explanations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).map_err(CliError::config)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Writes a seeded synthetic blob dataset.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Generator parameters (JSON); flags below override it.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        subjects_per_class: Option<usize>,
        #[arg(long)]
        slices_per_subject: Option<usize>,
        #[arg(long)]
        side: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Splits the data, trains the base models and builds out-of-fold predictions.
    TrainBase {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fits and evaluates the fusion on a prediction CSV (`id,p1..pK,label`).
    Fuse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuses and evaluates the outputs of `train-base`.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Output directory of `train-base`.
        #[arg(long)]
        run: PathBuf,
        /// Defaults to the `--run` directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = DEFAULT_TASK)]
        task: String,
        /// Pool ROC points over cross-validation folds.
        #[arg(long)]
        roc_from_folds: bool,
    },
    /// Grad-CAM overlay for one image and a saved base model.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Target class, 0 or 1.
        #[arg(long, default_value_t = 1)]
        class: u8,
        #[arg(long)]
        out: PathBuf,
    },
    /// The whole pipeline: split, train, fuse, evaluate, explain.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = DEFAULT_TASK)]
        task: String,
        /// Pool ROC points over cross-validation folds.
        #[arg(long)]
        roc_from_folds: bool,
    },
}

fn synth_spec(path: Option<&Path>) -> Result<SynthSpec, CliError> {
    let Some(p) = path else {
        return Ok(SynthSpec::default());
    };
    let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::SynthData {
            common,
            out,
            spec,
            subjects_per_class,
            slices_per_subject,
            side,
            noise,
        } => {
            let mut s = synth_spec(spec.as_deref())?;
            if let Some(seed) = common.seed {
                s.seed = seed;
            }
            if let Some(n) = subjects_per_class {
                s.subjects_per_class = n;
            }
            if let Some(n) = slices_per_subject {
                s.slices_per_subject = n;
            }
            if let Some(n) = side {
                s.image_side = n;
            } else if common.config.is_some() {
                s.image_side = common.load()?.input_side;
            }
            if let Some(n) = noise {
                s.noise_sigma = n;
            }
            let m = synth_data(&s, &out).stage("synth-data")?;
            println!("wrote {} slices to {}", m.samples.len(), out.display());
        }
        Command::TrainBase { common, data, out } => {
            let cfg = common.load()?;
            let t = pipeline::train_base(&cfg, &data, &out)?;
            println!("trained {} base models; outputs in {}", t.base.models.len(), out.display());
        }
        Command::Fuse {
            common,
            predictions,
            out,
        } => {
            let cfg = common.load()?;
            cfg.validate().map_err(CliError::config)?;
            let table = load_predictions_csv(&predictions).stage("fuse")?;
            let outcome = fuse_only(&table, &cfg)?;
            std::fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
            let write = |name: &str, text: String| {
                let p = out.join(name);
                std::fs::write(&p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
            };
            write(pipeline::WEIGHTS_FILE, serde_json::to_string_pretty(&outcome.fusion.weights).expect("json"))?;
            write(pipeline::META_FILE, serde_json::to_string_pretty(&outcome.fusion.meta).expect("json"))?;
            let rows: Vec<_> = outcome.rows.iter().map(|r| &r.0).collect();
            write(pipeline::REPORT_FILE, serde_json::to_string_pretty(&rows).expect("json"))?;
            for r in rows {
                println!("{:<10} acc {:.4} auc {}", r.model, r.accuracy, r.auc.map_or("-".into(), |a| format!("{a:.4}")));
            }
        }
        Command::Evaluate {
            common,
            run,
            out,
            task,
            roc_from_folds,
        } => {
            let mut cfg = common.load()?;
            cfg.roc_from_folds |= roc_from_folds;
            cfg.validate().map_err(CliError::config)?;
            let base = BaseOutputs::load(&run)?;
            let out = out.unwrap_or(run);
            let report = pipeline::evaluate(&cfg, &base, &out, &task)?;
            print!("{}", report.render_table());
        }
        Command::Explain {
            common: _,
            checkpoint,
            image,
            class,
            out,
        } => {
            let class = Label::try_from(class).map_err(|_| CliError::Config(format!("class must be 0 or 1, got {class}")))?;
            for p in pipeline::explain_file(&checkpoint, &image, class, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Run {
            common,
            data,
            out,
            task,
            roc_from_folds,
        } => {
            let mut cfg = common.load()?;
            cfg.roc_from_folds |= roc_from_folds;
            let report = pipeline::run_pipeline(&cfg, &data, &out, &task)?;
            print!("{}", report.render_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
