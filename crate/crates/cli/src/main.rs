use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use livlr_core::checkpoint;
use livlr_core::train::{self, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE};
use livlr_core::{
    gen_synthetic, param_count, Dataset, Error, LiVLR, ModelConfig, Precision, Result, SignalSource, SyntheticTaskSpec,
};

/// Multi-grained visual-linguistic reasoning for video question answering.
#[derive(Debug, Parser)]
#[command(name = "livlr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        /// Task description (JSON SyntheticTaskSpec).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Config file, or one of the presets tiny, desk, paper.
        #[arg(long, default_value = "desk")]
        config: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and write config.json, metrics.csv and model.ckpt.
    Train {
        #[arg(long)]
        config: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Loss and accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of every parameter gradient (always in double precision).
    GradCheck {
        #[arg(long)]
        config: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Trainable scalar counts per module.
    ParamCount {
        #[arg(long)]
        config: String,
    },
    /// Train once per head count and report final accuracies as CSV.
    SweepNh {
        #[arg(long)]
        config: String,
        /// Dataset directory; defaults to the 64-sample fine-grained visual task.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,4,8,16,32")]
        values: Vec<usize>,
    },
}

fn load_config(arg: &str) -> Result<ModelConfig> {
    let path = Path::new(arg);
    if !path.exists() {
        if let Some(cfg) = ModelConfig::preset(arg) {
            return Ok(cfg);
        }
    }
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{arg}: {e}")))?;
    ModelConfig::from_json(&text)
}

fn load_spec(path: &Path) -> Result<SyntheticTaskSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn default_sweep_data(cfg: &ModelConfig) -> Result<Dataset> {
    let spec = SyntheticTaskSpec {
        n_samples: 64,
        signal_source: SignalSource::FinegrainedVisual,
        noise_scale: 0.1,
        n_classes: cfg.answer_set_size.min(4),
    };
    gen_synthetic(&spec, cfg, cfg.seed)
}

/// Exit status of a failed gradient check.
const NUMERIC_FAILURE: u8 = 4;

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::GenData {
            spec,
            out,
            config,
            seed,
        } => {
            let cfg = load_config(&config)?;
            let spec = load_spec(&spec)?;
            let ds = gen_synthetic(&spec, &cfg, seed)?;
            ds.save(&out)?;
            println!("wrote {} samples to {}", ds.len(), out.display());
        }
        Command::Train { config, data, out_dir } => {
            let cfg = load_config(&config)?;
            let ds = Dataset::load(&data)?;
            let outcome = train::train_to_dir(&cfg, &ds, &out_dir)?;
            let last = outcome.metrics.last().expect("at least one epoch");
            println!(
                "epochs={} train_loss={:.6} train_acc={:.4}",
                outcome.metrics.len(),
                last.train_loss,
                last.train_acc
            );
            for f in [CONFIG_FILE, METRICS_FILE, CHECKPOINT_FILE] {
                println!("wrote {}", out_dir.join(f).display());
            }
        }
        Command::Eval { checkpoint, data } => {
            let ck = checkpoint::load(&checkpoint)?;
            let cfg = ck.config.clone();
            let store = ck.into_store(&LiVLR::new(&cfg)?.specs())?;
            let ds = Dataset::load(&data)?;
            let e = train::evaluate(&cfg, &store, &ds)?;
            println!("loss={:.6} accuracy={:.4} samples={}", e.loss, e.accuracy, ds.len());
        }
        Command::GradCheck { config, seed } => {
            let cfg = ModelConfig {
                precision: Precision::Double,
                ..load_config(&config)?
            };
            let report = train::grad_check(&cfg, seed)?;
            print!("{report}");
            if !report.passed() {
                let worst = report.worst().expect("failing check");
                eprintln!("gradient check failed; worst parameter `{}`", worst.name);
                return Ok(NUMERIC_FAILURE);
            }
        }
        Command::ParamCount { config } => {
            println!("{}", param_count(&load_config(&config)?)?);
        }
        Command::SweepNh { config, data, values } => {
            let cfg = load_config(&config)?;
            let ds = match data {
                Some(dir) => Dataset::load(&dir)?,
                None => default_sweep_data(&cfg)?,
            };
            println!("n_h,final_train_acc,final_train_loss");
            for p in train::sweep_nh(&cfg, &ds, &values)? {
                println!("{},{:.6},{:.6}", p.n_h, p.final_train_acc, p.final_train_loss);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
