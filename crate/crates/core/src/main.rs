use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mtdetr::eval::EvalResult;
use mtdetr::harness::{self, Context, EvalModel, HarnessError, RunConfig, SslOptions};

#[derive(Parser)]
#[command(name = "mtdetr", version, about = "Semi-supervised detection with a moving-average teacher")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Labeled fraction of the training set.
    #[arg(long)]
    split: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` override, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl Common {
    fn config(&self) -> Result<RunConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| HarnessError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(f) = self.split {
            cfg.split_fraction = f;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Teacher,
    Student,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic train/eval sets and the configured split.
    GenerateData(Common),
    /// Write the labeled subset named by split.fraction and split.seed.
    Split(Common),
    /// Train on labeled images only; keeps the best-on-eval checkpoint.
    TrainSupervised(Common),
    /// Student/teacher training from a fine-tuned checkpoint or from scratch.
    TrainSsl {
        #[command(flatten)]
        common: Common,
        /// Continue from <out>/state.mtdp.
        #[arg(long)]
        resume: bool,
        /// Stop after this many completed epochs (state is saved).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score a checkpoint; writes metrics.csv and detections.jsonl.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint, or a training state (see --model).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image set directory; defaults to <dataset>/eval.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Which half of a training state to score.
        #[arg(long, value_enum)]
        model: Option<Which>,
    },
    /// Run the seven single-axis variants over each ablation seed.
    Ablate(Common),
}

fn summary(r: &EvalResult) -> String {
    format!("mAP {:.4}  AP50 {:.4}  AP75 {:.4}", r.map, r.ap50, r.ap75)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::GenerateData(c) => {
            let cfg = c.config()?;
            let split = harness::generate_data_cmd(&cfg)?;
            println!("wrote {} and {}", cfg.dataset.display(), split.display());
        }
        Command::Split(c) => {
            let path = harness::split_cmd(&c.config()?)?;
            println!("wrote {}", path.display());
        }
        Command::TrainSupervised(c) => {
            let ctx = Context::load(&c.config()?)?;
            let o = harness::train_supervised(&ctx)?;
            println!("best epoch {}: {}", o.best_epoch, summary(&o.best));
        }
        Command::TrainSsl {
            common,
            resume,
            stop_after,
        } => {
            let ctx = Context::load(&common.config()?)?;
            let o = harness::train_ssl(&ctx, SslOptions { resume, stop_after })?;
            println!("epoch {}: {}", o.state.epoch, summary(&o.last));
        }
        Command::Evaluate {
            common,
            checkpoint,
            dataset,
            model,
        } => {
            let mut cfg = common.config()?;
            if let Some(m) = model {
                cfg.eval_model = match m {
                    Which::Teacher => EvalModel::Teacher,
                    Which::Student => EvalModel::Student,
                };
            }
            let ds = dataset.unwrap_or_else(|| cfg.dataset.join("eval"));
            let r = harness::evaluate_cmd(&cfg, &checkpoint, &ds, &cfg.out)?;
            println!("{}", summary(&r));
        }
        Command::Ablate(c) => {
            let cfg = c.config()?;
            let report = harness::ablate(&cfg)?;
            for row in &report.rows {
                match (row.mean(), row.std()) {
                    (Some(m), Some(s)) => println!("{:<18} {m:.4} ± {s:.4}", row.name),
                    _ => println!("{:<18} diverged", row.name),
                }
            }
            println!("wrote {}", cfg.out.join(harness::ABLATION_FILE).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
