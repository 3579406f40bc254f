//! Training loops, evaluation, ablations and their on-disk outputs.

mod ablate;
mod config;
mod optim;
mod train;

pub use ablate::{ablate, AblationReport, AblationRow, ABLATION_FILE, BASELINE_FILE};
pub use config::{CutoutMode, EvalModel, InitMode, RunConfig};
pub use optim::{clip_grad_norm, Adam};
pub use train::{
    objective, pseudo_labels_on_tape, train_ssl, train_supervised, LabeledView, SslOptions, SslOutcome, StepLog,
    SupervisedOutcome, TrainState, UnlabeledView, LOSSES_HEADER,
};

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::{self, DataError, Dataset, Split};
use crate::eval::{map_50_95, metrics_header, metrics_row, EvalResult, ImageEval};
use crate::model::{self, CheckpointError, Detection, DetectorConfig, ModelError};
use crate::teacher::TeacherError;
use crate::tensor::{ParamSet, TensorError};

pub const METRICS_FILE: &str = "metrics.csv";
pub const LOSSES_FILE: &str = "losses.csv";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const BEST_FILE: &str = "best.mtdp";
pub const TEACHER_FILE: &str = "teacher.mtdp";
pub const STUDENT_FILE: &str = "student.mtdp";
pub const STATE_FILE: &str = "state.mtdp";

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),
    #[error("diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence { epoch: usize, step: u64, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("internal error: {0}")]
    Internal(String),
}

impl From<TensorError> for HarnessError {
    fn from(e: TensorError) -> Self {
        HarnessError::Internal(e.to_string())
    }
}

impl From<TeacherError> for HarnessError {
    fn from(e: TeacherError) -> Self {
        match e {
            TeacherError::Model(m) => HarnessError::Model(m),
            other => HarnessError::Internal(other.to_string()),
        }
    }
}

impl HarnessError {
    /// 1 usage, 2 divergence, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Divergence { .. } => 2,
            HarnessError::Io { .. } | HarnessError::Data(_) | HarnessError::Checkpoint(_) => 3,
            HarnessError::Usage(_) | HarnessError::Model(_) | HarnessError::Internal(_) => 1,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, contents).map_err(io_err(path))
}

pub(crate) fn write_lines(path: &Path, header: &str, rows: &[String]) -> Result<(), HarnessError> {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(header);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    write_file(path, &s)
}

/// Everything a training run reads from disk.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: RunConfig,
    pub train: Dataset,
    pub eval: Dataset,
    pub split: Split,
    /// Mean training colour, used for padding and CutOut.
    pub fill: [f64; 3],
}

impl Context {
    pub fn load(cfg: &RunConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let train = data::load_dataset(&cfg.dataset.join("train"))?;
        let eval = data::load_dataset(&cfg.dataset.join("eval"))?;
        let mut ctx = Self {
            cfg: cfg.clone(),
            fill: train.channel_means(),
            train,
            eval,
            split: Split {
                labeled: Vec::new(),
                unlabeled: Vec::new(),
            },
        };
        ctx.load_split()?;
        Ok(ctx)
    }

    /// Reads the split named by `split.fraction` and `split.seed`.
    pub fn load_split(&mut self) -> Result<(), HarnessError> {
        let path = data::split_path(&self.cfg.dataset, self.cfg.split_fraction, self.cfg.split_seed);
        let (spec, split) = data::load_split(&path)?;
        if spec.total_images != self.train.len() {
            return Err(HarnessError::Usage(format!(
                "{} covers {} images but the training set has {}",
                path.display(),
                spec.total_images,
                self.train.len()
            )));
        }
        self.split = split;
        Ok(())
    }

    pub fn with_config(&self, cfg: RunConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let mut ctx = Self { cfg, ..self.clone() };
        ctx.load_split()?;
        Ok(ctx)
    }
}

/// Runs `params` on every scene; returns the metrics and the raw detections
/// (one per query, nothing suppressed).
pub fn evaluate(params: &ParamSet, cfg: &DetectorConfig, ds: &Dataset) -> Result<(EvalResult, Vec<Vec<Detection>>), ModelError> {
    model::check_params(cfg, params)?;
    let mut images = Vec::with_capacity(ds.len());
    for s in &ds.scenes {
        images.push(ImageEval {
            detections: model::predict(params, cfg, &s.image)?,
            ground_truth: s.objects.clone(),
        });
    }
    let result = map_50_95(&images, cfg.num_classes);
    Ok((result, images.into_iter().map(|i| i.detections).collect()))
}

#[derive(Serialize)]
struct DetectionRow<'a> {
    image: usize,
    #[serde(flatten)]
    det: &'a Detection,
}

pub fn write_detections(path: &Path, dets: &[Vec<Detection>]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    for (image, per_image) in dets.iter().enumerate() {
        for det in per_image {
            let line = serde_json::to_string(&DetectionRow { image, det }).expect("detections serialize");
            writeln!(w, "{line}").map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

/// A plain parameter file, or the teacher/student half of a training state.
pub fn load_model_params(path: &Path, which: EvalModel) -> Result<ParamSet, HarnessError> {
    let ps = model::load_params(path)?;
    if ps.get(train::META_EPOCH).is_none() {
        return Ok(ps);
    }
    let state = TrainState::from_params(&ps)?;
    Ok(match which {
        EvalModel::Teacher => state.teacher,
        EvalModel::Student => state.student,
    })
}

/// Evaluates a checkpoint on `dataset` and writes `metrics.csv` and
/// `detections.jsonl` under `out`.
pub fn evaluate_cmd(cfg: &RunConfig, checkpoint: &Path, dataset: &Path, out: &Path) -> Result<EvalResult, HarnessError> {
    cfg.validate()?;
    let params = load_model_params(checkpoint, cfg.eval_model)?;
    model::check_params(&cfg.model, &params).map_err(|e| HarnessError::Usage(format!("{}: {e}", checkpoint.display())))?;
    let ds = data::load_dataset(dataset)?;
    let (result, dets) = evaluate(&params, &cfg.model, &ds)?;
    write_lines(
        &out.join(METRICS_FILE),
        &metrics_header(cfg.num_classes()),
        &[metrics_row(0, "eval", 0.0, &result)],
    )?;
    write_detections(&out.join(DETECTIONS_FILE), &dets)?;
    Ok(result)
}

/// Writes `<dataset>/train`, `<dataset>/eval` and the split named in `cfg`.
pub fn generate_data_cmd(cfg: &RunConfig) -> Result<PathBuf, HarnessError> {
    data::generate_dataset(&cfg.dataset, cfg.train_images, cfg.eval_images, cfg.seed)?;
    split_cmd(cfg)
}

pub fn split_cmd(cfg: &RunConfig) -> Result<PathBuf, HarnessError> {
    let total = data::load_dataset(&cfg.dataset.join("train"))?.len();
    let spec = data::SplitSpec {
        total_images: total,
        labeled_fraction: cfg.split_fraction,
        subset_seed: cfg.split_seed,
    };
    let split = data::make_splits(&spec)?;
    Ok(data::save_split(&cfg.dataset, &spec, &split)?)
}
