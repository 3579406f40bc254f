//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use crate::augment::AugConfig;
use crate::data::NUM_CLASSES;
use crate::losses::{FocalParams, LossWeights};
use crate::model::DetectorConfig;
use crate::teacher::{EmaSchedule, PostProcess, ScheduleKind};

use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    AfterFt,
    Scratch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CutoutMode {
    /// Off for labeled fractions at or below 2%.
    Auto,
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalModel {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub train_images: usize,
    pub eval_images: usize,
    pub split_fraction: f64,
    pub split_seed: u64,
    pub model: DetectorConfig,
    pub aug: AugConfig,
    pub sup_cutout: CutoutMode,
    pub weights: LossWeights,
    pub focal: FocalParams,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub schedule: ScheduleKind,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub ssl_epochs: usize,
    pub sup_epochs: usize,
    /// Stop fine-tuning after this many epochs without a new best; 0 never stops.
    pub sup_patience: usize,
    /// Fine-tuning evaluates (and may save a new best) every this many epochs.
    pub sup_eval_every: usize,
    pub lr: f64,
    pub lr_decay_fraction: f64,
    pub lr_decay_factor: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub init: InitMode,
    pub init_checkpoint: Option<PathBuf>,
    pub nms: bool,
    pub nms_iou: f64,
    pub threshold: Option<f64>,
    pub eval_model: EvalModel,
    pub ablate_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ema = EmaSchedule::default();
        Self {
            dataset: PathBuf::from("data"),
            out: PathBuf::from("runs/default"),
            seed: 0,
            train_images: 2000,
            eval_images: 500,
            split_fraction: 0.05,
            split_seed: 0,
            model: DetectorConfig::default(),
            aug: AugConfig::default(),
            sup_cutout: CutoutMode::Auto,
            weights: LossWeights::default(),
            focal: FocalParams::default(),
            alpha_start: ema.alpha_start,
            alpha_end: ema.alpha_end,
            schedule: ema.kind,
            batch_labeled: 8,
            batch_unlabeled: 8,
            ssl_epochs: 50,
            sup_epochs: 200,
            sup_patience: 0,
            sup_eval_every: 1,
            lr: 1e-4,
            lr_decay_fraction: 0.8,
            lr_decay_factor: 0.1,
            grad_clip: 0.1,
            init: InitMode::AfterFt,
            init_checkpoint: None,
            nms: false,
            nms_iou: 0.5,
            threshold: None,
            eval_model: EvalModel::Teacher,
            ablate_seeds: vec![0, 1, 2],
        }
    }
}

fn usage(msg: String) -> HarnessError {
    HarnessError::Usage(msg)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, HarnessError> {
    v.parse().map_err(|_| usage(format!("{key}: cannot parse {v:?}")))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, HarnessError> {
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn pair(key: &str, v: &str) -> Result<(f64, f64), HarnessError> {
    match list::<f64>(key, v)?[..] {
        [a, b] => Ok((a, b)),
        _ => Err(usage(format!("{key}: expected two comma-separated numbers"))),
    }
}

fn switch(key: &str, v: &str) -> Result<bool, HarnessError> {
    match v {
        "on" | "true" | "yes" => Ok(true),
        "off" | "false" | "no" => Ok(false),
        _ => Err(usage(format!("{key}: expected on/off, got {v:?}"))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Defaults overridden by each `key = value` line. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), HarnessError> {
        let a = &mut self.aug;
        match key {
            "dataset" => self.dataset = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            "seed" => self.seed = num(key, v)?,
            "data.train_images" => self.train_images = num(key, v)?,
            "data.eval_images" => self.eval_images = num(key, v)?,
            "split.fraction" => self.split_fraction = num(key, v)?,
            "split.seed" => self.split_seed = num(key, v)?,
            "model.image_size" => self.model.image_size = num(key, v)?,
            "model.patch_size" => self.model.patch_size = num(key, v)?,
            "model.embed_dim" => self.model.embed_dim = num(key, v)?,
            "model.heads" => self.model.heads = num(key, v)?,
            "model.encoder_layers" => self.model.encoder_layers = num(key, v)?,
            "model.decoder_layers" => self.model.decoder_layers = num(key, v)?,
            "model.num_queries" => self.model.num_queries = num(key, v)?,
            "model.ffn_dim" => self.model.ffn_dim = num(key, v)?,
            "loss.class" => self.weights.class = num(key, v)?,
            "loss.l1" => self.weights.l1 = num(key, v)?,
            "loss.giou" => self.weights.giou = num(key, v)?,
            "loss.unsup" => self.weights.unsup = num(key, v)?,
            "loss.focal_gamma" => self.focal.gamma = num(key, v)?,
            "loss.focal_alpha" => self.focal.alpha = num(key, v)?,
            "ema.alpha_start" => self.alpha_start = num(key, v)?,
            "ema.alpha_end" => self.alpha_end = num(key, v)?,
            "ema.schedule" => {
                self.schedule = match v {
                    "cosine" => ScheduleKind::Cosine,
                    "constant" => ScheduleKind::Constant,
                    _ => return Err(usage(format!("{key}: expected cosine or constant"))),
                }
            }
            "batch.labeled" => self.batch_labeled = num(key, v)?,
            "batch.unlabeled" => self.batch_unlabeled = num(key, v)?,
            "ssl.epochs" => self.ssl_epochs = num(key, v)?,
            "sup.epochs" => self.sup_epochs = num(key, v)?,
            "sup.patience" => self.sup_patience = num(key, v)?,
            "sup.eval_every" => self.sup_eval_every = num(key, v)?,
            "sup.cutout" => {
                self.sup_cutout = match v {
                    "auto" => CutoutMode::Auto,
                    _ if switch(key, v)? => CutoutMode::On,
                    _ => CutoutMode::Off,
                }
            }
            "optim.lr" => self.lr = num(key, v)?,
            "optim.decay_fraction" => self.lr_decay_fraction = num(key, v)?,
            "optim.decay_factor" => self.lr_decay_factor = num(key, v)?,
            "optim.grad_clip" => self.grad_clip = num(key, v)?,
            "init" => {
                self.init = match v {
                    "after_ft" => InitMode::AfterFt,
                    "scratch" => InitMode::Scratch,
                    _ => return Err(usage(format!("{key}: expected after_ft or scratch"))),
                }
            }
            "init.checkpoint" => self.init_checkpoint = Some(PathBuf::from(v)),
            "pseudo.nms" => self.nms = switch(key, v)?,
            "pseudo.nms_iou" => self.nms_iou = num(key, v)?,
            "pseudo.threshold" => self.threshold = if v == "none" { None } else { Some(num(key, v)?) },
            "eval.model" => {
                self.eval_model = match v {
                    "teacher" => EvalModel::Teacher,
                    "student" => EvalModel::Student,
                    _ => return Err(usage(format!("{key}: expected teacher or student"))),
                }
            }
            "ablate.seeds" => self.ablate_seeds = list(key, v)?,
            "aug.hflip_p" => a.hflip_p = num(key, v)?,
            "aug.resize_scales" => a.resize_scales = list(key, v)?,
            "aug.jitter_p" => a.jitter_p = num(key, v)?,
            "aug.jitter" => {
                a.jitter = list::<f64>(key, v)?
                    .try_into()
                    .map_err(|_| usage(format!("{key}: expected four numbers")))?
            }
            "aug.grayscale_p" => a.grayscale_p = num(key, v)?,
            "aug.blur_p" => a.blur_p = num(key, v)?,
            "aug.blur_sigma" => a.blur_sigma = pair(key, v)?,
            "aug.cutout_p" => {
                let ps: Vec<f64> = list(key, v)?;
                if ps.len() != a.cutouts.len() {
                    return Err(usage(format!("{key}: expected {} probabilities", a.cutouts.len())));
                }
                a.cutouts.iter_mut().zip(ps).for_each(|(c, p)| c.p = p);
            }
            "aug.cutout" => a.enable_cutout = switch(key, v)?,
            "aug.geometric" => a.enable_geometric = switch(key, v)?,
            "aug.rotate_p" => a.rotate_p = num(key, v)?,
            "aug.rotate_deg" => a.rotate_deg = num(key, v)?,
            "aug.shear_p" => a.shear_p = num(key, v)?,
            "aug.shear_deg" => a.shear_deg = num(key, v)?,
            "aug.rescale_p" => a.rescale_p = num(key, v)?,
            "aug.translate" => a.translate = pair(key, v)?,
            "aug.rescale" => a.rescale = pair(key, v)?,
            _ => return Err(usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let w = &self.weights;
        if !(w.class > 0.0 && w.l1 > 0.0 && w.giou > 0.0 && w.unsup >= 0.0) {
            return Err(usage("loss weights must be positive (loss.unsup may be 0)".into()));
        }
        if self.model.num_classes != NUM_CLASSES {
            return Err(usage(format!("the dataset has {NUM_CLASSES} classes")));
        }
        self.model.validate().map_err(|e| usage(e.to_string()))?;
        self.focal.validate().map_err(|e| usage(e.to_string()))?;
        self.ema().validate().map_err(|e| usage(e.to_string()))?;
        self.aug.validate().map_err(usage)?;
        self.postprocess().validate().map_err(|e| usage(e.to_string()))?;
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return Err(usage("batch sizes must be at least 1".into()));
        }
        if self.ssl_epochs == 0 || self.sup_epochs == 0 || self.sup_eval_every == 0 {
            return Err(usage("epoch counts must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.lr_decay_fraction) || !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(usage("optimizer settings out of range".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(usage("optim.grad_clip must be non-negative".into()));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction <= 1.0) {
            return Err(usage("split.fraction must lie in (0, 1]".into()));
        }
        if self.ablate_seeds.is_empty() {
            return Err(usage("ablate.seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.model.num_classes
    }

    pub fn ema(&self) -> EmaSchedule {
        EmaSchedule {
            alpha_start: self.alpha_start,
            alpha_end: self.alpha_end,
            epochs: self.ssl_epochs,
            kind: self.schedule,
        }
    }

    pub fn postprocess(&self) -> PostProcess {
        match (self.nms, self.threshold) {
            (false, None) => PostProcess::None,
            (true, None) => PostProcess::Nms { iou: self.nms_iou },
            (false, Some(tau)) => PostProcess::Threshold { tau },
            (true, Some(tau)) => PostProcess::Both { iou: self.nms_iou, tau },
        }
    }

    /// Learning rate for the 0-based `epoch` of a run lasting `total` epochs.
    pub fn lr_at(&self, epoch: usize, total: usize) -> f64 {
        let decay_at = (self.lr_decay_fraction * total as f64).round() as usize;
        if epoch >= decay_at {
            self.lr * self.lr_decay_factor
        } else {
            self.lr
        }
    }

    /// Augmentation for the labeled branch: no strong geometry, CutOut per
    /// `sup.cutout`.
    pub fn supervised_aug(&self, fill: [f64; 3]) -> AugConfig {
        let cutout = match self.sup_cutout {
            CutoutMode::On => true,
            CutoutMode::Off => false,
            CutoutMode::Auto => self.split_fraction > 0.02,
        };
        AugConfig {
            enable_cutout: cutout,
            enable_geometric: false,
            fill,
            ..self.aug.clone()
        }
    }

    pub fn unlabeled_aug(&self, fill: [f64; 3]) -> AugConfig {
        AugConfig { fill, ..self.aug.clone() }
    }
}
