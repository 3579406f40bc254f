//! Supervised fine-tuning and the student/teacher loop.
//!
//! Every random draw comes from a stream keyed on `(seed, tag, stage, epoch,
//! step, item)`, so a run resumed at an epoch boundary replays the same
//! batches and augmentations as an uninterrupted one.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::augment::{map_pseudo_boxes, strong_augment, supervised_augment, weak_augment};
use crate::data::{Image, Object};
use crate::eval::{metrics_header, metrics_row, EvalResult};
use crate::losses::{supervised_loss, total_loss_var, unsupervised_loss, LossBreakdown};
use crate::model::{self, forward, DetectorConfig, ModelError, PredVars};
use crate::rng::{derive_seed, stream, tag};
use crate::teacher::{ablation_postprocess, ema_update, keep_rate, pseudo_labels, PseudoLabelSet};
use crate::tensor::{softmax, ParamSet, ParamVars, Tape, Tensor, Var};

use super::{
    evaluate, io_err, write_lines, Adam, Context, EvalModel, HarnessError, InitMode, RunConfig, BEST_FILE, LOSSES_FILE,
    METRICS_FILE, STATE_FILE, STUDENT_FILE, TEACHER_FILE,
};

const STAGE_FT: u64 = 0;
const STAGE_SSL: u64 = 1;

pub(crate) const META_EPOCH: &str = "meta.epoch";
const META_STEP: &str = "meta.step";
const META_ADAM_T: &str = "meta.adam_t";

pub const LOSSES_HEADER: &str = "epoch,step,lr,keep_rate,n_labeled,n_unlabeled,lambda_u,\
sup_class,sup_l1,sup_giou,sup_total,unsup_class,unsup_l1,unsup_giou,unsup_total,total,grad_norm";

/// An augmented labeled image with its surviving boxes.
#[derive(Debug, Clone)]
pub struct LabeledView {
    pub image: Image,
    pub objects: Vec<Object>,
}

/// A strong view with the teacher's targets carried into its frame.
#[derive(Debug, Clone)]
pub struct UnlabeledView {
    pub image: Image,
    pub pseudo: PseudoLabelSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub sup: LossBreakdown,
    pub unsup: Option<LossBreakdown>,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub lambda_u: f64,
    pub total: f64,
}

impl StepLog {
    fn describe(&self) -> String {
        let u = self.unsup.as_ref().map_or(f64::NAN, |u| u.total);
        format!("total {} (supervised {}, unsupervised {})", self.total, self.sup.total, u)
    }
}

/// The training objective on one batch. With no unlabeled views it is the
/// supervised loss over `N^l`; otherwise the weighted sum of both branches.
pub fn objective<'t>(
    tape: &'t Tape,
    vars: &ParamVars<'t>,
    cfg: &RunConfig,
    labeled: &[LabeledView],
    unlabeled: &[UnlabeledView],
) -> Result<(Var<'t>, StepLog), HarnessError> {
    if labeled.is_empty() {
        return Err(HarnessError::Internal("empty labeled batch".into()));
    }
    let run = |imgs: &mut dyn Iterator<Item = &Image>| -> Result<Vec<PredVars<'t>>, ModelError> {
        imgs.map(|im| forward(tape, vars, &cfg.model, im)).collect()
    };
    let sup_preds = run(&mut labeled.iter().map(|v| &v.image))?;
    let gts: Vec<Vec<Object>> = labeled.iter().map(|v| v.objects.clone()).collect();
    let sup = supervised_loss(tape, &sup_preds, &gts, &cfg.weights, &cfg.focal).map_err(internal)?;
    let nl = labeled.len();
    if unlabeled.is_empty() {
        let total = sup.total.scale(1.0 / nl as f64);
        let log = StepLog {
            sup: sup.breakdown,
            unsup: None,
            n_labeled: nl,
            n_unlabeled: 0,
            lambda_u: 0.0,
            total: total.item(),
        };
        return Ok((total, log));
    }
    let unsup_preds = run(&mut unlabeled.iter().map(|v| &v.image))?;
    let pseudo: Vec<PseudoLabelSet> = unlabeled.iter().map(|v| v.pseudo.clone()).collect();
    let unsup = unsupervised_loss(tape, &unsup_preds, &pseudo, &cfg.weights, &cfg.focal).map_err(internal)?;
    let nu = unlabeled.len();
    let total = total_loss_var(sup.total, unsup.total, nl, nu, cfg.weights.unsup).map_err(internal)?;
    let log = StepLog {
        sup: sup.breakdown,
        unsup: Some(unsup.breakdown),
        n_labeled: nl,
        n_unlabeled: nu,
        lambda_u: cfg.weights.unsup,
        total: total.item(),
    };
    Ok((total, log))
}

fn internal(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Internal(e.to_string())
}

/// Teacher targets computed through `tape`; equal to
/// [`pseudo_labels`](crate::teacher::pseudo_labels) but lets a caller confirm
/// that no gradient reaches the teacher leaves.
pub fn pseudo_labels_on_tape<'t>(tape: &'t Tape, teacher: &ParamVars<'t>, cfg: &DetectorConfig, weak: &Image) -> Result<PseudoLabelSet, ModelError> {
    let p = forward(tape, teacher, cfg, weak)?.values();
    Ok(PseudoLabelSet {
        probs: p.logits.iter().map(|l| softmax(l)).collect(),
        boxes: p.boxes,
    })
}

/// Student, teacher and optimizer after `epoch` completed epochs. Random
/// streams are keyed on position, so no generator state is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub adam: Adam,
    pub epoch: usize,
    pub step: u64,
}

fn scalar(v: f64) -> Tensor {
    Tensor::new(vec![1], vec![v]).expect("scalar shape")
}

impl TrainState {
    pub fn new(student: ParamSet) -> Self {
        Self {
            teacher: student.clone(),
            adam: Adam::new(&student),
            student,
            epoch: 0,
            step: 0,
        }
    }

    pub fn to_params(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (prefix, set) in [
            ("student/", &self.student),
            ("teacher/", &self.teacher),
            ("adam.m/", &self.adam.m),
            ("adam.v/", &self.adam.v),
        ] {
            for (n, t) in set.iter() {
                out.insert(format!("{prefix}{n}"), t.clone());
            }
        }
        out.insert(META_EPOCH, scalar(self.epoch as f64));
        out.insert(META_STEP, scalar(self.step as f64));
        out.insert(META_ADAM_T, scalar(self.adam.t as f64));
        out
    }

    pub fn from_params(ps: &ParamSet) -> Result<Self, HarnessError> {
        let corrupt = |m: &str| HarnessError::Usage(format!("not a training state: {m}"));
        let part = |prefix: &str| {
            let mut s = ParamSet::new();
            for (n, t) in ps.iter() {
                if let Some(rest) = n.strip_prefix(prefix) {
                    s.insert(rest, t.clone());
                }
            }
            s
        };
        let meta = |name: &str| -> Result<u64, HarnessError> {
            let v = ps.get(name).filter(|t| t.len() == 1).ok_or_else(|| corrupt(name))?.data()[0];
            if v < 0.0 || v.fract() != 0.0 {
                return Err(corrupt(name));
            }
            Ok(v as u64)
        };
        let (student, teacher) = (part("student/"), part("teacher/"));
        let mut adam = Adam::new(&student);
        adam.m = part("adam.m/");
        adam.v = part("adam.v/");
        adam.t = meta(META_ADAM_T)?;
        for other in [&teacher, &adam.m, &adam.v] {
            if student.is_empty() || !student.same_layout(other) {
                return Err(corrupt("student, teacher and moments differ in layout"));
            }
        }
        Ok(Self {
            student,
            teacher,
            adam,
            epoch: meta(META_EPOCH)? as usize,
            step: meta(META_STEP)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        // Write then rename so an interrupted save never leaves a torn state.
        let tmp = path.with_extension("tmp");
        model::save_params(&tmp, &self.to_params())?;
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_params(&model::load_params(path)?)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn loss_row(epoch: usize, step: u64, lr: f64, keep: Option<f64>, log: &StepLog, grad_norm: f64) -> String {
    let mut r = format!(
        "{epoch},{step},{lr},{},{},{},{},{},{},{},{}",
        fmt_opt(keep),
        log.n_labeled,
        log.n_unlabeled,
        log.lambda_u,
        log.sup.class_term,
        log.sup.l1_term,
        log.sup.giou_term,
        log.sup.total
    );
    match &log.unsup {
        Some(u) => write!(r, ",{},{},{},{}", u.class_term, u.l1_term, u.giou_term, u.total).unwrap(),
        None => r.push_str(",,,,"),
    }
    write!(r, ",{},{grad_norm}", log.total).unwrap();
    r
}

fn diverged(epoch: usize, step: u64, detail: String) -> HarnessError {
    HarnessError::Divergence { epoch, step, detail }
}

/// Turns non-finite activations into a divergence with position context.
fn at_step<T>(epoch: usize, step: u64, r: Result<T, HarnessError>) -> Result<T, HarnessError> {
    match r {
        Err(HarnessError::Model(ModelError::NonFinite(layer))) => Err(diverged(epoch, step, format!("non-finite activations in {layer}"))),
        other => other,
    }
}

/// Backward, sanity checks, clipping and one Adam step. Returns the
/// pre-clip gradient norm.
fn apply_update(
    total: Var<'_>,
    vars: &ParamVars<'_>,
    teacher_vars: Option<&ParamVars<'_>>,
    params: &mut ParamSet,
    adam: &mut Adam,
    cfg: &RunConfig,
    lr: f64,
    log: &StepLog,
    (epoch, step): (usize, u64),
) -> Result<f64, HarnessError> {
    if !log.total.is_finite() {
        return Err(diverged(epoch, step, log.describe()));
    }
    let mut grads = total.backward()?;
    if let Some(t) = teacher_vars {
        if !t.untouched_by(&grads) {
            return Err(HarnessError::Internal("gradient reached teacher parameters".into()));
        }
    }
    let mut g = vars.collect_grads(&mut grads);
    let norm = super::clip_grad_norm(&mut g, cfg.grad_clip);
    if !norm.is_finite() {
        return Err(diverged(epoch, step, format!("{}; gradient norm {norm}", log.describe())));
    }
    adam.step(params, &g, lr)?;
    Ok(norm)
}

fn labeled_view(ctx: &Context, id: usize, aug_seed: u64) -> Result<LabeledView, HarnessError> {
    let scene = &ctx.train.scenes[id];
    let mut rng = stream(aug_seed, &[]);
    let (image, objects, _) = supervised_augment(&scene.image, &scene.objects, &ctx.cfg.supervised_aug(ctx.fill), &mut rng).map_err(internal)?;
    Ok(LabeledView { image, objects })
}

fn eval_metrics(ctx: &Context, params: &ParamSet) -> Result<EvalResult, HarnessError> {
    Ok(evaluate(params, &ctx.cfg.model, &ctx.eval)?.0)
}

#[derive(Debug, Clone)]
pub struct SupervisedOutcome {
    /// 1-based epoch of the best eval mAP.
    pub best_epoch: usize,
    pub best: EvalResult,
    pub params: ParamSet,
    pub history: Vec<EvalResult>,
}

/// Trains on the labeled split only, evaluating every `sup.eval_every` epochs
/// (and after the last) and keeping the best parameters in `<out>/best.mtdp`.
pub fn train_supervised(ctx: &Context) -> Result<SupervisedOutcome, HarnessError> {
    let cfg = &ctx.cfg;
    if ctx.split.labeled.is_empty() {
        return Err(HarnessError::Usage("labeled split is empty".into()));
    }
    std::fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;
    let mut params = model::init_model(&cfg.model, derive_seed(cfg.seed, &[tag::INIT]))?;
    let mut adam = Adam::new(&params);
    let (mut metrics, mut losses) = (Vec::new(), Vec::new());
    let mut history = Vec::new();
    let mut best: Option<(usize, EvalResult, ParamSet)> = None;
    let mut step = 0u64;
    for epoch in 0..cfg.sup_epochs {
        let lr = cfg.lr_at(epoch, cfg.sup_epochs);
        let mut order = ctx.split.labeled.clone();
        order.shuffle(&mut stream(cfg.seed, &[tag::LABELED_ORDER, STAGE_FT, epoch as u64]));
        for (s, chunk) in order.chunks(cfg.batch_labeled).enumerate() {
            let views = chunk
                .iter()
                .enumerate()
                .map(|(j, &id)| labeled_view(ctx, id, derive_seed(cfg.seed, &[tag::LABELED_AUG, STAGE_FT, epoch as u64, s as u64, j as u64])))
                .collect::<Result<Vec<_>, _>>()?;
            let tape = Tape::new();
            let vars = params.register(&tape, true);
            let (total, log) = at_step(epoch + 1, step, objective(&tape, &vars, cfg, &views, &[]))?;
            let norm = apply_update(total, &vars, None, &mut params, &mut adam, cfg, lr, &log, (epoch + 1, step))?;
            losses.push(loss_row(epoch + 1, step, lr, None, &log, norm));
            step += 1;
        }
        if (epoch + 1) % cfg.sup_eval_every != 0 && epoch + 1 != cfg.sup_epochs {
            continue;
        }
        let r = eval_metrics(ctx, &params)?;
        metrics.push(metrics_row(epoch + 1, "eval", lr, &r));
        if best.as_ref().is_none_or(|(_, b, _)| r.map > b.map) {
            model::save_params(&cfg.out.join(BEST_FILE), &params)?;
            best = Some((epoch + 1, r.clone(), params.clone()));
        }
        history.push(r);
        write_lines(&cfg.out.join(METRICS_FILE), &metrics_header(cfg.num_classes()), &metrics)?;
        write_lines(&cfg.out.join(LOSSES_FILE), LOSSES_HEADER, &losses)?;
        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if cfg.sup_patience > 0 && epoch + 1 - best_epoch >= cfg.sup_patience {
            break;
        }
    }
    let (best_epoch, best, params) = best.expect("at least one epoch ran");
    Ok(SupervisedOutcome {
        best_epoch,
        best,
        params,
        history,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SslOptions {
    /// Continue from `<out>/state.mtdp`.
    pub resume: bool,
    /// Stop (after saving state) once this many epochs are complete.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct SslOutcome {
    pub state: TrainState,
    /// Eval metrics of the evaluated model after the last completed epoch.
    pub last: EvalResult,
    pub history: Vec<EvalResult>,
}

fn initial_student(cfg: &RunConfig) -> Result<ParamSet, HarnessError> {
    match cfg.init {
        InitMode::Scratch => Ok(model::init_model(&cfg.model, derive_seed(cfg.seed, &[tag::INIT]))?),
        InitMode::AfterFt => {
            let path = cfg
                .init_checkpoint
                .as_ref()
                .ok_or_else(|| HarnessError::Usage("init = after_ft needs init.checkpoint".into()))?;
            let params = model::load_params(path)?;
            model::check_params(&cfg.model, &params).map_err(|e| HarnessError::Usage(format!("{}: {e}", path.display())))?;
            Ok(params)
        }
    }
}

/// Rows of a CSV whose first column is an epoch number not beyond `epoch`.
fn rows_through(path: &Path, epoch: usize) -> Result<Vec<String>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e <= epoch))
        .map(str::to_string)
        .collect())
}

/// The student/teacher loop. One epoch is one pass over the unlabeled pool;
/// labeled batches are drawn alongside from a reshuffled labeled stream.
pub fn train_ssl(ctx: &Context, opts: SslOptions) -> Result<SslOutcome, HarnessError> {
    let cfg = &ctx.cfg;
    if ctx.split.labeled.is_empty() || ctx.split.unlabeled.is_empty() {
        return Err(HarnessError::Usage("split needs labeled and unlabeled images".into()));
    }
    let out = &cfg.out;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let (mut state, mut metrics, mut losses) = if opts.resume {
        let st = TrainState::load(&out.join(STATE_FILE))?;
        model::check_params(&cfg.model, &st.student).map_err(|e| HarnessError::Usage(e.to_string()))?;
        let m = rows_through(&out.join(METRICS_FILE), st.epoch)?;
        let l = rows_through(&out.join(LOSSES_FILE), st.epoch)?;
        (st, m, l)
    } else {
        (TrainState::new(initial_student(cfg)?), Vec::new(), Vec::new())
    };
    let ema = cfg.ema();
    let k_total = cfg.ssl_epochs;
    let (strong_cfg, weak_cfg) = (cfg.unlabeled_aug(ctx.fill), cfg.unlabeled_aug(ctx.fill));
    let mode = cfg.postprocess();
    let mut history = Vec::new();
    let mut last = None;
    let mut teacher_checked = false;

    while state.epoch < k_total {
        let epoch = state.epoch;
        let e = epoch as u64;
        let alpha = keep_rate(&ema, epoch).map_err(internal)?;
        let lr = cfg.lr_at(epoch, k_total);
        let mut unl = ctx.split.unlabeled.clone();
        unl.shuffle(&mut stream(cfg.seed, &[tag::UNLABELED_ORDER, STAGE_SSL, e]));
        let steps = unl.len().div_ceil(cfg.batch_unlabeled);
        let mut lab = Vec::with_capacity(steps * cfg.batch_labeled);
        let mut lab_rng = stream(cfg.seed, &[tag::LABELED_ORDER, STAGE_SSL, e]);
        while lab.len() < steps * cfg.batch_labeled {
            let mut perm = ctx.split.labeled.clone();
            perm.shuffle(&mut lab_rng);
            lab.extend(perm);
        }

        for s in 0..steps {
            let key = |t: u64, j: usize| derive_seed(cfg.seed, &[t, STAGE_SSL, e, s as u64, j as u64]);
            let labeled = lab[s * cfg.batch_labeled..(s + 1) * cfg.batch_labeled]
                .iter()
                .enumerate()
                .map(|(j, &id)| labeled_view(ctx, id, key(tag::LABELED_AUG, j)))
                .collect::<Result<Vec<_>, _>>()?;

            let tape = Tape::new();
            let vars = state.student.register(&tape, true);
            // Once per invocation the teacher runs on the training tape as
            // differentiable leaves, to prove no gradient reaches it.
            let teacher_vars = (!teacher_checked).then(|| state.teacher.register(&tape, true));
            let mut unlabeled = Vec::new();
            for (j, &id) in unl[s * cfg.batch_unlabeled..((s + 1) * cfg.batch_unlabeled).min(unl.len())].iter().enumerate() {
                let img = &ctx.train.scenes[id].image;
                let (weak, _, _) = weak_augment(img, &[], &weak_cfg, &mut stream(key(tag::WEAK_AUG, j), &[])).map_err(internal)?;
                let raw = match &teacher_vars {
                    Some(tv) => pseudo_labels_on_tape(&tape, tv, &cfg.model, &weak).map_err(HarnessError::from),
                    None => pseudo_labels(&state.teacher, &cfg.model, &weak).map_err(HarnessError::from),
                };
                let raw = at_step(epoch + 1, state.step, raw)?;
                let pp = ablation_postprocess(&raw, mode).map_err(internal)?;
                let (strong, rec) = strong_augment(&weak, &strong_cfg, &mut stream(key(tag::STRONG_AUG, j), &[])).map_err(internal)?;
                unlabeled.push(UnlabeledView {
                    image: strong,
                    pseudo: map_pseudo_boxes(&pp, &rec).map_err(internal)?,
                });
            }

            let (total, log) = at_step(epoch + 1, state.step, objective(&tape, &vars, cfg, &labeled, &unlabeled))?;
            let norm = apply_update(
                total,
                &vars,
                teacher_vars.as_ref(),
                &mut state.student,
                &mut state.adam,
                cfg,
                lr,
                &log,
                (epoch + 1, state.step),
            )?;
            teacher_checked = true;
            ema_update(&mut state.teacher, &state.student, alpha).map_err(internal)?;
            losses.push(loss_row(epoch + 1, state.step, lr, Some(alpha), &log, norm));
            state.step += 1;
        }

        state.epoch += 1;
        let evaluated = match cfg.eval_model {
            EvalModel::Teacher => &state.teacher,
            EvalModel::Student => &state.student,
        };
        let r = eval_metrics(ctx, evaluated)?;
        metrics.push(metrics_row(state.epoch, "eval", lr, &r));
        history.push(r.clone());
        last = Some(r);
        write_lines(&out.join(METRICS_FILE), &metrics_header(cfg.num_classes()), &metrics)?;
        write_lines(&out.join(LOSSES_FILE), LOSSES_HEADER, &losses)?;
        state.save(&out.join(STATE_FILE))?;
        model::save_params(&out.join(TEACHER_FILE), &state.teacher)?;
        model::save_params(&out.join(STUDENT_FILE), &state.student)?;
        if opts.stop_after.is_some_and(|k| state.epoch >= k) {
            break;
        }
    }
    let last = match last {
        Some(r) => r,
        None => eval_metrics(ctx, match cfg.eval_model {
            EvalModel::Teacher => &state.teacher,
            EvalModel::Student => &state.student,
        })?,
    };
    Ok(SslOutcome { state, last, history })
}
