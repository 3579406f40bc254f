//! Classification and box losses, the supervised and unsupervised set losses,
//! and the combined objective.
//!
//! Class index convention: real classes `1..=C` live at logit index `label - 1`;
//! the no-object class is the last logit, index `C`.

use crate::data::Object;
use crate::geometry::{giou, BBox};
use crate::matching::{build_cost_matrix, hungarian, MatchTarget};
use crate::model::PredVars;
use crate::teacher::PseudoLabelSet;
use crate::tensor::{log_softmax, softmax, Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Invalid(String),
}

type Result<T, E = LossError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    /// Weight of the unlabeled branch in the combined objective.
    pub unsup: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
            unsup: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
    /// Weight of real classes; the no-object class gets `1 - alpha`.
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: 0.25 }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(LossError::Invalid(format!(
                "focal parameters out of range: gamma {} alpha {}",
                self.gamma, self.alpha
            )));
        }
        Ok(())
    }

    /// Per-logit weights for `num_logits = C + 1`.
    fn class_weights(&self, num_logits: usize) -> Vec<f64> {
        let mut w = vec![self.alpha; num_logits];
        w[num_logits - 1] = 1.0 - self.alpha;
        w
    }
}

/// A classification target: a hard label (`None` is no-object) or a
/// distribution over `C + 1` classes.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassTarget {
    Hard(Option<usize>),
    Soft(Vec<f64>),
}

impl ClassTarget {
    pub fn is_object(&self) -> bool {
        match self {
            ClassTarget::Hard(label) => label.is_some(),
            ClassTarget::Soft(q) => argmax(q) + 1 != q.len(),
        }
    }

    /// Dense distribution over `num_logits` entries.
    pub fn to_distribution(&self, num_logits: usize) -> Result<Vec<f64>> {
        match self {
            ClassTarget::Hard(label) => {
                let idx = hard_index(*label, num_logits)?;
                let mut q = vec![0.0; num_logits];
                q[idx] = 1.0;
                Ok(q)
            }
            ClassTarget::Soft(q) => {
                check_distribution(q, num_logits)?;
                Ok(q.clone())
            }
        }
    }
}

/// Index of the largest entry, first on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn hard_index(label: Option<usize>, num_logits: usize) -> Result<usize> {
    match label {
        None => Ok(num_logits - 1),
        Some(l) if l >= 1 && l < num_logits => Ok(l - 1),
        Some(l) => Err(LossError::Invalid(format!(
            "class label {l} outside 1..={}",
            num_logits - 1
        ))),
    }
}

fn check_distribution(q: &[f64], num_logits: usize) -> Result<()> {
    if q.len() != num_logits {
        return Err(LossError::Invalid(format!(
            "soft target has {} entries, logits have {num_logits}",
            q.len()
        )));
    }
    let s: f64 = q.iter().sum();
    if q.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > 1e-9 {
        return Err(LossError::Invalid(format!("soft target is not a distribution (sum {s})")));
    }
    Ok(())
}

fn focal_term(w: f64, q: f64, p: f64, logp: f64, gamma: f64) -> f64 {
    w * q * (1.0 - p).powf(gamma) * logp
}

/// Focal classification loss of one prediction against a hard or soft target.
pub fn focal_loss(target: &ClassTarget, logits: &[f64], params: &FocalParams) -> Result<f64> {
    params.validate()?;
    let k = logits.len();
    if k < 2 {
        return Err(LossError::Invalid("need at least one class plus no-object".into()));
    }
    let (p, logp) = (softmax(logits), log_softmax(logits));
    let w = params.class_weights(k);
    match target {
        ClassTarget::Hard(label) => {
            let t = hard_index(*label, k)?;
            Ok(-focal_term(w[t], 1.0, p[t], logp[t], params.gamma))
        }
        ClassTarget::Soft(q) => {
            check_distribution(q, k)?;
            let s: f64 = (0..k).map(|i| focal_term(w[i], q[i], p[i], logp[i], params.gamma)).sum();
            Ok(-s)
        }
    }
}

/// `(ℓ1 distance in cxcywh, 1 − GIoU)`.
pub fn box_loss(b: &BBox, bhat: &BBox) -> (f64, f64) {
    let l1 = b.to_array().iter().zip(bhat.to_array()).map(|(x, y)| (x - y).abs()).sum();
    (l1, 1.0 - giou(b, bhat))
}

/// Cross-entropy of the student distribution against the teacher's.
pub fn consistency_ce(teacher_logits: &[f64], student_logits: &[f64]) -> f64 {
    soft_cross_entropy(&softmax(teacher_logits), student_logits)
}

/// `−Σ q_k log softmax(logits)_k`.
pub fn soft_cross_entropy(q: &[f64], logits: &[f64]) -> f64 {
    -q.iter().zip(log_softmax(logits)).map(|(a, b)| a * b).sum::<f64>()
}

/// `L_s / N^l + λ_u · L_u / N^u`.
pub fn total_loss(sup: f64, unsup: f64, n_labeled: usize, n_unlabeled: usize, lambda_u: f64) -> Result<f64> {
    check_counts(n_labeled, n_unlabeled)?;
    Ok(sup / n_labeled as f64 + lambda_u * unsup / n_unlabeled as f64)
}

fn check_counts(n_labeled: usize, n_unlabeled: usize) -> Result<()> {
    if n_labeled == 0 || n_unlabeled == 0 {
        return Err(LossError::Invalid("batch sizes must be at least 1".into()));
    }
    Ok(())
}

/// Tape form of [`total_loss`].
pub fn total_loss_var<'t>(
    sup: Var<'t>,
    unsup: Var<'t>,
    n_labeled: usize,
    n_unlabeled: usize,
    lambda_u: f64,
) -> Result<Var<'t>> {
    check_counts(n_labeled, n_unlabeled)?;
    Ok(sup
        .scale(1.0 / n_labeled as f64)
        .add(unsup.scale(lambda_u / n_unlabeled as f64))?)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBreakdown {
    pub class_term: f64,
    pub l1_term: f64,
    pub giou_term: f64,
    /// `λ_class·class + λ_ℓ1·l1 + λ_giou·giou`.
    pub total: f64,
    /// Per image, how many targets took part in the box terms.
    pub matched_objects: Vec<usize>,
}

/// A set loss on the tape together with its component values.
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
}

/// Differentiable `Σ_rows (1 − GIoU)` between two `k×4` cxcywh matrices.
fn giou_loss_rows<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    let corners = |b: Var<'t>| -> Result<[Var<'t>; 4]> {
        let (cx, cy) = (b.slice_cols(0, 1)?, b.slice_cols(1, 2)?);
        let (hw, hh) = (b.slice_cols(2, 3)?.scale(0.5), b.slice_cols(3, 4)?.scale(0.5));
        Ok([cx.sub(hw)?, cy.sub(hh)?, cx.add(hw)?, cy.add(hh)?])
    };
    let [ax1, ay1, ax2, ay2] = corners(pred)?;
    let [bx1, by1, bx2, by2] = corners(target)?;
    let area_a = ax2.sub(ax1)?.mul(ay2.sub(ay1)?)?;
    let area_b = bx2.sub(bx1)?.mul(by2.sub(by1)?)?;
    let iw = ax2.minimum(bx2)?.sub(ax1.maximum(bx1)?)?.relu();
    let ih = ay2.minimum(by2)?.sub(ay1.maximum(by1)?)?.relu();
    let inter = iw.mul(ih)?;
    let union = area_a.add(area_b)?.sub(inter)?;
    let ew = ax2.maximum(bx2)?.sub(ax1.minimum(bx1)?)?;
    let eh = ay2.maximum(by2)?.sub(ay1.minimum(by1)?)?;
    let encl = ew.mul(eh)?;
    let g = inter.div(union)?.sub(encl.sub(union)?.div(encl)?)?;
    Ok(g.one_minus().sum())
}

fn boxes_tensor(boxes: &[BBox]) -> Result<Tensor> {
    Ok(Tensor::new(
        vec![boxes.len(), 4],
        boxes.iter().flat_map(|b| b.to_array()).collect(),
    )?)
}

/// Sum of `(ℓ1, 1 − GIoU)` over matched rows, or constant zeros when nothing matched.
fn box_terms<'t>(tape: &'t Tape, pred_boxes: Var<'t>, pred_idx: &[usize], targets: &[BBox]) -> Result<(Var<'t>, Var<'t>)> {
    if pred_idx.is_empty() {
        return Ok((tape.scalar(0.0), tape.scalar(0.0)));
    }
    let pb = pred_boxes.gather_rows(pred_idx)?;
    let tb = tape.constant(&boxes_tensor(targets)?);
    let l1 = pb.sub(tb)?.abs().sum();
    Ok((l1, giou_loss_rows(pb, tb)?))
}

fn weighted<'t>(class: Var<'t>, l1: Var<'t>, g: Var<'t>, w: &LossWeights, matched: Vec<usize>) -> Result<LossTerms<'t>> {
    let total = class.scale(w.class).add(l1.scale(w.l1))?.add(g.scale(w.giou))?;
    let (c, l, gi) = (class.item(), l1.item(), g.item());
    Ok(LossTerms {
        total,
        breakdown: LossBreakdown {
            class_term: c,
            l1_term: l,
            giou_term: gi,
            total: w.class * c + w.l1 * l + w.giou * gi,
            matched_objects: matched,
        },
    })
}

fn pred_values(p: &PredVars<'_>) -> (Vec<Vec<f64>>, Vec<BBox>) {
    let logits = p.logits.value();
    let boxes = p.boxes.value();
    let (n, _) = logits.dims2();
    (
        (0..n).map(|i| logits.row(i).to_vec()).collect(),
        (0..n).map(|i| BBox::from_slice(boxes.row(i))).collect(),
    )
}

fn sum_vars<'t>(tape: &'t Tape, vars: &[Var<'t>]) -> Result<Var<'t>> {
    let mut acc = tape.scalar(0.0);
    for v in vars {
        acc = acc.add(*v)?;
    }
    Ok(acc)
}

/// Supervised set loss over a labeled batch, unnormalized. Each image's
/// ground truths are matched to its predictions; unmatched predictions are
/// pushed toward no-object.
pub fn supervised_loss<'t>(
    tape: &'t Tape,
    preds: &[PredVars<'t>],
    gts: &[Vec<Object>],
    weights: &LossWeights,
    focal: &FocalParams,
) -> Result<LossTerms<'t>> {
    focal.validate()?;
    if preds.len() != gts.len() {
        return Err(LossError::Invalid(format!(
            "{} prediction sets for {} annotated images",
            preds.len(),
            gts.len()
        )));
    }
    let (mut class, mut l1, mut gi, mut matched) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (p, objs) in preds.iter().zip(gts) {
        let (logits, boxes) = pred_values(p);
        let (n, k) = (logits.len(), logits[0].len());
        let targets: Vec<MatchTarget> = objs.iter().map(|o| (ClassTarget::Hard(Some(o.class)), o.bbox)).collect();
        let assignment = hungarian(&build_cost_matrix(&targets, &logits, &boxes, weights, focal)?);

        // Constant per-entry coefficient w_k·q_k; one nonzero per row.
        let w = focal.class_weights(k);
        let mut coef = vec![0.0; n * k];
        for (j, slot) in assignment.by_prediction(n).into_iter().enumerate() {
            let t = match slot {
                Some(i) => hard_index(Some(objs[i].class), k)?,
                None => k - 1,
            };
            coef[j * k + t] = w[t];
        }
        class.push(focal_rows(tape, p.logits, coef, focal.gamma, n, k)?);

        let gt_boxes: Vec<BBox> = objs.iter().map(|o| o.bbox).collect();
        let (l, g) = box_terms(tape, p.boxes, &assignment.map, &gt_boxes)?;
        l1.push(l);
        gi.push(g);
        matched.push(objs.len());
    }
    weighted(sum_vars(tape, &class)?, sum_vars(tape, &l1)?, sum_vars(tape, &gi)?, weights, matched)
}

/// `−Σ coef ⊙ (1 − p)^γ ⊙ log p` over an `n×k` logit matrix.
fn focal_rows<'t>(tape: &'t Tape, logits: Var<'t>, coef: Vec<f64>, gamma: f64, n: usize, k: usize) -> Result<Var<'t>> {
    let coef = tape.constant(&Tensor::new(vec![n, k], coef)?);
    let modulation = logits.softmax_rows().one_minus().powf(gamma);
    Ok(coef.mul(modulation)?.mul(logits.log_softmax_rows())?.sum().neg())
}

/// Unsupervised set loss over an unlabeled batch, unnormalized. Pseudo-labels
/// must already be in the student's view coordinates.
pub fn unsupervised_loss<'t>(
    tape: &'t Tape,
    preds: &[PredVars<'t>],
    pseudo: &[PseudoLabelSet],
    weights: &LossWeights,
    focal: &FocalParams,
) -> Result<LossTerms<'t>> {
    focal.validate()?;
    if preds.len() != pseudo.len() {
        return Err(LossError::Invalid(format!(
            "{} prediction sets for {} pseudo-label sets",
            preds.len(),
            pseudo.len()
        )));
    }
    let (mut class, mut l1, mut gi, mut matched) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (p, ps) in preds.iter().zip(pseudo) {
        let (logits, boxes) = pred_values(p);
        let (n, k) = (logits.len(), logits[0].len());
        if ps.probs.len() != n {
            return Err(LossError::Invalid(format!("{} pseudo-labels for {n} predictions", ps.probs.len())));
        }
        let targets: Vec<MatchTarget> = ps
            .probs
            .iter()
            .zip(&ps.boxes)
            .map(|(q, b)| (ClassTarget::Soft(q.clone()), *b))
            .collect();
        let assignment = hungarian(&build_cost_matrix(&targets, &logits, &boxes, weights, focal)?);

        let mut q_perm = vec![0.0; n * k];
        for (i, &j) in assignment.map.iter().enumerate() {
            q_perm[j * k..(j + 1) * k].copy_from_slice(&ps.probs[i]);
        }
        let q = tape.constant(&Tensor::new(vec![n, k], q_perm)?);
        class.push(q.mul(p.logits.log_softmax_rows())?.sum().neg());

        let (mut idx, mut tb) = (Vec::new(), Vec::new());
        for (i, &j) in assignment.map.iter().enumerate() {
            if targets[i].0.is_object() {
                idx.push(j);
                tb.push(ps.boxes[i]);
            }
        }
        let (l, g) = box_terms(tape, p.boxes, &idx, &tb)?;
        l1.push(l);
        gi.push(g);
        matched.push(idx.len());
    }
    weighted(sum_vars(tape, &class)?, sum_vars(tape, &l1)?, sum_vars(tape, &gi)?, weights, matched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradient_check, ParamSet, ParamVars};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    const K: usize = 4;

    fn obj(class: usize, cx: f64, cy: f64, w: f64, h: f64) -> Object {
        Object {
            class,
            bbox: BBox::new(cx, cy, w, h),
        }
    }

    fn pred_vars<'t>(tape: &'t Tape, logits: &[Vec<f64>], boxes: &[BBox]) -> PredVars<'t> {
        PredVars {
            logits: tape.param(&Tensor::from_rows(logits).unwrap()),
            boxes: tape.param(&boxes_tensor(boxes).unwrap()),
        }
    }

    #[test]
    fn focal_golden_value() {
        let v = focal_loss(&ClassTarget::Hard(Some(1)), &[0.0, 0.0], &FocalParams::default()).unwrap();
        assert!((v - 0.25 * 0.25 * LN_2).abs() < 1e-12);
        assert!((v - 0.043321).abs() < 1e-6);
    }

    #[test]
    fn focal_saturated_and_ce_limit() {
        let sat = focal_loss(&ClassTarget::Hard(Some(2)), &[-40.0, 40.0, -40.0, -40.0], &FocalParams::default()).unwrap();
        assert!(sat.abs() < 1e-30);
        let logits = [0.3, -1.0, 2.0, 0.1];
        let half_ce = FocalParams { gamma: 0.0, alpha: 0.5 };
        for label in [Some(1), Some(3), None] {
            let t = hard_index(label, K).unwrap();
            let ce = -log_softmax(&logits)[t];
            let v = focal_loss(&ClassTarget::Hard(label), &logits, &half_ce).unwrap();
            assert!((v - 0.5 * ce).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_rejects_bad_targets() {
        let l = [0.0; K];
        let p = FocalParams::default();
        assert!(focal_loss(&ClassTarget::Soft(vec![0.5, 0.4, 0.0, 0.0]), &l, &p).is_err());
        assert!(focal_loss(&ClassTarget::Soft(vec![1.5, -0.5, 0.0, 0.0]), &l, &p).is_err());
        assert!(focal_loss(&ClassTarget::Hard(Some(4)), &l, &p).is_err());
        assert!(focal_loss(&ClassTarget::Hard(Some(1)), &l, &FocalParams { gamma: 2.0, alpha: 1.0 }).is_err());
    }

    #[test]
    fn box_loss_examples() {
        let b = BBox::new(0.4, 0.5, 0.2, 0.3);
        assert_eq!(box_loss(&b, &b), (0.0, 0.0));
        let shifted = BBox::new(0.45, 0.5, 0.2, 0.3);
        assert!((box_loss(&b, &shifted).0 - 0.05).abs() < 1e-15);
        let a = BBox::from_corners(0.0, 0.0, 0.5, 0.5);
        let c = BBox::from_corners(0.25, 0.25, 0.75, 0.75);
        assert!((box_loss(&a, &c).1 - (1.0 + 5.0 / 63.0)).abs() < 1e-12);
    }

    #[test]
    fn consistency_examples() {
        assert!((consistency_ce(&[0.0; 4], &[0.0; 4]) - 4f64.ln()).abs() < 1e-12);
        let t = [0.2, -1.3, 0.7, 2.2];
        let p = softmax(&t);
        let entropy: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
        assert!((consistency_ce(&t, &t) - entropy).abs() < 1e-12);
        let s = [1.0, 0.5, -0.5, 0.0];
        let zs: f64 = s.iter().map(|v: &f64| v.exp()).sum();
        let manual: f64 = -(0..4).map(|k| p[k] * (s[k].exp() / zs).ln()).sum::<f64>();
        assert!((consistency_ce(&t, &s) - manual).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(7.0, 3.0, 1, 1, 4.0).unwrap(), 19.0);
        assert_eq!(total_loss(7.0, 3.0, 1, 1, 0.0).unwrap(), 7.0);
        let full = total_loss(0.0, 3.0, 1, 4, 4.0).unwrap();
        let half = total_loss(0.0, 3.0, 1, 2, 4.0).unwrap();
        assert_eq!(half, 2.0 * full);
        assert!(total_loss(1.0, 1.0, 0, 1, 4.0).is_err());
    }

    #[test]
    fn lambda_u_zero_removes_unlabeled_gradient() {
        let tape = Tape::new();
        let s = tape.param(&Tensor::scalar(2.0));
        let u = tape.param(&Tensor::scalar(3.0));
        let t = total_loss_var(s, u, 2, 2, 0.0).unwrap();
        let g = t.backward().unwrap();
        assert_eq!(g.get(u).unwrap().item(), 0.0);
        assert_eq!(g.get(s).unwrap().item(), 0.5);
    }

    #[test]
    fn perfect_supervised_predictor() {
        let tape = Tape::new();
        let gts = vec![vec![obj(1, 0.3, 0.3, 0.2, 0.2), obj(3, 0.7, 0.6, 0.2, 0.3)]];
        let logits = vec![
            vec![-30.0, -30.0, 30.0, -30.0],
            vec![30.0, -30.0, -30.0, -30.0],
            vec![-30.0, -30.0, -30.0, 30.0],
        ];
        let boxes = vec![gts[0][1].bbox, gts[0][0].bbox, BBox::new(0.5, 0.5, 0.1, 0.1)];
        let p = pred_vars(&tape, &logits, &boxes);
        let out = supervised_loss(&tape, &[p], &gts, &LossWeights::default(), &FocalParams::default()).unwrap();
        assert!(out.breakdown.total.abs() < 1e-9);
        assert_eq!(out.breakdown.matched_objects, vec![2]);
    }

    #[test]
    fn supervised_single_gt_matches_hand_composition() {
        let tape = Tape::new();
        let g = obj(2, 0.4, 0.4, 0.3, 0.2);
        let logits = vec![vec![0.1, 1.2, -0.3, 0.5], vec![0.8, -0.2, 0.3, 0.0]];
        let boxes = vec![BBox::new(0.42, 0.38, 0.25, 0.22), BBox::new(0.8, 0.7, 0.1, 0.2)];
        let w = LossWeights::default();
        let f = FocalParams::default();
        let p = pred_vars(&tape, &logits, &boxes);
        let out = supervised_loss(&tape, &[p], &[vec![g]], &w, &f).unwrap();

        // Prediction 0 is the obvious match.
        let fl = |t: Option<usize>, l: &[f64]| {
            let pr = softmax(l);
            let i = t.map_or(3, |c| c - 1);
            let a = if t.is_some() { 0.25 } else { 0.75 };
            -a * (1.0 - pr[i]).powi(2) * pr[i].ln()
        };
        let class = fl(Some(2), &logits[0]) + fl(None, &logits[1]);
        let (l1, gl) = box_loss(&g.bbox, &boxes[0]);
        assert!((out.breakdown.class_term - class).abs() < 1e-12);
        assert!((out.breakdown.l1_term - l1).abs() < 1e-12);
        assert!((out.breakdown.giou_term - gl).abs() < 1e-12);
        let expected = 2.0 * class + 5.0 * l1 + 2.0 * gl;
        assert!((out.total.item() - expected).abs() < 1e-12);
        assert!((out.breakdown.total - expected).abs() < 1e-12);

        let w2 = LossWeights { l1: 10.0, ..w };
        let p2 = pred_vars(&tape, &logits, &boxes);
        let out2 = supervised_loss(&tape, &[p2], &[vec![g]], &w2, &f).unwrap();
        assert!((out2.total.item() - out.total.item() - 5.0 * l1).abs() < 1e-12);
    }

    #[test]
    fn zero_gt_image_is_all_no_object() {
        let tape = Tape::new();
        let logits = vec![vec![0.0; K]; 3];
        let boxes = vec![BBox::new(0.5, 0.5, 0.2, 0.2); 3];
        let p = pred_vars(&tape, &logits, &boxes);
        let out = supervised_loss(&tape, &[p], &[vec![]], &LossWeights::default(), &FocalParams::default()).unwrap();
        let per = -0.75 * 0.75f64.powi(2) * 0.25f64.ln();
        assert!((out.breakdown.class_term - 3.0 * per).abs() < 1e-12);
        assert_eq!((out.breakdown.l1_term, out.breakdown.giou_term), (0.0, 0.0));
    }

    fn random_logits(rng: &mut impl Rng, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..K).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
    }

    fn random_boxes(rng: &mut impl Rng, n: usize) -> Vec<BBox> {
        (0..n)
            .map(|_| BBox::new(rng.random_range(0.25..0.75), rng.random_range(0.25..0.75), rng.random_range(0.05..0.4), rng.random_range(0.05..0.4)))
            .collect()
    }

    fn random_pseudo(rng: &mut impl Rng, n: usize) -> PseudoLabelSet {
        PseudoLabelSet {
            probs: random_logits(rng, n).iter().map(|l| softmax(l)).collect(),
            boxes: random_boxes(rng, n),
        }
    }

    #[test]
    fn unsupervised_three_queries_hand_composed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::new();
        let logits = random_logits(&mut rng, 3);
        let boxes = random_boxes(&mut rng, 3);
        let mut ps = random_pseudo(&mut rng, 3);
        ps.probs[1] = vec![0.1, 0.1, 0.1, 0.7];
        let w = LossWeights::default();
        let f = FocalParams::default();
        let out = unsupervised_loss(&tape, &[pred_vars(&tape, &logits, &boxes)], std::slice::from_ref(&ps), &w, &f).unwrap();

        // Independent matching by exhaustion over the 6 permutations.
        let mut best = (f64::INFINITY, [0usize; 3]);
        for perm in [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            let mut c = 0.0;
            for i in 0..3 {
                let j = perm[i];
                c += 2.0 * focal_loss(&ClassTarget::Soft(ps.probs[i].clone()), &logits[j], &f).unwrap();
                if argmax(&ps.probs[i]) != 3 {
                    let (l, g) = box_loss(&ps.boxes[i], &boxes[j]);
                    c += 5.0 * l + 2.0 * g;
                }
            }
            if c < best.0 {
                best = (c, perm);
            }
        }
        let (mut class, mut l1, mut gl) = (0.0, 0.0, 0.0);
        for i in 0..3 {
            let j = best.1[i];
            class += soft_cross_entropy(&ps.probs[i], &logits[j]);
            if argmax(&ps.probs[i]) != 3 {
                let (l, g) = box_loss(&ps.boxes[i], &boxes[j]);
                l1 += l;
                gl += g;
            }
        }
        assert!((out.breakdown.class_term - class).abs() < 1e-12);
        assert!((out.breakdown.l1_term - l1).abs() < 1e-12);
        assert!((out.breakdown.giou_term - gl).abs() < 1e-12);
        assert_eq!(out.breakdown.matched_objects, vec![2]);
    }

    #[test]
    fn unsupervised_all_no_object_has_no_box_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tape = Tape::new();
        let ps = PseudoLabelSet {
            probs: vec![vec![0.1, 0.1, 0.1, 0.7]; 3],
            boxes: random_boxes(&mut rng, 3),
        };
        let p = pred_vars(&tape, &random_logits(&mut rng, 3), &random_boxes(&mut rng, 3));
        let out = unsupervised_loss(&tape, &[p], &[ps], &LossWeights::default(), &FocalParams::default()).unwrap();
        assert_eq!((out.breakdown.l1_term, out.breakdown.giou_term), (0.0, 0.0));
    }

    #[test]
    fn self_consistency_gives_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let tape = Tape::new();
        let logits = random_logits(&mut rng, 4);
        let boxes = random_boxes(&mut rng, 4);
        let ps = PseudoLabelSet {
            probs: logits.iter().map(|l| softmax(l)).collect(),
            boxes: boxes.clone(),
        };
        let out = unsupervised_loss(&tape, &[pred_vars(&tape, &logits, &boxes)], std::slice::from_ref(&ps), &LossWeights::default(), &FocalParams::default()).unwrap();
        let entropy: f64 = ps.probs.iter().map(|p| -p.iter().map(|v| v * v.ln()).sum::<f64>()).sum();
        assert!((out.breakdown.class_term - entropy).abs() < 1e-9);
        assert!(out.breakdown.l1_term < 1e-12 && out.breakdown.giou_term < 1e-12);
    }

    #[test]
    fn losses_are_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = LossWeights::default();
        let f = FocalParams::default();
        for _ in 0..10 {
            let logits = random_logits(&mut rng, 5);
            let boxes = random_boxes(&mut rng, 5);
            let gts: Vec<Object> = random_boxes(&mut rng, 3).into_iter().enumerate().map(|(i, b)| Object { class: i % 3 + 1, bbox: b }).collect();
            let ps = random_pseudo(&mut rng, 5);
            let perm = [3, 0, 4, 2, 1];
            let (pl, pb): (Vec<_>, Vec<_>) = perm.iter().map(|&i| (logits[i].clone(), boxes[i])).unzip();
            let gts_rev: Vec<Object> = gts.iter().rev().cloned().collect();
            let ps_perm = PseudoLabelSet {
                probs: perm.iter().map(|&i| ps.probs[i].clone()).collect(),
                boxes: perm.iter().map(|&i| ps.boxes[i]).collect(),
            };
            let tape = Tape::new();
            let a = supervised_loss(&tape, &[pred_vars(&tape, &logits, &boxes)], std::slice::from_ref(&gts), &w, &f).unwrap();
            let b = supervised_loss(&tape, &[pred_vars(&tape, &pl, &pb)], &[gts_rev], &w, &f).unwrap();
            assert!((a.breakdown.total - b.breakdown.total).abs() < 1e-9);
            let a = unsupervised_loss(&tape, &[pred_vars(&tape, &logits, &boxes)], std::slice::from_ref(&ps), &w, &f).unwrap();
            let b = unsupervised_loss(&tape, &[pred_vars(&tape, &pl, &pb)], &[ps_perm], &w, &f).unwrap();
            assert!((a.breakdown.total - b.breakdown.total).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_gradients_pass_check_on_two_image_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let n = 4;
        let mut params = ParamSet::new();
        for img in 0..2 {
            let l: Vec<f64> = (0..n * K).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-1.5..1.5)).collect();
            params.insert(format!("logits{img}"), Tensor::new(vec![n, K], l).unwrap());
            params.insert(format!("boxes{img}"), Tensor::new(vec![n, 4], b).unwrap());
        }
        let gts = vec![
            vec![obj(1, 0.3, 0.4, 0.2, 0.3), obj(2, 0.6, 0.6, 0.3, 0.2)],
            vec![obj(3, 0.5, 0.5, 0.4, 0.4)],
        ];
        let pseudo = vec![random_pseudo(&mut rng, n), random_pseudo(&mut rng, n)];
        fn objective<'t>(tape: &'t Tape, vars: &ParamVars<'t>, gts: &[Vec<Object>], pseudo: &[PseudoLabelSet]) -> Result<Var<'t>> {
            let preds: Vec<PredVars> = (0..2)
                .map(|i| -> Result<PredVars> {
                    Ok(PredVars {
                        logits: vars.get(&format!("logits{i}"))?,
                        boxes: vars.get(&format!("boxes{i}"))?.sigmoid(),
                    })
                })
                .collect::<Result<_>>()?;
            let s = supervised_loss(tape, &preds, gts, &LossWeights::default(), &FocalParams::default())?;
            let u = unsupervised_loss(tape, &preds, pseudo, &LossWeights::default(), &FocalParams::default())?;
            total_loss_var(s.total, u.total, 2, 2, 4.0)
        }
        let report = gradient_check::<LossError, _>(|t, v| objective(t, v, &gts, &pseudo), &params, &Default::default()).unwrap();
        assert!(report.all_passed(), "{:?}", report.failures);
        assert!(report.passed >= report.probed - 2);
    }

    proptest! {
        #[test]
        fn soft_one_hot_equals_hard_bitwise(l in prop::collection::vec(-5.0f64..5.0, K), label in 0usize..K) {
            let hard = if label == K - 1 { None } else { Some(label + 1) };
            let mut q = vec![0.0; K];
            q[hard_index(hard, K).unwrap()] = 1.0;
            let f = FocalParams::default();
            let a = focal_loss(&ClassTarget::Hard(hard), &l, &f).unwrap();
            let b = focal_loss(&ClassTarget::Soft(q), &l, &f).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }

        #[test]
        fn gibbs_inequality(t in prop::collection::vec(-4.0f64..4.0, K), s in prop::collection::vec(-4.0f64..4.0, K)) {
            prop_assert!(consistency_ce(&t, &s) >= consistency_ce(&t, &t) - 1e-12);
        }
    }
}
