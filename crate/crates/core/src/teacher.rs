//! The moving-average teacher: keep-rate schedule, parameter averaging,
//! soft pseudo-labels, and the post-processing variants used in ablations.

use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::geometry::{iou, BBox};
use crate::model::{infer, DetectorConfig, ModelError};
use crate::tensor::{softmax, ParamSet, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TeacherError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T, E = TeacherError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    /// Keep rate fixed at `alpha_start` throughout.
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmaSchedule {
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub epochs: usize,
    pub kind: ScheduleKind,
}

impl Default for EmaSchedule {
    fn default() -> Self {
        Self {
            alpha_start: 0.9996,
            alpha_end: 1.0,
            epochs: 50,
            kind: ScheduleKind::Cosine,
        }
    }
}

impl EmaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.alpha_start && self.alpha_start <= self.alpha_end && self.alpha_end <= 1.0) {
            return Err(TeacherError::Invalid(format!(
                "keep rates must satisfy 0 <= {} <= {} <= 1",
                self.alpha_start, self.alpha_end
            )));
        }
        if self.epochs == 0 {
            return Err(TeacherError::Invalid("schedule needs at least one epoch".into()));
        }
        Ok(())
    }
}

/// Keep rate for epoch `k`, rising from `alpha_start` at 0 to `alpha_end` at
/// the last epoch along a half cosine.
pub fn keep_rate(sched: &EmaSchedule, k: usize) -> Result<f64> {
    sched.validate()?;
    if k > sched.epochs {
        return Err(TeacherError::Invalid(format!("epoch {k} beyond schedule length {}", sched.epochs)));
    }
    Ok(match sched.kind {
        ScheduleKind::Constant => sched.alpha_start,
        ScheduleKind::Cosine => {
            let c = (std::f64::consts::PI * k as f64 / sched.epochs as f64).cos();
            sched.alpha_end - (sched.alpha_end - sched.alpha_start) * (c + 1.0) / 2.0
        }
    })
}

/// `teacher ← α·teacher + (1 − α)·student`, in place.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TeacherError::Invalid(format!("keep rate {alpha} outside [0, 1]")));
    }
    teacher.check_layout(student)?;
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = alpha * *a + (1.0 - alpha) * b;
        }
    }
    Ok(())
}

/// The teacher's full output on one image: `N` class distributions over
/// `C + 1` classes and `N` boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub probs: Vec<Vec<f64>>,
    pub boxes: Vec<BBox>,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Largest real-class probability of row `i`.
    pub fn confidence(&self, i: usize) -> f64 {
        let p = &self.probs[i];
        p[..p.len() - 1].iter().cloned().fold(0.0, f64::max)
    }

    pub fn is_object(&self, i: usize) -> bool {
        crate::losses::argmax(&self.probs[i]) + 1 != self.probs[i].len()
    }

    /// Replaces row `i`'s distribution with certain no-object.
    pub fn set_no_object(&mut self, i: usize) {
        let k = self.probs[i].len();
        self.probs[i] = vec![0.0; k];
        self.probs[i][k - 1] = 1.0;
    }
}

/// Softmax of every teacher query on the weak view; nothing is filtered.
/// Computed without a gradient path.
pub fn pseudo_labels(teacher: &ParamSet, cfg: &DetectorConfig, weak_view: &Image) -> Result<PseudoLabelSet> {
    let p = infer(teacher, cfg, weak_view)?;
    Ok(PseudoLabelSet {
        probs: p.logits.iter().map(|l| softmax(l)).collect(),
        boxes: p.boxes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PostProcess {
    None,
    Nms { iou: f64 },
    Threshold { tau: f64 },
    Both { iou: f64, tau: f64 },
}

impl PostProcess {
    pub fn validate(&self) -> Result<()> {
        let (iou, tau) = match *self {
            PostProcess::None => (None, None),
            PostProcess::Nms { iou } => (Some(iou), None),
            PostProcess::Threshold { tau } => (None, Some(tau)),
            PostProcess::Both { iou, tau } => (Some(iou), Some(tau)),
        };
        if let Some(t) = tau {
            if !(t > 0.0 && t < 1.0) {
                return Err(TeacherError::Invalid(format!("confidence threshold {t} outside (0, 1)")));
            }
        }
        if let Some(i) = iou {
            if !(i > 0.0 && i <= 1.0) {
                return Err(TeacherError::Invalid(format!("NMS IoU threshold {i} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Heuristic filtering for ablations. Filtered rows become certain no-object;
/// the row count never changes and kept rows stay soft.
pub fn ablation_postprocess(p: &PseudoLabelSet, mode: PostProcess) -> Result<PseudoLabelSet> {
    mode.validate()?;
    let mut out = p.clone();
    if let PostProcess::Threshold { tau } | PostProcess::Both { tau, .. } = mode {
        for i in 0..out.len() {
            if out.confidence(i) < tau {
                out.set_no_object(i);
            }
        }
    }
    if let PostProcess::Nms { iou: thr } | PostProcess::Both { iou: thr, .. } = mode {
        let mut order: Vec<usize> = (0..out.len()).filter(|&i| out.is_object(i)).collect();
        order.sort_by(|&a, &b| out.confidence(b).total_cmp(&out.confidence(a)).then(a.cmp(&b)));
        let mut kept: Vec<usize> = Vec::new();
        for i in order {
            if kept.iter().any(|&k| iou(&out.boxes[k], &out.boxes[i]) > thr) {
                out.set_no_object(i);
            } else {
                kept.push(i);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sched(k: usize) -> EmaSchedule {
        EmaSchedule {
            epochs: k,
            ..Default::default()
        }
    }

    #[test]
    fn keep_rate_endpoints() {
        let s = sched(50);
        assert!((keep_rate(&s, 0).unwrap() - 0.9996).abs() <= 1e-12);
        assert!((keep_rate(&s, 25).unwrap() - 0.9998).abs() <= 1e-12);
        assert!((keep_rate(&s, 50).unwrap() - 1.0).abs() <= 1e-12);
        assert!(keep_rate(&s, 51).is_err());
        let bad = EmaSchedule {
            alpha_start: 1.0,
            alpha_end: 0.5,
            ..s
        };
        assert!(keep_rate(&bad, 0).is_err());
    }

    #[test]
    fn keep_rate_monotone_and_bounded() {
        for k in [1, 2, 7, 50, 333] {
            let s = sched(k);
            let rates: Vec<f64> = (0..=k).map(|e| keep_rate(&s, e).unwrap()).collect();
            assert!(rates.windows(2).all(|w| w[0] <= w[1]));
            assert!(rates.iter().all(|&r| (0.9996..=1.0).contains(&r)));
        }
        let c = EmaSchedule {
            kind: ScheduleKind::Constant,
            ..sched(10)
        };
        assert!((0..=10).all(|e| keep_rate(&c, e).unwrap() == 0.9996));
    }

    fn random_params(rng: &mut impl Rng) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::new(vec![2, 3], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        p.insert("b", Tensor::new(vec![4], (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        p
    }

    #[test]
    fn ema_extremes_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (t0, s) = (random_params(&mut rng), random_params(&mut rng));
        let mut t = t0.clone();
        ema_update(&mut t, &s, 1.0).unwrap();
        assert_eq!(t, t0);
        ema_update(&mut t, &s, 0.0).unwrap();
        assert_eq!(t, s);
    }

    #[test]
    fn ema_arithmetic_and_affinity() {
        let mut t = ParamSet::new();
        t.insert("w", Tensor::new(vec![1], vec![0.0]).unwrap());
        let mut s = ParamSet::new();
        s.insert("w", Tensor::new(vec![1], vec![1.0]).unwrap());
        ema_update(&mut t, &s, 0.9996).unwrap();
        assert!((t.get("w").unwrap().item() - 0.0004).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (t0, s) = (random_params(&mut rng), random_params(&mut rng));
        let mut t = t0.clone();
        ema_update(&mut t, &s, 0.7).unwrap();
        for (((_, a), (_, b)), (_, c)) in t0.iter().zip(s.iter()).zip(t.iter()) {
            for ((x, y), z) in a.data().iter().zip(b.data()).zip(c.data()) {
                assert_eq!(*z, 0.7 * x + (1.0 - 0.7) * y);
            }
        }
    }

    #[test]
    fn ema_converges_geometrically() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut t, s) = (random_params(&mut rng), random_params(&mut rng));
        let mut gap = t.max_abs_diff(&s);
        for _ in 0..20 {
            ema_update(&mut t, &s, 0.9).unwrap();
            let next = t.max_abs_diff(&s);
            assert!((next - 0.9 * gap).abs() <= 1e-12);
            gap = next;
        }
    }

    #[test]
    fn ema_rejects_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = random_params(&mut rng);
        let mut s = ParamSet::new();
        s.insert("a", Tensor::zeros(&[3, 2]));
        s.insert("b", Tensor::zeros(&[4]));
        assert!(ema_update(&mut t, &s, 0.5).is_err());
        assert!(ema_update(&mut t.clone(), &t, 1.5).is_err());
    }

    #[test]
    fn pseudo_labels_are_unfiltered_distributions() {
        let cfg = DetectorConfig {
            image_size: 16,
            embed_dim: 8,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            num_queries: 5,
            ffn_dim: 8,
            ..Default::default()
        };
        let params = init_model(&cfg, 1).unwrap();
        let img = Image::filled(16, 16, [0.3, 0.6, 0.9]);
        let pl = pseudo_labels(&params, &cfg, &img).unwrap();
        assert_eq!(pl.len(), 5);
        assert_eq!(pl.boxes.len(), 5);
        for p in &pl.probs {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let raw = infer(&params, &cfg, &img).unwrap();
        for (p, l) in pl.probs.iter().zip(&raw.logits) {
            assert_eq!(p, &softmax(l));
        }
    }

    fn two_rows() -> PseudoLabelSet {
        let b = BBox::new(0.5, 0.5, 0.2, 0.2);
        PseudoLabelSet {
            probs: vec![vec![0.8, 0.1, 0.05, 0.05], vec![0.05, 0.7, 0.05, 0.2]],
            boxes: vec![b, b],
        }
    }

    #[test]
    fn postprocess_none_and_threshold() {
        let p = two_rows();
        assert_eq!(ablation_postprocess(&p, PostProcess::None).unwrap(), p);
        let t = ablation_postprocess(&p, PostProcess::Threshold { tau: 0.75 }).unwrap();
        assert_eq!(t.probs[0], p.probs[0]);
        assert_eq!(t.probs[1], vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(t.len(), 2);
        let row = PseudoLabelSet {
            probs: vec![vec![0.6, 0.2, 0.1, 0.1]],
            boxes: vec![BBox::new(0.5, 0.5, 0.1, 0.1)],
        };
        let t = ablation_postprocess(&row, PostProcess::Threshold { tau: 0.9 }).unwrap();
        assert_eq!(t.probs[0], vec![0.0, 0.0, 0.0, 1.0]);
        assert!(ablation_postprocess(&row, PostProcess::Threshold { tau: 1.0 }).is_err());
        assert!(ablation_postprocess(&row, PostProcess::Threshold { tau: 0.0 }).is_err());
    }

    #[test]
    fn nms_suppresses_lower_duplicate() {
        let p = two_rows();
        let n = ablation_postprocess(&p, PostProcess::Nms { iou: 0.5 }).unwrap();
        assert_eq!(n.probs[0], p.probs[0]);
        assert_eq!(n.probs[1], vec![0.0, 0.0, 0.0, 1.0]);
        let mut apart = p.clone();
        apart.boxes[1] = BBox::new(0.2, 0.2, 0.1, 0.1);
        assert_eq!(ablation_postprocess(&apart, PostProcess::Nms { iou: 0.5 }).unwrap(), apart);
        // Both rows fall below the threshold before suppression runs.
        let both = ablation_postprocess(&p, PostProcess::Both { iou: 0.5, tau: 0.85 }).unwrap();
        assert_eq!(both.probs[0], vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(both.probs[1], vec![0.0, 0.0, 0.0, 1.0]);
    }
}
