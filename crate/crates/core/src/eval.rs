//! COCO-style average precision: greedy matching per IoU threshold and
//! 101-point interpolated precision, averaged over thresholds 0.50:0.05:0.95.

use std::fmt::Write as _;

use crate::data::{Object, CLASS_NAMES};
use crate::geometry::{iou, BBox};
use crate::model::Detection;

pub const NUM_THRESHOLDS: usize = 10;

/// `0.50, 0.55, …, 0.95`.
pub fn iou_thresholds() -> [f64; NUM_THRESHOLDS] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// A detection of one class, tagged with the image it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassDetection {
    pub image: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Orders detections by descending score, ties by original position.
pub fn score_order(dets: &[ClassDetection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// True-positive flag per detection, in score order. Each detection takes the
/// highest-IoU still-unmatched ground truth of its image with IoU ≥ `thresh`
/// (lowest index on ties).
pub fn greedy_matches(dets: &[ClassDetection], gts: &[(usize, BBox)], thresh: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    score_order(dets)
        .into_iter()
        .map(|d| {
            let det = &dets[d];
            let mut best: Option<(usize, f64)> = None;
            for (g, (img, gb)) in gts.iter().enumerate() {
                if taken[g] || *img != det.image {
                    continue;
                }
                let v = iou(&det.bbox, gb);
                if v >= thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// 101-point interpolated AP from true-positive flags in score order.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    let (mut recall, mut precision) = (Vec::with_capacity(tp.len()), Vec::with_capacity(tp.len()));
    let (mut t, mut f) = (0usize, 0usize);
    for &hit in tp {
        if hit {
            t += 1;
        } else {
            f += 1;
        }
        recall.push(t as f64 / num_gt as f64);
        precision.push(t as f64 / (t + f) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let i = recall.partition_point(|&x| x < r);
        sum += precision.get(i).copied().unwrap_or(0.0);
    }
    sum / 101.0
}

/// AP of one class at one IoU threshold; `None` when there is no ground truth.
pub fn average_precision(dets: &[ClassDetection], gts: &[(usize, BBox)], thresh: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    Some(interpolated_ap(&greedy_matches(dets, gts, thresh), gts.len()))
}

/// Detections and ground truth of one image.
#[derive(Debug, Clone, Default)]
pub struct ImageEval {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<Object>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// `[class][threshold]`, `None` for classes without ground truth.
    pub per_class: Vec<[Option<f64>; NUM_THRESHOLDS]>,
    pub support: Vec<usize>,
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
}

impl EvalResult {
    /// Threshold-averaged AP of class `c` (1-based).
    pub fn class_ap(&self, c: usize) -> Option<f64> {
        let row = &self.per_class[c - 1];
        row[0]?;
        Some(row.iter().map(|v| v.unwrap_or(0.0)).sum::<f64>() / NUM_THRESHOLDS as f64)
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// AP over all images for each class and threshold, averaged over the
/// classes that have ground truth.
pub fn map_50_95(images: &[ImageEval], num_classes: usize) -> EvalResult {
    let thresholds = iou_thresholds();
    let mut per_class = Vec::with_capacity(num_classes);
    let mut support = Vec::with_capacity(num_classes);
    for c in 1..=num_classes {
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for (i, im) in images.iter().enumerate() {
            dets.extend(im.detections.iter().filter(|d| d.class == c).map(|d| ClassDetection {
                image: i,
                score: d.score,
                bbox: d.bbox,
            }));
            gts.extend(im.ground_truth.iter().filter(|o| o.class == c).map(|o| (i, o.bbox)));
        }
        support.push(gts.len());
        per_class.push(thresholds.map(|t| average_precision(&dets, &gts, t)));
    }
    let valid: Vec<&[Option<f64>; NUM_THRESHOLDS]> = per_class.iter().filter(|r| r[0].is_some()).collect();
    let at = |t: usize| mean(valid.iter().map(|r| r[t].unwrap()));
    let map = mean(valid.iter().map(|r| mean(r.iter().map(|v| v.unwrap()))));
    EvalResult {
        map,
        ap50: at(0),
        ap75: at(5),
        per_class,
        support,
    }
}

pub fn metrics_header(num_classes: usize) -> String {
    let mut h = String::from("epoch,split,lr,mAP,AP50,AP75");
    for c in 0..num_classes {
        let name = CLASS_NAMES.get(c).map_or_else(|| format!("class{}", c + 1), |n| n.to_string());
        write!(h, ",AP_{name}").unwrap();
    }
    h
}

/// One CSV row; undefined per-class APs are left empty.
pub fn metrics_row(epoch: usize, split: &str, lr: f64, r: &EvalResult) -> String {
    let mut row = format!("{epoch},{split},{lr},{},{},{}", r.map, r.ap50, r.ap75);
    for c in 1..=r.per_class.len() {
        match r.class_ap(c) {
            Some(v) => write!(row, ",{v}").unwrap(),
            None => row.push(','),
        }
    }
    row
}
