//! Pairwise matching costs and optimal bipartite assignment.

use crate::geometry::{giou, BBox};
use crate::losses::{focal_loss, ClassTarget, FocalParams, LossError, LossWeights};

/// Dense `rows × cols` cost matrix; rows are targets, columns predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LossError> {
        if data.len() != rows * cols {
            return Err(LossError::Invalid(format!(
                "cost matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if rows > cols {
            return Err(LossError::Invalid(format!("more targets ({rows}) than predictions ({cols})")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LossError::Invalid("non-finite matching cost".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LossError> {
        let cols = rows.first().map_or(0, Vec::len);
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn cost_of(&self, map: &[usize]) -> f64 {
        map.iter().enumerate().map(|(i, &j)| self.get(i, j)).sum()
    }
}

/// Injective target → prediction map.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub map: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    /// Inverse view: for each prediction, the target it serves.
    pub fn by_prediction(&self, n_preds: usize) -> Vec<Option<usize>> {
        let mut inv = vec![None; n_preds];
        for (t, &p) in self.map.iter().enumerate() {
            inv[p] = Some(t);
        }
        inv
    }
}

/// One row of the cost matrix: `(class target, box)`.
pub type MatchTarget = (ClassTarget, BBox);

/// Entry `(i, j)` is `λ_class·focal + [target i is an object]·(λ_ℓ1·‖b_i − b̂_j‖₁ + λ_giou·(1 − GIoU))`.
pub fn build_cost_matrix(
    targets: &[MatchTarget],
    pred_logits: &[Vec<f64>],
    pred_boxes: &[BBox],
    weights: &LossWeights,
    focal: &FocalParams,
) -> Result<CostMatrix, LossError> {
    if pred_logits.is_empty() {
        return Err(LossError::Invalid("no predictions to match against".into()));
    }
    if pred_logits.len() != pred_boxes.len() {
        return Err(LossError::Invalid("prediction logits and boxes differ in count".into()));
    }
    let mut data = Vec::with_capacity(targets.len() * pred_logits.len());
    for (target, b) in targets {
        let object = target.is_object();
        for (logits, bhat) in pred_logits.iter().zip(pred_boxes) {
            let mut c = weights.class * focal_loss(target, logits, focal)?;
            if object {
                let l1: f64 = b.to_array().iter().zip(bhat.to_array()).map(|(x, y)| (x - y).abs()).sum();
                c += weights.l1 * l1 + weights.giou * (1.0 - giou(b, bhat));
            }
            data.push(c);
        }
    }
    CostMatrix::new(targets.len(), pred_logits.len(), data)
}

/// Minimum-cost injective assignment of rows to columns (shortest augmenting
/// paths with row/column potentials, `O(rows² · cols)`).
pub fn hungarian(c: &CostMatrix) -> Assignment {
    let (n, m) = (c.rows, c.cols);
    if n == 0 {
        return Assignment {
            map: Vec::new(),
            total_cost: 0.0,
        };
    }
    // 1-based; column 0 is the virtual root of each search.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut map = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            map[owner[j] - 1] = j - 1;
        }
    }
    let total_cost = c.cost_of(&map);
    Assignment { map, total_cost }
}

pub const BRUTE_FORCE_MAX_ROWS: usize = 7;

/// Exhaustive minimum over all injective maps; ties go to the
/// lexicographically smallest map. Refuses more than [`BRUTE_FORCE_MAX_ROWS`] rows.
pub fn brute_force_assignment(c: &CostMatrix) -> Result<Assignment, LossError> {
    if c.rows > BRUTE_FORCE_MAX_ROWS {
        return Err(LossError::Invalid(format!(
            "brute force refuses {} rows (max {BRUTE_FORCE_MAX_ROWS})",
            c.rows
        )));
    }
    let mut best: Option<Assignment> = None;
    let mut current = Vec::with_capacity(c.rows);
    let mut used = vec![false; c.cols];
    fn rec(c: &CostMatrix, current: &mut Vec<usize>, used: &mut [bool], best: &mut Option<Assignment>) {
        if current.len() == c.rows {
            let cost = c.cost_of(current);
            if best.as_ref().is_none_or(|b| cost < b.total_cost) {
                *best = Some(Assignment {
                    map: current.clone(),
                    total_cost: cost,
                });
            }
            return;
        }
        for j in 0..c.cols {
            if !used[j] {
                used[j] = true;
                current.push(j);
                rec(c, current, used, best);
                current.pop();
                used[j] = false;
            }
        }
    }
    rec(c, &mut current, &mut used, &mut best);
    Ok(best.expect("rows <= cols guarantees at least one map"))
}
