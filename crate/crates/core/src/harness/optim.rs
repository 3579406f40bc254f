use crate::tensor::{ParamSet, TensorError};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: ParamSet,
    pub v: ParamSet,
    /// Steps taken so far.
    pub t: u64,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<(), TensorError> {
        params.check_layout(grads)?;
        params.check_layout(&self.m)?;
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let moments = self.m.iter_mut().zip(self.v.iter_mut());
        for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` to global L2 norm at most `max_norm` (0 disables).
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = grads.l2_norm();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(vals: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![vals.len()], vals.to_vec()).unwrap());
        p
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // With bias correction the first update is lr·g/(|g| + eps).
        let mut p = single(&[1.0, -2.0, 0.5]);
        let g = single(&[0.3, -4.0, 0.0]);
        let mut opt = Adam::new(&p);
        opt.step(&mut p, &g, 0.01).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - (1.0 - 0.01 * 0.3 / (0.3 + 1e-8))).abs() < 1e-15);
        assert!((w[1] - (-2.0 + 0.01 * 4.0 / (4.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn matches_scalar_recurrence() {
        let mut p = single(&[0.7]);
        let mut opt = Adam::new(&p);
        let (mut x, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        for t in 1..=20 {
            let g = 2.0 * x - 1.0;
            opt.step(&mut p, &single(&[g]), 0.05).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let (mh, vh) = (m / (1.0 - 0.9f64.powi(t)), v / (1.0 - 0.999f64.powi(t)));
            x -= 0.05 * mh / (vh.sqrt() + 1e-8);
            assert!((p.get("w").unwrap().data()[0] - x).abs() < 1e-14);
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = single(&[3.0, -2.0]);
        let mut opt = Adam::new(&p);
        for _ in 0..2000 {
            let w = p.get("w").unwrap().data().to_vec();
            opt.step(&mut p, &single(&[2.0 * (w[0] - 1.0), 2.0 * w[1]]), 0.01).unwrap();
        }
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 1.0).abs() < 1e-3 && w[1].abs() < 1e-3);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = single(&[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.l2_norm() - 1.0).abs() < 1e-15);
        let mut g = single(&[0.03, 0.04]);
        clip_grad_norm(&mut g, 1.0);
        assert_eq!(g.get("w").unwrap().data(), &[0.03, 0.04]);
        let mut g = single(&[3.0, 4.0]);
        clip_grad_norm(&mut g, 0.0);
        assert_eq!(g.get("w").unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let mut p = single(&[1.0]);
        let mut opt = Adam::new(&p);
        assert!(opt.step(&mut p, &single(&[1.0, 2.0]), 0.1).is_err());
    }
}
