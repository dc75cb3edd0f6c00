//! Adam with a cosine learning-rate decay.

use std::f64::consts::PI;

use crate::params::ParamSet;
use crate::tensor::Mat;

/// Learning rate at `step` (0-based) of a cosine decay from `base` to 0
/// over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    0.5 * base * (1.0 + (PI * step as f64 / total as f64).cos())
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Mat> = params
            .iter()
            .map(|(_, m)| Mat::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update; parameters without a gradient keep their moments decaying
    /// but are not moved.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Mat>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for (((pv, mv), vv), gv) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert!((cosine_lr(1e-4, 0, 100) - 1e-4).abs() < 1e-15);
        assert!((cosine_lr(1e-4, 50, 100) - 5e-5).abs() < 1e-15);
        assert!(cosine_lr(1e-4, 100, 100).abs() < 1e-15);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // With bias correction the first step is lr * sign(g) (up to eps).
        let mut p = ParamSet::new();
        let id = p.add("w", Mat::from_rows(&[&[1.0, -1.0]]));
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &[Some(Mat::from_rows(&[&[0.5, -2.0]]))], 0.1);
        let w = p.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = ParamSet::new();
        let id = p.add("x", Mat::from_rows(&[&[3.0, -2.0]]));
        let mut adam = Adam::new(&p);
        for _ in 0..2000 {
            let g = p.get(id).map(|v| 2.0 * v);
            adam.step(&mut p, &[Some(g)], 0.05);
        }
        assert!(p.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }
}
