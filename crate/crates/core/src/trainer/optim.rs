//! Adam with global-norm gradient clipping.

use crate::numerics::Tensor;

use super::model::Param;

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Param], learning_rate: f64, beta1: f64, beta2: f64, eps: f64, clip: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Self {
            learning_rate,
            beta1,
            beta2,
            eps,
            clip,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` is `None` for parameters that received no
    /// gradient; frozen parameters are never touched.
    pub fn step(&mut self, params: &mut [Param], grads: &[Option<Tensor>]) {
        debug_assert_eq!(params.len(), grads.len());
        let norm_sq: f64 = params
            .iter()
            .zip(grads)
            .filter(|(p, _)| p.trainable)
            .filter_map(|(_, g)| g.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|x| x * x)
            .sum();
        let norm = norm_sq.sqrt();
        let factor = if self.clip > 0.0 && norm > self.clip {
            self.clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if !p.trainable {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                let gk = g.data()[k] * factor;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *w -= self.learning_rate * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64) -> Param {
        Param {
            name: "w".into(),
            value: Tensor::scalar(v),
            trainable: true,
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![param(1.0)];
        let mut opt = Adam::new(&p, 0.1, 0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut p, &[Some(Tensor::scalar(3.0))]);
        assert!((p[0].value.data()[0] - 0.9).abs() < 1e-9);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![param(5.0)];
        let mut opt = Adam::new(&p, 0.05, 0.9, 0.999, 1e-8, 1.0);
        for _ in 0..2000 {
            let w = p[0].value.data()[0];
            opt.step(&mut p, &[Some(Tensor::scalar(2.0 * (w - 2.0)))]);
        }
        assert!((p[0].value.data()[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn frozen_and_missing_gradients_are_skipped() {
        let mut p = vec![param(1.0), param(2.0)];
        p[1].trainable = false;
        let mut opt = Adam::new(&p, 0.1, 0.9, 0.999, 1e-8, 1.0);
        opt.step(&mut p, &[None, Some(Tensor::scalar(1.0))]);
        assert_eq!(p[0].value.data()[0], 1.0);
        assert_eq!(p[1].value.data()[0], 2.0);
    }

    #[test]
    fn clipping_scales_the_global_norm() {
        let mut a = vec![param(0.0), param(0.0)];
        let mut b = a.clone();
        let mut clipped = Adam::new(&a, 0.1, 0.0, 0.0, 0.0, 1.0);
        let mut plain = Adam::new(&b, 0.1, 0.0, 0.0, 0.0, 0.0);
        // With both betas zero the update is lr·sign(g), so clipping must not change it.
        clipped.step(&mut a, &[Some(Tensor::scalar(30.0)), Some(Tensor::scalar(40.0))]);
        plain.step(&mut b, &[Some(Tensor::scalar(30.0)), Some(Tensor::scalar(40.0))]);
        assert!((a[0].value.data()[0] - b[0].value.data()[0]).abs() < 1e-12);
    }
}
