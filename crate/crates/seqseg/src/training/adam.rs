//! Adam over any [`Parameterized`] set, with bias correction.
//!
//! Moments are kept in f64 regardless of the model scalar so that resumed
//! and freshly-run optimizers agree bit-for-bit. A coordinate whose gradient
//! is zero on every step is never moved (its moments stay zero and the
//! update is exactly 0.0), which is what the freezing contracts rely on.

use crate::nn::Parameterized;
use crate::scalar::Scalar;

/// Everything needed to resume the optimizer mid-run.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    /// First moment per parameter, traversal order.
    pub m: Vec<f64>,
    /// Second moment per parameter, traversal order.
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn zeros(param_count: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    state: AdamState,
}

impl Adam {
    pub fn new(param_count: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        assert!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0, "betas must lie in (0,1)");
        assert!(epsilon > 0.0, "epsilon must be positive");
        Adam {
            beta1,
            beta2,
            epsilon,
            state: AdamState::zeros(param_count),
        }
    }

    pub fn resume(state: AdamState, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        assert_eq!(state.m.len(), state.v.len(), "moment vectors disagree in length");
        let mut out = Adam::new(state.m.len(), beta1, beta2, epsilon);
        out.state = state;
        out
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    /// One bias-corrected update: `x -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step<S: Scalar, P: Parameterized<S>>(&mut self, lr: f64, params: &mut P, grads: &P) {
        let g = grads.to_f64_vec();
        assert_eq!(
            g.len(),
            self.state.m.len(),
            "optimizer was sized for a different parameter set"
        );
        self.state.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.state.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - self.beta2.powi(self.state.step.min(i32::MAX as u64) as i32);
        let (beta1, beta2, eps) = (self.beta1, self.beta2, self.epsilon);
        let (m, v) = (&mut self.state.m, &mut self.state.v);
        let mut i = 0;
        params.for_each_param_mut(&mut |mut view| {
            for x in view.iter_mut() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                *x = S::from_f(x.to_f() - update);
                i += 1;
            }
        });
        assert_eq!(i, g.len(), "parameter traversal drifted from the gradient");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Conv2d;
    use ndarray::{Array1, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn holder(values: &[f64]) -> Conv2d<f64> {
        // A 1x1-kernel conv is just a flat bag of parameters for these tests.
        let n = values.len();
        Conv2d {
            weight: Array4::from_shape_vec((n, 1, 1, 1), values.to_vec()).unwrap(),
            bias: None,
            stride: 1,
            pad: 0,
        }
    }

    #[test]
    fn first_step_is_a_signed_learning_rate_move() {
        let mut p = holder(&[1.0, -2.0, 3.0]);
        let g = holder(&[0.5, -0.25, 4.0]);
        let mut adam = Adam::new(3, 0.9, 0.9999, 1e-12);
        adam.step(0.01, &mut p, &g);
        // Bias correction makes m_hat = g and v_hat = g^2 on step one, so
        // each coordinate moves by lr * sign(g) (up to epsilon).
        let got = p.to_f64_vec();
        for (x, (x0, gi)) in got.iter().zip([(1.0f64, 0.5f64), (-2.0, -0.25), (3.0, 4.0)]) {
            let want = x0 - 0.01 * gi.signum();
            assert!((x - want).abs() < 1e-9, "{x} vs {want}");
        }
    }

    #[test]
    fn zero_gradient_coordinates_never_move() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let init: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut p = holder(&init);
        let mut adam = Adam::new(6, 0.9, 0.9999, 1e-8);
        for _ in 0..50 {
            let g: Vec<f64> = (0..6)
                .map(|i| if i % 2 == 0 { 0.0 } else { rng.gen_range(-1.0..1.0) })
                .collect();
            adam.step(0.05, &mut p, &holder(&g));
        }
        let after = p.to_f64_vec();
        for i in (0..6).step_by(2) {
            assert_eq!(after[i].to_bits(), init[i].to_bits(), "coordinate {i} drifted");
        }
        for i in (1..6).step_by(2) {
            assert_ne!(after[i], init[i], "live coordinate {i} never moved");
        }
    }

    #[test]
    fn quadratic_bowl_is_minimized() {
        let target = Array1::from_vec(vec![0.3, -1.2, 0.7, 2.0]);
        let mut p = holder(&[0.0; 4]);
        let mut adam = Adam::new(4, 0.9, 0.9999, 1e-8);
        for _ in 0..400 {
            let x = Array1::from_vec(p.to_f64_vec());
            let g: Vec<f64> = (&x - &target).iter().map(|d| 2.0 * d).collect();
            adam.step(0.05, &mut p, &holder(&g));
        }
        for (x, t) in p.to_f64_vec().iter().zip(target.iter()) {
            assert!((x - t).abs() < 0.05, "{x} vs {t}");
        }
    }

    #[test]
    fn resumed_state_continues_the_same_trajectory() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let grads: Vec<Vec<f64>> = (0..15)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();

        let mut p1 = holder(&[1.0, 2.0, 3.0, 4.0]);
        let mut a1 = Adam::new(4, 0.9, 0.9999, 1e-8);
        for g in &grads[..10] {
            a1.step(0.01, &mut p1, &holder(g));
        }
        let snapshot_params = p1.clone();
        let snapshot_state = a1.state().clone();
        for g in &grads[10..] {
            a1.step(0.01, &mut p1, &holder(g));
        }

        let mut p2 = snapshot_params;
        let mut a2 = Adam::resume(snapshot_state, 0.9, 0.9999, 1e-8);
        for g in &grads[10..] {
            a2.step(0.01, &mut p2, &holder(g));
        }
        assert_eq!(p1.to_f64_vec(), p2.to_f64_vec());
    }
}
