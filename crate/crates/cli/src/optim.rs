//! Adam with coupled L2 decay, split into two rates: one for the
//! sheaf-learner parameter group and one for everything else.

use std::collections::BTreeMap;

use sheafnet::linalg::Matrix;
use sheafnet::nn::{ParameterStore, SHEAF_GROUP_PREFIX};

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    first: BTreeMap<String, Matrix<f64>>,
    second: BTreeMap<String, Matrix<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One update of every parameter named in `grads`. Decay is added to the
    /// gradient (L2, not decoupled), at `decay_sheaf` for names under the
    /// sheaf prefix and `decay_regular` otherwise.
    pub fn step(
        &mut self,
        params: &mut ParameterStore<f64>,
        grads: &BTreeMap<String, Matrix<f64>>,
        decay_regular: f64,
        decay_sheaf: f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (name, grad) in grads {
            let decay =
                if name.starts_with(SHEAF_GROUP_PREFIX) { decay_sheaf } else { decay_regular };
            let theta = params.get_mut(name);
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
            let t = theta.data_mut();
            for (i, &g0) in grad.data().iter().enumerate() {
                let g = g0 + decay * t[i];
                let m_new = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                let v_new = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = m_new;
                v.data_mut()[i] = v_new;
                t[i] -= self.lr * (m_new / bc1) / ((v_new / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(pairs: &[(&str, Matrix<f64>)]) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        for (name, value) in pairs {
            s.insert(name, value.clone());
        }
        s
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // After bias correction the first update is lr·g/(|g| + eps),
        // which is lr·sign(g) for |g| ≫ eps.
        let mut params = store(&[("w", Matrix::from_vec(1, 2, vec![1.0, -2.0]))]);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Matrix::from_vec(1, 2, vec![3.0, -0.5]));
        let mut opt = Adam::new(0.1);
        opt.step(&mut params, &grads, 0.0, 0.0);
        let w = params.get("w");
        assert!((w[(0, 0)] - 0.9).abs() < 1e-7);
        assert!((w[(0, 1)] - (-1.9)).abs() < 1e-7);
    }

    #[test]
    fn decay_rates_follow_parameter_groups() {
        let mut params = store(&[
            ("sheaf.mlp.0.w", Matrix::from_vec(1, 1, vec![4.0])),
            ("read.w", Matrix::from_vec(1, 1, vec![4.0])),
        ]);
        let mut grads = BTreeMap::new();
        grads.insert("sheaf.mlp.0.w".to_string(), Matrix::zeros(1, 1));
        grads.insert("read.w".to_string(), Matrix::zeros(1, 1));

        // Zero gradient, zero regular decay: the task group must not move,
        // the sheaf group decays.
        let mut opt = Adam::new(0.05);
        opt.step(&mut params, &grads, 0.0, 0.01);
        assert_eq!(params.get("read.w")[(0, 0)], 4.0);
        assert!(params.get("sheaf.mlp.0.w")[(0, 0)] < 4.0);
    }

    #[test]
    fn quadratic_converges() {
        // f(w) = ½‖w‖², gradient w.
        let mut params = store(&[("w", Matrix::from_vec(1, 3, vec![5.0, -7.0, 0.3]))]);
        let mut opt = Adam::new(0.2);
        for _ in 0..400 {
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), params.get("w").clone());
            opt.step(&mut params, &grads, 0.0, 0.0);
        }
        assert!(params.get("w").max_abs() < 1e-3);
    }
}
