//! Decoupled-weight-decay optimizer (AdamW).

use crate::numeric::params::ParamSet;
use crate::numeric::Matrix;

/// AdamW state. The decay term is applied directly to parameter values,
/// not through the moment estimates; biases and edge weights (params with
/// `decay == false`) are exempt.
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first_moment: Vec<Matrix>,
    second_moment: Vec<Matrix>,
}

impl AdamW {
    pub fn new(params: &ParamSet, learning_rate: f64, weight_decay: f64) -> Self {
        let zeros = |p: &crate::numeric::params::Param| {
            Matrix::zeros(p.value.rows(), p.value.cols())
        };
        AdamW {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: params.iter().map(zeros).collect(),
            second_moment: params.iter().map(zeros).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update from the gradients currently stored in `params`:
    /// value <- value - lr * m_hat / (sqrt(v_hat) + eps) - lr * decay * value.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let decay = if p.decay { self.weight_decay } else { 0.0 };
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let grads = p.grad.data();
            for (k, value) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *value -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon)
                    + self.learning_rate * decay * *value;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::tape::Tape;

    #[test]
    fn zero_gradients_and_no_decay_leave_values_unchanged() {
        let mut params = ParamSet::new();
        let id = params.register("theta", Matrix::filled(2, 2, 0.7), true);
        let mut opt = AdamW::new(&params, 0.1, 0.0);
        opt.step(&mut params);
        for v in params.param(id).value.data() {
            assert_eq!(*v, 0.7);
        }
    }

    #[test]
    fn decoupled_decay_with_zero_gradients_shrinks_values() {
        let mut params = ParamSet::new();
        let id = params.register("theta", Matrix::filled(1, 3, 2.0), true);
        let lr = 0.01;
        let wd = 0.5;
        let mut opt = AdamW::new(&params, lr, wd);
        opt.step(&mut params);
        for v in params.param(id).value.data() {
            assert!((v - 2.0 * (1.0 - lr * wd)).abs() < 1e-12);
        }
    }

    #[test]
    fn exempt_params_skip_decay() {
        let mut params = ParamSet::new();
        let id = params.register("bias", Matrix::filled(1, 3, 2.0), false);
        let mut opt = AdamW::new(&params, 0.01, 0.5);
        opt.step(&mut params);
        for v in params.param(id).value.data() {
            assert_eq!(*v, 2.0);
        }
    }

    #[test]
    fn single_step_descends_on_quadratic() {
        let mut params = ParamSet::new();
        let id = params.register("theta", Matrix::filled(1, 1, 1.0), true);
        // f = theta^2 / 2, grad = theta
        params.param_mut(id).grad.set(0, 0, 1.0);
        let mut opt = AdamW::new(&params, 0.05, 0.0);
        opt.step(&mut params);
        let v = params.param(id).value.get(0, 0);
        assert!(v.abs() < 1.0, "step did not descend: {v}");
    }

    #[test]
    fn converges_to_analytic_minimum_of_convex_quadratic() {
        // f(theta) = sum_i a_i (theta_i - t_i)^2 with minimum at t.
        let target = [0.3, -0.8];
        let curvature = [1.0, 4.0];
        let mut params = ParamSet::new();
        let id = params.register("theta", Matrix::row_vector(vec![1.0, 1.0]), false);
        let mut opt = AdamW::new(&params, 0.05, 0.0);
        for _ in 0..200 {
            params.zero_grads();
            let mut tape = Tape::inference();
            let theta = tape.param(&params, id);
            let t = tape.constant(Matrix::row_vector(target.to_vec()));
            let neg_t = tape.scale(t, -1.0);
            let diff = tape.add(theta, neg_t).unwrap();
            let a = tape.constant(Matrix::row_vector(curvature.to_vec()));
            let weighted = tape.hadamard(diff, a).unwrap();
            let sq = tape.hadamard(weighted, diff).unwrap();
            let loss = tape.sum_all(sq);
            tape.backward(loss, &mut params).unwrap();
            opt.step(&mut params);
        }
        let v = params.param(id).value.clone();
        let dist = ((v.get(0, 0) - target[0]).powi(2) + (v.get(0, 1) - target[1]).powi(2)).sqrt();
        assert!(dist < 1e-3, "distance to minimum {dist}");
    }
}
