use super::{Matrix, TensorError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment accumulators for a fixed list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[Matrix]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect()
        };
        AdamState {
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(
        &mut self,
        params: &mut [Matrix],
        grads: &[Matrix],
        lr: f64,
    ) -> Result<(), TensorError> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(TensorError::CountMismatch {
                expected: self.first.len(),
                actual: params.len().min(grads.len()),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let correction1 = 1.0 - ADAM_BETA1.powi(t);
        let correction2 = 1.0 - ADAM_BETA2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let entries = p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice()));
            for ((theta, &grad), (m, v)) in entries {
                let grad = f64::from(grad);
                let m_new = ADAM_BETA1 * f64::from(*m) + (1.0 - ADAM_BETA1) * grad;
                let v_new = ADAM_BETA2 * f64::from(*v) + (1.0 - ADAM_BETA2) * grad * grad;
                *m = m_new as f32;
                *v = v_new as f32;
                let update = lr * (m_new / correction1) / ((v_new / correction2).sqrt() + ADAM_EPS);
                *theta = (f64::from(*theta) - update) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = vec![Matrix::zeros(1, 1)];
        let mut state = AdamState::new(&params);
        state
            .step(&mut params, &[Matrix::filled(1, 1, 1.0)], 0.001)
            .unwrap();
        // m_hat = v_hat = 1 at t = 1, so the step is lr / (1 + eps)
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((f64::from(params[0].get(0, 0)) - expected).abs() < 1e-10);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let init = Matrix::from_rows(&[&[0.3, -1.2], &[4.0, 0.0]]);
        let mut params = vec![init.clone()];
        let mut state = AdamState::new(&params);
        for _ in 0..5 {
            state
                .step(&mut params, &[Matrix::zeros(2, 2)], 0.001)
                .unwrap();
        }
        assert_eq!(params[0], init);
    }

    #[test]
    fn identical_params_follow_identical_trajectories() {
        let mut params = vec![Matrix::filled(2, 3, 0.5), Matrix::filled(2, 3, 0.5)];
        let mut state = AdamState::new(&params);
        for i in 0..10 {
            let g = Matrix::filled(2, 3, (i as f32 - 4.5) * 0.1);
            state.step(&mut params, &[g.clone(), g], 0.01).unwrap();
        }
        assert_eq!(params[0], params[1]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut params = vec![Matrix::zeros(2, 2)];
        let mut state = AdamState::new(&params);
        assert!(matches!(
            state.step(&mut params, &[Matrix::zeros(1, 2)], 0.001),
            Err(TensorError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            state.step(&mut params, &[], 0.001),
            Err(TensorError::CountMismatch { .. })
        ));
        assert_eq!(state.step_count(), 0);
    }
}
