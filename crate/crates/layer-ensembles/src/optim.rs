//! Adam with bias correction and a reduce-on-plateau learning-rate rule.

use crate::error::{LeError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, param_shapes: &[Vec<usize>]) -> Self {
        Self {
            config,
            first_moment: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second_moment: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update. `grads[i] = None` leaves parameter i untouched
    /// (its moments are not advanced either).
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>], names: impl Fn(usize) -> String) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(LeError::InvalidArgument(
                "adam_step: parameter/gradient count mismatch".into(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            if !g.same_shape(&params[i]) {
                return Err(LeError::ShapeMismatch {
                    context: format!("adam_step gradient for `{}`", names(i)),
                    expected: params[i].shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(LeError::NonFiniteGradient(names(i)));
            }
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let p = params[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

/// Reduce-on-plateau schedule: halve (by `factor`) when the best validation
/// loss has not improved by more than `min_delta` for `patience` epochs.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    epochs_since_improvement: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_delta: f64) -> Self {
        assert!(factor > 0.0 && factor < 1.0 && patience > 0);
        Self {
            lr,
            factor,
            patience,
            min_delta,
            best: f64::INFINITY,
            epochs_since_improvement: 0,
        }
    }

    /// Record one epoch's validation loss; returns the (possibly decayed) lr.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
            if self.epochs_since_improvement >= self.patience {
                self.lr *= self.factor;
                self.epochs_since_improvement = 0;
            }
        }
        self.lr
    }
}

/// Stateless form: final learning rate after replaying a loss history.
pub fn reduce_lr_on_plateau(history: &[f64], initial_lr: f64, patience: usize, factor: f64, min_delta: f64) -> f64 {
    let mut sched = PlateauScheduler::new(initial_lr, factor, patience, min_delta);
    let mut lr = initial_lr;
    for &v in history {
        lr = sched.observe(v);
    }
    lr
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::full(&[3], 0.7)];
        let shapes: Vec<_> = params.iter().map(|p| p.shape().to_vec()).collect();
        let mut adam = AdamState::new(AdamConfig::default(), &shapes);
        for _ in 0..5 {
            adam.step(&mut params, &[Some(Tensor::zeros(&[3]))], |_| "w".into()).unwrap();
        }
        assert_eq!(params[0].data(), &[0.7, 0.7, 0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = vec![Tensor::scalar(0.0)];
        let mut adam = AdamState::new(AdamConfig::default(), &[vec![1]]);
        adam.step(&mut params, &[Some(Tensor::scalar(1.0))], |_| "w".into()).unwrap();
        // bias-corrected first update is -lr * g/|g| up to epsilon
        assert!((params[0].item() + 1e-3).abs() < 1e-6);
    }

    /// Independent scalar Adam, written directly from the update equations.
    fn scalar_adam_reference(mut w: f64, steps: usize) -> f64 {
        let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=steps {
            let g = 2.0 * w; // f(w) = w^2
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1f64_pow(b1, t));
            let vh = v / (1.0 - b1f64_pow(b2, t));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        w
    }

    fn b1f64_pow(b: f64, t: usize) -> f64 {
        b.powi(t as i32)
    }

    #[test]
    fn quadratic_descent_matches_scalar_reference() {
        let mut params = vec![Tensor::scalar(1.0)];
        let mut adam = AdamState::new(AdamConfig::default(), &[vec![1]]);
        let mut prev = 1.0;
        for step in 1..=10 {
            let g = 2.0 * params[0].item();
            adam.step(&mut params, &[Some(Tensor::scalar(g))], |_| "w".into()).unwrap();
            let w = params[0].item();
            assert!(w < prev, "w must strictly decrease toward 0");
            prev = w;
            let reference = scalar_adam_reference(1.0, step);
            assert!((w - reference).abs() < 1e-10, "step {step}: {w} vs {reference}");
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut params = vec![Tensor::scalar(1.0)];
        let mut adam = AdamState::new(AdamConfig::default(), &[vec![1]]);
        let err = adam
            .step(&mut params, &[Some(Tensor::scalar(f64::NAN))], |_| "enc1.conv1.weight".into())
            .unwrap_err();
        assert!(err.to_string().contains("enc1.conv1.weight"));
    }

    #[test]
    fn plateau_rules() {
        // strictly decreasing history: unchanged
        let hist: Vec<f64> = (0..10).map(|i| 1.0 - 0.05 * i as f64).collect();
        assert_eq!(reduce_lr_on_plateau(&hist, 1e-3, 3, 0.5, 1e-4), 1e-3);
        // constant history of length patience+1: one decay
        let hist = vec![0.5; 4];
        assert!((reduce_lr_on_plateau(&hist, 1e-3, 3, 0.5, 1e-4) - 5e-4).abs() < 1e-15);
        // decay triggers exactly at epoch 5
        let hist = [1.0, 0.9, 0.9, 0.9, 0.9];
        let mut sched = PlateauScheduler::new(1e-3, 0.5, 3, 1e-4);
        let mut lrs = vec![];
        for &v in &hist {
            lrs.push(sched.observe(v));
        }
        assert_eq!(lrs, vec![1e-3, 1e-3, 1e-3, 1e-3, 5e-4]);
    }
}
