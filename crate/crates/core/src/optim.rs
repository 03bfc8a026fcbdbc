//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::tensor::{Float, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Float = f32> {
    pub config: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    shape: Vec<usize>,
    t: u64,
}

impl<T: Float> AdamState<T> {
    pub fn new(shape: &[usize], config: AdamConfig) -> Self {
        let len = shape.iter().product();
        Self {
            config,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            shape: shape.to_vec(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[T] {
        &self.m
    }

    pub fn second_moment(&self) -> &[T] {
        &self.v
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step<T: Float>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
) -> Result<(), TensorError> {
    param.expect_shape(&state.shape)?;
    grad.expect_shape(&state.shape)?;
    state.t += 1;
    let c = state.config;
    let t = state.t as i32;
    let lr_t = T::from_f64_lossy(c.learning_rate / (1.0 - c.beta1.powi(t)));
    let v_corr = T::from_f64_lossy(1.0 / (1.0 - c.beta2.powi(t)));
    let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
    let (one_b1, one_b2) = (
        T::from_f64_lossy(1.0 - c.beta1),
        T::from_f64_lossy(1.0 - c.beta2),
    );
    let eps = T::from_f64_lossy(c.epsilon);
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + one_b1 * g;
        *v = b2 * *v + one_b2 * g * g;
        *p -= lr_t * *m / ((*v * v_corr).sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::<f64>::new([3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::new([3], vec![0.3, -4.0, 1e-3]).unwrap();
        let cfg = AdamConfig::with_learning_rate(0.01);
        let mut state = AdamState::new(&[3], cfg);
        let before = p.clone();
        adam_step(&mut p, &g, &mut state).unwrap();
        for ((a, b), gi) in p.data().iter().zip(before.data()).zip(g.data()) {
            let expected = 0.01 * gi.abs() / (gi.abs() + 1e-8);
            assert!(((b - a).abs() - expected).abs() < 1e-12);
            assert_eq!((b - a).signum(), gi.signum());
        }
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_param_but_counts_step() {
        let mut p = Tensor::<f32>::new([2], vec![3.0, 4.0]).unwrap();
        let g = Tensor::zeros([2]).unwrap();
        let mut state = AdamState::new(&[2], AdamConfig::default());
        adam_step(&mut p, &g, &mut state).unwrap();
        adam_step(&mut p, &g, &mut state).unwrap();
        assert_eq!(p.data(), &[3.0, 4.0]);
        assert_eq!(state.step_count(), 2);
        assert!(state.second_moment().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::<f32>::zeros([2]).unwrap();
        let g = Tensor::zeros([3]).unwrap();
        let mut state = AdamState::new(&[2], AdamConfig::default());
        assert!(adam_step(&mut p, &g, &mut state).is_err());
        assert_eq!(state.step_count(), 0);
    }

    /// Scalar textbook Adam, written independently of the tensor path.
    fn reference_adam(x0: f64, lr: f64, steps: usize) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        let mut xs = vec![x];
        for t in 1..=steps {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t as i32));
            let v_hat = v / (1.0 - b2.powi(t as i32));
            x -= lr * m_hat / (v_hat.sqrt() + eps);
            xs.push(x);
        }
        xs
    }

    #[test]
    fn quadratic_descent_matches_reference() {
        let reference = reference_adam(1.0, 0.1, 100);
        let mut p = Tensor::<f64>::new([1], vec![1.0]).unwrap();
        let mut state = AdamState::new(&[1], AdamConfig::with_learning_rate(0.1));
        let mut xs = vec![1.0];
        for _ in 0..100 {
            let g = Tensor::new([1], vec![2.0 * p.data()[0]]).unwrap();
            adam_step(&mut p, &g, &mut state).unwrap();
            xs.push(p.data()[0]);
        }
        for (a, b) in xs.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-12);
        }
        // |x| shrinks monotonically through the first approach to the minimum.
        let first_crossing = xs.iter().position(|&x| x <= 0.0).unwrap_or(xs.len());
        assert!(first_crossing > 5);
        assert!(xs[..first_crossing]
            .windows(2)
            .all(|w| w[1].abs() < w[0].abs()));
        assert!(xs.last().unwrap().abs() < 0.5);
    }
}
