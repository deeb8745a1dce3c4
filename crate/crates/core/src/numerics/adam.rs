//! Adaptive moment estimation over a flat parameter vector.

use crate::Real;

/// Adam state for minimisation.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    first: Vec<T>,
    second: Vec<T>,
    steps: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(len: usize, lr: T, beta1: T, beta2: T) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: T::lit(1e-8),
            first: vec![T::zero(); len],
            second: vec![T::zero(); len],
            steps: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// One descent step `params -= lr·m̂/(sqrt(v̂) + eps)`.
    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        assert_eq!(params.len(), self.first.len());
        assert_eq!(grad.len(), self.first.len());
        self.steps += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.steps);
        let c2 = one - self.beta2.powi(self.steps);
        for i in 0..params.len() {
            let g = grad[i];
            self.first[i] = self.beta1 * self.first[i] + (one - self.beta1) * g;
            self.second[i] = self.beta2 * self.second[i] + (one - self.beta2) * g * g;
            let m_hat = self.first[i] / c1;
            let v_hat = self.second[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
