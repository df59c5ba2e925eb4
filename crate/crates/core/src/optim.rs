//! Adam with bias-corrected moments.

use crate::error::{shape_err, Result};
use crate::params::ParamSet;
use crate::tensor::{cst, Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Element = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Element> Adam<T> {
    /// Zeroed moments shaped like `params`, with β1 = 0.9, β2 = 0.999,
    /// ε = 1e-8.
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, t)| Tensor::zeros_like(t)).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Restores saved state; moment shapes must match `params`.
    pub fn from_state(params: &ParamSet<T>, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<Self> {
        let mut adam = Self::new(params);
        for (slot, t) in adam.m.iter().zip(&m).chain(adam.v.iter().zip(&v)) {
            if slot.shape() != t.shape() {
                return Err(shape_err!("moment shape {:?} vs parameter {:?}", t.shape(), slot.shape()));
            }
        }
        if m.len() != adam.m.len() || v.len() != adam.v.len() {
            return Err(shape_err!("{} moments for {} parameters", m.len(), adam.m.len()));
        }
        adam.step = step;
        adam.m = m;
        adam.v = v;
        Ok(adam)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }

    /// One update `θ ← θ − lr · m̂ / (sqrt(v̂) + ε)`.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(shape_err!("{} gradients for {} parameters", grads.len(), self.m.len()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2): (T, T) = (cst(self.beta1), cst(self.beta2));
        let (c1, c2): (T, T) = (cst(1.0 - self.beta1), cst(1.0 - self.beta2));
        let bc1: T = cst(1.0 - self.beta1.powi(t));
        let bc2: T = cst(1.0 - self.beta2.powi(t));
        let (lr, eps): (T, T) = (cst(lr), cst(self.eps));
        for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(shape_err!("gradient shape {:?} vs parameter {:?}", g.shape(), p.shape()));
            }
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + c1 * gi;
                *vi = b2 * *vi + c2 * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi = *pi - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut params = ParamSet::<f64>::new();
        params.add("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let mut adam = Adam::new(&params);
        let g = Tensor::new(vec![3], vec![0.3, -4.0, 0.0]).unwrap();
        adam.step(&mut params, &[g], 0.01).unwrap();
        let w = params.iter().next().unwrap().1.data().to_vec();
        // m̂ = g and v̂ = g², so the step is lr · g / (|g| + ε)
        assert!((w[0] - (1.0 - 0.01 * 0.3 / (0.3 + 1e-8))).abs() < 1e-15);
        assert!((w[1] - (-2.0 + 0.01 * 4.0 / (4.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(w[2], 0.5);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn matches_scalar_reference_over_steps() {
        let mut params = ParamSet::<f64>::new();
        params.add("w", Tensor::scalar(2.0));
        let mut adam = Adam::new(&params);
        let (mut w, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for t in 1..=25 {
            let g = 2.0 * w - 1.0;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.05 * mh / (vh.sqrt() + 1e-8);
            let cur = params.iter().next().unwrap().1.item().unwrap();
            adam.step(&mut params, &[Tensor::scalar(2.0 * cur - 1.0)], 0.05).unwrap();
        }
        let got = params.iter().next().unwrap().1.item().unwrap();
        assert!((got - w).abs() < 1e-12);
    }

    #[test]
    fn rejects_mismatched_gradients() {
        let mut params = ParamSet::<f32>::new();
        params.add("w", Tensor::zeros(vec![2]));
        let mut adam = Adam::new(&params);
        assert!(adam.step(&mut params, &[], 0.1).is_err());
        assert!(adam.step(&mut params, &[Tensor::zeros(vec![3])], 0.1).is_err());
        assert!(Adam::from_state(&params, 3, vec![Tensor::zeros(vec![3])], vec![Tensor::zeros(vec![2])]).is_err());
    }
}
