//! Adam with bias correction.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers, one pair per weight tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(weights: &[Tensor]) -> Self {
        Self {
            m: weights.iter().map(|w| Tensor::zeros(w.shape())).collect(),
            v: weights.iter().map(|w| Tensor::zeros(w.shape())).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

impl Adam {
    pub fn step(&self, weights: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
        if weights.len() != grads.len() || weights.len() != state.m.len() {
            return Err(shape_err(
                "adam_step",
                &[weights.len(), state.m.len()],
                &[grads.len()],
            ));
        }
        for (w, g) in weights.iter().zip(grads) {
            if w.shape() != g.shape() {
                return Err(shape_err("adam_step", w.shape(), g.shape()));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((w, g), (m, v)) in weights
            .iter_mut()
            .zip(grads)
            .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        {
            for (((w, &g), m), v) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_weights() {
        let mut w = vec![Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = w.clone();
        let mut st = AdamState::new(&w);
        let g = vec![Tensor::zeros(&[3])];
        Adam::default().step(&mut w, &g, &mut st).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn square_descends() {
        let mut w = vec![Tensor::scalar(1.0)];
        let mut st = AdamState::new(&w);
        let opt = Adam { lr: 0.1, ..Adam::default() };
        let g = vec![Tensor::scalar(2.0 * w[0].item())];
        opt.step(&mut w, &g, &mut st).unwrap();
        assert!(w[0].item() < 1.0);
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let mut w = vec![Tensor::scalar(0.0)];
        let mut st = AdamState::new(&w);
        let opt = Adam { lr: 0.1, ..Adam::default() };
        for _ in 0..200 {
            let g = vec![Tensor::scalar(2.0 * (w[0].item() - 3.0))];
            opt.step(&mut w, &g, &mut st).unwrap();
        }
        assert!((w[0].item() - 3.0).abs() < 1e-2, "w = {}", w[0].item());
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut w = vec![Tensor::zeros(&[2])];
        let mut st = AdamState::new(&[]);
        assert!(Adam::default().step(&mut w, &[Tensor::zeros(&[2])], &mut st).is_err());
    }
}
