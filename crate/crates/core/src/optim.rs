//! SGD with momentum and global-norm gradient clipping.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;

/// Momentum SGD with weight decay folded into the velocity:
///
/// ```text
/// v ← μ·v + g + λ·w
/// w ← w − lr·v
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Vec<f64>>,
}

impl Sgd {
    /// Zero velocity buffers shaped like `params`.
    pub fn new(params: &[&Tensor], momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn with_defaults(params: &[&Tensor]) -> Self {
        Self::new(params, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY)
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.buffers
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != self.buffers.len() || grads.len() != self.buffers.len() {
            return Err(Error::Mismatch {
                what: "parameter count",
                expected: self.buffers.len(),
                found: params.len().max(grads.len()),
            });
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.buffers) {
            if p.numel() != v.len() || g.len() != v.len() {
                return Err(Error::Shape {
                    op: "sgd_step",
                    left: vec![v.len()],
                    right: vec![p.numel(), g.len()],
                });
            }
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *w;
                *w -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Scales all gradients by `max_norm / norm` when their global L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|v| *v *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut w = Tensor::vector(vec![1.0, -2.0]);
        let mut opt = Sgd::new(&[&w], 0.9, 0.0);
        opt.step(&mut [&mut w], &[vec![0.0, 0.0]], 0.1).unwrap();
        assert_eq!(w.data(), &[1.0, -2.0]);
    }

    #[test]
    fn single_step_by_hand() {
        let mut w = Tensor::vector(vec![1.0]);
        let mut opt = Sgd::new(&[&w], 0.9, 0.0);
        opt.step(&mut [&mut w], &[vec![1.0]], 0.1).unwrap();
        assert_eq!(opt.buffers()[0], vec![1.0]);
        assert_abs_diff_eq!(w.data()[0], 0.9, epsilon = 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let mut w = Tensor::vector(vec![1.0]);
        let mut opt = Sgd::new(&[&w], 0.9, 0.0);
        opt.step(&mut [&mut w], &[vec![0.5]], 0.1).unwrap();
        let v1 = opt.buffers()[0][0];
        opt.step(&mut [&mut w], &[vec![0.5]], 0.1).unwrap();
        assert_abs_diff_eq!(opt.buffers()[0][0], 0.9 * v1 + 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(w.data()[0], 1.0 - 0.1 * 0.5 - 0.1 * 0.95, epsilon = 1e-15);
    }

    #[test]
    fn weight_decay_is_coupled() {
        let mut w = Tensor::vector(vec![2.0]);
        let mut opt = Sgd::new(&[&w], 0.9, 1e-4);
        opt.step(&mut [&mut w], &[vec![0.0]], 1.0).unwrap();
        assert_abs_diff_eq!(w.data()[0], 2.0 - 2e-4, epsilon = 1e-15);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut w = Tensor::vector(vec![1.0, 2.0]);
        let mut opt = Sgd::with_defaults(&[&w]);
        assert!(opt.step(&mut [&mut w], &[vec![1.0]], 0.1).is_err());
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![vec![0.6, 0.8]];
        clip_gradients(&mut g, 5.0);
        assert_eq!(g, vec![vec![0.6, 0.8]]);

        let mut g = vec![vec![3.0, 4.0]];
        assert_eq!(clip_gradients(&mut g, 1.0), 5.0);
        assert_abs_diff_eq!(g[0][0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(g[0][1], 0.8, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn clipped_norm_bounded(
            grads in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 0..6), 1..4),
            max in 0.01f64..10.0,
        ) {
            let mut g = grads.clone();
            clip_gradients(&mut g, max);
            let n = g.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(n <= max + 1e-9);
        }
    }
}
