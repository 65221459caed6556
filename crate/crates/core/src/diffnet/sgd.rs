//! Momentum SGD over a flat parameter list.

use super::tensor::Tensor;

/// Classic momentum update: v <- momentum * v + g, p <- p - lr * v.
/// Gradients are left untouched; the caller decides when to zero them.
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor]) {
        self.step_scaled(params, 1.0);
    }

    /// Applies the update with gradients pre-multiplied by `grad_scale`
    /// (used to turn an accumulated batch sum into a mean).
    pub fn step_scaled(&mut self, params: &mut [Tensor], grad_scale: f64) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        assert_eq!(self.velocity.len(), params.len());
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let grads: Vec<f64> = p.grad().iter().map(|g| g * grad_scale).collect();
            for ((pv, vv), g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&grads) {
                *vv = self.momentum * *vv + g;
                *pv -= self.lr * *vv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step_matches_hand_arithmetic() {
        let mut p = Tensor::scalar(1.0);
        p.grad_mut()[0] = 2.0;
        let mut opt = Sgd::new(0.1, 0.0);
        opt.step(std::slice::from_mut(&mut p));
        assert_eq!(p.data()[0], 0.8);
        // grads untouched
        assert_eq!(p.grad()[0], 2.0);
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut p = Tensor::scalar(3.5);
        let mut opt = Sgd::new(0.1, 0.9);
        opt.step(std::slice::from_mut(&mut p));
        assert_eq!(p.data()[0], 3.5);
    }

    #[test]
    fn momentum_follows_velocity_recurrence() {
        // v1 = g1, p1 = p0 - lr*v1; v2 = 0.9*v1 + g2, p2 = p1 - lr*v2
        let mut p = Tensor::scalar(1.0);
        let mut opt = Sgd::new(0.1, 0.9);

        p.grad_mut()[0] = 2.0;
        opt.step(std::slice::from_mut(&mut p));
        let v1 = 2.0;
        let p1 = 1.0 - 0.1 * v1;
        assert_eq!(p.data()[0], p1);

        p.zero_grad();
        p.grad_mut()[0] = 1.0;
        opt.step(std::slice::from_mut(&mut p));
        let v2 = 0.9 * v1 + 1.0;
        assert_eq!(p.data()[0], p1 - 0.1 * v2);
    }
}
