//! Adam with global-norm gradient clipping.

use crate::neural::Params;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Params,
    pub v: Params,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &Params, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let tensors = params.tensors_mut().zip(self.m.tensors_mut()).zip(self.v.tensors_mut());
        for (((p, m), v), (_, g)) in tensors.zip(grads.iter()) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                p.data[i] -= self.lr * (m.data[i] / c1) / ((v.data[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Scale `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Params, max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, t)| t.data.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for t in grads.tensors_mut() {
            t.data.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::Tensor;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Params::new();
        p.add("x", Tensor::from_vec(1, 2, vec![1.0, -1.0]));
        let mut g = p.zeros_like();
        g.get_mut(0).data.copy_from_slice(&[3.0, -0.5]);
        let mut adam = Adam::new(&p, 0.01);
        adam.step(&mut p, &g);
        assert!((p.get(0).data[0] - 0.99).abs() < 1e-9);
        assert!((p.get(0).data[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Params::new();
        p.add("x", Tensor::from_vec(1, 1, vec![0.7]));
        let g = p.zeros_like();
        let mut adam = Adam::new(&p, 0.1);
        adam.step(&mut p, &g);
        assert_eq!(p.get(0).data[0], 0.7);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Params::new();
        p.add("x", Tensor::from_vec(1, 1, vec![5.0]));
        let mut adam = Adam::new(&p, 0.1);
        for _ in 0..500 {
            let mut g = p.zeros_like();
            g.get_mut(0).data[0] = 2.0 * (p.get(0).data[0] - 2.0);
            adam.step(&mut p, &g);
        }
        assert!((p.get(0).data[0] - 2.0).abs() < 1e-2);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = Params::new();
        g.add("x", Tensor::from_vec(1, 2, vec![3.0, 4.0]));
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.get(0).data[0] - 0.6).abs() < 1e-12);
    }
}
