//! Adam with bias correction. Moments are kept in `f64` regardless of
//! the parameter scalar.

use crate::nn::Param;
use crate::Real;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over `params`, then zeroes their gradients. The list
    /// must have the same order and shapes on every call; moment
    /// buffers are allocated on the first.
    pub fn step<T: Real>(&mut self, params: &mut [&mut Param<T>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed");
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            assert_eq!(self.m[i].len(), p.len(), "parameter shape changed");
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.len() {
                let g = p.g.data[j].to_f64().unwrap();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let w = p.w.data[j].to_f64().unwrap();
                p.w.data[j] = crate::real(w - self.lr * mhat / (vhat.sqrt() + self.eps));
            }
            p.zero_grad();
        }
    }
}
