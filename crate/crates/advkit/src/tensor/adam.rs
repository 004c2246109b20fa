//! Adam with bias-corrected first and second moments.

use super::Tensor;

/// Optimizer state for a fixed, ordered list of parameter tensors.
///
/// The parameter order is established on the first `step` call and must stay
/// stable afterwards; networks expose their parameters in a fixed order to
/// guarantee this.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        assert!(lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2));
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over all parameters. `grads[i]` must match `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.raw_dim())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.raw_dim())).collect();
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed size");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
            ndarray::Zip::from(&mut *m).and(g).for_each(|mv, &gv| {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vv, &gv| {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            });
            ndarray::Zip::from(&mut **p)
                .and(&*m)
                .and(&*v)
                .for_each(|pv, &mv, &vv| {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}
