//! Adam optimizer over a [`ParamSet`], plus learning-rate schedules.

use super::param::{ParamSet};
use super::scalar::Scalar;

pub struct Adam<F: Scalar> {
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    t: u64,
    m: Vec<F>,
    v: Vec<F>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1: F::from_f64(beta1),
            beta2: F::from_f64(beta2),
            eps: F::from_f64(1e-8),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update using the gradients currently stored in `net`.
    /// Parameters marked non-trainable are skipped entirely (no state drift).
    pub fn step<P: ParamSet<F> + ?Sized>(&mut self, net: &mut P, lr: f64) {
        self.t += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let eps = self.eps;
        let bc1 = F::one() - F::from_f64(self.beta1.to_f64().powi(self.t as i32));
        let bc2 = F::one() - F::from_f64(self.beta2.to_f64().powi(self.t as i32));
        let lr = F::from_f64(lr);

        // lazily size the state on first use
        if self.m.is_empty() {
            let mut count = 0usize;
            net.visit_params("", &mut |p| {
                if p.trainable {
                    count += p.value.len();
                }
            });
            self.m = vec![F::zero(); count];
            self.v = vec![F::zero(); count];
        }

        let mut off = 0usize;
        let m = &mut self.m;
        let v = &mut self.v;
        net.visit_params("", &mut |p| {
            if !p.trainable {
                return;
            }
            let n = p.value.len();
            let (ms, vs) = (&mut m[off..off + n], &mut v[off..off + n]);
            for ((pv, &g), (mi, vi)) in p
                .value
                .iter_mut()
                .zip(p.grad.iter())
                .zip(ms.iter_mut().zip(vs.iter_mut()))
            {
                *mi = b1 * *mi + (F::one() - b1) * g;
                *vi = b2 * *vi + (F::one() - b2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
            off += n;
        });
        assert_eq!(off, m.len(), "trainable parameter set changed size");
    }
}

/// Linearly decays from `lr0` at step 0 towards 0 at `total` steps.
pub fn linear_decay(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * (1.0 - (step as f64 / total as f64)).max(0.0)
}

/// Half-cosine decay from `lr0` at step 0 to 0 at `total` steps.
pub fn cosine_decay(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}
