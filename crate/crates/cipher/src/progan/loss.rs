//! Least-squares adversarial losses on sigmoid outputs. The discriminator
//! is pushed toward 1 on real images and 0 on generated ones; the generator
//! is pushed toward making the discriminator say 1.

use ndarray::Array1;

use crate::nn::Scalar;

/// `(loss_d, loss_g)` for a batch of discriminator probabilities.
///
/// loss_d = mean over the batch of (d_real - 1)^2 + d_fake^2;
/// loss_g = mean over the batch of (d_fake - 1)^2.
pub fn mse_adv_losses<F: Scalar>(d_real: &Array1<F>, d_fake: &Array1<F>) -> (F, F) {
    assert_eq!(d_real.len(), d_fake.len(), "adversarial batch sizes differ");
    assert!(!d_real.is_empty(), "adversarial loss on empty batch");
    let n = F::from_f64(d_real.len() as f64);
    let mut ld = F::zero();
    let mut lg = F::zero();
    for (&r, &f) in d_real.iter().zip(d_fake.iter()) {
        let er = r - F::one();
        let ef = f - F::one();
        ld = ld + er * er + f * f;
        lg = lg + ef * ef;
    }
    (ld / n, lg / n)
}

/// Gradient of `loss_d` w.r.t. the real probabilities. The two halves of
/// `loss_d` are separable, so each can be backpropagated on its own.
pub fn loss_d_real_grad<F: Scalar>(d_real: &Array1<F>) -> Array1<F> {
    let n = F::from_f64(d_real.len() as f64);
    let two = F::from_f64(2.0);
    d_real.mapv(|r| two * (r - F::one()) / n)
}

/// Gradient of `loss_d` w.r.t. the fake probabilities.
pub fn loss_d_fake_grad<F: Scalar>(d_fake: &Array1<F>) -> Array1<F> {
    let n = F::from_f64(d_fake.len() as f64);
    let two = F::from_f64(2.0);
    d_fake.mapv(|f| two * f / n)
}

/// Gradient of `loss_g` w.r.t. the fake probabilities.
pub fn loss_g_grad<F: Scalar>(d_fake: &Array1<F>) -> Array1<F> {
    let n = F::from_f64(d_fake.len() as f64);
    let two = F::from_f64(2.0);
    d_fake.mapv(|f| two * (f - F::one()) / n)
}

/// Convert a gradient w.r.t. probabilities into a gradient w.r.t. logits
/// through `p = sigmoid(logit)` (so `dp/dlogit = p(1-p)`).
pub fn prob_grad_to_logit_grad<F: Scalar>(g_prob: &Array1<F>, p: &Array1<F>) -> Array1<F> {
    let mut g = g_prob.clone();
    g.zip_mut_with(p, |gv, &pv| *gv = *gv * pv * (F::one() - pv));
    g
}
