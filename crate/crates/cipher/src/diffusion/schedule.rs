//! Forward-process noise schedule and the closed-form q(x_t | x_0) sampler.
//! Timesteps are 1-based: `beta(1)` is the first step's variance and
//! `alpha_bar(0) = 1` is the empty product, so `q_sample` at small t barely
//! perturbs the image.

use ndarray::Array4;

use crate::error::{CipherError, Result};
use crate::nn::Scalar;

/// Linear variance schedule with precomputed cumulative products. All
/// schedule arithmetic is done in f64 regardless of the training precision.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_max: usize,
    /// `beta[t - 1]` is the variance at timestep t.
    beta: Vec<f64>,
    /// `alpha_bar[t]` = product of (1 - beta) for steps 1..=t; index 0 is
    /// the empty product 1.
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Build a schedule from explicit per-step variances.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(CipherError::Domain(
                "noise schedule needs at least one timestep".into(),
            ));
        }
        if betas.iter().any(|&b| !(0.0 < b && b < 1.0)) {
            return Err(CipherError::Domain(
                "every beta must lie strictly inside (0, 1)".into(),
            ));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0;
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        Ok(NoiseSchedule {
            t_max: betas.len(),
            beta: betas,
            alpha_bar,
        })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// Variance at timestep `t` (1-based).
    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t), "timestep {t} out of range");
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// Cumulative product up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_max, "timestep {t} out of range");
        self.alpha_bar[t]
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar(t).sqrt()
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t)).sqrt()
    }
}

/// Linear schedule from `beta_start` to `beta_end` inclusive over `t_max`
/// steps.
pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(CipherError::Domain("schedule length must be >= 1".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(CipherError::Domain(format!(
            "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas = if t_max == 1 {
        vec![beta_start]
    } else {
        (0..t_max)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

/// Diffuse clean images to their noisy versions at per-sample timesteps:
/// x_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps.
pub fn q_sample<F: Scalar>(
    x0: &Array4<F>,
    t: &[usize],
    eps: &Array4<F>,
    sched: &NoiseSchedule,
) -> Result<Array4<F>> {
    if x0.dim() != eps.dim() {
        return Err(CipherError::shape(
            "q_sample noise",
            format!("{:?}", x0.dim()),
            format!("{:?}", eps.dim()),
        ));
    }
    let n = x0.dim().0;
    if t.len() != n {
        return Err(CipherError::shape("q_sample timesteps", n, t.len()));
    }
    for &ti in t {
        if !(1..=sched.t_max()).contains(&ti) {
            return Err(CipherError::Domain(format!(
                "timestep {ti} outside 1..={}",
                sched.t_max()
            )));
        }
    }
    let mut out = x0.clone();
    for (i, &ti) in t.iter().enumerate() {
        let a = F::from_f64(sched.sqrt_alpha_bar(ti));
        let b = F::from_f64(sched.sqrt_one_minus_alpha_bar(ti));
        let mut row = out.index_axis_mut(ndarray::Axis(0), i);
        row.zip_mut_with(&eps.index_axis(ndarray::Axis(0), i), |x, &e| {
            *x = *x * a + e * b
        });
    }
    Ok(out)
}

/// The DDIM timestep subsequence: `num_steps` indices at uniform stride
/// ending exactly at `t_max` (e.g. T=1000, 200 steps → {5, 10, ..., 1000}).
pub fn make_taus(t_max: usize, num_steps: usize) -> Result<Vec<usize>> {
    if num_steps == 0 || num_steps > t_max {
        return Err(CipherError::Domain(format!(
            "num_steps must lie in 1..={t_max}, got {num_steps}"
        )));
    }
    Ok((1..=num_steps)
        .map(|j| (j * t_max).div_ceil(num_steps))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng::{randn4, seeded_rng};

    #[test]
    fn linear_endpoints_inclusive() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert!((s.beta(1) - 1e-4).abs() < 1e-15);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        // Nondecreasing betas.
        for t in 2..=1000 {
            assert!(s.beta(t) >= s.beta(t - 1));
        }
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.1, 0.5).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn alpha_bar_matches_log_space_oracle() {
        let s = make_schedule(500, 1e-4, 0.02).unwrap();
        let mut log_sum = 0.0f64;
        let mut prev = 1.0f64;
        for t in 1..=500 {
            log_sum += (1.0 - s.beta(t)).ln();
            let oracle = log_sum.exp();
            assert!((s.alpha_bar(t) - oracle).abs() <= 1e-12, "t={t}");
            // Strictly decreasing.
            assert!(s.alpha_bar(t) < prev);
            prev = s.alpha_bar(t);
        }
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.1, 0.05).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::from_betas(vec![]).is_err());
    }

    #[test]
    fn q_sample_limits() {
        let mut rng = seeded_rng(1, "qs");
        let x0 = randn4::<f64>(&mut rng, (2, 3, 4, 4));
        let eps = randn4::<f64>(&mut rng, (2, 3, 4, 4));

        // Near-zero beta: alpha_bar ~ 1, so x_t ~ x0.
        let s = NoiseSchedule::from_betas(vec![1e-14]).unwrap();
        let xt = q_sample(&x0, &[1, 1], &eps, &s).unwrap();
        for (a, b) in xt.iter().zip(x0.iter()) {
            assert!((a - b).abs() < 1e-6);
        }

        // Aggressive betas: alpha_bar ~ 0, so x_t ~ eps.
        let s = NoiseSchedule::from_betas(vec![0.999; 8]).unwrap();
        let xt = q_sample(&x0, &[8, 8], &eps, &s).unwrap();
        for (a, b) in xt.iter().zip(eps.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn q_sample_validates_inputs() {
        let s = make_schedule(10, 1e-4, 0.02).unwrap();
        let x0 = Array4::<f64>::zeros((2, 3, 4, 4));
        let eps = Array4::<f64>::zeros((2, 3, 4, 4));
        assert!(matches!(
            q_sample(&x0, &[0, 5], &eps, &s),
            Err(CipherError::Domain(_))
        ));
        assert!(matches!(
            q_sample(&x0, &[5, 11], &eps, &s),
            Err(CipherError::Domain(_))
        ));
        let bad = Array4::<f64>::zeros((2, 3, 4, 5));
        assert!(matches!(
            q_sample(&x0, &[5, 5], &bad, &s),
            Err(CipherError::Shape { .. })
        ));
        assert!(matches!(
            q_sample(&x0, &[5], &eps, &s),
            Err(CipherError::Shape { .. })
        ));
    }

    #[test]
    fn q_sample_marginals_match_closed_form() {
        // Monte Carlo over fresh noise draws: the per-element mean of x_t
        // must approach sqrt(alpha_bar)*x0 and the residual std
        // sqrt(1 - alpha_bar).
        let s = make_schedule(100, 1e-3, 0.05).unwrap();
        let t = 60usize;
        let mut rng = seeded_rng(2, "mc");
        let x0 = randn4::<f64>(&mut rng, (1, 3, 4, 4));

        let draws = 10_000;
        let numel = 3 * 4 * 4;
        let mut sum = vec![0.0f64; numel];
        let mut sum_sq = vec![0.0f64; numel];
        for _ in 0..draws {
            let eps = randn4::<f64>(&mut rng, (1, 3, 4, 4));
            let xt = q_sample(&x0, &[t], &eps, &s).unwrap();
            for (k, v) in xt.iter().enumerate() {
                sum[k] += v;
                sum_sq[k] += v * v;
            }
        }
        let a = s.sqrt_alpha_bar(t);
        let b = s.sqrt_one_minus_alpha_bar(t);
        // Pool mean error and std estimates across elements.
        let mut worst_mean = 0.0f64;
        let mut mean_std = 0.0f64;
        for (k, x) in x0.iter().enumerate() {
            let m = sum[k] / draws as f64;
            let var = sum_sq[k] / draws as f64 - m * m;
            worst_mean = worst_mean.max((m - a * x).abs());
            mean_std += var.sqrt();
        }
        mean_std /= numel as f64;
        // Mean of x_t concentrates around sqrt(alpha_bar)*x0 with std
        // b/sqrt(draws) ~ 0.01; 2% of b ~ 0.019 comfortably bounds it.
        assert!(worst_mean <= 0.05 * b, "worst mean err {worst_mean}");
        assert!((mean_std - b).abs() <= 0.02 * b, "std {mean_std} vs {b}");
    }

    #[test]
    fn tau_subsequence_uniform_stride() {
        let taus = make_taus(1000, 200).unwrap();
        assert_eq!(taus.len(), 200);
        assert_eq!(taus[0], 5);
        assert_eq!(taus[1], 10);
        assert_eq!(*taus.last().unwrap(), 1000);
        for w in taus.windows(2) {
            assert_eq!(w[1] - w[0], 5);
        }

        // Non-divisible case: still strictly increasing, still ends at T.
        let taus = make_taus(10, 3).unwrap();
        assert_eq!(taus, vec![4, 7, 10]);

        assert!(make_taus(10, 0).is_err());
        assert!(make_taus(10, 11).is_err());
    }
}
