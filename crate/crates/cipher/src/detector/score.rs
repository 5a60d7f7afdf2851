//! Scoring images with a fine-tuned detector: sigmoid probability of the
//! fake class, a thresholded decision, and weighted averaging across several
//! detectors' probability vectors.

use std::fmt;

use ndarray::Array4;

use crate::error::{CipherError, Result};
use crate::nn::{Mode, Scalar};
use crate::progan::{Discriminator, ProgressiveStage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Real,
    Fake,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Real => "real",
            Decision::Fake => "fake",
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One image's verdict. `decision` is `Fake` exactly when
/// `probability >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionScore {
    /// Fake-class probability in [0, 1].
    pub probability: f64,
    pub decision: Decision,
    pub threshold: f64,
}

impl DetectionScore {
    pub fn new(probability: f64, threshold: f64) -> Self {
        let decision = if probability >= threshold {
            Decision::Fake
        } else {
            Decision::Real
        };
        DetectionScore {
            probability,
            decision,
            threshold,
        }
    }
}

/// Score a batch at the detector's full resolution in eval mode. Dropout is
/// inactive and the frozen minibatch-std reference (when recorded on the
/// checkpoint) makes the result independent of batch composition.
pub fn detect<F: Scalar>(
    disc: &mut Discriminator<F>,
    images: &Array4<F>,
    threshold: f64,
) -> Result<Vec<DetectionScore>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CipherError::Domain(format!(
            "decision threshold must be in [0,1], got {threshold}"
        )));
    }
    let stage = ProgressiveStage::new(disc.stages - 1, 1.0)?;
    let probs = disc.forward_probs(images, stage, Mode::Eval)?;
    Ok(probs
        .iter()
        .map(|&p| DetectionScore::new(p.to_f64(), threshold))
        .collect())
}

/// Weighted arithmetic mean of several detectors' probability vectors.
/// Weights default to uniform; they must be nonnegative and sum to 1.
pub fn ensemble_score(members: &[Vec<f64>], weights: Option<&[f64]>) -> Result<Vec<f64>> {
    if members.is_empty() {
        return Err(CipherError::Domain(
            "ensemble needs at least one member".into(),
        ));
    }
    let n = members[0].len();
    for (i, m) in members.iter().enumerate() {
        if m.len() != n {
            return Err(CipherError::shape(
                format!("ensemble member {i}"),
                n,
                m.len(),
            ));
        }
        if let Some(p) = m.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(CipherError::Domain(format!(
                "ensemble member {i} holds a non-probability value {p}"
            )));
        }
    }

    let uniform = vec![1.0 / members.len() as f64; members.len()];
    let w = weights.unwrap_or(&uniform);
    if w.len() != members.len() {
        return Err(CipherError::shape("ensemble weights", members.len(), w.len()));
    }
    if w.iter().any(|&v| v < 0.0) {
        return Err(CipherError::Domain(
            "ensemble weights must be nonnegative".into(),
        ));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(CipherError::Domain(format!(
            "ensemble weights must sum to 1, got {sum}"
        )));
    }

    let mut out = vec![0.0; n];
    for (m, &wi) in members.iter().zip(w.iter()) {
        for (o, &p) in out.iter_mut().zip(m.iter()) {
            *o += wi * p;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng::{randn4, seeded_rng, uniform};
    use ndarray::s;

    #[test]
    fn threshold_rule_is_inclusive() {
        let s = DetectionScore::new(0.7, 0.5);
        assert_eq!(s.decision, Decision::Fake);
        let s = DetectionScore::new(0.5, 0.5);
        assert_eq!(s.decision, Decision::Fake);
        let s = DetectionScore::new(0.4999, 0.5);
        assert_eq!(s.decision, Decision::Real);
        assert_eq!(Decision::Fake.to_string(), "fake");
    }

    fn small_disc() -> Discriminator<f32> {
        let mut rng = seeded_rng(1, "disc");
        Discriminator::new(16, 2, &mut rng).unwrap()
    }

    #[test]
    fn same_image_scores_identically() {
        let mut disc = small_disc();
        disc.set_ref_std(Some(0.1));
        let mut rng = seeded_rng(2, "imgs");
        let x = randn4::<f32>(&mut rng, (1, 3, 8, 8)).mapv(|v| v.clamp(-1.0, 1.0));
        let a = detect(&mut disc, &x, 0.5).unwrap();
        let b = detect(&mut disc, &x, 0.5).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a[0].probability));
    }

    #[test]
    fn batch_and_single_scoring_agree() {
        let mut disc = small_disc();
        disc.set_ref_std(Some(0.1));
        let mut rng = seeded_rng(3, "imgs");
        let x = randn4::<f32>(&mut rng, (5, 3, 8, 8)).mapv(|v| v.clamp(-1.0, 1.0));

        let batched = detect(&mut disc, &x, 0.5).unwrap();
        for i in 0..5 {
            let one = x.slice(s![i..i + 1, .., .., ..]).to_owned();
            let single = detect(&mut disc, &one, 0.5).unwrap();
            assert!(
                (batched[i].probability - single[0].probability).abs() < 1e-6,
                "image {i}: batch {} single {}",
                batched[i].probability,
                single[0].probability
            );
        }
    }

    #[test]
    fn resolution_mismatch_is_shape_error() {
        let mut disc = small_disc();
        let x = Array4::<f32>::zeros((2, 3, 16, 16));
        assert!(matches!(
            detect(&mut disc, &x, 0.5),
            Err(CipherError::Shape { .. })
        ));
        let x = Array4::<f32>::zeros((2, 3, 8, 8));
        assert!(matches!(
            detect(&mut disc, &x, 1.5),
            Err(CipherError::Domain(_))
        ));
    }

    #[test]
    fn ensemble_singleton_and_consensus() {
        let a = vec![0.1, 0.9, 0.5];
        assert_eq!(ensemble_score(&[a.clone()], None).unwrap(), a);

        let out = ensemble_score(&[a.clone(), a.clone(), a.clone()], None).unwrap();
        for (o, e) in out.iter().zip(a.iter()) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_uniform_mean() {
        let out = ensemble_score(&[vec![0.2], vec![0.8]], None).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ensemble_is_convex_and_order_free() {
        let mut rng = seeded_rng(4, "ens");
        let members: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..10).map(|_| uniform::<f64>(&mut rng, 0.0, 1.0)).collect())
            .collect();
        let out = ensemble_score(&members, None).unwrap();
        for i in 0..10 {
            let lo = members.iter().map(|m| m[i]).fold(f64::INFINITY, f64::min);
            let hi = members.iter().map(|m| m[i]).fold(0.0f64, f64::max);
            assert!(out[i] >= lo - 1e-12 && out[i] <= hi + 1e-12);
        }
        let mut reordered = members.clone();
        reordered.reverse();
        let out2 = ensemble_score(&reordered, None).unwrap();
        for (a, b) in out.iter().zip(out2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_rejects_bad_inputs() {
        assert!(ensemble_score(&[], None).is_err());
        assert!(matches!(
            ensemble_score(&[vec![0.5], vec![0.5, 0.6]], None),
            Err(CipherError::Shape { .. })
        ));
        assert!(ensemble_score(&[vec![1.5]], None).is_err());
        let m = [vec![0.5], vec![0.5]];
        assert!(ensemble_score(&m, Some(&[0.9, 0.2])).is_err());
        assert!(ensemble_score(&m, Some(&[-0.5, 1.5])).is_err());
        assert!(ensemble_score(&m, Some(&[0.25, 0.75])).is_ok());
    }
}
