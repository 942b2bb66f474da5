//! Focal loss: cross-entropy scaled by (1 - p_t)^gamma, averaged over the
//! batch. p_t is the probability the model assigns to the true class, clamped
//! away from 0 and 1 before the logarithm.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Lower clamp for p_t; the upper clamp is 1 minus this.
pub const P_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FocalLossConfig {
    /// Focusing parameter; 0 recovers plain cross-entropy.
    pub gamma: f64,
}

impl Default for FocalLossConfig {
    fn default() -> Self {
        Self { gamma: 2.0 }
    }
}

impl FocalLossConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if !(self.gamma >= 0.0) {
            return Err(TensorError::Invalid(format!(
                "focal gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

fn check_targets<T: Scalar>(probs: &Tensor<T>, targets: &[usize]) -> Result<(usize, usize), TensorError> {
    if probs.rank() != 2 {
        return Err(TensorError::RankMismatch {
            expected: 2,
            shape: probs.shape().to_vec(),
        });
    }
    let (b, c) = (probs.shape()[0], probs.shape()[1]);
    if targets.len() != b {
        return Err(TensorError::ShapeMismatch {
            left: probs.shape().to_vec(),
            right: vec![targets.len()],
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(TensorError::InvalidLabel {
            label: bad,
            classes: c,
        });
    }
    Ok((b, c))
}

/// Mean of -(1 - p_t)^gamma * ln(p_t) over the batch.
pub fn focal_loss_forward<T: Scalar>(
    probs: &Tensor<T>,
    targets: &[usize],
    gamma: f64,
) -> Result<T, TensorError> {
    let (b, c) = check_targets(probs, targets)?;
    let p_min = T::from_f64(P_CLAMP);
    let p_max = T::one() - p_min;
    let gamma_t = T::from_f64(gamma);
    let mut total = T::zero();
    for (i, &t) in targets.iter().enumerate() {
        let p = probs.data()[i * c + t].max(p_min).min(p_max);
        total += -(T::one() - p).powf(gamma_t) * p.ln();
    }
    Ok(total / T::from_f64(b as f64))
}

/// Gradient of the mean focal loss w.r.t. `probs`, scaled by `adj`.
/// Only true-class entries receive gradient; clamped entries receive none.
pub fn focal_loss_backward<T: Scalar>(
    probs: &Tensor<T>,
    targets: &[usize],
    gamma: f64,
    adj: T,
) -> Tensor<T> {
    let (b, c) = (probs.shape()[0], probs.shape()[1]);
    let p_min = T::from_f64(P_CLAMP);
    let p_max = T::one() - p_min;
    let gamma_t = T::from_f64(gamma);
    let inv_b = T::from_f64(b as f64).recip();
    let mut dp = Tensor::zeros(probs.shape());
    for (i, &t) in targets.iter().enumerate() {
        let raw = probs.data()[i * c + t];
        if raw <= p_min || raw >= p_max {
            continue;
        }
        let one_m = T::one() - raw;
        // d/dp [-(1-p)^g ln p] = g (1-p)^(g-1) ln p - (1-p)^g / p
        let term1 = if gamma == 0.0 {
            T::zero()
        } else {
            gamma_t * one_m.powf(gamma_t - T::one()) * raw.ln()
        };
        let term2 = one_m.powf(gamma_t) / raw;
        dp.data_mut()[i * c + t] = adj * inv_b * (term1 - term2);
    }
    dp
}

/// Records the focal loss on the graph and returns the scalar loss node.
pub fn focal_loss<T: Scalar>(
    graph: &mut Graph<T>,
    probs: Var,
    targets: &[usize],
    cfg: &FocalLossConfig,
) -> Result<Var, TensorError> {
    cfg.validate()?;
    graph.focal_loss(probs, targets, cfg.gamma)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs2(rows: &[(f64, f64)]) -> Tensor<f64> {
        let flat: Vec<f64> = rows.iter().flat_map(|&(a, b)| [a, b]).collect();
        Tensor::from_f64_slice(&[rows.len(), 2], &flat).unwrap()
    }

    #[test]
    fn gamma_zero_is_cross_entropy() {
        let p = probs2(&[(0.3, 0.7), (0.9, 0.1), (0.45, 0.55)]);
        let t = [1usize, 0, 0];
        let fl = focal_loss_forward(&p, &t, 0.0).unwrap();
        let ce = -(0.7f64.ln() + 0.9f64.ln() + 0.45f64.ln()) / 3.0;
        assert!((fl - ce).abs() < 1e-12, "{fl} vs {ce}");
    }

    #[test]
    fn perfectly_classified_is_near_zero() {
        let p = probs2(&[(0.0, 1.0)]);
        let fl = focal_loss_forward(&p, &[1], 2.0).unwrap();
        assert!(fl >= 0.0 && fl <= 1e-6, "{fl}");
    }

    #[test]
    fn half_probability_gamma_two() {
        let p = probs2(&[(0.5, 0.5)]);
        let fl = focal_loss_forward(&p, &[1], 2.0).unwrap();
        let expected = 0.25 * std::f64::consts::LN_2;
        assert!((fl - expected).abs() < 1e-9, "{fl} vs {expected}");
    }

    #[test]
    fn invalid_label_rejected() {
        let p = probs2(&[(0.5, 0.5)]);
        assert!(matches!(
            focal_loss_forward(&p, &[2], 2.0).unwrap_err(),
            TensorError::InvalidLabel { label: 2, classes: 2 }
        ));
    }

    #[test]
    fn loss_decreases_as_pt_grows_and_gamma_downweights() {
        let gammas = [0.0, 0.5, 2.0, 5.0];
        for &g in &gammas {
            let mut last = f64::INFINITY;
            for pt in [0.1, 0.3, 0.5, 0.7, 0.9, 0.99] {
                let p = probs2(&[(1.0 - pt, pt)]);
                let l = focal_loss_forward(&p, &[1], g).unwrap();
                assert!(l >= 0.0);
                assert!(l < last, "not strictly decreasing at pt={pt}, gamma={g}");
                last = l;
            }
        }
        // Larger gamma shrinks the loss of well-classified samples.
        let p = probs2(&[(0.2, 0.8)]);
        let l0 = focal_loss_forward(&p, &[1], 0.0).unwrap();
        let l2 = focal_loss_forward(&p, &[1], 2.0).unwrap();
        let l5 = focal_loss_forward(&p, &[1], 5.0).unwrap();
        assert!(l0 > l2 && l2 > l5);
    }

    #[test]
    fn gradient_matches_finite_differences_through_softmax() {
        use crate::autodiff::Graph;
        // logits -> softmax -> focal, gradcheck w.r.t. logits.
        let logits = [0.3, -0.4, 1.2, 0.1, -0.8, 0.5];
        let targets = [1usize, 0, 1];
        let gamma = 2.0;
        let f = |vals: &[f64]| -> f64 {
            let t = Tensor::<f64>::from_f64_slice(&[3, 2], vals).unwrap();
            let p = crate::ops::softmax_rows(&t).unwrap();
            focal_loss_forward(&p, &targets, gamma).unwrap()
        };
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64_slice(&[3, 2], &logits).unwrap(), true);
        let p = g.softmax(x).unwrap();
        let l = g.focal_loss(p, &targets, gamma).unwrap();
        g.backward(l).unwrap();
        let analytic = g.grad(x).unwrap().data().to_vec();
        let h = 1e-4;
        for i in 0..logits.len() {
            let mut plus = logits;
            plus[i] += h;
            let mut minus = logits;
            minus[i] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-8);
            assert!(
                ((analytic[i] - fd) / denom).abs() < 1e-4,
                "i={i}: {} vs {}",
                analytic[i],
                fd
            );
        }
    }
}
