use serde::{Deserialize, Serialize};

use crate::arbitration::{policy_logit, sigmoid, PolicyParams};
use crate::error::{Error, Result};

/// One decided mismatch ready for a policy-gradient step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoSample {
    pub features: Vec<f64>,
    pub action: u8,
    /// Rollout-time probability of `action`.
    pub old_prob: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftSample {
    pub features: Vec<f64>,
    pub label: f64,
}

/// Loss value, gradient over `[weights.., bias]`, and batch diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub entropy: f64,
    pub kl: f64,
    pub clip_fraction: f64,
}

impl LossOutput {
    fn zero(dim: usize) -> Self {
        Self { loss: 0.0, grad: vec![0.0; dim], entropy: 0.0, kl: 0.0, clip_fraction: 0.0 }
    }
}

/// `ln sigmoid(z)` without overflow.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn accumulate(grad: &mut [f64], features: &[f64], dz: f64) {
    let d = features.len();
    for (g, x) in grad[..d].iter_mut().zip(features) {
        *g += dz * x;
    }
    grad[d] += dz;
}

/// Clipped surrogate with entropy bonus and KL penalty to `reference`:
/// `-sum_d min(r A, clip(r) A) - c_H mean H + c_KL mean KL`.
pub fn ppo_loss(
    params: &PolicyParams,
    reference: &PolicyParams,
    batch: &[PpoSample],
    clip: f64,
    entropy_coef: f64,
    kl_coef: f64,
) -> Result<LossOutput> {
    let dim = params.dim();
    let mut out = LossOutput::zero(dim);
    if batch.is_empty() {
        return Ok(out);
    }
    let n = batch.len() as f64;
    let mut clipped = 0usize;
    for s in batch {
        if !(s.old_prob > 0.0 && s.old_prob <= 1.0) {
            return Err(Error::Training(format!(
                "rollout-time action probability {} is outside (0, 1]",
                s.old_prob
            )));
        }
        let z = policy_logit(params, &s.features)?;
        let z_ref = policy_logit(reference, &s.features)?;
        let p = sigmoid(z);
        let (log_pi, dlog) = if s.action == 1 {
            (log_sigmoid(z), 1.0 - p)
        } else {
            (log_sigmoid(-z), -p)
        };
        let ratio = (log_pi - s.old_prob.ln()).exp();
        let a = s.advantage;
        let unclipped = ratio * a;
        let bounded = ratio.clamp(1.0 - clip, 1.0 + clip) * a;
        out.loss -= unclipped.min(bounded);
        let active = (a >= 0.0 && ratio < 1.0 + clip) || (a < 0.0 && ratio > 1.0 - clip);
        let mut dz = 0.0;
        if active {
            dz -= a * ratio * dlog;
        } else {
            clipped += 1;
        }

        let (lp, l1p) = (log_sigmoid(z), log_sigmoid(-z));
        let h = -(p * lp + (1.0 - p) * l1p);
        let kl = p * (lp - log_sigmoid(z_ref)) + (1.0 - p) * (l1p - log_sigmoid(-z_ref));
        let pq = p * (1.0 - p);
        out.entropy += h / n;
        out.kl += kl / n;
        out.loss += (-entropy_coef * h + kl_coef * kl) / n;
        dz += (-entropy_coef * (-z * pq) + kl_coef * (z - z_ref) * pq) / n;
        accumulate(&mut out.grad, &s.features, dz);
    }
    out.clip_fraction = clipped as f64 / n;
    Ok(out)
}

/// Summed binary cross-entropy against soft labels.
pub fn sft_loss(params: &PolicyParams, batch: &[SftSample]) -> Result<LossOutput> {
    let mut out = LossOutput::zero(params.dim());
    for s in batch {
        if !(0.0..=1.0).contains(&s.label) {
            return Err(Error::input(format!("label {} is outside [0, 1]", s.label)));
        }
        let z = policy_logit(params, &s.features)?;
        out.loss -= s.label * log_sigmoid(z) + (1.0 - s.label) * log_sigmoid(-z);
        accumulate(&mut out.grad, &s.features, sigmoid(z) - s.label);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arbitration::NUM_FEATURES;

    fn params(seed: f64) -> PolicyParams {
        PolicyParams {
            weights: (0..NUM_FEATURES).map(|i| ((i as f64 + seed) * 0.37).sin() * 0.5).collect(),
            bias: seed * 0.1,
        }
    }

    fn feats(j: usize) -> Vec<f64> {
        (0..NUM_FEATURES).map(|i| ((i * 7 + j * 3) as f64 * 0.61).cos()).collect()
    }

    fn numeric_grad(f: impl Fn(&PolicyParams) -> f64, p: &PolicyParams) -> Vec<f64> {
        let flat = p.to_flat();
        (0..flat.len())
            .map(|i| {
                let h = 1e-6;
                let mut a = flat.clone();
                let mut b = flat.clone();
                a[i] += h;
                b[i] -= h;
                (f(&PolicyParams::from_flat(&a)) - f(&PolicyParams::from_flat(&b))) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn sft_values_and_gradient() {
        let zero = PolicyParams::zeros();
        let b = vec![SftSample { features: feats(0), label: 1.0 }];
        let out = sft_loss(&zero, &b).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((out.grad[NUM_FEATURES] + 0.5).abs() < 1e-12);

        let p = params(1.0);
        let batch: Vec<_> = (0..5).map(|j| SftSample { features: feats(j), label: j as f64 / 4.0 }).collect();
        let out = sft_loss(&p, &batch).unwrap();
        let num = numeric_grad(|q| sft_loss(q, &batch).unwrap().loss, &p);
        for (a, b) in out.grad.iter().zip(num) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert!(sft_loss(&p, &[SftSample { features: feats(0), label: 1.5 }]).is_err());
    }

    #[test]
    fn ppo_gradient_matches_finite_differences() {
        let p = params(0.3);
        let r = params(-0.8);
        let batch: Vec<_> = (0..6)
            .map(|j| PpoSample {
                features: feats(j),
                action: (j % 2) as u8,
                old_prob: 0.3 + 0.1 * j as f64,
                advantage: if j % 3 == 0 { -0.7 } else { 1.1 },
            })
            .collect();
        let out = ppo_loss(&p, &r, &batch, 10.0, 0.01, 0.02).unwrap();
        let num = numeric_grad(|q| ppo_loss(q, &r, &batch, 10.0, 0.01, 0.02).unwrap().loss, &p);
        for (a, b) in out.grad.iter().zip(num) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn ppo_clipping() {
        let zero = PolicyParams::zeros();
        // ratio = 0.5 / 0.25 = 2 with A > 0: clipped, no surrogate gradient.
        let s = PpoSample { features: feats(1), action: 1, old_prob: 0.25, advantage: 1.0 };
        let out = ppo_loss(&zero, &zero, std::slice::from_ref(&s), 0.2, 0.0, 0.0).unwrap();
        assert!((out.loss + 1.2).abs() < 1e-12);
        assert!(out.grad.iter().all(|g| *g == 0.0));
        assert_eq!(out.clip_fraction, 1.0);
        // Same ratio with A < 0 keeps its gradient.
        let neg = PpoSample { advantage: -1.0, ..s };
        let out = ppo_loss(&zero, &zero, &[neg], 0.2, 0.0, 0.0).unwrap();
        assert!((out.loss - 2.0).abs() < 1e-12);
        assert!(out.grad[NUM_FEATURES] > 0.0);
    }

    #[test]
    fn ppo_identity_and_errors() {
        let p = params(0.5);
        let out = ppo_loss(&p, &p, &[], 0.2, 0.01, 0.02).unwrap();
        assert_eq!(out.loss, 0.0);
        let s = PpoSample { features: feats(0), action: 0, old_prob: 0.5, advantage: 0.0 };
        let out = ppo_loss(&PolicyParams::zeros(), &PolicyParams::zeros(), std::slice::from_ref(&s), 0.2, 0.0, 0.02).unwrap();
        assert_eq!(out.kl, 0.0);
        assert!(out.grad.iter().all(|g| *g == 0.0));
        let bad = PpoSample { old_prob: 0.0, ..s };
        assert!(matches!(
            ppo_loss(&p, &p, &[bad], 0.2, 0.0, 0.0),
            Err(Error::Training(_))
        ));
    }
}
