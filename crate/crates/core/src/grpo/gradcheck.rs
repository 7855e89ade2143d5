//! Finite-difference verification of the analytic loss gradient.

use rand::Rng;

use super::{group_loss_and_grad, group_rng, sample_group, GrpoConfig, GrpoError, Policy, PolicyGroup, RatioMode};
use crate::rote::{PositionMode, ToyPolicy, ToyShape, DEFAULT_STRIDE_SEC};

/// Below this magnitude errors are compared absolutely.
const ABS_FALLBACK: f64 = 1e-8;

pub fn analytic_gradient<P: Policy>(
    policy: &P,
    reference: &P,
    group: &PolicyGroup,
    config: &GrpoConfig,
) -> Result<Vec<f64>, GrpoError> {
    Ok(group_loss_and_grad(policy, reference, group, config)?.1)
}

/// Fourth-order central differences of the group loss, one parameter at a
/// time.
pub fn finite_difference_gradient<P: Policy>(
    policy: &P,
    reference: &P,
    group: &PolicyGroup,
    config: &GrpoConfig,
    h: f64,
) -> Result<Vec<f64>, GrpoError> {
    let mut probe = policy.clone();
    let mut loss_at = |i: usize, delta: f64| -> Result<f64, GrpoError> {
        let original = probe.params()[i];
        probe.params_mut()[i] = original + delta;
        let loss = group_loss_and_grad(&probe, reference, group, config).map(|(s, _)| s.loss);
        probe.params_mut()[i] = original;
        loss
    };
    (0..policy.params().len())
        .map(|i| {
            let f2 = loss_at(i, 2.0 * h)?;
            let f1 = loss_at(i, h)?;
            let m1 = loss_at(i, -h)?;
            let m2 = loss_at(i, -2.0 * h)?;
            Ok((-f2 + 8.0 * f1 - 8.0 * m1 + m2) / (12.0 * h))
        })
        .collect()
}

/// Largest relative disagreement between analytic and numerical gradients,
/// with absolute comparison where both are tiny.
pub fn check_gradients<P: Policy>(
    policy: &P,
    reference: &P,
    group: &PolicyGroup,
    config: &GrpoConfig,
    h: f64,
) -> Result<f64, GrpoError> {
    if !(1e-6..=1e-3).contains(&h) {
        return Err(GrpoError::InvalidGroup(format!("step {h} outside [1e-6, 1e-3]")));
    }
    let analytic = analytic_gradient(policy, reference, group, config)?;
    let numeric = finite_difference_gradient(policy, reference, group, config, h)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let mag = a.abs().max(n.abs());
            if mag < ABS_FALLBACK {
                (a - n).abs()
            } else {
                (a - n).abs() / mag
            }
        })
        .fold(0.0, f64::max))
}

/// A seeded gradient-check instance on a small toy policy.
#[derive(Debug, Clone)]
pub struct GradcheckCase {
    pub policy: ToyPolicy,
    pub reference: ToyPolicy,
    pub group: PolicyGroup,
    pub config: GrpoConfig,
    /// Whether some importance ratios sit outside the clip band.
    pub clipped: bool,
}

/// Instances cycle through four regimes by `seed % 4`: no KL, KL, KL with
/// clipped ratios, and sequence-level ratios with KL. Behaviour log-probs
/// are offset from the current policy's so ratios differ from one while
/// staying away from the clip boundaries, where the loss has kinks.
pub fn random_case(seed: u64) -> Result<GradcheckCase, GrpoError> {
    let shape = ToyShape { vocab: 9, width: 6, blocks: 2 };
    let policy = ToyPolicy::random(shape, PositionMode::Time, DEFAULT_STRIDE_SEC, seed, false)?;
    let reference = ToyPolicy::random(shape, PositionMode::Time, DEFAULT_STRIDE_SEC, seed ^ 0x5eed, false)?;
    let regime = seed % 4;
    let config = GrpoConfig {
        group_size: 4,
        kl_coeff: [0.0, 0.04, 0.04, 0.1][regime as usize],
        ratio_mode: if regime == 3 { RatioMode::Sequence } else { RatioMode::Token },
        max_completion_len: 4,
        seed,
        ..GrpoConfig::default()
    };
    let mut rng = group_rng(seed, 0, 0);
    let prompt = vec![0, 1 + (seed % 8) as usize, 1];
    let reward = |_: &[usize], c: &[usize]| c.iter().filter(|&&t| t % 3 == 0).count() as f64;
    let mut group = sample_group(&policy, &prompt, &reward, &config, &mut rng)?;
    // make sure advantages are not all zero
    group.rewards = (0..group.completions.len()).map(|i| group.rewards[i] + i as f64 * 0.5).collect();
    let clipped = regime == 2;
    for lp in group.behavior_logp.iter_mut().flatten() {
        let offset = match regime {
            2 => rng.gen_range(0.3..0.6) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
            3 => rng.gen_range(-0.03..0.03),
            _ => rng.gen_range(-0.1..0.1),
        };
        *lp += offset;
    }
    Ok(GradcheckCase { policy, reference, group, config, clipped })
}
