//! Group-relative policy optimisation: sample a group of completions per
//! prompt, normalise their rewards within the group, and descend the
//! negated clipped importance-weighted objective with a KL penalty towards
//! a frozen reference policy.
//!
//! Ratios are taken per token and averaged over each completion's tokens
//! (`RatioMode::Token`); `RatioMode::Sequence` uses one product ratio per
//! completion instead. The KL term is exact over the full next-token
//! distribution at every position.

mod gradcheck;
mod params;
mod policy;
pub mod toy;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rote::RoteError;

pub use gradcheck::{analytic_gradient, check_gradients, finite_difference_gradient, random_case, GradcheckCase};
pub use params::{read_params, write_params, PARAM_MAGIC, PARAM_VERSION};
pub use policy::{Policy, TablePolicy};

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("invalid group: {0}")]
    InvalidGroup(String),
    #[error("non-finite importance ratio at completion {completion}, token {token}")]
    Numerical { completion: usize, token: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Policy(#[from] RoteError),
    #[error("parameter file: {0}")]
    ParamFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GrpoError {
    pub fn class_name(&self) -> &'static str {
        match self {
            GrpoError::InvalidGroup(_) => "InvalidGroup",
            GrpoError::Numerical { .. } | GrpoError::NonFinite(_) => "NumericalError",
            GrpoError::Policy(e) => e.class_name(),
            GrpoError::ParamFormat(_) => "ParamFormatError",
            GrpoError::Io(_) => "IoError",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    Token,
    Sequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_coeff: f64,
    pub learning_rate: f64,
    pub seed: u64,
    pub iterations: usize,
    pub std_floor: f64,
    pub ratio_mode: RatioMode,
    pub max_completion_len: usize,
    /// Sampling stops after this token when set.
    pub stop_token: Option<usize>,
    /// Rescale the update so its gradient norm never exceeds this.
    pub max_grad_norm: Option<f64>,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 5,
            clip_eps: 0.2,
            kl_coeff: 0.04,
            learning_rate: 0.1,
            seed: 0,
            iterations: 100,
            std_floor: 1e-8,
            ratio_mode: RatioMode::Token,
            max_completion_len: 8,
            stop_token: None,
            max_grad_norm: None,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: String| Err(GrpoError::InvalidGroup(m));
        if self.group_size < 2 {
            return bad(format!("group size {} < 2", self.group_size));
        }
        if !(self.clip_eps > 0.0) {
            return bad(format!("clip epsilon {} must be positive", self.clip_eps));
        }
        if !(self.kl_coeff >= 0.0) || !self.learning_rate.is_finite() {
            return bad("kl coefficient must be >= 0 and learning rate finite".into());
        }
        if self.max_grad_norm.is_some_and(|m| !(m > 0.0)) {
            return bad("max gradient norm must be positive".into());
        }
        if self.max_completion_len == 0 {
            return bad("max completion length must be positive".into());
        }
        Ok(())
    }
}

/// `(r_i - mean) / max(std, floor)` with population std; all zeros when the
/// std is below the floor. Rewards are first measured relative to `r_0`, so
/// shifting every reward by a constant that keeps the differences exact
/// leaves the output bit-identical.
pub fn normalize_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::InvalidGroup(format!("{} rewards; need at least 2", rewards.len())));
    }
    let n = rewards.len() as f64;
    let rel: Vec<f64> = rewards.iter().map(|r| r - rewards[0]).collect();
    let mean = rel.iter().sum::<f64>() / n;
    let std = (rel.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(std >= std_floor) {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rel.iter().map(|x| (x - mean) / std).collect())
}

/// One prompt with its sampled completions, the behaviour policy's
/// per-token log-probabilities at sampling time, and their rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGroup {
    pub prompt: Vec<usize>,
    pub completions: Vec<Vec<usize>>,
    pub behavior_logp: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
}

impl PolicyGroup {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let g = self.completions.len();
        if g < 2 || self.rewards.len() != g || self.behavior_logp.len() != g {
            return Err(GrpoError::InvalidGroup(format!(
                "{g} completions, {} rewards, {} log-prob rows",
                self.rewards.len(),
                self.behavior_logp.len()
            )));
        }
        for (i, (c, lp)) in self.completions.iter().zip(&self.behavior_logp).enumerate() {
            if c.len() != lp.len() || lp.iter().any(|x| !x.is_finite()) {
                return Err(GrpoError::InvalidGroup(format!("completion {i}: log-probs misaligned or non-finite")));
            }
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(GrpoError::InvalidGroup("non-finite reward".into()));
        }
        Ok(())
    }
}

/// Objective value for one group and its gradient with respect to the
/// current policy's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub loss: f64,
    /// Mean over completions of the token-averaged KL to the reference.
    pub kl: f64,
    pub dlogits: Vec<Vec<Vec<f64>>>,
}

/// `KL(p‖q)` for log-distributions, and its gradient with respect to the
/// logits behind `p`.
fn kl_and_grad(lp: &[f64], lq: &[f64]) -> (f64, Vec<f64>) {
    let kl: f64 = lp.iter().zip(lq).map(|(a, b)| a.exp() * (a - b)).sum();
    let grad = lp.iter().zip(lq).map(|(a, b)| a.exp() * (a - b - kl)).collect();
    (kl, grad)
}

/// Negated group objective given current and reference log-distributions
/// for every completion token.
pub fn surrogate_loss(
    group: &PolicyGroup,
    advantages: &[f64],
    current: &[Vec<Vec<f64>>],
    reference: &[Vec<Vec<f64>>],
    config: &GrpoConfig,
) -> Result<Surrogate, GrpoError> {
    group.validate()?;
    let g = group.completions.len();
    if advantages.len() != g || current.len() != g || reference.len() != g {
        return Err(GrpoError::InvalidGroup("advantages or distributions misaligned with completions".into()));
    }
    let (lo, hi) = (1.0 - config.clip_eps, 1.0 + config.clip_eps);
    let beta = config.kl_coeff;
    let mut objective = 0.0;
    let mut kl_total = 0.0;
    let mut dlogits = Vec::with_capacity(g);
    for i in 0..g {
        let tokens = &group.completions[i];
        let n = tokens.len();
        if current[i].len() != n || reference[i].len() != n {
            return Err(GrpoError::InvalidGroup(format!("completion {i}: distribution rows misaligned")));
        }
        if n == 0 {
            dlogits.push(Vec::new());
            continue;
        }
        let a = advantages[i];
        let inv_n = 1.0 / n as f64;
        let log_ratios: Vec<f64> = (0..n).map(|t| current[i][t][tokens[t]] - group.behavior_logp[i][t]).collect();
        // surrogate weight per token: d(term)/d(log p(o_t))
        let (term, weights) = match config.ratio_mode {
            RatioMode::Token => {
                let mut term = 0.0;
                let mut weights = Vec::with_capacity(n);
                for (t, lr) in log_ratios.iter().enumerate() {
                    let rho = lr.exp();
                    if !rho.is_finite() {
                        return Err(GrpoError::Numerical { completion: i, token: t });
                    }
                    let unclipped = rho * a;
                    let clipped = rho.clamp(lo, hi) * a;
                    term += unclipped.min(clipped) * inv_n;
                    weights.push(if unclipped <= clipped { a * rho * inv_n } else { 0.0 });
                }
                (term, weights)
            }
            RatioMode::Sequence => {
                let rho = log_ratios.iter().sum::<f64>().exp();
                if !rho.is_finite() {
                    return Err(GrpoError::Numerical { completion: i, token: n - 1 });
                }
                let unclipped = rho * a;
                let clipped = rho.clamp(lo, hi) * a;
                let w = if unclipped <= clipped { a * rho } else { 0.0 };
                (unclipped.min(clipped), vec![w; n])
            }
        };
        let mut kl_i = 0.0;
        let mut rows = Vec::with_capacity(n);
        for t in 0..n {
            let (kl_t, kl_grad) = kl_and_grad(&current[i][t], &reference[i][t]);
            kl_i += kl_t * inv_n;
            let row: Vec<f64> = current[i][t]
                .iter()
                .zip(&kl_grad)
                .enumerate()
                .map(|(v, (lp, kg))| {
                    let onehot = (v == tokens[t]) as u8 as f64;
                    let dj = weights[t] * (onehot - lp.exp()) - beta * inv_n * kg;
                    -dj / g as f64
                })
                .collect();
            rows.push(row);
        }
        objective += term - beta * kl_i;
        kl_total += kl_i.max(0.0);
        dlogits.push(rows);
    }
    Ok(Surrogate {
        loss: -objective / g as f64,
        kl: kl_total / g as f64,
        dlogits,
    })
}

/// Current and reference log-distributions for every completion of a group.
pub fn group_distributions<P: Policy>(
    policy: &P,
    group: &PolicyGroup,
) -> Result<(Vec<Vec<Vec<f64>>>, Vec<P::Cache>), GrpoError> {
    let mut rows = Vec::with_capacity(group.completions.len());
    let mut caches = Vec::with_capacity(group.completions.len());
    for c in &group.completions {
        let (r, cache) = policy.completion_logprobs(&group.prompt, c)?;
        rows.push(r);
        caches.push(cache);
    }
    Ok((rows, caches))
}

/// Loss for a group and its gradient with respect to `policy`'s parameters.
pub fn group_loss_and_grad<P: Policy>(
    policy: &P,
    reference: &P,
    group: &PolicyGroup,
    config: &GrpoConfig,
) -> Result<(Surrogate, Vec<f64>), GrpoError> {
    let advantages = normalize_advantages(&group.rewards, config.std_floor)?;
    let (current, caches) = group_distributions(policy, group)?;
    let (refs, _) = group_distributions(reference, group)?;
    let s = surrogate_loss(group, &advantages, &current, &refs, config)?;
    let mut grad = vec![0.0; policy.params().len()];
    for (cache, dz) in caches.iter().zip(&s.dlogits) {
        if dz.is_empty() {
            continue;
        }
        for (g, x) in grad.iter_mut().zip(policy.backward(cache, dz)) {
            *g += x;
        }
    }
    Ok((s, grad))
}

fn sample_index(logp: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    logp.len() - 1
}

/// Sample one completion and its per-token log-probabilities.
pub fn sample_completion<P: Policy>(
    policy: &P,
    prompt: &[usize],
    config: &GrpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<f64>), GrpoError> {
    let mut tokens = Vec::with_capacity(config.max_completion_len);
    let mut logps = Vec::with_capacity(config.max_completion_len);
    while tokens.len() < config.max_completion_len {
        let lp = policy.next_logprobs(prompt, &tokens)?;
        let tok = sample_index(&lp, rng);
        tokens.push(tok);
        logps.push(lp[tok]);
        if Some(tok) == config.stop_token {
            break;
        }
    }
    Ok((tokens, logps))
}

/// Independent stream for group `index` of step `step`.
pub fn group_rng(seed: u64, step: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

/// Sample a group of `config.group_size` completions and score them.
pub fn sample_group<P, F>(
    behavior: &P,
    prompt: &[usize],
    reward_fn: &F,
    config: &GrpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PolicyGroup, GrpoError>
where
    P: Policy,
    F: Fn(&[usize], &[usize]) -> f64 + Sync,
{
    let mut completions = Vec::with_capacity(config.group_size);
    let mut behavior_logp = Vec::with_capacity(config.group_size);
    let mut rewards = Vec::with_capacity(config.group_size);
    for _ in 0..config.group_size {
        let (c, lp) = sample_completion(behavior, prompt, config, rng)?;
        rewards.push(reward_fn(prompt, &c));
        completions.push(c);
        behavior_logp.push(lp);
    }
    Ok(PolicyGroup { prompt: prompt.to_vec(), completions, behavior_logp, rewards })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub mean_reward: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub kl: f64,
    pub skipped: bool,
}

/// One optimisation step: snapshot the behaviour policy, sample a group per
/// prompt (in parallel, each with its own seeded stream), and apply one
/// gradient-descent update averaged over groups. When every group has
/// zero reward spread the update is skipped and reported as such.
pub fn grpo_step<P, F>(
    policy: &mut P,
    reference: &P,
    prompts: &[Vec<usize>],
    reward_fn: &F,
    config: &GrpoConfig,
    step: u64,
) -> Result<StepReport, GrpoError>
where
    P: Policy,
    F: Fn(&[usize], &[usize]) -> f64 + Sync,
{
    config.validate()?;
    if prompts.is_empty() {
        return Err(GrpoError::InvalidGroup("no prompts".into()));
    }
    let behavior = policy.clone();
    let groups = prompts
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let mut rng = group_rng(config.seed, step, i as u64);
            sample_group(&behavior, prompt, reward_fn, config, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n_rewards = (groups.len() * config.group_size) as f64;
    let mean_reward = groups.iter().flat_map(|g| &g.rewards).sum::<f64>() / n_rewards;

    let degenerate = groups
        .iter()
        .map(|g| normalize_advantages(&g.rewards, config.std_floor).map(|a| a.iter().all(|&x| x == 0.0)))
        .collect::<Result<Vec<_>, _>>()?;
    if degenerate.iter().all(|&d| d) {
        log::debug!("step {step}: every group has constant reward; update skipped");
        return Ok(StepReport { step, mean_reward, loss: 0.0, grad_norm: 0.0, kl: 0.0, skipped: true });
    }

    let current = &*policy;
    let results = groups
        .par_iter()
        .map(|g| group_loss_and_grad(current, reference, g, config))
        .collect::<Result<Vec<_>, _>>()?;
    let n_groups = results.len() as f64;
    let mut grad = vec![0.0; policy.params().len()];
    let (mut loss, mut kl) = (0.0, 0.0);
    for (s, g) in &results {
        loss += s.loss / n_groups;
        kl += s.kl / n_groups;
        for (acc, x) in grad.iter_mut().zip(g) {
            *acc += x / n_groups;
        }
    }
    let grad_norm = grad.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !grad_norm.is_finite() {
        return Err(GrpoError::NonFinite(format!("gradient norm at step {step}")));
    }
    let scale = match config.max_grad_norm {
        Some(max) if grad_norm > max => max / grad_norm,
        _ => 1.0,
    };
    for (p, g) in policy.params_mut().iter_mut().zip(&grad) {
        *p -= config.learning_rate * scale * g;
    }
    Ok(StepReport { step, mean_reward, loss, grad_norm, kl, skipped: false })
}
