//! Tag-grammar toy task: the prompt carries a key token and the rewarded
//! completion is `<think> … </think> <answer> KEY </answer>`.
//!
//! Training starts with a short supervised warm-up on well-formed
//! demonstrations whose answers are random keys, so the policy learns the
//! output format but not the answer. GRPO then has to learn to copy the key
//! from the prompt, with the warmed-up policy frozen as the reference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::reward::{total_reward, RewardTask};
use crate::rote::{PositionMode, ToyPolicy, ToyShape};

use super::{grpo_step, group_rng, sample_completion, GrpoConfig, GrpoError, Policy, StepReport};

pub const BOS: usize = 0;
pub const SEP: usize = 1;
pub const EOS: usize = 2;
pub const THINK_OPEN: usize = 3;
pub const THINK_CLOSE: usize = 4;
pub const ANSWER_OPEN: usize = 5;
pub const ANSWER_CLOSE: usize = 6;
pub const FILLER: usize = 7;
pub const FIRST_KEY: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TagTask {
    pub n_keys: usize,
}

impl TagTask {
    pub fn vocab(&self) -> usize {
        FIRST_KEY + self.n_keys
    }

    pub fn key_name(key: usize) -> String {
        format!("k{key}")
    }

    pub fn prompt(&self, key: usize) -> Vec<usize> {
        vec![BOS, FIRST_KEY + key, SEP]
    }

    pub fn key_of(&self, prompt: &[usize]) -> Option<usize> {
        prompt
            .iter()
            .find(|&&t| (FIRST_KEY..self.vocab()).contains(&t))
            .map(|t| t - FIRST_KEY)
    }

    pub fn token_text(&self, token: usize) -> String {
        match token {
            BOS => "<s>".into(),
            SEP => "?".into(),
            EOS => String::new(),
            THINK_OPEN => "<think>".into(),
            THINK_CLOSE => "</think>".into(),
            ANSWER_OPEN => "<answer>".into(),
            ANSWER_CLOSE => "</answer>".into(),
            FILLER => "listen".into(),
            t => Self::key_name(t - FIRST_KEY),
        }
    }

    /// Text of a completion up to (not including) the first end token.
    pub fn render(&self, completion: &[usize]) -> String {
        completion
            .iter()
            .take_while(|&&t| t != EOS)
            .map(|&t| self.token_text(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Format plus accuracy reward, in `[0, 2]`.
    pub fn reward(&self, prompt: &[usize], completion: &[usize]) -> f64 {
        let Some(key) = self.key_of(prompt) else { return 0.0 };
        let task = RewardTask::Qa { gold: Self::key_name(key) };
        total_reward(&self.render(completion), &task).total
    }

    pub fn demonstration(&self, answer_key: usize) -> Vec<usize> {
        vec![THINK_OPEN, FILLER, THINK_CLOSE, ANSWER_OPEN, FIRST_KEY + answer_key, ANSWER_CLOSE, EOS]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrainingConfig {
    pub n_keys: usize,
    pub width: usize,
    pub blocks: usize,
    pub position_mode: String,
    pub stride: f64,
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    pub warmup_batch: usize,
    pub prompts_per_step: usize,
    pub eval_samples: usize,
    pub grpo: GrpoConfig,
}

impl Default for ToyTrainingConfig {
    fn default() -> Self {
        Self {
            n_keys: 8,
            width: 16,
            blocks: 2,
            position_mode: "time".into(),
            stride: crate::rote::DEFAULT_STRIDE_SEC,
            warmup_steps: 200,
            warmup_lr: 0.1,
            warmup_batch: 16,
            prompts_per_step: 32,
            eval_samples: 64,
            grpo: GrpoConfig {
                learning_rate: 1.0,
                iterations: 300,
                stop_token: Some(EOS),
                max_completion_len: 8,
                max_grad_norm: Some(0.3),
                ..GrpoConfig::default()
            },
        }
    }
}

impl ToyTrainingConfig {
    pub fn task(&self) -> TagTask {
        TagTask { n_keys: self.n_keys }
    }

    pub fn mode(&self) -> Result<PositionMode, GrpoError> {
        match self.position_mode.as_str() {
            "time" => Ok(PositionMode::Time),
            "index" => Ok(PositionMode::Index),
            other => Err(GrpoError::InvalidGroup(format!("unknown position mode {other:?}"))),
        }
    }

    pub fn shape(&self) -> ToyShape {
        ToyShape { vocab: self.task().vocab(), width: self.width, blocks: self.blocks }
    }

    pub fn initial_policy(&self) -> Result<ToyPolicy, GrpoError> {
        Ok(ToyPolicy::random(self.shape(), self.mode()?, self.stride, self.grpo.seed, true)?)
    }
}

/// Supervised next-token training on demonstrations with random answers.
pub fn warm_up<P: Policy>(
    policy: &mut P,
    task: &TagTask,
    steps: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<(), GrpoError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    for _ in 0..steps {
        let examples: Vec<(Vec<usize>, Vec<usize>)> = (0..batch)
            .map(|_| {
                let key = rng.gen_range(0..task.n_keys);
                let answer = rng.gen_range(0..task.n_keys);
                (task.prompt(key), task.demonstration(answer))
            })
            .collect();
        let mut grad = vec![0.0; policy.params().len()];
        for (prompt, demo) in &examples {
            let (rows, cache) = policy.completion_logprobs(prompt, demo)?;
            let dlogits: Vec<Vec<f64>> = rows
                .iter()
                .zip(demo)
                .map(|(r, &c)| {
                    r.iter()
                        .enumerate()
                        .map(|(j, lp)| (lp.exp() - (j == c) as u8 as f64) / batch as f64)
                        .collect()
                })
                .collect();
            for (g, x) in grad.iter_mut().zip(policy.backward(&cache, &dlogits)) {
                *g += x;
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(GrpoError::NonFinite("warm-up gradient".into()));
        }
        for (p, g) in policy.params_mut().iter_mut().zip(&grad) {
            *p -= lr * g;
        }
    }
    Ok(())
}

/// Mean reward of `samples` sampled completions per key.
pub fn evaluate<P: Policy>(policy: &P, task: &TagTask, config: &GrpoConfig, samples: usize, seed: u64) -> Result<f64, GrpoError> {
    let totals = (0..task.n_keys)
        .into_par_iter()
        .map(|key| {
            let prompt = task.prompt(key);
            let mut rng = group_rng(seed, u64::MAX, key as u64);
            let mut sum = 0.0;
            for _ in 0..samples {
                let (c, _) = sample_completion(policy, &prompt, config, &mut rng)?;
                sum += task.reward(&prompt, &c);
            }
            Ok(sum)
        })
        .collect::<Result<Vec<f64>, GrpoError>>()?;
    Ok(totals.iter().sum::<f64>() / (task.n_keys * samples) as f64)
}

#[derive(Debug, Clone)]
pub struct ToyRun {
    pub policy: ToyPolicy,
    pub reports: Vec<StepReport>,
    pub reward_after_warmup: f64,
    pub final_reward: f64,
}

/// Warm-up followed by `config.grpo.iterations` GRPO steps, each over
/// `prompts_per_step` prompts with keys drawn from the seeded stream.
pub fn train_tag_task(
    config: &ToyTrainingConfig,
    mut on_step: impl FnMut(&StepReport),
) -> Result<ToyRun, GrpoError> {
    let task = config.task();
    let mut policy = config.initial_policy()?;
    warm_up(&mut policy, &task, config.warmup_steps, config.warmup_lr, config.warmup_batch, config.grpo.seed)?;
    let reference = policy.clone();
    let eval_seed = config.grpo.seed.wrapping_add(1);
    let reward_after_warmup = evaluate(&policy, &task, &config.grpo, config.eval_samples, eval_seed)?;
    let mut key_rng = ChaCha8Rng::seed_from_u64(config.grpo.seed);
    let reward_fn = |p: &[usize], c: &[usize]| task.reward(p, c);
    let mut reports = Vec::with_capacity(config.grpo.iterations);
    for step in 0..config.grpo.iterations as u64 {
        let prompts: Vec<Vec<usize>> = (0..config.prompts_per_step)
            .map(|_| task.prompt(key_rng.gen_range(0..task.n_keys)))
            .collect();
        let report = grpo_step(&mut policy, &reference, &prompts, &reward_fn, &config.grpo, step)?;
        on_step(&report);
        reports.push(report);
    }
    let final_reward = evaluate(&policy, &task, &config.grpo, config.eval_samples, eval_seed)?;
    Ok(ToyRun { policy, reports, reward_after_warmup, final_reward })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demonstrations_score_by_key() {
        let task = TagTask { n_keys: 4 };
        let prompt = task.prompt(2);
        assert_eq!(task.key_of(&prompt), Some(2));
        assert_eq!(task.render(&task.demonstration(2)), "<think> listen </think> <answer> k2 </answer>");
        assert_eq!(task.reward(&prompt, &task.demonstration(2)), 2.0);
        assert_eq!(task.reward(&prompt, &task.demonstration(1)), 1.0);
        assert_eq!(task.reward(&prompt, &[FILLER, EOS]), 0.0);
    }

    #[test]
    fn warm_up_learns_format() {
        let config = ToyTrainingConfig::default();
        let task = config.task();
        let mut policy = config.initial_policy().unwrap();
        warm_up(&mut policy, &task, config.warmup_steps, config.warmup_lr, config.warmup_batch, 0).unwrap();
        let r = evaluate(&policy, &task, &config.grpo, 16, 5).unwrap();
        // format learnt, answer near chance
        assert!(r > 0.9 && r < 1.6, "{r}");
    }
}
