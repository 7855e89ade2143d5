//! The evaluator interface the optimizer needs, and its implementations.

use crate::rote::{ToyCache, ToyPolicy};

use super::GrpoError;

/// A differentiable next-token model over a fixed vocabulary with a flat
/// parameter vector.
pub trait Policy: Clone + Send + Sync {
    type Cache: Send;

    fn vocab_size(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn tensor_shapes(&self) -> Vec<Vec<usize>>;

    /// Log-softmax distribution at each completion position, plus what the
    /// backward pass needs.
    fn completion_logprobs(
        &self,
        prompt: &[usize],
        completion: &[usize],
    ) -> Result<(Vec<Vec<f64>>, Self::Cache), GrpoError>;

    /// Gradient of `Σ dlogits·logits` with respect to the parameters.
    fn backward(&self, cache: &Self::Cache, dlogits: &[Vec<f64>]) -> Vec<f64>;

    /// Log-distribution of the next completion token.
    fn next_logprobs(&self, prompt: &[usize], partial: &[usize]) -> Result<Vec<f64>, GrpoError>;
}

impl Policy for ToyPolicy {
    type Cache = ToyCache;

    fn vocab_size(&self) -> usize {
        self.shape().vocab
    }

    fn params(&self) -> &[f64] {
        ToyPolicy::params(self)
    }

    fn params_mut(&mut self) -> &mut [f64] {
        ToyPolicy::params_mut(self)
    }

    fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        self.shape().tensor_shapes()
    }

    fn completion_logprobs(
        &self,
        prompt: &[usize],
        completion: &[usize],
    ) -> Result<(Vec<Vec<f64>>, ToyCache), GrpoError> {
        Ok(ToyPolicy::completion_logprobs(self, prompt, completion)?)
    }

    fn backward(&self, cache: &ToyCache, dlogits: &[Vec<f64>]) -> Vec<f64> {
        ToyPolicy::backward(self, cache, dlogits)
    }

    fn next_logprobs(&self, prompt: &[usize], partial: &[usize]) -> Result<Vec<f64>, GrpoError> {
        let mut context = prompt.to_vec();
        context.extend_from_slice(partial);
        Ok(ToyPolicy::next_logprobs(self, &context)?)
    }
}

/// Position-only policy: one free logit vector per completion step, prompt
/// ignored. Small enough for closed-form checks.
#[derive(Debug, Clone, PartialEq)]
pub struct TablePolicy {
    vocab: usize,
    max_len: usize,
    logits: Vec<f64>,
}

impl TablePolicy {
    pub fn new(vocab: usize, max_len: usize, logits: Vec<f64>) -> Result<Self, GrpoError> {
        if vocab == 0 || logits.len() != vocab * max_len {
            return Err(GrpoError::InvalidGroup(format!(
                "table of {} logits for vocab {vocab} and length {max_len}",
                logits.len()
            )));
        }
        Ok(Self { vocab, max_len, logits })
    }

    fn row(&self, t: usize) -> Result<Vec<f64>, GrpoError> {
        if t >= self.max_len {
            return Err(GrpoError::InvalidGroup(format!("position {t} beyond table length {}", self.max_len)));
        }
        Ok(crate::rote::log_softmax(&self.logits[t * self.vocab..(t + 1) * self.vocab]))
    }
}

impl Policy for TablePolicy {
    type Cache = usize;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn params(&self) -> &[f64] {
        &self.logits
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![self.max_len, self.vocab]]
    }

    fn completion_logprobs(&self, _prompt: &[usize], completion: &[usize]) -> Result<(Vec<Vec<f64>>, usize), GrpoError> {
        let rows = (0..completion.len()).map(|t| self.row(t)).collect::<Result<Vec<_>, _>>()?;
        Ok((rows, completion.len()))
    }

    fn backward(&self, _cache: &usize, dlogits: &[Vec<f64>]) -> Vec<f64> {
        let mut grad = vec![0.0; self.logits.len()];
        for (t, dz) in dlogits.iter().enumerate() {
            grad[t * self.vocab..(t + 1) * self.vocab].copy_from_slice(dz);
        }
        grad
    }

    fn next_logprobs(&self, _prompt: &[usize], partial: &[usize]) -> Result<Vec<f64>, GrpoError> {
        self.row(partial.len())
    }
}
