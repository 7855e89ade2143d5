//! Attention-only causal transformer small enough for finite-difference
//! checking. Every parameter lives in one flat vector; backward passes
//! return a gradient vector with the same layout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{dot, timestamps_from_stride, Position, PositionMode, RotaryTable, RoteError};

pub const MAX_VOCAB: usize = 256;
pub const MAX_WIDTH: usize = 64;
pub const MAX_PARAMS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyShape {
    pub vocab: usize,
    pub width: usize,
    pub blocks: usize,
}

impl ToyShape {
    pub fn num_params(&self) -> usize {
        let (v, d) = (self.vocab, self.width);
        v * d + self.blocks * 4 * d * d + d * v + v
    }

    /// Tensor shapes in storage order: embedding, per block Wq Wk Wv Wo,
    /// unembedding, output bias.
    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let (v, d) = (self.vocab, self.width);
        let mut shapes = vec![vec![v, d]];
        for _ in 0..self.blocks {
            shapes.extend(std::iter::repeat_n(vec![d, d], 4));
        }
        shapes.push(vec![d, v]);
        shapes.push(vec![v]);
        shapes
    }

    /// Inverse of `tensor_shapes`.
    pub fn from_tensor_shapes(shapes: &[Vec<usize>]) -> Result<Self, RoteError> {
        let bad = || RoteError::InvalidDimension("unrecognised tensor layout".into());
        let first = shapes.first().ok_or_else(bad)?;
        let [vocab, width] = first[..] else { return Err(bad()) };
        if shapes.len() < 2 || (shapes.len() - 3) % 4 != 0 {
            return Err(bad());
        }
        let shape = ToyShape { vocab, width, blocks: (shapes.len() - 3) / 4 };
        if shape.tensor_shapes() != shapes {
            return Err(bad());
        }
        Ok(shape)
    }

    fn validate(&self) -> Result<(), RoteError> {
        if self.vocab < 2 || self.vocab > MAX_VOCAB {
            return Err(RoteError::InvalidDimension(format!("vocab {} outside 2..={MAX_VOCAB}", self.vocab)));
        }
        if self.width > MAX_WIDTH || self.num_params() > MAX_PARAMS {
            return Err(RoteError::InvalidDimension(format!(
                "width {} with {} parameters exceeds the toy limits",
                self.width,
                self.num_params()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    v: usize,
    d: usize,
    blocks: usize,
}

impl Layout {
    fn embed(&self) -> usize {
        0
    }
    /// Offset of matrix `m` (0..4 = q, k, v, o) in block `b`.
    fn block(&self, b: usize, m: usize) -> usize {
        self.v * self.d + (b * 4 + m) * self.d * self.d
    }
    fn unembed(&self) -> usize {
        self.v * self.d + self.blocks * 4 * self.d * self.d
    }
    fn bias(&self) -> usize {
        self.unembed() + self.d * self.v
    }
}

/// `W x` for a row-major `d×d` matrix.
fn matvec(w: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    (0..d).map(|o| dot(&w[o * d..(o + 1) * d], x)).collect()
}

/// `Wᵀ y` for a row-major `d×d` matrix.
fn matvec_t(w: &[f64], y: &[f64]) -> Vec<f64> {
    let d = y.len();
    let mut out = vec![0.0; d];
    for (o, &yo) in y.iter().enumerate() {
        for (i, slot) in out.iter_mut().enumerate() {
            *slot += w[o * d + i] * yo;
        }
    }
    out
}

/// `grad += y ⊗ x` for a row-major matrix.
fn add_outer(grad: &mut [f64], y: &[f64], x: &[f64]) {
    let d = x.len();
    for (o, &yo) in y.iter().enumerate() {
        for (i, &xi) in x.iter().enumerate() {
            grad[o * d + i] += yo * xi;
        }
    }
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    z.iter().map(|&x| x - lse).collect()
}

struct BlockCache {
    rq: Vec<Vec<f64>>,
    rk: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    attn: Vec<Vec<f64>>,
    ctx: Vec<Vec<f64>>,
}

/// Activations kept from a forward pass for the matching backward pass.
pub struct ToyCache {
    tokens: Vec<usize>,
    thetas: Vec<f64>,
    /// Residual stream entering each block, plus the final one.
    hidden: Vec<Vec<Vec<f64>>>,
    blocks: Vec<BlockCache>,
    /// Index of the first position whose logits were returned.
    first_row: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    shape: ToyShape,
    table: RotaryTable,
    stride: f64,
    params: Vec<f64>,
}

impl ToyPolicy {
    /// All weights zero; every next-token distribution is uniform.
    pub fn zeros(shape: ToyShape, mode: PositionMode, stride: f64) -> Result<Self, RoteError> {
        shape.validate()?;
        Ok(Self {
            shape,
            table: RotaryTable::new(shape.width, mode)?,
            stride,
            params: vec![0.0; shape.num_params()],
        })
    }

    /// Uniform random weights scaled by fan-in. With `zero_head` the
    /// unembedding and bias stay zero, so outputs start uniform while the
    /// attention layers are already asymmetric.
    pub fn random(
        shape: ToyShape,
        mode: PositionMode,
        stride: f64,
        seed: u64,
        zero_head: bool,
    ) -> Result<Self, RoteError> {
        let mut policy = Self::zeros(shape, mode, stride)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = policy.layout();
        let d = shape.width as f64;
        let limit = |fan_in: f64| (3.0 / fan_in).sqrt();
        let head_end = if zero_head { l.unembed() } else { policy.params.len() };
        for (i, p) in policy.params[..head_end].iter_mut().enumerate() {
            let a = if i < l.block(0, 0) { 1.0 } else { limit(d) };
            *p = rng.gen_range(-a..a);
        }
        Ok(policy)
    }

    pub fn from_params(
        shape: ToyShape,
        mode: PositionMode,
        stride: f64,
        params: Vec<f64>,
    ) -> Result<Self, RoteError> {
        let mut policy = Self::zeros(shape, mode, stride)?;
        if params.len() != policy.params.len() {
            return Err(RoteError::InvalidDimension(format!(
                "{} parameters for a shape needing {}",
                params.len(),
                policy.params.len()
            )));
        }
        policy.params = params;
        Ok(policy)
    }

    pub fn shape(&self) -> ToyShape {
        self.shape
    }

    pub fn table(&self) -> &RotaryTable {
        &self.table
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layout(&self) -> Layout {
        Layout { v: self.shape.vocab, d: self.shape.width, blocks: self.shape.blocks }
    }

    fn positions(&self, n: usize) -> Vec<Position> {
        self.table.positions(&timestamps_from_stride(n, self.stride))
    }

    /// Logits for every position of `tokens` (timestamps at the policy's
    /// stride), keeping rows from `first_row` on.
    pub fn forward(&self, tokens: &[usize], first_row: usize) -> Result<(Vec<Vec<f64>>, ToyCache), RoteError> {
        let thetas: Vec<f64> = self.positions(tokens.len()).iter().map(|p| p.theta()).collect();
        self.forward_with(tokens, &thetas, first_row)
    }

    /// Forward pass with explicit rotation angles per position.
    pub fn forward_with(
        &self,
        tokens: &[usize],
        thetas: &[f64],
        first_row: usize,
    ) -> Result<(Vec<Vec<f64>>, ToyCache), RoteError> {
        let l = self.layout();
        let (v, d) = (l.v, l.d);
        if let Some(&id) = tokens.iter().find(|&&t| t >= v) {
            return Err(RoteError::Vocabulary { id, vocab: v });
        }
        if thetas.len() != tokens.len() {
            return Err(RoteError::InvalidDimension("one angle per token required".into()));
        }
        let p = &self.params;
        let n = tokens.len();
        let scale = (d as f64).sqrt();
        let mut h: Vec<Vec<f64>> = tokens
            .iter()
            .map(|&t| p[l.embed() + t * d..l.embed() + (t + 1) * d].to_vec())
            .collect();
        let mut hidden = Vec::with_capacity(l.blocks + 1);
        let mut blocks = Vec::with_capacity(l.blocks);
        for b in 0..l.blocks {
            let w = |m: usize| &p[l.block(b, m)..l.block(b, m) + d * d];
            let rq: Vec<Vec<f64>> = (0..n)
                .map(|t| self.table.rotate_signed(&matvec(w(0), &h[t]), thetas[t], 1.0))
                .collect();
            let rk: Vec<Vec<f64>> = (0..n)
                .map(|t| self.table.rotate_signed(&matvec(w(1), &h[t]), thetas[t], 1.0))
                .collect();
            let vals: Vec<Vec<f64>> = h.iter().map(|x| matvec(w(2), x)).collect();
            let mut attn = Vec::with_capacity(n);
            let mut ctx = Vec::with_capacity(n);
            let mut next = h.clone();
            for t in 0..n {
                let scores: Vec<f64> = (0..=t).map(|j| dot(&rq[t], &rk[j]) / scale).collect();
                let a: Vec<f64> = log_softmax(&scores).into_iter().map(f64::exp).collect();
                let mut c = vec![0.0; d];
                for (j, &aj) in a.iter().enumerate() {
                    for (ci, vi) in c.iter_mut().zip(&vals[j]) {
                        *ci += aj * vi;
                    }
                }
                for (ni, oi) in next[t].iter_mut().zip(matvec(w(3), &c)) {
                    *ni += oi;
                }
                attn.push(a);
                ctx.push(c);
            }
            hidden.push(std::mem::replace(&mut h, next));
            blocks.push(BlockCache { rq, rk, v: vals, attn, ctx });
        }
        let u = &p[l.unembed()..l.bias()];
        let bias = &p[l.bias()..l.bias() + v];
        let logits = h[first_row.min(n)..]
            .iter()
            .map(|x| {
                let mut z = bias.to_vec();
                for (i, &xi) in x.iter().enumerate() {
                    for (zj, uij) in z.iter_mut().zip(&u[i * v..(i + 1) * v]) {
                        *zj += xi * uij;
                    }
                }
                z
            })
            .collect();
        hidden.push(h);
        let cache = ToyCache { tokens: tokens.to_vec(), thetas: thetas.to_vec(), hidden, blocks, first_row };
        Ok((logits, cache))
    }

    /// Gradient of `Σ dlogits·logits` with respect to every parameter.
    pub fn backward(&self, cache: &ToyCache, dlogits: &[Vec<f64>]) -> Vec<f64> {
        let l = self.layout();
        let (v, d) = (l.v, l.d);
        let p = &self.params;
        let n = cache.tokens.len();
        let scale = (d as f64).sqrt();
        let mut grad = vec![0.0; p.len()];

        let top = &cache.hidden[l.blocks];
        let u = &p[l.unembed()..l.bias()];
        let mut dh = vec![vec![0.0; d]; n];
        for (row, dz) in dlogits.iter().enumerate() {
            let t = cache.first_row + row;
            for (j, &g) in dz.iter().enumerate() {
                grad[l.bias() + j] += g;
            }
            for i in 0..d {
                let gu = &mut grad[l.unembed() + i * v..l.unembed() + (i + 1) * v];
                for (gij, &g) in gu.iter_mut().zip(dz) {
                    *gij += top[t][i] * g;
                }
                dh[t][i] = dot(&u[i * v..(i + 1) * v], dz);
            }
        }

        for b in (0..l.blocks).rev() {
            let bc = &cache.blocks[b];
            let h = &cache.hidden[b];
            let off = |m: usize| l.block(b, m);
            let w = |m: usize| &p[off(m)..off(m) + d * d];
            let mut drq = vec![vec![0.0; d]; n];
            let mut drk = vec![vec![0.0; d]; n];
            let mut dv = vec![vec![0.0; d]; n];
            let mut dprev = dh.clone();
            for t in 0..n {
                let dc = matvec_t(w(3), &dh[t]);
                add_outer(&mut grad[off(3)..off(3) + d * d], &dh[t], &bc.ctx[t]);
                let a = &bc.attn[t];
                let da: Vec<f64> = (0..=t).map(|j| dot(&dc, &bc.v[j])).collect();
                let mean: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
                for j in 0..=t {
                    for (dvi, &ci) in dv[j].iter_mut().zip(&dc) {
                        *dvi += a[j] * ci;
                    }
                    let ds = a[j] * (da[j] - mean) / scale;
                    for i in 0..d {
                        drq[t][i] += ds * bc.rk[j][i];
                        drk[j][i] += ds * bc.rq[t][i];
                    }
                }
            }
            for t in 0..n {
                let dq = self.table.rotate_signed(&drq[t], cache.thetas[t], -1.0);
                let dk = self.table.rotate_signed(&drk[t], cache.thetas[t], -1.0);
                for (m, dy) in [(0, &dq), (1, &dk), (2, &dv[t])] {
                    add_outer(&mut grad[off(m)..off(m) + d * d], dy, &h[t]);
                    for (dp, g) in dprev[t].iter_mut().zip(matvec_t(w(m), dy)) {
                        *dp += g;
                    }
                }
            }
            dh = dprev;
        }

        for (t, &tok) in cache.tokens.iter().enumerate() {
            for (g, &x) in grad[l.embed() + tok * d..l.embed() + (tok + 1) * d].iter_mut().zip(&dh[t]) {
                *g += x;
            }
        }
        grad
    }

    /// Log-softmax next-token distributions for each completion token, given
    /// the prompt before it.
    pub fn completion_logprobs(
        &self,
        prompt: &[usize],
        completion: &[usize],
    ) -> Result<(Vec<Vec<f64>>, ToyCache), RoteError> {
        if prompt.is_empty() {
            return Err(RoteError::InvalidDimension("empty prompt".into()));
        }
        if let Some(&id) = completion.iter().find(|&&t| t >= self.shape.vocab) {
            return Err(RoteError::Vocabulary { id, vocab: self.shape.vocab });
        }
        let mut seq = prompt.to_vec();
        seq.extend(completion.iter().take(completion.len().saturating_sub(1)));
        let (logits, cache) = self.forward(&seq, prompt.len() - 1)?;
        let rows = if completion.is_empty() { Vec::new() } else { logits.iter().map(|z| log_softmax(z)).collect() };
        Ok((rows, cache))
    }

    /// Next-token log-distribution after `context`.
    pub fn next_logprobs(&self, context: &[usize]) -> Result<Vec<f64>, RoteError> {
        let (logits, _) = self.forward(context, context.len().saturating_sub(1))?;
        Ok(log_softmax(logits.last().ok_or_else(|| RoteError::InvalidDimension("empty context".into()))?))
    }
}

/// Per-token log-probabilities of `completion` under `policy`.
pub fn policy_logprobs(policy: &ToyPolicy, prompt: &[usize], completion: &[usize]) -> Result<Vec<f64>, RoteError> {
    let (rows, _) = policy.completion_logprobs(prompt, completion)?;
    Ok(rows.iter().zip(completion).map(|(r, &c)| r[c]).collect())
}
