//! Rotary position encoding driven either by token index or by absolute
//! timestamp, and the small causal-attention policy built on it.
//!
//! Each pair `(x[2k], x[2k+1])` is rotated by `θ·ω_k` with
//! `ω_k = 10000^(-2k/d)` and `θ = -2π·p`, where `p` is the token index or its
//! timestamp in seconds. With `ω_0 = 1`, positions that differ by a whole
//! number give the same angle modulo 2π in the first pair; the slower pairs
//! still tell them apart.

mod policy;

use std::f64::consts::TAU;

use thiserror::Error;

pub use policy::{log_softmax, policy_logprobs, ToyCache, ToyPolicy, ToyShape};

pub const ROTARY_BASE: f64 = 10000.0;
/// Stride between consecutive timestamps when none are supplied.
pub const DEFAULT_STRIDE_SEC: f64 = 0.040;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoteError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    Vocabulary { id: usize, vocab: usize },
}

impl RoteError {
    pub fn class_name(&self) -> &'static str {
        match self {
            RoteError::InvalidDimension(_) => "InvalidDimension",
            RoteError::Vocabulary { .. } => "VocabularyError",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PositionMode {
    Index,
    Time,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Position {
    Index(usize),
    Time(f64),
}

impl Position {
    pub fn theta(self) -> f64 {
        match self {
            Position::Index(i) => -(i as f64) * TAU,
            Position::Time(t) => -t * TAU,
        }
    }
}

/// A token id with its timestamp in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedToken {
    pub token_id: usize,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotaryTable {
    dim: usize,
    omegas: Vec<f64>,
    mode: PositionMode,
}

impl RotaryTable {
    pub fn new(dim: usize, mode: PositionMode) -> Result<Self, RoteError> {
        if dim == 0 || dim % 2 != 0 {
            return Err(RoteError::InvalidDimension(format!("head dim {dim} must be even and positive")));
        }
        let omegas = (0..dim / 2)
            .map(|k| ROTARY_BASE.powf(-2.0 * k as f64 / dim as f64))
            .collect();
        Ok(Self { dim, omegas, mode })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }

    pub fn mode(&self) -> PositionMode {
        self.mode
    }

    /// The position used for token `index` with timestamp `tau` under this
    /// table's mode.
    pub fn position(&self, index: usize, tau: f64) -> Position {
        match self.mode {
            PositionMode::Index => Position::Index(index),
            PositionMode::Time => Position::Time(tau),
        }
    }

    pub fn positions(&self, taus: &[f64]) -> Vec<Position> {
        taus.iter().enumerate().map(|(i, &t)| self.position(i, t)).collect()
    }

    fn check(&self, x: &[f64]) -> Result<(), RoteError> {
        if x.len() != self.dim {
            return Err(RoteError::InvalidDimension(format!(
                "vector of length {} for table of dim {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Rotate by `sign·θ·ω_k`; `sign = -1` applies the inverse rotation.
    pub(crate) fn rotate_signed(&self, x: &[f64], theta: f64, sign: f64) -> Vec<f64> {
        let mut out = x.to_vec();
        for (k, &w) in self.omegas.iter().enumerate() {
            let (s, c) = (sign * theta * w).sin_cos();
            let (a, b) = (x[2 * k], x[2 * k + 1]);
            out[2 * k] = a * c - b * s;
            out[2 * k + 1] = a * s + b * c;
        }
        out
    }
}

pub fn rotate(x: &[f64], position: Position, table: &RotaryTable) -> Result<Vec<f64>, RoteError> {
    table.check(x)?;
    Ok(table.rotate_signed(x, position.theta(), 1.0))
}

/// `τ_i = i·stride`.
pub fn timestamps_from_stride(n: usize, stride: f64) -> Vec<f64> {
    (0..n).map(|i| i as f64 * stride).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Causal scaled dot-product scores between rotated queries and keys.
/// Entries above the diagonal are `-inf`.
pub fn attention_scores(
    queries: &[Vec<f64>],
    keys: &[Vec<f64>],
    positions: &[Position],
    table: &RotaryTable,
) -> Result<Vec<Vec<f64>>, RoteError> {
    if queries.len() != keys.len() || queries.len() != positions.len() {
        return Err(RoteError::InvalidDimension(format!(
            "{} queries, {} keys, {} positions",
            queries.len(),
            keys.len(),
            positions.len()
        )));
    }
    let rq = queries
        .iter()
        .zip(positions)
        .map(|(q, &p)| rotate(q, p, table))
        .collect::<Result<Vec<_>, _>>()?;
    let rk = keys
        .iter()
        .zip(positions)
        .map(|(k, &p)| rotate(k, p, table))
        .collect::<Result<Vec<_>, _>>()?;
    let scale = (table.dim() as f64).sqrt();
    Ok((0..rq.len())
        .map(|i| {
            (0..rk.len())
                .map(|j| if j <= i { dot(&rq[i], &rk[j]) / scale } else { f64::NEG_INFINITY })
                .collect()
        })
        .collect())
}
