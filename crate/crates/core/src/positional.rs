//! Rotary embeddings at real-valued positions, and the progress schedules
//! that map a sequence index onto a fixed `[0, scale]` range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Float;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;
pub const DEFAULT_PROGRESS_SCALE: f64 = 2_000.0;

/// Frequencies for one rotary module. Decoder queries and encoder keys each
/// own an instance even when their bases agree.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeParams {
    head_dim: usize,
    base: f64,
    frequencies: Vec<f64>,
}

impl RopeParams {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::invalid(format!("rope head_dim must be even and positive, got {head_dim}")));
        }
        if !(base > 1.0 && base.is_finite()) {
            return Err(Error::invalid(format!("rope base must exceed 1, got {base}")));
        }
        let frequencies = (0..head_dim / 2)
            .map(|t| base.powf(-2.0 * t as f64 / head_dim as f64))
            .collect();
        Ok(RopeParams {
            head_dim,
            base,
            frequencies,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    /// Per-row `(cos, sin)` tables, `head_dim / 2` entries per position.
    /// Angles are formed in 64-bit before narrowing.
    pub fn tables<F: Float>(&self, positions: &[f64]) -> (Vec<F>, Vec<F>) {
        let n = positions.len() * self.frequencies.len();
        let mut cos = Vec::with_capacity(n);
        let mut sin = Vec::with_capacity(n);
        for &p in positions {
            for &f in &self.frequencies {
                let (s, c) = (p * f).sin_cos();
                cos.push(F::cast_from(c));
                sin.push(F::cast_from(s));
            }
        }
        (cos, sin)
    }
}

/// Rotates consecutive pairs `(v[2t], v[2t+1])` by `position * frequencies[t]`.
pub fn apply_rope<F: Float>(v: &[F], position: f64, params: &RopeParams) -> Result<Vec<F>> {
    if v.len() != params.head_dim {
        return Err(Error::Shape {
            op: "apply_rope",
            lhs: vec![v.len()],
            rhs: vec![params.head_dim],
        });
    }
    let (cos, sin) = params.tables::<F>(&[position]);
    let mut out = v.to_vec();
    for t in 0..cos.len() {
        let (a, b) = (v[2 * t], v[2 * t + 1]);
        out[2 * t] = a * cos[t] - b * sin[t];
        out[2 * t + 1] = a * sin[t] + b * cos[t];
    }
    Ok(out)
}

/// Scaled dot-product logits `q_i . k_j / sqrt(head_dim)` for every pair.
pub fn cross_attention_scores<F: Float>(queries: &[Vec<F>], keys: &[Vec<F>]) -> Result<Vec<Vec<F>>> {
    let dim = queries.first().or(keys.first()).map_or(0, Vec::len);
    if let Some(bad) = queries.iter().chain(keys).find(|v| v.len() != dim) {
        return Err(Error::Shape {
            op: "cross_attention_scores",
            lhs: vec![dim],
            rhs: vec![bad.len()],
        });
    }
    let scale = F::cast_from(1.0 / (dim as f64).sqrt());
    Ok(queries
        .iter()
        .map(|q| {
            keys.iter()
                .map(|k| q.iter().zip(k).map(|(&a, &b)| a * b).sum::<F>() * scale)
                .collect()
        })
        .collect())
}

/// Maps index `i` of a sequence of `total_len` onto `i / (total_len - 1) * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProgressSchedule {
    total_len: usize,
    scale: f64,
}

impl ProgressSchedule {
    pub fn new(total_len: usize, scale: f64) -> Result<Self> {
        if total_len == 0 {
            return Err(Error::invalid("progress schedule needs total_len >= 1"));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("progress scale must be positive, got {scale}")));
        }
        Ok(ProgressSchedule { total_len, scale })
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Progress ID of `index`, which must lie inside the schedule.
    pub fn progress_id(&self, index: usize) -> Result<f64> {
        if index >= self.total_len {
            return Err(Error::OutOfRange {
                what: "progress index",
                index,
                bound: self.total_len,
            });
        }
        Ok(self.extrapolated(index))
    }

    /// Same affine map without the range check; indices past the end continue
    /// beyond `scale`. A single-element schedule maps everything to 0.
    pub fn extrapolated(&self, index: usize) -> f64 {
        if self.total_len == 1 {
            return 0.0;
        }
        index as f64 / (self.total_len - 1) as f64 * self.scale
    }

    /// Progress IDs for indices `0..len`.
    pub fn ids(&self, len: usize) -> Vec<f64> {
        (0..len).map(|i| self.extrapolated(i)).collect()
    }
}

/// Free function form of [`ProgressSchedule::progress_id`].
pub fn progress_id(index: usize, schedule: &ProgressSchedule) -> Result<f64> {
    schedule.progress_id(index)
}
