//! Rotary position embeddings evaluated at an interpolated, offset position
//! `(m + t) / g`.
//!
//! Pairs are interleaved: components `(x[2j], x[2j+1])` form the complex
//! number rotated by `p·θ_j`, with `θ_j = base^(−2j/d)`. Angles are computed in
//! double precision and only then narrowed to the tensor type.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const DEFAULT_BASE: f64 = 10_000.0;

/// Per-position offsets. Positions past the stored range have offset 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OffsetMap(Vec<u64>);

impl OffsetMap {
    pub fn zeros() -> Self {
        Self(Vec::new())
    }

    pub fn from_vec(offsets: Vec<u64>) -> Self {
        Self(offsets)
    }

    /// The same offset at every one of `len` positions.
    pub fn constant(len: usize, offset: u64) -> Self {
        Self(vec![offset; len])
    }

    /// Offset 0 for the first `sink_count` positions and `body` for the rest
    /// of a window of `len` positions.
    pub fn with_sinks(len: usize, sink_count: usize, body: u64) -> Self {
        Self((0..len).map(|m| if m < sink_count { 0 } else { body }).collect())
    }

    #[inline]
    pub fn get(&self, m: usize) -> u64 {
        self.0.get(m).copied().unwrap_or(0)
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.0
    }

    pub fn is_all_zero(&self) -> bool {
        self.0.iter().all(|&t| t == 0)
    }

    /// Adds `delta` to every stored offset and extends the map to `len`.
    pub fn shifted(&self, len: usize, delta: u64) -> Self {
        Self((0..len.max(self.0.len())).map(|m| self.get(m) + delta).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RopeParams {
    head_dim: usize,
    base: f64,
    scale: f64,
    offsets: OffsetMap,
}

impl RopeParams {
    pub fn new(head_dim: usize, base: f64, scale: f64, offsets: OffsetMap) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rope head_dim must be even and positive, got {head_dim}"
            )));
        }
        if !(base.is_finite() && base > 0.0) {
            return Err(Error::Config(format!("rope base must be positive, got {base}")));
        }
        if !(scale.is_finite() && scale >= 1.0) {
            return Err(Error::Config(format!("rope scale must be >= 1, got {scale}")));
        }
        Ok(Self {
            head_dim,
            base,
            scale,
            offsets,
        })
    }

    /// Plain RoPE: scale 1, no offsets.
    pub fn standard(head_dim: usize, base: f64) -> Result<Self> {
        Self::new(head_dim, base, 1.0, OffsetMap::zeros())
    }

    /// Position interpolation by `scale` with no offsets.
    pub fn interpolated(head_dim: usize, base: f64, scale: f64) -> Result<Self> {
        Self::new(head_dim, base, scale, OffsetMap::zeros())
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn offsets(&self) -> &OffsetMap {
        &self.offsets
    }

    pub fn with_offsets(mut self, offsets: OffsetMap) -> Self {
        self.offsets = offsets;
        self
    }

    pub fn position(&self, m: usize) -> f64 {
        effective_position(m, self.scale, self.offsets.get(m))
    }

    pub fn theta(&self, j: usize) -> f64 {
        theta(j, self.head_dim, self.base)
    }

    /// Cosine/sine tables for positions `0..n`, `head_dim / 2` entries per
    /// position, narrowed to `T`.
    pub fn tables<T: Scalar>(&self, n: usize) -> (Vec<T>, Vec<T>) {
        self.tables_from(0, n)
    }

    /// Tables for positions `start..start + n`.
    pub fn tables_from<T: Scalar>(&self, start: usize, n: usize) -> (Vec<T>, Vec<T>) {
        let half = self.head_dim / 2;
        let mut cos = Vec::with_capacity(n * half);
        let mut sin = Vec::with_capacity(n * half);
        for m in start..start + n {
            let (c, s) = rope_angles(self, self.position(m));
            cos.extend(c.into_iter().map(T::from_f64));
            sin.extend(s.into_iter().map(T::from_f64));
        }
        (cos, sin)
    }
}

/// Rotation frequency of pair `j`.
pub fn theta(j: usize, head_dim: usize, base: f64) -> f64 {
    base.powf(-2.0 * j as f64 / head_dim as f64)
}

/// `(m + t) / g`.
#[inline]
pub fn effective_position(m: usize, scale: f64, offset: u64) -> f64 {
    (m as f64 + offset as f64) / scale
}

/// `(cos(p·θ_j), sin(p·θ_j))` for `j = 0..d/2`.
pub fn rope_angles(params: &RopeParams, position: f64) -> (Vec<f64>, Vec<f64>) {
    (0..params.head_dim / 2)
        .map(|j| {
            let a = position * params.theta(j);
            (a.cos(), a.sin())
        })
        .unzip()
}

/// Rotates one head vector as if it sat at sequence index `m`.
pub fn apply_rope<T: Scalar>(x: &[T], m: usize, params: &RopeParams) -> Result<Vec<T>> {
    if x.len() != params.head_dim {
        return Err(Error::Shape {
            op: "apply_rope",
            left: vec![x.len()],
            right: vec![params.head_dim],
        });
    }
    let (cos, sin) = rope_angles(params, params.position(m));
    let mut out = x.to_vec();
    for j in 0..params.head_dim / 2 {
        let (a, b) = (x[2 * j].to_f64(), x[2 * j + 1].to_f64());
        out[2 * j] = T::from_f64(a * cos[j] - b * sin[j]);
        out[2 * j + 1] = T::from_f64(a * sin[j] + b * cos[j]);
    }
    Ok(out)
}

/// `⟨rope(q, m), rope(k, n)⟩`, the pre-softmax attention score of one head.
pub fn attention_score_probe(q: &[f64], k: &[f64], m: usize, n: usize, params: &RopeParams) -> Result<f64> {
    if q.len() != k.len() {
        return Err(Error::Shape {
            op: "attention_score_probe",
            left: vec![q.len()],
            right: vec![k.len()],
        });
    }
    let qr = apply_rope(q, m, params)?;
    let kr = apply_rope(k, n, params)?;
    Ok(qr.iter().zip(&kr).map(|(a, b)| a * b).sum())
}
