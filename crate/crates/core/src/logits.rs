//! Dense 4-D tensor over (context, position, previous token, next token).
//!
//! Policy logits and their gradients share this layout; the previous-token
//! axis has one extra slot for the beginning-of-sequence marker.

use serde::{Deserialize, Serialize};

/// Shape of a logit tensor. `prev` is `vocab + 1`: the last index is the
/// beginning-of-sequence slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogitShape {
    pub contexts: usize,
    pub positions: usize,
    pub prev: usize,
    pub vocab: usize,
}

impl LogitShape {
    pub fn len(&self) -> usize {
        self.contexts * self.positions * self.prev * self.vocab
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    fn row_offset(&self, context: usize, position: usize, prev: usize) -> usize {
        debug_assert!(context < self.contexts && position < self.positions && prev < self.prev);
        ((context * self.positions + position) * self.prev + prev) * self.vocab
    }
}

/// Flat storage for per-row logits (or gradient entries) in the shape above.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitTensor {
    shape: LogitShape,
    data: Vec<f64>,
}

/// Gradients carry the same index structure as the logits they differentiate.
pub type Gradient = LogitTensor;

impl LogitTensor {
    pub fn zeros(shape: LogitShape) -> Self {
        LogitTensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_flat(shape: LogitShape, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), shape.len(), "flat data does not match shape");
        LogitTensor { shape, data }
    }

    pub fn shape(&self) -> LogitShape {
        self.shape
    }

    #[inline]
    pub fn row(&self, context: usize, position: usize, prev: usize) -> &[f64] {
        let off = self.shape.row_offset(context, position, prev);
        &self.data[off..off + self.shape.vocab]
    }

    #[inline]
    pub fn row_mut(&mut self, context: usize, position: usize, prev: usize) -> &mut [f64] {
        let off = self.shape.row_offset(context, position, prev);
        &mut self.data[off..off + self.shape.vocab]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// In-place `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &LogitTensor) {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_linf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Maximum absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &LogitTensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Fixed-order pairwise-tree mean of several tensors.
    pub fn tree_mean(mut parts: Vec<LogitTensor>) -> LogitTensor {
        assert!(!parts.is_empty(), "cannot reduce zero tensors");
        let n = parts.len();
        while parts.len() > 1 {
            let mut next = Vec::with_capacity(parts.len().div_ceil(2));
            let mut iter = parts.into_iter();
            while let Some(mut a) = iter.next() {
                if let Some(b) = iter.next() {
                    a.axpy(1.0, &b);
                }
                next.push(a);
            }
            parts = next;
        }
        let mut total = parts.pop().expect("nonempty");
        total.scale(1.0 / n as f64);
        total
    }

    /// Nested `[context][position][prev][token]` copy for JSON checkpoints.
    pub fn to_nested(&self) -> Vec<Vec<Vec<Vec<f64>>>> {
        let s = self.shape;
        (0..s.contexts)
            .map(|c| {
                (0..s.positions)
                    .map(|t| {
                        (0..s.prev)
                            .map(|p| self.row(c, t, p).to_vec())
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    pub fn from_nested(nested: &[Vec<Vec<Vec<f64>>>]) -> Result<Self, String> {
        let contexts = nested.len();
        if contexts == 0 {
            return Err("logits have zero contexts".into());
        }
        let positions = nested[0].len();
        let prev = nested.first().and_then(|c| c.first()).map_or(0, Vec::len);
        let vocab = nested
            .first()
            .and_then(|c| c.first())
            .and_then(|t| t.first())
            .map_or(0, Vec::len);
        let shape = LogitShape {
            contexts,
            positions,
            prev,
            vocab,
        };
        let mut data = Vec::with_capacity(shape.len());
        for ctx in nested {
            if ctx.len() != positions {
                return Err("ragged position axis".into());
            }
            for pos in ctx {
                if pos.len() != prev {
                    return Err("ragged previous-token axis".into());
                }
                for row in pos {
                    if row.len() != vocab {
                        return Err("ragged vocabulary axis".into());
                    }
                    data.extend_from_slice(row);
                }
            }
        }
        Ok(LogitTensor { shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> LogitShape {
        LogitShape {
            contexts: 2,
            positions: 3,
            prev: 4,
            vocab: 3,
        }
    }

    #[test]
    fn row_indexing_is_consistent_with_flat_layout() {
        let mut t = LogitTensor::zeros(shape());
        t.row_mut(1, 2, 3)[1] = 5.0;
        let off = ((1 * 3 + 2) * 4 + 3) * 3 + 1;
        assert_eq!(t.as_slice()[off], 5.0);
    }

    #[test]
    fn nested_round_trip_preserves_bits() {
        let s = shape();
        let data: Vec<f64> = (0..s.len()).map(|i| (i as f64).sin() * 1e3).collect();
        let t = LogitTensor::from_flat(s, data);
        let back = LogitTensor::from_nested(&t.to_nested()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn tree_mean_of_copies_is_identity() {
        let s = shape();
        let data: Vec<f64> = (0..s.len()).map(|i| i as f64 * 0.25).collect();
        let t = LogitTensor::from_flat(s, data);
        let mean = LogitTensor::tree_mean(vec![t.clone(), t.clone(), t.clone(), t.clone()]);
        assert!(mean.max_abs_diff(&t) < 1e-15);
    }
}
