//! Regression-as-classification over exponentially spaced bins.
//!
//! Bin centers are uniform in symlog space, so in value space they grow
//! exponentially away from zero. A scalar is encoded as linear
//! interpolation weights on the two centers bracketing its symlog.

use super::symlog::{symexp, symlog};
use crate::diff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct TwohotSpec {
    /// Centers in symlog space, strictly increasing and odd-symmetric.
    centers: Vec<f64>,
}

impl TwohotSpec {
    /// `bins` odd centers spanning `[-limit, limit]` in symlog space.
    pub fn new(bins: usize, limit: f64) -> Result<Self> {
        if bins < 3 || bins % 2 == 0 || !(limit > 0.0) {
            return Err(Error::Config(format!(
                "twohot needs an odd bin count >= 3 and positive range, got {bins} bins, limit {limit}"
            )));
        }
        let mid = (bins - 1) / 2;
        let step = limit / mid as f64;
        let mut centers = vec![0.0; bins];
        for i in 1..=mid {
            let v = if i == mid { limit } else { i as f64 * step };
            centers[mid + i] = v;
            centers[mid - i] = -v;
        }
        Ok(Self { centers })
    }

    pub fn bins(&self) -> usize {
        self.centers.len()
    }

    /// Symlog-space centers.
    pub fn symlog_centers(&self) -> &[f64] {
        &self.centers
    }

    /// Value-space center `i`.
    pub fn center(&self, i: usize) -> f64 {
        symexp(self.centers[i])
    }

    /// Weights over bins (at most two adjacent nonzero, summing to 1).
    pub fn encode<T: Scalar>(&self, v: T) -> Vec<T> {
        let mut out = vec![T::zero(); self.bins()];
        let (k, w_hi) = self.bracket(v.to_f64c());
        out[k] = T::from_f64c(1.0 - w_hi);
        if w_hi > 0.0 {
            out[k + 1] = T::from_f64c(w_hi);
        }
        out
    }

    /// Writes encodings of `values` row by row into `[n, bins]` storage.
    pub fn encode_batch<T: Scalar>(&self, values: &[T]) -> Tensor<T> {
        let b = self.bins();
        let mut data = vec![T::zero(); values.len() * b];
        for (row, &v) in data.chunks_mut(b).zip(values) {
            let (k, w_hi) = self.bracket(v.to_f64c());
            row[k] = T::from_f64c(1.0 - w_hi);
            if w_hi > 0.0 {
                row[k + 1] = T::from_f64c(w_hi);
            }
        }
        Tensor::new(vec![values.len(), b], data).expect("rows x bins")
    }

    /// Lower bin index and the weight of the upper neighbour.
    fn bracket(&self, v: f64) -> (usize, f64) {
        let c = &self.centers;
        let last = c.len() - 1;
        let y = symlog(v).clamp(c[0], c[last]);
        if y >= c[last] {
            return (last, 0.0);
        }
        // partition_point: first center > y
        let hi = c.partition_point(|&x| x <= y);
        let k = hi - 1;
        if y == c[k] {
            return (k, 0.0);
        }
        let w = (y - c[k]) / (c[k + 1] - c[k]);
        (k, w)
    }

    /// `symexp(Σ pᵢ cᵢ)` for a probability vector over bins.
    pub fn decode<T: Scalar>(&self, probs: &[T]) -> Result<T> {
        if probs.len() != self.bins() {
            return Err(Error::shape(
                "twohot_decode",
                format!("{} probabilities for {} bins", probs.len(), self.bins()),
            ));
        }
        if let Some(p) = probs.iter().find(|p| **p < T::zero()) {
            return Err(Error::Usage(format!("negative probability {p} in twohot_decode")));
        }
        Ok(T::from_f64c(self.decode_unchecked(probs)))
    }

    pub(crate) fn decode_unchecked<T: Scalar>(&self, probs: &[T]) -> f64 {
        let mean: f64 = probs
            .iter()
            .zip(&self.centers)
            .map(|(p, c)| p.to_f64c() * c)
            .sum();
        symexp(mean)
    }

    /// Decodes each row of `[n, bins]` logits after a softmax.
    pub fn decode_logits<T: Scalar>(&self, logits: &Tensor<T>) -> Vec<T> {
        let mut row = vec![T::zero(); self.bins()];
        (0..logits.rows())
            .map(|r| {
                row.copy_from_slice(logits.row(r));
                crate::diff::softmax_in_place(&mut row);
                T::from_f64c(self.decode_unchecked(&row))
            })
            .collect()
    }
}

/// Per-row `-Σ target ⊙ log_softmax(logits)` against twohot targets of
/// `values`. Targets are constants.
pub fn twohot_cross_entropy<T: Scalar>(
    g: &mut Graph<T>,
    spec: &TwohotSpec,
    logits: Var,
    values: &[T],
) -> Result<Var> {
    let targets = g.constant(spec.encode_batch(values));
    let logp = g.log_softmax(logits);
    let prod = g.mul(logp, targets)?;
    let s = g.sum_cols(prod);
    Ok(g.neg(s))
}
