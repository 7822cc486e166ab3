//! Return-scale estimate for advantage normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Percentile `q ∈ [0, 100]` by linear interpolation between order
/// statistics (the `(n - 1)·q/100` rank convention).
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Usage("percentile of an empty batch".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&sorted, q))
}

fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let rank = (sorted.len() - 1) as f64 * q.clamp(0.0, 100.0) / 100.0;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Running 5th/95th percentile of returns, blended with an EMA.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PercentileEma {
    pub decay: f64,
    pub low: f64,
    pub high: f64,
    pub initialized: bool,
}

impl Default for PercentileEma {
    fn default() -> Self {
        Self::new(0.99)
    }
}

impl PercentileEma {
    pub const LOW: f64 = 5.0;
    pub const HIGH: f64 = 95.0;

    pub fn new(decay: f64) -> Self {
        Self {
            decay,
            low: 0.0,
            high: 0.0,
            initialized: false,
        }
    }

    /// Folds in a batch of returns and returns the new scale `high - low`.
    pub fn update(&mut self, returns: &[f64]) -> Result<f64> {
        if returns.is_empty() {
            return Err(Error::Usage("percentile EMA update with an empty batch".into()));
        }
        let mut sorted = returns.to_vec();
        sorted.sort_by(f64::total_cmp);
        let lo = percentile_sorted(&sorted, Self::LOW);
        let hi = percentile_sorted(&sorted, Self::HIGH);
        if self.initialized {
            let d = self.decay;
            self.low = d * self.low + (1.0 - d) * lo;
            self.high = d * self.high + (1.0 - d) * hi;
        } else {
            self.low = lo;
            self.high = hi;
            self.initialized = true;
        }
        Ok(self.scale())
    }

    pub fn scale(&self) -> f64 {
        self.high - self.low
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_gives_ninety() {
        let grid: Vec<f64> = (0..=100).map(f64::from).collect();
        let mut ema = PercentileEma::default();
        assert!((ema.update(&grid).unwrap() - 90.0).abs() < 1e-12);
        assert_eq!(percentile(&grid, 50.0).unwrap(), 50.0);
        assert_eq!(percentile(&[1.0, 2.0], 50.0).unwrap(), 1.5);
    }

    #[test]
    fn constant_batch_and_fixed_point() {
        let mut ema = PercentileEma::default();
        assert_eq!(ema.update(&[3.0; 17]).unwrap(), 0.0);
        let batch: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let mut ema = PercentileEma::default();
        let s1 = ema.update(&batch).unwrap();
        let s2 = ema.update(&batch).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_an_error() {
        assert!(PercentileEma::default().update(&[]).is_err());
        assert!(percentile(&[], 5.0).is_err());
    }

    #[test]
    fn scaling_returns_scales_s() {
        let batch: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).cos() * 7.0).collect();
        let doubled: Vec<f64> = batch.iter().map(|x| 2.0 * x).collect();
        let s = PercentileEma::default().update(&batch).unwrap();
        let s2 = PercentileEma::default().update(&doubled).unwrap();
        assert_eq!(s2, 2.0 * s);
    }

    proptest! {
        #[test]
        fn reorder_invariant(mut v in prop::collection::vec(-1e3f64..1e3, 1..200), seed in 0u64..1000) {
            let s1 = PercentileEma::default().update(&v).unwrap();
            use rand::{seq::SliceRandom, SeedableRng};
            v.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let mut ema = PercentileEma::default();
            let s2 = ema.update(&v).unwrap();
            prop_assert_eq!(s1, s2);
            prop_assert!(ema.high >= ema.low);
        }
    }
}
