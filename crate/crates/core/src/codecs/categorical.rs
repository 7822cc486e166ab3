//! Vectors of one-hot categoricals with straight-through gradients, and the
//! free-nat clipped KL between two such codes.

use rand::Rng;

use crate::diff::{softmax_in_place, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};

/// Probability mass mixed in uniformly before sampling and before KL.
pub const UNIMIX: f64 = 0.01;

/// `groups × classes` categorical latent: logits and one sampled one-hot
/// per group.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalCode<T> {
    pub groups: usize,
    pub classes: usize,
    pub logits: Vec<T>,
    pub sample: Vec<T>,
}

impl<T: Scalar> CategoricalCode<T> {
    /// Sampled class per group.
    pub fn indices(&self) -> Vec<usize> {
        self.sample
            .chunks(self.classes)
            .map(|g| g.iter().position(|&x| x == T::one()).expect("one-hot"))
            .collect()
    }

    /// Mixed probabilities per group (row-major `groups × classes`).
    pub fn probs(&self, unimix: f64) -> Vec<T> {
        mixed_probs(&self.logits, self.classes, unimix)
    }
}

/// `(1 - unimix) · softmax + unimix / K` for each group of `classes`.
pub fn mixed_probs<T: Scalar>(logits: &[T], classes: usize, unimix: f64) -> Vec<T> {
    let mut p = logits.to_vec();
    let u = c::<T>(unimix / classes as f64);
    let keep = c::<T>(1.0 - unimix);
    for g in p.chunks_mut(classes) {
        softmax_in_place(g);
        g.iter_mut().for_each(|x| *x = *x * keep + u);
    }
    p
}

/// Draws one class from a probability row.
pub fn sample_index<T: Scalar>(probs: &[T], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p.to_f64c();
        if u < acc {
            return i;
        }
    }
    // rounding left u above the total mass
    probs
        .iter()
        .rposition(|p| *p > T::zero())
        .unwrap_or(probs.len() - 1)
}

/// Samples a code from `groups × classes` logits with uniform mixing.
pub fn st_sample<T: Scalar>(
    logits: &[T],
    groups: usize,
    classes: usize,
    rng: &mut impl Rng,
) -> Result<CategoricalCode<T>> {
    if logits.len() != groups * classes {
        return Err(Error::shape(
            "st_sample",
            format!("{} logits for {groups}x{classes}", logits.len()),
        ));
    }
    let probs = mixed_probs(logits, classes, UNIMIX);
    let mut sample = vec![T::zero(); logits.len()];
    for (gi, p) in probs.chunks(classes).enumerate() {
        sample[gi * classes + sample_index(p, rng)] = T::one();
    }
    Ok(CategoricalCode {
        groups,
        classes,
        logits: logits.to_vec(),
        sample,
    })
}

/// How a latent is read out of its distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LatentMode {
    /// One-hot sample with straight-through gradient.
    #[default]
    Sample,
    /// One-hot of the most likely class, straight-through gradient.
    Mode,
    /// The mixed probabilities themselves. The straight-through surrogate
    /// is exactly the gradient of this function, so finite differences
    /// taken in this mode check it.
    Probs,
}

/// Mixed probabilities for `[rows, groups·classes]` logits as a
/// `[rows·groups, classes]` variable.
pub fn probs_var<T: Scalar>(g: &mut Graph<T>, logits: Var, classes: usize) -> Result<Var> {
    let n = g.value(logits).len();
    let grouped = g.reshape(logits, &[n / classes, classes])?;
    let sm = g.softmax(grouped);
    let scaled = g.scale(sm, c(1.0 - UNIMIX));
    Ok(g.add_scalar(scaled, c(UNIMIX / classes as f64)))
}

/// Reads a latent out of grouped probabilities (see [`probs_var`]) and
/// reshapes it back to `[rows, groups·classes]`.
pub fn st_sample_var<T: Scalar>(
    g: &mut Graph<T>,
    probs: Var,
    rows: usize,
    mode: LatentMode,
    rng: &mut impl Rng,
) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    let (n, k) = (shape[0], shape[1]);
    let out = match mode {
        LatentMode::Probs => probs,
        LatentMode::Sample | LatentMode::Mode => {
            let pv = g.value(probs);
            let mut onehot = vec![T::zero(); n * k];
            for r in 0..n {
                let row = pv.row(r);
                let idx = match mode {
                    LatentMode::Sample => sample_index(row, rng),
                    _ => argmax(row),
                };
                onehot[r * k + idx] = T::one();
            }
            g.straight_through(probs, Tensor::new(vec![n, k], onehot)?)?
        }
    };
    g.reshape(out, &[rows, n * k / rows])
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Which distribution of `KL[p ‖ q]` is treated as a constant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopSide {
    /// `KL[sg(p) ‖ q]`: gradients reach only `q`.
    P,
    /// `KL[p ‖ sg(q)]`: gradients reach only `p`.
    Q,
}

/// `KL[p ‖ q] = Σ p (ln p - ln q)` for plain probability vectors.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

/// Per-row KL summed over groups, for grouped probabilities
/// `[rows·groups, classes]`. Returns `[rows]` unclipped values.
pub fn kl_var<T: Scalar>(
    g: &mut Graph<T>,
    p: Var,
    q: Var,
    rows: usize,
    stop: StopSide,
) -> Result<Var> {
    if g.shape(p) != g.shape(q) {
        return Err(Error::shape(
            "kl",
            format!("{:?} vs {:?}", g.shape(p), g.shape(q)),
        ));
    }
    let (p, q) = match stop {
        StopSide::P => (g.detach(p), q),
        StopSide::Q => (p, g.detach(q)),
    };
    let lp = g.log(p);
    let lq = g.log(q);
    let d = g.sub(lp, lq)?;
    let t = g.mul(p, d)?;
    let n = g.value(t).len();
    let per_row = g.reshape(t, &[rows, n / rows])?;
    Ok(g.sum_cols(per_row))
}

/// `max(1, KL)` per row: the free-nat floor. Zero gradient below one nat.
pub fn free_nats<T: Scalar>(g: &mut Graph<T>, kl: Var) -> Var {
    g.clamp_min(kl, T::one())
}

/// Mean over rows of `max(1, Σ_groups KL[p ‖ q])` with one side frozen.
pub fn kl_clipped<T: Scalar>(
    g: &mut Graph<T>,
    p: Var,
    q: Var,
    rows: usize,
    stop: StopSide,
) -> Result<Var> {
    let kl = kl_var(g, p, q, rows, stop)?;
    let clipped = free_nats(g, kl);
    Ok(g.mean(clipped))
}
