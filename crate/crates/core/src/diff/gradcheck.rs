//! Central finite-difference gradient checking in 64-bit.

use std::fmt;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Error of one parameter block.
#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    pub max_abs_err: f64,
    /// `max |analytic - numeric| / max(‖analytic‖∞, ‖numeric‖∞, floor)`.
    pub max_rel_err: f64,
    pub grad_scale: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_err < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.blocks {
            writeln!(
                f,
                "{:<40} n={:<5} rel={:.3e} abs={:.3e} scale={:.3e}",
                b.name, b.checked, b.max_rel_err, b.max_abs_err, b.grad_scale
            )?;
        }
        write!(f, "tolerance {:.1e}: {}", self.tolerance, if self.passed() { "pass" } else { "FAIL" })
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    pub step: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Only blocks whose name starts with one of these (all if empty).
    pub prefixes: Vec<String>,
}

impl GradCheckOptions {
    pub fn new(tolerance: f64) -> Self {
        Self {
            tolerance,
            step: 1e-5,
            floor: 1e-6,
            prefixes: Vec::new(),
        }
    }

    pub fn only(mut self, prefixes: &[&str]) -> Self {
        self.prefixes = prefixes.iter().map(|s| s.to_string()).collect();
        self
    }
}

/// Compares tape gradients of `loss` against central differences for every
/// selected parameter. `loss` must be a deterministic function of the store
/// (reseed any sampler inside it). Fragments are expected to stay under
/// 10⁴ scalars.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    opts: &GradCheckOptions,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let l = loss(store, &mut g)?;
    let grads = g.backward(l)?;
    drop(g);

    let eval = |store: &ParamStore<f64>, loss: &mut F| -> Result<f64> {
        let mut g = Graph::no_grad();
        let l = loss(store, &mut g)?;
        let v = g.item(l);
        if !v.is_finite() {
            return Err(Error::NonFinite("loss during finite differences".into()));
        }
        Ok(v)
    };

    let mut blocks = Vec::new();
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        if !opts.prefixes.is_empty() && !opts.prefixes.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        let n = store.value(id).len();
        let analytic: Vec<f64> = match grads.param(id) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; n],
        };
        let mut numeric = vec![0.0; n];
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + opts.step;
            let plus = eval(store, &mut loss)?;
            store.value_mut(id).data_mut()[i] = orig - opts.step;
            let minus = eval(store, &mut loss)?;
            store.value_mut(id).data_mut()[i] = orig;
            numeric[i] = (plus - minus) / (2.0 * opts.step);
        }
        let max_abs_err = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        let scale = analytic
            .iter()
            .chain(&numeric)
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        blocks.push(BlockReport {
            name,
            checked: n,
            max_abs_err,
            max_rel_err: max_abs_err / scale.max(opts.floor),
            grad_scale: scale,
        });
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        blocks,
    })
}
