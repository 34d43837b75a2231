//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of every backward rule it is used to verify.

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Tape, TapeTensor};
use crate::error::Result;
use crate::params::{GradStore, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Gradients smaller than this in magnitude are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub label: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.coords.len()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.coords.iter().fold(0.0, |m, c| m.max(c.rel_error))
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.coords.iter().all(|c| c.rel_error <= tol)
    }

    /// Distinct labels that were probed.
    pub fn labels(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.coords.iter().map(|c| c.label.as_str()).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Checks d(loss)/d(param) at the given coordinates.
///
/// `loss_fn` must build a scalar loss on the supplied tape from the
/// supplied store, registering parameters through [`Tape::param`].
pub fn check_params<F>(
    store: &mut ParamStore,
    coords: &[(ParamId, usize)],
    step: f64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<TapeTensor<'t>>,
{
    let mut grads = GradStore::zeros_like(store);
    {
        let tape = Tape::new();
        let loss = loss_fn(&tape, store)?;
        tape.backward(loss)?.accumulate_into(&mut grads);
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        Ok(loss_fn(&tape, store)?.item())
    };
    let mut report = GradCheckReport::default();
    for &(id, index) in coords {
        let original = store.value(id).data()[index];
        store.value_mut(id).data_mut()[index] = original + step;
        let plus = eval(store)?;
        store.value_mut(id).data_mut()[index] = original - step;
        let minus = eval(store)?;
        store.value_mut(id).data_mut()[index] = original;
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = grads.get(id).data()[index];
        report.coords.push(CoordCheck {
            label: store.name(id).to_string(),
            index,
            analytic,
            numeric,
            rel_error: rel_error(analytic, numeric),
        });
    }
    Ok(report)
}

/// Checks the gradient of `f` with respect to every entry of every input.
pub fn check_inputs<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[TapeTensor<'t>]) -> Result<TapeTensor<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let leaves: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &leaves)?;
        let g = tape.backward(loss)?;
        leaves
            .iter()
            .zip(inputs)
            .map(|(l, t)| g.wrt(*l).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<_> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &leaves)?.item())
    };
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport::default();
    for (which, grad) in analytic.iter().enumerate() {
        for index in 0..grad.numel() {
            let original = work[which].data()[index];
            work[which].data_mut()[index] = original + step;
            let plus = eval(&work)?;
            work[which].data_mut()[index] = original - step;
            let minus = eval(&work)?;
            work[which].data_mut()[index] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[index];
            report.coords.push(CoordCheck {
                label: format!("input{which}"),
                index,
                analytic: a,
                numeric,
                rel_error: rel_error(a, numeric),
            });
        }
    }
    Ok(report)
}

/// Samples up to `per_param` distinct coordinates from every parameter
/// accepted by `filter`.
pub fn sample_coords(
    store: &ParamStore,
    per_param: usize,
    rng: &mut impl Rng,
    filter: impl Fn(&str) -> bool,
) -> Vec<(ParamId, usize)> {
    let mut coords = Vec::new();
    for (id, p) in store.iter() {
        if !filter(&p.name) {
            continue;
        }
        let n = p.value.numel();
        let k = per_param.min(n);
        let mut picks: Vec<usize> = sample(rng, n, k).into_iter().collect();
        picks.sort_unstable();
        coords.extend(picks.into_iter().map(|i| (id, i)));
    }
    coords
}
