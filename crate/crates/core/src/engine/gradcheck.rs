//! Central-difference gradient checking.
//!
//! Quantized graphs are piecewise constant, so a naive finite difference of
//! the real forward is zero almost everywhere. The check instead
//! differentiates the graph with every rounding residual frozen at the base
//! point ([`RoundingPass::Frozen`]): same value at the base point, smooth
//! around it, and its exact derivative is the straight-through gradient.
//! Elements whose perturbation moves any relu mask, clip region, code or
//! pooling winner are skipped.

use super::graph::{Graph, RoundingPass, Var};
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Absolute differences below this count as agreement, regardless of scale.
const ABS_FLOOR: f64 = 1e-10;

pub fn relative_error(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff < ABS_FLOOR {
        return 0.0;
    }
    diff / a.abs().max(b.abs())
}

/// Compares autodiff against central differences for every element of
/// `param`. `build` records the forward pass into the graph it is handed and
/// returns the scalar loss; it must be deterministic.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    param: ParamId,
    epsilon: f64,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    let mut base = Graph::new();
    let loss = build(store, &mut base)?;
    let grads = base.backward(loss)?;
    let mut analytic = vec![0.0; store.value(param).numel()];
    for (var, id) in base.param_leaves() {
        if id == param {
            if let Some(g) = grads.get(var) {
                analytic.iter_mut().zip(g).for_each(|(a, v)| *a += v);
            }
        }
    }
    let residuals = base.rounding_residuals();
    let signature = base.kink_signature();

    let mut eval = |store: &ParamStore| -> Result<(f64, Vec<i64>)> {
        let mut g = Graph::with_rounding(RoundingPass::Frozen(residuals.clone().into()));
        let l = build(store, &mut g)?;
        Ok((g.value(l).item(), g.kink_signature()))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for i in 0..analytic.len() {
        let orig = store.value(param).data()[i];
        let mut at = |offset: f64, store: &mut ParamStore| -> Result<(f64, Vec<i64>)> {
            store.get_mut(param).value.data_mut()[i] = orig + offset;
            let r = eval(store);
            store.get_mut(param).value.data_mut()[i] = orig;
            r
        };
        let (plus, sig_p) = at(epsilon, store)?;
        let (minus, sig_m) = at(-epsilon, store)?;
        let (_, sig_p2) = at(2.0 * epsilon, store)?;
        let (_, sig_m2) = at(-2.0 * epsilon, store)?;
        if [&sig_p, &sig_m, &sig_p2, &sig_m2].iter().any(|s| **s != signature) {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        report.max_rel_error = report.max_rel_error.max(relative_error(analytic[i], numeric));
        report.checked += 1;
    }
    if report.checked == 0 {
        return Err(Error::Inconclusive(report.skipped));
    }
    Ok(report)
}
