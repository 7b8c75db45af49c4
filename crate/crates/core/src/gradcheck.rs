//! Central finite-difference verification of analytic gradients.
//!
//! `check_param_grads` perturbs a deterministic subsample of coordinates in
//! each listed parameter, re-evaluates the given loss closure, and compares
//! the central difference against the analytic gradient. The returned figure
//! is the maximum of `|analytic - numeric| / max(|analytic|, |numeric|, 0.1)`,
//! i.e. relative error with a floor that turns into an absolute tolerance for
//! near-zero coordinates (float32 forward noise makes a pure relative test
//! meaningless there).

use crate::graph::{Gradients, ParamId, ParamStore};

/// Max coordinates probed per parameter tensor.
const COORDS_PER_TENSOR: usize = 6;

/// Default floor for the relative-error denominator.
const REL_FLOOR: f32 = 0.1;

pub fn check_param_grads(
    store: &mut ParamStore,
    ids: &[ParamId],
    analytic: &Gradients,
    eps: f32,
    eval: impl FnMut(&ParamStore) -> f32,
) -> f32 {
    check_param_grads_floored(store, ids, analytic, eps, REL_FLOOR, eval)
}

/// Like [`check_param_grads`] with an explicit denominator floor.
///
/// The floor is the knob that trades coverage of small-gradient coordinates
/// against float32 forward noise: a central difference of an f32 forward
/// carries an absolute error of roughly `4 ulp(loss) / (2 eps)` regardless of
/// the true gradient, so coordinates below the floor are effectively held to
/// that absolute tolerance instead of a meaningless pure ratio.
pub fn check_param_grads_floored(
    store: &mut ParamStore,
    ids: &[ParamId],
    analytic: &Gradients,
    eps: f32,
    floor: f32,
    mut eval: impl FnMut(&ParamStore) -> f32,
) -> f32 {
    let mut max_rel = 0.0f32;
    for &id in ids {
        let numel = store.get(id).numel();
        let stride = (numel / COORDS_PER_TENSOR).max(1);
        let mut k = 0;
        while k < numel {
            let numeric = richardson_diff(store, id, k, eps, &mut eval);
            let a = analytic.get(id).map(|g| g.data()[k]).unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > max_rel {
                max_rel = rel;
            }
            k += stride;
        }
    }
    max_rel
}

/// Central difference at `eps` and `eps/2`, Richardson-extrapolated to cancel
/// the O(eps^2) truncation term. The residual-stream bias directions of a
/// normalized readout carry enough curvature that a single central difference
/// at a noise-safe step is visibly biased.
fn richardson_diff(
    store: &mut ParamStore,
    id: ParamId,
    k: usize,
    eps: f32,
    eval: &mut impl FnMut(&ParamStore) -> f32,
) -> f32 {
    let orig = store.get(id).data()[k];
    let mut probe = |delta: f32| {
        store.get_mut(id).data_mut()[k] = orig + delta;
        let v = eval(store);
        store.get_mut(id).data_mut()[k] = orig;
        v
    };
    let d_full = (probe(eps) - probe(-eps)) / (2.0 * eps);
    let d_half = (probe(eps / 2.0) - probe(-eps / 2.0)) / eps;
    (4.0 * d_half - d_full) / 3.0
}
