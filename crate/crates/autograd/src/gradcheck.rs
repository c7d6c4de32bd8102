//! Central finite-difference checks against tape gradients.

use crate::params::{ParamId, ParamStore};

/// One probed coordinate.
#[derive(Clone, Debug)]
pub struct Probe {
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    /// `|a − n| / max(|a|, |n|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs()).max(floor);
        (self.analytic - self.numeric).abs() / denom
    }
}

/// `(f(θ + h) − f(θ − h)) / 2h` for a single coordinate; the store is
/// restored before returning.
pub fn central_difference<F>(
    store: &mut ParamStore,
    param: ParamId,
    index: usize,
    step: f64,
    mut f: F,
) -> f64
where
    F: FnMut(&ParamStore) -> f64,
{
    let original = store.get(param).data()[index];
    store.get_mut(param).data_mut()[index] = original + step;
    let plus = f(store);
    store.get_mut(param).data_mut()[index] = original - step;
    let minus = f(store);
    store.get_mut(param).data_mut()[index] = original;
    (plus - minus) / (2.0 * step)
}

/// Compares analytic gradients with central differences at the given
/// coordinates.
pub fn check<F>(
    store: &mut ParamStore,
    analytic: &[Option<crate::Tensor>],
    coords: &[(ParamId, usize)],
    step: f64,
    mut f: F,
) -> Vec<Probe>
where
    F: FnMut(&ParamStore) -> f64,
{
    coords
        .iter()
        .map(|&(param, index)| {
            let a = analytic[param.index()]
                .as_ref()
                .map_or(0.0, |g| g.data()[index]);
            let n = central_difference(store, param, index, step, &mut f);
            Probe {
                param,
                index,
                analytic: a,
                numeric: n,
            }
        })
        .collect()
}
