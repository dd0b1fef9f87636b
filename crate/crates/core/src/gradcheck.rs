//! Central-difference gradient verification.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::math::Real;
use crate::params::{ParamId, ParamStore};

/// Below this magnitude both gradients count as zero and the error is absolute.
pub const ABS_FLOOR: Real = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: Real,
    pub max_abs_error: Real,
    /// Location of the worst element, as `(parameter name, flat index)`.
    pub worst: Option<(String, usize)>,
    pub tolerance: Real,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    fn record(&mut self, name: &str, idx: usize, analytic: Real, numeric: Real) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
        self.checked += 1;
        self.max_abs_error = self.max_abs_error.max(abs);
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some((name.to_string(), idx));
        }
    }

    fn new(tolerance: Real) -> Self {
        Self {
            checked: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst: None,
            tolerance,
        }
    }
}

/// Compares `analytic` against the central difference of `f` at `x`.
pub fn finite_difference_check(
    mut f: impl FnMut(&[Real]) -> Result<Real>,
    x: &[Real],
    analytic: &[Real],
    epsilon: Real,
    tolerance: Real,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::new(tolerance);
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + epsilon;
        let up = f(&probe)?;
        probe[i] = x[i] - epsilon;
        let down = f(&probe)?;
        probe[i] = x[i];
        report.record("x", i, analytic[i], (up - down) / (2.0 * epsilon));
    }
    Ok(report)
}

/// Checks tape gradients of `loss_fn` for the listed parameters of `store`.
///
/// `loss_fn` must rebuild the same computation from the store each call.
pub fn check_params(
    store: &mut ParamStore,
    ids: &[ParamId],
    mut loss_fn: impl FnMut(&mut Tape, &ParamStore) -> Result<Var>,
    epsilon: Real,
    tolerance: Real,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    for &id in ids {
        tape.param(store, id);
    }
    let loss = loss_fn(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<(ParamId, Vec<Real>)> = ids
        .iter()
        .map(|&id| {
            let n = store.get(id).numel();
            let g = grads
                .param(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| alloc::vec![0.0; n]);
            (id, g)
        })
        .collect();

    let mut eval = |store: &ParamStore| -> Result<Real> {
        let mut t = Tape::new();
        let l = loss_fn(&mut t, store)?;
        Ok(t.item(l))
    };

    let mut report = GradCheckReport::new(tolerance);
    for (id, g) in analytic {
        let name = store.name(id).to_string();
        for i in 0..g.len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + epsilon;
            let up = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - epsilon;
            let down = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            report.record(&name, i, g[i], (up - down) / (2.0 * epsilon));
        }
    }
    Ok(report)
}
