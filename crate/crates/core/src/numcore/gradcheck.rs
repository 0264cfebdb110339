//! Central finite-difference gradient checking.

use alloc::vec::Vec;

use super::params::{ParamId, Params};
use super::tape::{Tape, Var};
use crate::error::Result;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor in [`relative_error`]; keeps entries whose true
/// gradient is zero from dominating with pure rounding noise.
pub const REL_ERR_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Outcome of comparing tape gradients to finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub entries: usize,
}

/// Compares [`Tape::backward`] with central differences for every entry of
/// the chosen parameters (all parameters when `only` is `None`).
///
/// `forward` must be a pure function of the parameter values: any
/// randomness has to be re-seeded inside it.
pub fn check_gradients<F>(params: &mut Params, only: Option<&[ParamId]>, mut forward: F) -> Result<GradCheck>
where
    F: FnMut(&mut Tape, &Params) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = forward(&mut tape, params)?;
    tape.backward(loss, params)?;
    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => params.iter().map(|(id, _)| id).collect(),
    };
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| params.grad(id).data().to_vec()).collect();

    let mut eval = |params: &Params| -> Result<f64> {
        let mut t = Tape::new();
        let l = forward(&mut t, params)?;
        Ok(t.value(l).item())
    };

    let mut worst = 0.0f64;
    let mut entries = 0;
    for (k, &id) in ids.iter().enumerate() {
        for i in 0..analytic[k].len() {
            let orig = params.value(id).data()[i];
            params.get_mut(id).value.data_mut()[i] = orig + FD_STEP;
            let up = eval(params)?;
            params.get_mut(id).value.data_mut()[i] = orig - FD_STEP;
            let down = eval(params)?;
            params.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[k][i], numeric));
            entries += 1;
        }
    }
    Ok(GradCheck { max_rel_err: worst, entries })
}
