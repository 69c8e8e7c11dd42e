//! Central finite-difference gradient checker.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Denominator floor for the relative error.
pub const DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

fn eval_loss<S: Scalar>(
    store: &ParamStore<S>,
    f: &mut impl FnMut(&mut Tape<S>, &ParamStore<S>) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let v = tape.value(loss).item().f64();
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Compares analytic gradients of the scalar built by `f` against
/// `(f(θ+h) − f(θ−h)) / 2h` for every element of the parameters in `ids`
/// (all trainable parameters when `ids` is `None`).
///
/// Existing gradients in `store` are cleared. Returns the worst relative
/// error `|g_a − g_n| / max(|g_a|, |g_n|, 1e-8)`.
pub fn finite_diff_check<S: Scalar>(
    store: &mut ParamStore<S>,
    ids: Option<&[ParamId]>,
    h: f64,
    mut f: impl FnMut(&mut Tape<S>, &ParamStore<S>) -> Result<Var>,
) -> Result<GradCheckReport> {
    if h <= 0.0 {
        return Err(Error::Contract("finite-difference step must be positive".into()));
    }
    let ids: Vec<ParamId> = match ids {
        Some(ids) => ids.to_vec(),
        None => (0..store.len()).filter(|&i| store.get(i).trainable).collect(),
    };

    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    if !tape.value(loss).item().is_finite() {
        return Err(Error::Evaluation("non-finite loss".into()));
    }
    tape.backward(loss, store)?;
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for id in ids {
        let analytic: Vec<f64> = store.get(id).grad.data().iter().map(|g| g.f64()).collect();
        for (i, &ga) in analytic.iter().enumerate() {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = S::of(orig.f64() + h);
            let up = eval_loss(store, &mut f);
            store.get_mut(id).value.data_mut()[i] = S::of(orig.f64() - h);
            let down = eval_loss(store, &mut f);
            store.get_mut(id).value.data_mut()[i] = orig;
            let gn = (up? - down?) / (2.0 * h);
            let rel = (ga - gn).abs() / ga.abs().max(gn.abs()).max(DENOM_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = rel.max(report.max_rel_err);
                if rel >= report.max_rel_err {
                    report.worst_param = store.get(id).name.clone();
                    report.worst_index = i;
                }
            }
        }
    }
    Ok(report)
}
