//! Central-difference gradient oracle.
//!
//! The oracle is deliberately independent of the tape: it only needs a
//! pure scalar function of the parameter store. Callers first populate
//! analytic gradients (one forward + backward), then hand the
//! value-only function here for comparison.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::{sc, Scalar};

/// Base floor for the denominator of the relative error, below which
/// analytic and numeric gradients are treated as matching zeros.
///
/// The effective floor also accounts for the roundoff of the central
/// difference itself: two function values of magnitude `|f|` carry
/// representation error `eps * |f|` each, so the difference quotient is
/// noisy below roughly `eps * |f| / h`. Gradients smaller than that
/// noise (relative to the tolerance) cannot be distinguished from it
/// by any finite-difference check and are floored instead of failed.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Per-parameter comparison result.
#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub pass: bool,
}

/// Outcome of a gradient check over a whole store.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub pass: bool,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries: Vec<ParamReport>,
}

impl GradCheckReport {
    fn empty() -> Self {
        GradCheckReport {
            pass: true,
            max_rel_err: 0.0,
            worst_param: String::new(),
            worst_index: 0,
            entries: Vec::new(),
        }
    }
}

/// Compares the analytic gradients stored in `store` against central
/// differences of `f` with step `h`; passes iff every relative error is
/// strictly below `tol`.
///
/// `f` must be pure and deterministic; this is probed by evaluating it
/// twice up front and requiring bit-identical results.
pub fn grad_check<T, F>(store: &mut ParamStore<T>, mut f: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>) -> Result<T>,
{
    let base = f(store)?;
    let again = f(store)?;
    if base != again {
        return Err(Error::Oracle(
            "function is not deterministic: two evaluations at the same point differ".into(),
        ));
    }

    let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
    let mut report = GradCheckReport::empty();
    let step = sc::<T>(h);
    let fd_noise =
        4.0 * T::epsilon().to_f64().unwrap() * base.to_f64().unwrap().abs().max(1.0) / h;
    let floor = REL_ERR_FLOOR.max(fd_noise / tol.max(f64::MIN_POSITIVE));

    for name in names {
        let analytic: Vec<f64> = store
            .grad(&name)?
            .data()
            .iter()
            .map(|g| g.to_f64().unwrap())
            .collect();
        let mut entry = ParamReport {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            pass: true,
        };
        for i in 0..analytic.len() {
            let numeric = {
                let mut value = store.get(&name)?.clone();
                let orig = value.data()[i];
                value.data_mut()[i] = orig + step;
                store.set_value(&name, value.clone())?;
                let plus = f(store)?.to_f64().unwrap();
                value.data_mut()[i] = orig - step;
                store.set_value(&name, value.clone())?;
                let minus = f(store)?.to_f64().unwrap();
                value.data_mut()[i] = orig;
                store.set_value(&name, value)?;
                (plus - minus) / (2.0 * h)
            };
            let a = analytic[i];
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = (a - numeric).abs() / denom;
            if rel > entry.max_rel_err {
                entry.max_rel_err = rel;
                entry.worst_index = i;
            }
        }
        entry.pass = entry.max_rel_err < tol;
        if entry.max_rel_err > report.max_rel_err || report.worst_param.is_empty() {
            report.max_rel_err = report.max_rel_err.max(entry.max_rel_err);
            report.worst_param = entry.name.clone();
            report.worst_index = entry.worst_index;
        }
        report.pass &= entry.pass;
        report.entries.push(entry);
    }
    Ok(report)
}
