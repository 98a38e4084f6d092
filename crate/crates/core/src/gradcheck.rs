//! Central finite-difference verification of tape gradients.

use std::fmt;

use crate::tensor::{ParamStore, Precision, Tape, Var};
use crate::{Error, Result};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative error per parameter tensor.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error, so entries whose true gradient
/// is (numerically) zero are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub checks: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_err < self.tolerance)
    }

    pub fn failing(&self) -> impl Iterator<Item = &ParamCheck> {
        self.checks.iter().filter(|c| c.max_rel_err >= self.tolerance)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let mark = if c.max_rel_err < self.tolerance { "ok  " } else { "FAIL" };
            writeln!(
                f,
                "{mark} {:<40} n={:<7} max_rel_err={:.3e} (at {})",
                c.name, c.numel, c.max_rel_err, c.worst_index
            )?;
        }
        Ok(())
    }
}

fn eval<F>(store: &ParamStore, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new(store.precision());
    let loss = loss_fn(&mut tape, store)?;
    Ok(tape.value(loss).item())
}

/// Compares backward-pass gradients of every trainable parameter with central
/// differences of the scalar returned by `loss_fn`. Needs a double-precision
/// store; parameter values are restored afterwards.
pub fn check_gradients<F>(store: &mut ParamStore, mut loss_fn: F) -> Result<GradReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    if store.precision() != Precision::Double {
        return Err(Error::Config("gradient check requires double precision".into()));
    }
    store.zero_grad();
    let mut tape = Tape::new(Precision::Double);
    let loss = loss_fn(&mut tape, store)?;
    tape.backward(loss, store)?;

    let names: Vec<String> = store
        .names()
        .filter(|n| store.is_trainable(n))
        .map(str::to_string)
        .collect();
    let mut checks = Vec::with_capacity(names.len());
    for name in names {
        let analytic = store.get(&name)?.grad().expect("trainable").to_vec();
        let original = store.get(&name)?.data().to_vec();
        let mut worst = (0.0, 0);
        for (i, &a) in analytic.iter().enumerate() {
            store.set_scalar(&name, i, original[i] + FD_STEP)?;
            let plus = eval(store, &mut loss_fn)?;
            store.set_scalar(&name, i, original[i] - FD_STEP)?;
            let minus = eval(store, &mut loss_fn)?;
            store.set_scalar(&name, i, original[i])?;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(a, numeric);
            if err > worst.0 || err.is_nan() {
                worst = (err, i);
            }
        }
        checks.push(ParamCheck {
            numel: analytic.len(),
            name,
            max_rel_err: worst.0,
            worst_index: worst.1,
        });
    }
    store.zero_grad();
    Ok(GradReport {
        checks,
        tolerance: GRAD_TOLERANCE,
    })
}
