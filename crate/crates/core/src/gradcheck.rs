//! Central-difference gradient verification.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function against central
/// differences and returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<T>
where
    T: Real,
    F: for<'t> Fn(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    let analytic = {
        let tape = Tape::new();
        let input = tape.leaf(x.clone());
        let out = f(&tape, input)?;
        if out.value().len() != 1 {
            return Err(Error::invalid("grad_check", "function must be scalar-valued"));
        }
        tape.backward(out)?.get_or_zeros(input)
    };
    let eval = |probe: Tensor<T>| -> Result<T> {
        let tape = Tape::new();
        let input = tape.constant(probe);
        let v = f(&tape, input)?.value().item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };
    let two_eps = eps + eps;
    let mut worst = T::zero();
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / two_eps;
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(T::one());
        worst = worst.max(err);
    }
    Ok(worst)
}

/// One registered gradient check.
pub struct GradCase {
    pub name: &'static str,
    pub tolerance: f64,
    pub run: fn() -> Result<f64>,
}

/// Outcome of a registered check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Runs every registered case.
pub fn run_all() -> Result<Vec<GradReport>> {
    crate::nn::gradcases::registry()
        .into_iter()
        .map(|case| {
            Ok(GradReport {
                name: case.name,
                max_rel_error: (case.run)()?,
                tolerance: case.tolerance,
            })
        })
        .collect()
}
