//! Central finite-difference verification of reverse-mode gradients.
//!
//! Checks run in 64-bit precision: the same graph-building closures are
//! evaluated on an `f64` tape, which keeps difference quotients far below
//! the tolerances being tested.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Outcome of comparing an analytic gradient against finite differences.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl Comparison {
    pub fn max_relative_error(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, f64::max)
    }
}

fn scalar_of(tape: &Tape<'_, f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::dim(format!("gradient check needs a scalar function, got {:?}", t.shape())));
    }
    Ok(t.data()[0])
}

/// Gradient of `f` with respect to its input `x`, analytic and numeric.
pub fn compare_input_gradient<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<Comparison>
where
    F: Fn(&Tape<'_, f64>, Var) -> Result<Var>,
{
    let store = ParamStore::<f64>::new();
    let analytic = {
        let tape = Tape::new(&store);
        let xv = tape.input(x.clone(), true);
        let y = f(&tape, xv)?;
        scalar_of(&tape, y)?;
        let grads = tape.backward(y)?;
        grads.get(xv).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; x.numel()])
    };
    let eval = |t: Tensor<f64>| -> Result<f64> {
        let tape = Tape::inference(&store);
        let xv = tape.input(t, false);
        let y = f(&tape, xv)?;
        scalar_of(&tape, y)
    };
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }
    Ok(Comparison { analytic, numeric })
}

/// Maximum relative error between the autodiff gradient of a scalar
/// function and its central finite-difference estimate.
pub fn gradient_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tape<'_, f64>, Var) -> Result<Var>,
{
    Ok(compare_input_gradient(f, x, eps)?.max_relative_error())
}

/// Compares parameter gradients of `f` at selected `(parameter, element)`
/// probes.
pub fn compare_param_gradients<F>(
    f: F,
    store: &mut ParamStore<f64>,
    probes: &[(ParamId, usize)],
    eps: f64,
) -> Result<Comparison>
where
    F: Fn(&Tape<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let tape = Tape::new(store);
        let y = f(&tape)?;
        scalar_of(&tape, y)?;
        let grads = tape.backward(y)?;
        probes
            .iter()
            .map(|&(id, i)| grads.param(id).map(|g| g.data()[i]).unwrap_or(0.0))
            .collect()
    };
    let mut numeric = Vec::with_capacity(probes.len());
    for &(id, i) in probes {
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + eps;
        let fp = {
            let tape = Tape::inference(store);
            let y = f(&tape)?;
            scalar_of(&tape, y)?
        };
        store.get_mut(id).data_mut()[i] = orig - eps;
        let fm = {
            let tape = Tape::inference(store);
            let y = f(&tape)?;
            scalar_of(&tape, y)?
        };
        store.get_mut(id).data_mut()[i] = orig;
        numeric.push((fp - fm) / (2.0 * eps));
    }
    Ok(Comparison { analytic, numeric })
}
