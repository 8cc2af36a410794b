//! Central finite differences, the oracle every backward rule is checked against.

use std::cell::RefCell;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i` of `x`.
pub fn finite_difference_grad<T: Scalar>(
    f: impl Fn(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    h: T,
) -> Result<Tensor<T>> {
    let all: Vec<usize> = (0..x.numel()).collect();
    let partials = finite_difference_at(&f, x, &all, h)?;
    Tensor::new(x.shape().to_vec(), partials)
}

/// Central differences for a subset of flat indices only.
pub fn finite_difference_at<T: Scalar>(
    f: impl Fn(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    indices: &[usize],
    h: T,
) -> Result<Vec<T>> {
    let two_h = h + h;
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / two_h);
    }
    Ok(out)
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, zero when both vanish.
pub fn relative_error<T: Scalar>(analytic: &[T], numeric: &[T]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &n) in analytic.iter().zip(numeric) {
        let (a, n) = (a.as_f64(), n.as_f64());
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
    }
    let denom = na.sqrt().max(nn.sqrt());
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

/// Compares `backward` against finite differences for a function of one
/// input tensor; returns the relative error.
pub fn check_gradient<T: Scalar>(
    x: &Tensor<T>,
    h: f64,
    build: impl Fn(&Tape<'static, T>, &Var<T>) -> Result<Var<T>>,
) -> Result<f64> {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = build(&tape, &xv)?;
    let grads = tape.backward(&loss)?;
    let analytic = grads
        .wrt(&xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    let numeric = finite_difference_grad(
        |probe| {
            let tape = Tape::new();
            let xv = tape.constant(probe.clone());
            build(&tape, &xv)?.value().item()
        },
        x,
        T::of(h),
    )?;
    Ok(relative_error(analytic.data(), numeric.data()))
}

/// [`check_gradient`] for a function that also reads parameters from `store`.
pub fn check_input_gradient<T: Scalar>(
    store: &ParamStore<T>,
    x: &Tensor<T>,
    h: f64,
    build: impl for<'p> Fn(&Tape<'p, T>, &Var<T>) -> Result<Var<T>>,
) -> Result<f64> {
    let tape = Tape::with_params(store);
    let xv = tape.leaf(x.clone());
    let loss = build(&tape, &xv)?;
    let grads = tape.backward(&loss)?;
    let analytic = grads
        .wrt(&xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    let numeric = finite_difference_grad(
        |probe| {
            let tape = Tape::inference(store);
            let xv = tape.constant(probe.clone());
            build(&tape, &xv)?.value().item()
        },
        x,
        T::of(h),
    )?;
    Ok(relative_error(analytic.data(), numeric.data()))
}

/// Joint check over scattered `(parameter, flat index)` scalars; the
/// relative error is taken over the whole slice.
pub fn check_param_slice<T: Scalar>(
    store: &ParamStore<T>,
    slice: &[(ParamId, usize)],
    h: f64,
    build: impl for<'p> Fn(&Tape<'p, T>) -> Result<Var<T>>,
) -> Result<f64> {
    let tape = Tape::with_params(store);
    let loss = build(&tape)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<T> = slice
        .iter()
        .map(|&(id, i)| grads.param(id).map_or(T::zero(), |g| g.data()[i]))
        .collect();
    let mut scratch = store.clone();
    let mut numeric = Vec::with_capacity(slice.len());
    let h = T::of(h);
    for &(id, i) in slice {
        let orig = scratch.value(id).data()[i];
        let mut eval = |v: T| -> Result<T> {
            scratch.value_mut(id).data_mut()[i] = v;
            let tape = Tape::inference(&scratch);
            build(&tape)?.value().item()
        };
        let plus = eval(orig + h)?;
        let minus = eval(orig - h)?;
        eval(orig)?;
        numeric.push((plus - minus) / (h + h));
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Same check for one parameter of a store, optionally restricted to a
/// subset of its flat indices.
pub fn check_param_gradient<T: Scalar>(
    store: &ParamStore<T>,
    id: ParamId,
    indices: Option<&[usize]>,
    h: f64,
    build: impl for<'p> Fn(&Tape<'p, T>) -> Result<Var<T>>,
) -> Result<f64> {
    let tape = Tape::with_params(store);
    let loss = build(&tape)?;
    let grads = tape.backward(&loss)?;
    let value = store.value(id);
    let analytic = grads
        .param(id)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(value.shape().to_vec()));
    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..value.numel()).collect();
            &all
        }
    };
    let scratch = RefCell::new(store.clone());
    let numeric = finite_difference_at(
        |probe| {
            scratch.borrow_mut().set_value(id, probe.clone())?;
            let store = scratch.borrow();
            let tape = Tape::inference(&store);
            let loss = build(&tape)?;
            loss.value().item()
        },
        value,
        indices,
        T::of(h),
    )?;
    let picked: Vec<T> = indices.iter().map(|&i| analytic.data()[i]).collect();
    Ok(relative_error(&picked, &numeric))
}
