use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    // split by sign so exp never overflows
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<'_, T> {
    pub fn sigmoid(&self, x: &Var<T>) -> Var<T> {
        let out = x.value().map(sigmoid_scalar);
        let saved = out.clone();
        self.record(out, &[x], move |g, _| {
            Ok(vec![Some(g.zip_map(&saved, |gv, y| gv * y * (T::one() - y))?)])
        })
    }

    pub fn gelu(&self, x: &Var<T>) -> Var<T> {
        let out = x.value().map(|v| T::of(gelu_scalar(v.as_f64())));
        let xv = x.value().clone();
        self.record(out, &[x], move |g, _| {
            Ok(vec![Some(g.zip_map(&xv, |gv, v| gv * T::of(gelu_derivative(v.as_f64())))?)])
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: &Var<T>) -> Result<Var<T>> {
        let n = *x.shape().last().unwrap_or(&1);
        let mut out = x.value().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let saved = out.clone();
        Ok(self.record(out, &[x], move |g, _| {
            let mut gx = g.to_vec();
            for (grow, yrow) in gx.chunks_mut(n.max(1)).zip(saved.data().chunks(n.max(1))) {
                let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                for (gv, &y) in grow.iter_mut().zip(yrow) {
                    *gv = y * (*gv - dot);
                }
            }
            Ok(vec![Some(Tensor::new(saved.shape().to_vec(), gx)?)])
        }))
    }
}
