use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check_axes(op: &'static str, axes: &[usize], rank: usize) -> Result<()> {
    if axes.is_empty() {
        return Err(Error::invalid(op, "empty axis list"));
    }
    for &a in axes {
        if a >= rank {
            return Err(Error::InvalidAxis { op, axis: a, rank });
        }
    }
    Ok(())
}

fn squeeze(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect()
}

impl<T: Scalar> Tape<'_, T> {
    pub fn sum(&self, x: &Var<T>, axes: &[usize], keepdim: bool) -> Result<Var<T>> {
        check_axes("sum", axes, x.rank())?;
        let kept = x.value.sum_axes_keepdim(axes)?;
        let kept_shape = kept.shape().to_vec();
        let out = if keepdim {
            kept
        } else {
            kept.reshape(squeeze(&kept_shape, axes))?
        };
        let in_shape = x.shape().to_vec();
        Ok(self.record(out, &[x], move |g, _| {
            let g = g.reshape(kept_shape.clone())?;
            let ones = Tensor::<T>::ones(in_shape.clone());
            Ok(vec![Some(ones.broadcast_zip(&g, |_, v| v)?)])
        }))
    }

    pub fn mean(&self, x: &Var<T>, axes: &[usize], keepdim: bool) -> Result<Var<T>> {
        let n: usize = axes.iter().map(|&a| x.shape().get(a).copied().unwrap_or(1)).product();
        let s = self.sum(x, axes, keepdim)?;
        Ok(self.mul_scalar(&s, 1.0 / n as f64))
    }

    pub fn sum_all(&self, x: &Var<T>) -> Var<T> {
        let out = Tensor::scalar(x.value.sum_all());
        let shape = x.shape().to_vec();
        self.record(out, &[x], move |g, _| {
            Ok(vec![Some(Tensor::full(shape.clone(), g.data()[0]))])
        })
    }

    pub fn mean_all(&self, x: &Var<T>) -> Var<T> {
        let n = x.value.numel().max(1);
        let s = self.sum_all(x);
        self.mul_scalar(&s, 1.0 / n as f64)
    }

    /// Maximum along one axis. The gradient goes to the first arg-max only.
    pub fn max(&self, x: &Var<T>, axis: usize, keepdim: bool) -> Result<Var<T>> {
        check_axes("max", &[axis], x.rank())?;
        let shape = x.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        if len == 0 {
            return Err(Error::invalid("max", "reduction over an empty axis"));
        }
        let src = x.value.data();
        let mut vals = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let (mut best, mut at) = (src[base], base);
                for l in 1..len {
                    let v = src[base + l * inner];
                    if v > best {
                        best = v;
                        at = base + l * inner;
                    }
                }
                vals.push(best);
                argmax.push(at);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        if !keepdim {
            out_shape.remove(axis);
        }
        let out = Tensor::new(out_shape, vals)?;
        let n = x.value.numel();
        Ok(self.record(out, &[x], move |g, _| {
            let mut gx = vec![T::zero(); n];
            for (gv, &at) in g.data().iter().zip(&argmax) {
                gx[at] += *gv;
            }
            Ok(vec![Some(Tensor::new(shape.clone(), gx)?)])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;

    #[test]
    fn sums_and_means() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(tape.sum_all(&x).value().item().unwrap(), 10.0);
        let rows = tape.sum(&x, &[1], false).unwrap();
        assert_eq!(rows.value().data(), &[3.0, 7.0]);
        let c = tape.constant(Tensor::full([3, 5], 2.5));
        let m = tape.mean(&c, &[1], true).unwrap();
        assert_eq!(m.shape(), &[3, 1]);
        assert!(m.value().data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn empty_axis_list_is_error() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones([2]));
        assert!(tape.sum(&x, &[], false).is_err());
        assert!(tape.sum(&x, &[1], false).is_err());
    }

    #[test]
    fn max_routes_gradient_to_argmax() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([2, 3], &[1.0, 5.0, 2.0, 7.0, -1.0, 0.0]).unwrap());
        let m = tape.max(&x, 1, false).unwrap();
        assert_eq!(m.value().data(), &[5.0, 7.0]);
        let loss = tape.sum_all(&m);
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn reduction_gradients() {
        let x = Tensor::<f64>::from_fn([2, 3, 4], |i| ((i * 7919) % 23) as f64 * 0.1 - 1.0);
        let err = check_gradient(&x, 1e-6, |tape, xv| {
            let a = tape.max(xv, 1, true)?;
            let b = tape.mean(xv, &[0, 2], true)?;
            let c = tape.add(&tape.mul(&a, &a)?, &b)?;
            let d = tape.sum(&tape.mul(xv, &c)?, &[2], false)?;
            Ok(tape.sum_all(&tape.mul(&d, &d)?))
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
