use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

impl<T: Scalar> Tape<'_, T> {
    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value.broadcast_zip(&b.value, |x, y| x + y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.record(out, &[a, b], move |g, needs| {
            Ok(vec![
                needs[0].then(|| g.sum_to_shape(&sa)).transpose()?,
                needs[1].then(|| g.sum_to_shape(&sb)).transpose()?,
            ])
        }))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value.broadcast_zip(&b.value, |x, y| x - y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.record(out, &[a, b], move |g, needs| {
            Ok(vec![
                needs[0].then(|| g.sum_to_shape(&sa)).transpose()?,
                needs[1]
                    .then(|| g.map(|v| -v).sum_to_shape(&sb))
                    .transpose()?,
            ])
        }))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value.broadcast_zip(&b.value, |x, y| x * y)?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.record(out, &[a, b], move |g, needs| {
            let ga = if needs[0] {
                Some(g.broadcast_zip(&bv, |x, y| x * y)?.sum_to_shape(av.shape())?)
            } else {
                None
            };
            let gb = if needs[1] {
                Some(g.broadcast_zip(&av, |x, y| x * y)?.sum_to_shape(bv.shape())?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }))
    }

    /// Elementwise quotient; an exact zero anywhere in `b` is an error.
    pub fn div(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        if b.value.data().iter().any(|v| *v == T::zero()) {
            return Err(Error::DivisionByZero);
        }
        let out = a.value.broadcast_zip(&b.value, |x, y| x / y)?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.record(out, &[a, b], move |g, needs| {
            let ga = if needs[0] {
                Some(g.broadcast_zip(&bv, |x, y| x / y)?.sum_to_shape(av.shape())?)
            } else {
                None
            };
            let gb = if needs[1] {
                // -g·a / b²
                let ga_over = g.broadcast_zip(&av, |x, y| x * y)?;
                Some(
                    ga_over
                        .broadcast_zip(&bv, |x, y| -x / (y * y))?
                        .sum_to_shape(bv.shape())?,
                )
            } else {
                None
            };
            Ok(vec![ga, gb])
        }))
    }

    pub fn neg(&self, a: &Var<T>) -> Var<T> {
        self.mul_scalar(a, -1.0)
    }

    pub fn add_scalar(&self, a: &Var<T>, s: f64) -> Var<T> {
        let s = T::of(s);
        let out = a.value.map(|x| x + s);
        self.record(out, &[a], |g, _| Ok(vec![Some(g.clone())]))
    }

    pub fn mul_scalar(&self, a: &Var<T>, s: f64) -> Var<T> {
        let s = T::of(s);
        let out = a.value.map(|x| x * s);
        self.record(out, &[a], move |g, _| Ok(vec![Some(g.map(|v| v * s))]))
    }

    pub fn pow_scalar(&self, a: &Var<T>, p: f64) -> Var<T> {
        let p = T::of(p);
        let out = a.value.map(|x| x.powf(p));
        let av = a.value.clone();
        self.record(out, &[a], move |g, _| {
            Ok(vec![Some(g.zip_map(&av, |gv, x| gv * p * x.powf(p - T::one()))?)])
        })
    }

    pub fn exp(&self, a: &Var<T>) -> Var<T> {
        let out = a.value.map(T::exp);
        let saved = out.clone();
        self.record(out, &[a], move |g, _| Ok(vec![Some(g.zip_map(&saved, |gv, y| gv * y)?)]))
    }

    /// Natural log; non-positive inputs are rejected.
    pub fn log(&self, a: &Var<T>) -> Result<Var<T>> {
        if a.value.data().iter().any(|v| *v <= T::zero()) {
            return Err(Error::invalid("log", "non-positive input"));
        }
        let out = a.value.map(T::ln);
        let av = a.value.clone();
        Ok(self.record(out, &[a], move |g, _| {
            Ok(vec![Some(g.zip_map(&av, |gv, x| gv / x)?)])
        }))
    }

    pub fn sqrt(&self, a: &Var<T>) -> Var<T> {
        let out = a.value.map(T::sqrt);
        let saved = out.clone();
        let half = T::of(0.5);
        self.record(out, &[a], move |g, _| {
            Ok(vec![Some(g.zip_map(&saved, |gv, y| gv * half / y)?)])
        })
    }

    /// Clamps into `[lo, hi]`; the gradient is passed only inside the range.
    pub fn clamp(&self, a: &Var<T>, lo: f64, hi: f64) -> Var<T> {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let out = a.value.map(|x| x.max(lo).min(hi));
        let av = a.value.clone();
        self.record(out, &[a], move |g, _| {
            Ok(vec![Some(g.zip_map(&av, |gv, x| {
                if x >= lo && x <= hi {
                    gv
                } else {
                    T::zero()
                }
            })?)])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;
    use crate::tensor::Tensor;

    #[test]
    fn add_and_annihilator() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::from_f64([2], &[3.0, 4.0]).unwrap());
        assert_eq!(tape.add(&a, &b).unwrap().value().data(), &[4.0, 6.0]);
        let z = tape.mul_scalar(&a, 0.0);
        assert_eq!(z.value(), &Tensor::zeros([2]));
    }

    #[test]
    fn division_by_exact_zero_is_error() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::ones([2]));
        let b = tape.constant(Tensor::from_f64([2], &[1.0, 0.0]).unwrap());
        assert!(matches!(tape.div(&a, &b), Err(Error::DivisionByZero)));
    }

    #[test]
    fn non_broadcastable_is_error() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::ones([2, 3]));
        let b = tape.constant(Tensor::ones([2]));
        assert!(matches!(tape.add(&a, &b), Err(Error::Broadcast { .. })));
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let x = Tensor::<f64>::from_fn([2, 3], |i| 0.3 + 0.25 * i as f64);
        let y = Tensor::<f64>::from_fn([3], |i| 1.5 - 0.4 * i as f64);
        let err = check_gradient(&x, 1e-6, |tape, xv| {
            let yv = tape.constant(y.clone());
            let a = tape.mul(xv, &yv)?;
            let b = tape.div(&a, &tape.add_scalar(xv, 2.0))?;
            let c = tape.sub(&tape.exp(&b), &tape.log(xv)?)?;
            let d = tape.pow_scalar(&tape.sqrt(xv), 3.0);
            Ok(tape.sum_all(&tape.add(&c, &d)?))
        })
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn broadcast_operand_gradient() {
        let x = Tensor::<f64>::from_fn([4], |i| 0.5 + i as f64);
        let big = Tensor::<f64>::from_fn([3, 4], |i| (i as f64 * 0.7).sin());
        let err = check_gradient(&x, 1e-6, |tape, xv| {
            let b = tape.constant(big.clone());
            let p = tape.mul(&b, xv)?;
            Ok(tape.sum_all(&tape.mul(&p, xv)?))
        })
        .unwrap();
        assert!(err < 1e-6);
    }
}
