use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Tape<'_, T> {
    /// Batched matrix product `[.., M, K] @ [.., K, N]` with broadcast batch axes.
    ///
    /// Backward: dA = dC·Bᵀ, dB = Aᵀ·dC, each summed back over broadcast axes.
    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value.matmul(&b.value)?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.record(out, &[a, b], move |g, needs| {
            let ga = if needs[0] {
                Some(g.matmul_t(false, &bv, true)?.sum_to_shape(av.shape())?)
            } else {
                None
            };
            let gb = if needs[1] {
                Some(weight_grad(&av, g, bv.shape())?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }))
    }

    /// `a @ bᵀ` over the last two axes.
    pub fn matmul_bt(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value.matmul_t(false, &b.value, true)?;
        let (av, bv) = (a.value.clone(), b.value.clone());
        Ok(self.record(out, &[a, b], move |g, needs| {
            let ga = if needs[0] {
                Some(g.matmul(&bv)?.sum_to_shape(av.shape())?)
            } else {
                None
            };
            let gb = if needs[1] {
                Some(g.matmul_t(true, &av, false)?.sum_to_shape(bv.shape())?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }))
    }

    /// `x @ weight + bias` over the last axis of `x`; `weight` is `[in, out]`.
    pub fn linear(&self, x: &Var<T>, weight: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add(&y, b),
            None => Ok(y),
        }
    }
}

/// Aᵀ·dC reduced to `b_shape`; a rank-2 right operand takes a single GEMM
/// over the flattened batch.
fn weight_grad<T: Scalar>(a: &Tensor<T>, g: &Tensor<T>, b_shape: &[usize]) -> Result<Tensor<T>> {
    if b_shape.len() == 2 && a.rank() > 2 {
        let k = a.dim(a.rank() - 1);
        let n = g.dim(g.rank() - 1);
        let a2 = a.reshape([a.numel() / k, k])?;
        let g2 = g.reshape([g.numel() / n, n])?;
        return a2.matmul_t(true, &g2, false);
    }
    a.matmul_t(true, g, false)?.sum_to_shape(b_shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;

    #[test]
    fn row_times_column() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_f64([1, 2], &[1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::from_f64([2, 1], &[3.0, 4.0]).unwrap());
        assert_eq!(tape.matmul(&a, &b).unwrap().value().data(), &[11.0]);
    }

    #[test]
    fn inner_dimension_mismatch() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::ones([2, 3]));
        let b = tape.constant(Tensor::ones([2, 3]));
        assert!(tape.matmul(&a, &b).is_err());
    }

    #[test]
    fn matmul_gradients_both_sides() {
        let w = Tensor::<f64>::from_fn([4, 3], |i| (i as f64 * 0.3).sin());
        let x = Tensor::<f64>::from_fn([2, 5, 4], |i| (i as f64 * 0.17).cos());
        let err = check_gradient(&x, 1e-6, |tape, xv| {
            let wv = tape.constant(w.clone());
            let y = tape.matmul(xv, &wv)?;
            Ok(tape.sum_all(&tape.mul(&y, &y)?))
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let err = check_gradient(&w, 1e-6, |tape, wv| {
            let xv = tape.constant(x.clone());
            let y = tape.matmul(&xv, wv)?;
            Ok(tape.sum_all(&tape.mul(&y, &y)?))
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn batched_broadcast_gradient() {
        // [2,1,3,4] @ [3,4,2] → [2,3,3,2]
        let b = Tensor::<f64>::from_fn([3, 4, 2], |i| (i as f64 * 0.41).sin());
        let a = Tensor::<f64>::from_fn([2, 1, 3, 4], |i| (i as f64 * 0.23).cos());
        let err = check_gradient(&b, 1e-6, |tape, bv| {
            let av = tape.constant(a.clone());
            let y = tape.matmul(&av, bv)?;
            Ok(tape.sum_all(&tape.mul(&y, &y)?))
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn transposed_right_operand() {
        let a = Tensor::<f64>::from_fn([2, 3, 4], |i| (i as f64 * 0.37).sin());
        let b = Tensor::<f64>::from_fn([2, 5, 4], |i| (i as f64 * 0.19).cos());
        let tape = Tape::new();
        let direct = tape.matmul_bt(&tape.constant(a.clone()), &tape.constant(b.clone())).unwrap();
        let expect = a.matmul(&b.permute(&[0, 2, 1]).unwrap()).unwrap();
        assert!(direct.value().max_abs_diff(&expect).unwrap() < 1e-14);
        for which in 0..2 {
            let err = check_gradient(if which == 0 { &a } else { &b }, 1e-6, |t, v| {
                let y = if which == 0 {
                    t.matmul_bt(v, &t.constant(b.clone()))?
                } else {
                    t.matmul_bt(&t.constant(a.clone()), v)?
                };
                Ok(t.sum_all(&t.mul(&y, &y)?))
            })
            .unwrap();
            assert!(err < 1e-6, "{which}: {err}");
        }
    }
}
