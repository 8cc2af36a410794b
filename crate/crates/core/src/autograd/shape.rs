use std::sync::Arc;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{contiguous_strides, numel, Tensor};

/// Copies `len` slices along `axis` starting at `start`.
fn narrow_raw<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let full = shape[axis];
    let src = x.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&src[base..base + len * inner]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    Tensor::new(out_shape, out)
}

/// Concatenation of raw tensors along `axis` (shapes checked by the caller).
fn concat_raw<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts[0].shape();
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.dim(axis)).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.dim(axis) * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut out_shape = first.to_vec();
    out_shape[axis] = total;
    Tensor::new(out_shape, out)
}

impl<T: Scalar> Tape<'_, T> {
    pub fn reshape(&self, x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let out = x.value.reshape(shape.to_vec())?;
        let in_shape = x.shape().to_vec();
        Ok(self.record(out, &[x], move |g, _| Ok(vec![Some(g.reshape(in_shape.clone())?)])))
    }

    pub fn permute(&self, x: &Var<T>, axes: &[usize]) -> Result<Var<T>> {
        let out = x.value.permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.record(out, &[x], move |g, _| Ok(vec![Some(g.permute(&inverse)?)])))
    }

    pub fn transpose(&self, x: &Var<T>, a: usize, b: usize) -> Result<Var<T>> {
        let mut axes: Vec<usize> = (0..x.rank()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(Error::InvalidAxis {
                op: "transpose",
                axis: a.max(b),
                rank: x.rank(),
            });
        }
        axes.swap(a, b);
        self.permute(x, &axes)
    }

    pub fn narrow(&self, x: &Var<T>, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        if axis >= x.rank() {
            return Err(Error::InvalidAxis {
                op: "narrow",
                axis,
                rank: x.rank(),
            });
        }
        if start + len > x.dim(axis) {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} exceeds axis size {}", start + len, x.dim(axis)),
            ));
        }
        let out = narrow_raw(&x.value, axis, start, len)?;
        let in_shape = x.shape().to_vec();
        Ok(self.record(out, &[x], move |g, _| {
            let mut parts = Vec::new();
            let mut before = in_shape.clone();
            before[axis] = start;
            let mut after = in_shape.clone();
            after[axis] = in_shape[axis] - start - len;
            let zb = Tensor::zeros(before);
            let za = Tensor::zeros(after);
            if start > 0 {
                parts.push(&zb);
            }
            parts.push(g);
            if za.dim(axis) > 0 {
                parts.push(&za);
            }
            Ok(vec![Some(concat_raw(&parts, axis)?)])
        }))
    }

    pub fn concat(&self, xs: &[&Var<T>], axis: usize) -> Result<Var<T>> {
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidAxis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        for x in xs {
            let s = x.shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
        }
        let raws: Vec<&Tensor<T>> = xs.iter().map(|x| &x.value).collect();
        let out = concat_raw(&raws, axis)?;
        let sizes: Vec<usize> = xs.iter().map(|x| x.dim(axis)).collect();
        Ok(self.record(out, xs, move |g, needs| {
            let mut start = 0;
            let mut grads = Vec::with_capacity(sizes.len());
            for (i, &len) in sizes.iter().enumerate() {
                grads.push(if needs[i] {
                    Some(narrow_raw(g, axis, start, len)?)
                } else {
                    None
                });
                start += len;
            }
            Ok(grads)
        }))
    }

    /// `out.flat[i] = x.flat[index[i]]`; backward scatter-adds.
    pub fn gather(&self, x: &Var<T>, index: Arc<[usize]>, out_shape: &[usize]) -> Result<Var<T>> {
        if index.len() != numel(out_shape) {
            return Err(Error::invalid(
                "gather",
                format!("{} indices for output shape {out_shape:?}", index.len()),
            ));
        }
        let n = x.value.numel();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::invalid("gather", format!("index {bad} out of range {n}")));
        }
        let src = x.value.data();
        let out = Tensor::new(out_shape.to_vec(), index.iter().map(|&i| src[i]).collect())?;
        let in_shape = x.shape().to_vec();
        Ok(self.record(out, &[x], move |g, _| {
            let mut gx = vec![T::zero(); n];
            for (gv, &i) in g.data().iter().zip(index.iter()) {
                gx[i] += *gv;
            }
            Ok(vec![Some(Tensor::new(in_shape.clone(), gx)?)])
        }))
    }

    /// Cyclic shift: `out[.., i, ..] = x[.., (i - shift) mod n, ..]` for each `(axis, shift)`.
    pub fn roll(&self, x: &Var<T>, shifts: &[(usize, isize)]) -> Result<Var<T>> {
        if shifts.iter().all(|&(_, s)| s == 0) {
            return Ok(x.clone());
        }
        let shape = x.shape().to_vec();
        for &(axis, _) in shifts {
            if axis >= shape.len() {
                return Err(Error::InvalidAxis {
                    op: "roll",
                    axis,
                    rank: shape.len(),
                });
            }
        }
        let strides = contiguous_strides(&shape);
        let total = numel(&shape);
        let mut index = Vec::with_capacity(total);
        let mut coord = vec![0usize; shape.len()];
        for _ in 0..total {
            let mut src = 0;
            for (d, &c) in coord.iter().enumerate() {
                let mut c = c as isize;
                for &(axis, s) in shifts {
                    if axis == d {
                        c = (c - s).rem_euclid(shape[d] as isize);
                    }
                }
                src += c as usize * strides[d];
            }
            index.push(src);
            for d in (0..shape.len()).rev() {
                coord[d] += 1;
                if coord[d] < shape[d] {
                    break;
                }
                coord[d] = 0;
            }
        }
        self.gather(x, index.into(), &shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;

    #[test]
    fn concat_and_narrow_roundtrip() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn([2, 1, 3], |i| i as f64));
        let b = tape.constant(Tensor::from_fn([2, 2, 3], |i| 100.0 + i as f64));
        let c = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3]);
        assert_eq!(tape.narrow(&c, 1, 0, 1).unwrap().value(), a.value());
        assert_eq!(tape.narrow(&c, 1, 1, 2).unwrap().value(), b.value());
        assert!(tape.narrow(&c, 1, 2, 2).is_err());
    }

    #[test]
    fn roll_is_cyclic() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([1, 4], |i| i as f64));
        let r = tape.roll(&x, &[(1, 1)]).unwrap();
        assert_eq!(r.value().data(), &[3.0, 0.0, 1.0, 2.0]);
        let back = tape.roll(&r, &[(1, -1)]).unwrap();
        assert_eq!(back.value(), x.value());
    }

    #[test]
    fn shape_op_gradients() {
        let x = Tensor::<f64>::from_fn([2, 3, 4], |i| (i as f64 * 0.31).sin());
        let err = check_gradient(&x, 1e-6, |tape, xv| {
            let p = tape.permute(xv, &[2, 0, 1])?;
            let r = tape.reshape(&p, &[4, 6])?;
            let n = tape.narrow(&r, 1, 1, 4)?;
            let c = tape.concat(&[&n, &r], 1)?;
            let s = tape.roll(&c, &[(0, 1), (1, -3)])?;
            let w = tape.constant(Tensor::from_fn([4, 10], |i| i as f64 * 0.05));
            Ok(tape.sum_all(&tape.mul(&tape.mul(&s, &s)?, &w)?))
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
