//! Bilinear resizing of `[B, C, H, W]` maps (half-pixel centers).

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-output-index source taps `(lo, hi, weight_hi)` along one axis.
fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Plain (non-differentiable) bilinear resize of a raw tensor.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || s[2] == 0 || s[3] == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear_resize", format!("bad sizes {s:?} → {out_h}×{out_w}")));
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    let src = x.data();
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            let fy = T::of(fy);
            for &(x0, x1, fx) in &tx {
                let fx = T::of(fx);
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    Tensor::new([s[0], s[1], out_h, out_w], out)
}

impl<T: Scalar> Tape<'_, T> {
    pub fn resize_bilinear(&self, x: &Var<T>, out_h: usize, out_w: usize) -> Result<Var<T>> {
        let out = bilinear_resize(x.value(), out_h, out_w)?;
        let s = x.shape().to_vec();
        Ok(self.record(out, &[x], move |g, _| {
            let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
            let (ty, tx) = (taps(h, out_h), taps(w, out_w));
            let gd = g.data();
            let mut dx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                let dplane = &mut dx[p * h * w..(p + 1) * h * w];
                let gplane = &gd[p * out_h * out_w..(p + 1) * out_h * out_w];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    let fy = T::of(fy);
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let fx = T::of(fx);
                        let gv = gplane[oy * out_w + ox];
                        dplane[y0 * w + x0] += gv * (T::one() - fy) * (T::one() - fx);
                        dplane[y0 * w + x1] += gv * (T::one() - fy) * fx;
                        dplane[y1 * w + x0] += gv * fy * (T::one() - fx);
                        dplane[y1 * w + x1] += gv * fy * fx;
                    }
                }
            }
            Ok(vec![Some(Tensor::new(s.clone(), dx)?)])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::<f64>::from_fn([1, 2, 5, 3], |i| i as f64 * 0.37);
        assert_eq!(bilinear_resize(&x, 5, 3).unwrap(), x);
    }

    #[test]
    fn constant_image_stays_constant() {
        let x = Tensor::<f32>::full([1, 1, 3, 7], 0.25);
        let y = bilinear_resize(&x, 11, 2).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn upsample_two_by_two() {
        // source pixel centers at 0.5, 1.5; output centers map to -0.25, 0.25, 0.75, 1.25
        let x = Tensor::<f64>::from_f64([1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_resize(&x, 4, 4).unwrap();
        let axis = |o: usize| {
            let s: f64 = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            (s.floor() as usize, s - s.floor())
        };
        for oy in 0..4 {
            for ox in 0..4 {
                let (y0, fy) = axis(oy);
                let (x0, fx) = axis(ox);
                let (y1, x1) = ((y0 + 1).min(1), (x0 + 1).min(1));
                let v = |r: usize, c: usize| x.at(&[0, 0, r, c]);
                let expect = (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1))
                    + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1));
                assert!((y.at(&[0, 0, oy, ox]) - expect).abs() < 1e-12);
            }
        }
        assert_eq!(y.at(&[0, 0, 0, 0]), 0.0);
        assert_eq!(y.at(&[0, 0, 3, 3]), 3.0);
    }

    #[test]
    fn resize_gradient() {
        let x = Tensor::<f64>::from_fn([1, 2, 3, 4], |i| (i as f64 * 0.71).sin());
        let w = Tensor::<f64>::from_fn([1, 2, 7, 5], |i| (i as f64 * 0.23).cos());
        let err = check_gradient(&x, 1e-6, |t, v| {
            let y = t.resize_bilinear(v, 7, 5)?;
            Ok(t.sum_all(&t.mul(&y, &t.constant(w.clone()))?))
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
