//! 2-D convolution and transposed convolution over `[B, C, H, W]` maps,
//! lowered to im2col + GEMM. Zero padding throughout.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Init;
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Sliding-window geometry: a `c×h×w` source scanned by a `kh×kw` kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if kh == 0 || kw == 0 || stride == 0 {
            return Err(Error::invalid("conv2d", "kernel and stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::invalid(
                "conv2d",
                format!("input {h}×{w} with padding {pad} is smaller than kernel {kh}×{kw}"),
            ));
        }
        Ok(Self {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn im2col<T: Scalar>(src: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n = g.cols();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &src[(c * g.h + y as usize) * g.w..][..g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let x = (ox * g.stride + j) as isize - g.pad as isize;
                        *d = if x >= 0 && x < g.w as isize {
                            srow[x as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto the source grid.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dst: &mut [T]) {
    let n = g.cols();
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dst[(c * g.h + y as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let x = (ox * g.stride + j) as isize - g.pad as isize;
                        if x >= 0 && x < g.w as isize {
                            drow[x as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c = op(a)·op(b) + beta·c` with explicit operand strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_strides: (isize, isize),
    b: &[T],
    b_strides: (isize, isize),
    beta: T,
    c: &mut [T],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        let last_a = (m as isize - 1) * a_strides.0 + (k as isize - 1) * a_strides.1;
        let last_b = (k as isize - 1) * b_strides.0 + (n as isize - 1) * b_strides.1;
        assert!((last_a as usize) < a.len() && (last_b as usize) < b.len());
    }
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_nchw(op: &'static str, x: &[usize], channels: usize) -> Result<()> {
    if x.len() != 4 || x[1] != channels {
        return Err(Error::invalid(
            op,
            format!("expected [B, {channels}, H, W] input, got {x:?}"),
        ));
    }
    Ok(())
}

fn bias_grad<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let s = g.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut db = vec![T::zero(); c];
    for bi in 0..b {
        for (ci, d) in db.iter_mut().enumerate() {
            *d += g.data()[(bi * c + ci) * hw..][..hw].iter().copied().sum::<T>();
        }
    }
    Tensor::new([c], db).expect("bias shape")
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], hw: usize) {
    for (plane, &bv) in out.chunks_mut(hw).zip(bias.iter().cycle()) {
        for v in plane {
            *v += bv;
        }
    }
}

impl<T: Scalar> Tape<'_, T> {
    /// `weight: [Cout, Cin, kH, kW]`, optional `bias: [Cout]`.
    pub fn conv2d(
        &self,
        x: &Var<T>,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<T>> {
        let ws = weight.shape().to_vec();
        if ws.len() != 4 {
            return Err(Error::invalid("conv2d", format!("weight must be rank 4, got {ws:?}")));
        }
        let (cout, cin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        check_nchw("conv2d", x.shape(), cin)?;
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::shape("conv2d bias", b.shape(), &[cout]));
            }
        }
        let batch = x.dim(0);
        let geom = ConvGeom::new(cin, x.dim(2), x.dim(3), kh, kw, stride, padding)?;
        let (krows, ncols) = (geom.rows(), geom.cols());
        let in_plane = cin * geom.h * geom.w;
        let out_plane = cout * ncols;

        let xd = x.value().data();
        let wd = weight.value().data();
        let mut out = vec![T::zero(); batch * out_plane];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); krows * ncols] };
        for b in 0..batch {
            let xb = &xd[b * in_plane..(b + 1) * in_plane];
            let colv: &[T] = if geom.is_pointwise() {
                xb
            } else {
                im2col(xb, &geom, &mut cols);
                &cols
            };
            gemm(
                cout,
                krows,
                ncols,
                wd,
                (krows as isize, 1),
                colv,
                (ncols as isize, 1),
                T::zero(),
                &mut out[b * out_plane..(b + 1) * out_plane],
            );
        }
        if let Some(bv) = bias {
            add_bias(&mut out, bv.value().data(), ncols);
        }
        let out = Tensor::new([batch, cout, geom.oh, geom.ow], out)?;

        let (xv, wv) = (x.value().clone(), weight.value().clone());
        let mut inputs = vec![x, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(self.record(out, &inputs, move |g, needs| {
            let gd = g.data();
            let xd = xv.data();
            let wd = wv.data();
            let mut dx = if needs[0] { vec![T::zero(); xd.len()] } else { Vec::new() };
            let mut dw = vec![T::zero(); wd.len()];
            let mut cols = vec![T::zero(); krows * ncols];
            let mut dcols = vec![T::zero(); krows * ncols];
            for b in 0..batch {
                let gb = &gd[b * out_plane..(b + 1) * out_plane];
                let xb = &xd[b * in_plane..(b + 1) * in_plane];
                if needs[1] {
                    let colv: &[T] = if geom.is_pointwise() {
                        xb
                    } else {
                        im2col(xb, &geom, &mut cols);
                        &cols
                    };
                    // dW += g_b · colsᵀ
                    gemm(cout, ncols, krows, gb, (ncols as isize, 1), colv, (1, ncols as isize), T::one(), &mut dw);
                }
                if needs[0] {
                    let dxb = &mut dx[b * in_plane..(b + 1) * in_plane];
                    if geom.is_pointwise() {
                        gemm(krows, cout, ncols, wd, (1, krows as isize), gb, (ncols as isize, 1), T::zero(), dxb);
                    } else {
                        // dcols = Wᵀ · g_b
                        gemm(krows, cout, ncols, wd, (1, krows as isize), gb, (ncols as isize, 1), T::zero(), &mut dcols);
                        col2im(&dcols, &geom, dxb);
                    }
                }
            }
            let mut grads = vec![
                if needs[0] { Some(Tensor::new(xv.shape().to_vec(), dx)?) } else { None },
                if needs[1] { Some(Tensor::new(wv.shape().to_vec(), dw)?) } else { None },
            ];
            if needs.len() == 3 {
                grads.push(Some(bias_grad(g)));
            }
            Ok(grads)
        }))
    }

    /// Transposed convolution, the exact adjoint of [`Tape::conv2d`] with the
    /// same stride/padding. `weight: [Cin, Cout, kH, kW]`; output side
    /// `(H − 1)·stride − 2·padding + k`.
    pub fn conv_transpose2d(
        &self,
        x: &Var<T>,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<T>> {
        let ws = weight.shape().to_vec();
        if ws.len() != 4 {
            return Err(Error::invalid("conv_transpose2d", format!("weight must be rank 4, got {ws:?}")));
        }
        let (cin, cout, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        check_nchw("conv_transpose2d", x.shape(), cin)?;
        if stride == 0 {
            return Err(Error::invalid("conv_transpose2d", "stride must be positive"));
        }
        let (h, w) = (x.dim(2), x.dim(3));
        let oh = ((h - 1) * stride + kh)
            .checked_sub(2 * padding)
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::invalid("conv_transpose2d", "degenerate output size"))?;
        let ow = ((w - 1) * stride + kw)
            .checked_sub(2 * padding)
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::invalid("conv_transpose2d", "degenerate output size"))?;
        // the forward conv this op is the adjoint of: (cout, oh, ow) → (h, w)
        let geom = ConvGeom::new(cout, oh, ow, kh, kw, stride, padding)?;
        debug_assert_eq!((geom.oh, geom.ow), (h, w));
        let batch = x.dim(0);
        let (krows, ncols) = (geom.rows(), geom.cols());
        let in_plane = cin * ncols;
        let out_plane = cout * oh * ow;

        let xd = x.value().data();
        let wd = weight.value().data();
        let mut out = vec![T::zero(); batch * out_plane];
        let mut cols = vec![T::zero(); krows * ncols];
        for b in 0..batch {
            // cols = Wᵀ · x_b  with W viewed as [cin, krows]
            gemm(krows, cin, ncols, wd, (1, krows as isize), &xd[b * in_plane..(b + 1) * in_plane], (ncols as isize, 1), T::zero(), &mut cols);
            col2im(&cols, &geom, &mut out[b * out_plane..(b + 1) * out_plane]);
        }
        if let Some(bv) = bias {
            if bv.shape() != [cout] {
                return Err(Error::shape("conv_transpose2d bias", bv.shape(), &[cout]));
            }
            add_bias(&mut out, bv.value().data(), oh * ow);
        }
        let out = Tensor::new([batch, cout, oh, ow], out)?;

        let (xv, wv) = (x.value().clone(), weight.value().clone());
        let mut inputs = vec![x, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(self.record(out, &inputs, move |g, needs| {
            let gd = g.data();
            let xd = xv.data();
            let wd = wv.data();
            let mut dx = if needs[0] { vec![T::zero(); xd.len()] } else { Vec::new() };
            let mut dw = vec![T::zero(); wd.len()];
            let mut cols = vec![T::zero(); krows * ncols];
            for b in 0..batch {
                im2col(&gd[b * out_plane..(b + 1) * out_plane], &geom, &mut cols);
                if needs[0] {
                    gemm(cin, krows, ncols, wd, (krows as isize, 1), &cols, (ncols as isize, 1), T::zero(), &mut dx[b * in_plane..(b + 1) * in_plane]);
                }
                if needs[1] {
                    let xb = &xd[b * in_plane..(b + 1) * in_plane];
                    gemm(cin, ncols, krows, xb, (ncols as isize, 1), &cols, (1, ncols as isize), T::one(), &mut dw);
                }
            }
            let mut grads = vec![
                if needs[0] { Some(Tensor::new(xv.shape().to_vec(), dx)?) } else { None },
                if needs[1] { Some(Tensor::new(wv.shape().to_vec(), dw)?) } else { None },
            ];
            if needs.len() == 3 {
                grads.push(Some(bias_grad(g)));
            }
            Ok(grads)
        }))
    }
}

/// Convolution layer parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Kaiming-uniform kernel, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        path: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let init = Init::KaimingUniform {
            fan_in: in_channels * kernel * kernel,
        };
        Self::with_init(store, path, in_channels, out_channels, kernel, stride, padding, init, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init<T: Scalar>(
        store: &mut ParamStore<T>,
        path: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: Init,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let weight = store.insert(
            format!("{path}.weight"),
            init.tensor(&[out_channels, in_channels, kernel, kernel], rng),
        )?;
        let bias = store.insert(format!("{path}.bias"), Tensor::zeros([out_channels]))?;
        Ok(Self {
            weight,
            bias: Some(bias),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = tape.param(self.weight);
        let b = self.bias.map(|id| tape.param(id));
        tape.conv2d(x, &w, b.as_ref(), self.stride, self.padding)
    }
}

/// Transposed convolution layer (decoder upsampling).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        path: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let init = Init::KaimingUniform {
            fan_in: out_channels * kernel * kernel,
        };
        let weight = store.insert(
            format!("{path}.weight"),
            init.tensor(&[in_channels, out_channels, kernel, kernel], rng),
        )?;
        let bias = store.insert(format!("{path}.bias"), Tensor::zeros([out_channels]))?;
        Ok(Self {
            weight,
            bias: Some(bias),
            in_channels,
            out_channels,
            kernel,
            stride,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = tape.param(self.weight);
        let b = self.bias.map(|id| tape.param(id));
        tape.conv_transpose2d(x, &w, b.as_ref(), self.stride, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;

    /// Direct six-loop convolution.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, bias: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
        let (b, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (cout, k) = (w.dim(0), w.dim(2));
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; b * cout * oh * ow];
        for n in 0..b {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for i in 0..k {
                                for j in 0..k {
                                    let y = (oy * stride + i) as isize - pad as isize;
                                    let xx = (ox * stride + j) as isize - pad as isize;
                                    if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                        acc += x.at(&[n, ci, y as usize, xx as usize]) * w.at(&[co, ci, i, j]);
                                    }
                                }
                            }
                        }
                        out[((n * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::new([b, cout, oh, ow], out).unwrap()
    }

    fn noise(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = SeededRng::new(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn box_filter_center() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones([1, 1, 4, 4]));
        let w = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let y = tape.conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(y.value().at(&[0, 0, 1, 1]), 9.0);
        assert_eq!(y.value().at(&[0, 0, 0, 0]), 4.0);
    }

    #[test]
    fn identity_kernel() {
        let tape = Tape::<f64>::new();
        let xv = noise(&[2, 1, 5, 6], 3);
        let x = tape.constant(xv.clone());
        let w = tape.constant(Tensor::from_fn([1, 1, 3, 3], |i| if i == 4 { 1.0 } else { 0.0 }));
        assert_eq!(tape.conv2d(&x, &w, None, 1, 1).unwrap().value(), &xv);
    }

    #[test]
    fn matches_six_loop_oracle() {
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (4, 0, 4), (2, 3, 7)] {
            let x = noise(&[2, 3, 9, 8], 11);
            let w = noise(&[4, 3, k, k], 12);
            let bias = [0.1, -0.2, 0.3, 0.0];
            let tape = Tape::new();
            let y = tape
                .conv2d(
                    &tape.constant(x.clone()),
                    &tape.constant(w.clone()),
                    Some(&tape.constant(Tensor::new([4], bias.to_vec()).unwrap())),
                    stride,
                    pad,
                )
                .unwrap();
            let oracle = conv_oracle(&x, &w, &bias, stride, pad);
            assert!(y.value().max_abs_diff(&oracle).unwrap() < 1e-12, "s{stride} p{pad} k{k}");
        }
    }

    #[test]
    fn channel_mismatch_and_degenerate_size() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones([1, 2, 4, 4]));
        let w = tape.constant(Tensor::ones([1, 3, 3, 3]));
        assert!(tape.conv2d(&x, &w, None, 1, 1).is_err());
        let w = tape.constant(Tensor::ones([1, 2, 7, 7]));
        assert!(tape.conv2d(&x, &w, None, 1, 1).is_err());
    }

    #[test]
    fn transposed_shapes_and_broadcast() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full([1, 1, 1, 1], 2.5));
        let w = tape.constant(Tensor::ones([1, 1, 2, 2]));
        let y = tape.conv_transpose2d(&x, &w, None, 2, 0).unwrap();
        assert_eq!(y.value().data(), &[2.5; 4]);
        let x = tape.constant(Tensor::ones([1, 3, 8, 8]));
        let w = tape.constant(Tensor::ones([3, 2, 2, 2]));
        assert_eq!(tape.conv_transpose2d(&x, &w, None, 2, 0).unwrap().shape(), &[1, 2, 16, 16]);
    }

    #[test]
    fn transposed_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convᵀ(y)>
        for (stride, pad, k, side) in [(2, 0, 2, 8), (1, 1, 3, 8), (2, 1, 3, 9)] {
            let x = noise(&[2, 3, side, side], 21);
            let w = noise(&[4, 3, k, k], 22);
            let tape = Tape::new();
            let cx = tape.conv2d(&tape.constant(x.clone()), &tape.constant(w.clone()), None, stride, pad).unwrap();
            let y = noise(cx.shape(), 23);
            // same weight tensor reinterpreted: conv weight [Cout, Cin] is convᵀ weight [Cin', Cout']
            let ty = tape
                .conv_transpose2d(&tape.constant(y.clone()), &tape.constant(w.clone()), None, stride, pad)
                .unwrap();
            let lhs: f64 = cx.value().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(ty.value().data()).map(|(a, b)| a * b).sum();
            assert_eq!(ty.shape(), x.shape());
            assert!((lhs - rhs).abs() < 1e-10, "s{stride} p{pad} k{k}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn transposed_forward_equals_conv_input_gradient() {
        let w = noise(&[4, 3, 3, 3], 31);
        let x = noise(&[1, 3, 9, 9], 32);
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = tape.conv2d(&xv, &tape.constant(w.clone()), None, 2, 1).unwrap();
        let probe = noise(y.shape(), 33);
        let loss = tape.sum_all(&tape.mul(&y, &tape.constant(probe.clone())).unwrap());
        let dx = tape.backward(&loss).unwrap().wrt(&xv).unwrap().clone();
        let tape = Tape::new();
        let t = tape
            .conv_transpose2d(&tape.constant(probe), &tape.constant(w), None, 2, 1)
            .unwrap();
        assert!(t.value().max_abs_diff(&dx).unwrap() < 1e-12);
    }

    #[test]
    fn conv_gradients() {
        let x = noise(&[2, 3, 6, 6], 41);
        let w = noise(&[4, 3, 3, 3], 42);
        let b = noise(&[4], 43);
        let probe = noise(&[2, 4, 3, 3], 44);
        let f = |t: &Tape<'static, f64>, x: &Var<f64>, w: &Var<f64>, b: &Var<f64>| {
            let y = t.conv2d(x, w, Some(b), 2, 1)?;
            Ok(t.sum_all(&t.mul(&t.mul(&y, &y)?, &t.constant(probe.clone()))?))
        };
        let ex = check_gradient(&x, 1e-6, |t, v| f(t, v, &t.constant(w.clone()), &t.constant(b.clone()))).unwrap();
        let ew = check_gradient(&w, 1e-6, |t, v| f(t, &t.constant(x.clone()), v, &t.constant(b.clone()))).unwrap();
        let eb = check_gradient(&b, 1e-6, |t, v| f(t, &t.constant(x.clone()), &t.constant(w.clone()), v)).unwrap();
        assert!(ex < 1e-6 && ew < 1e-6 && eb < 1e-6, "{ex} {ew} {eb}");
    }

    #[test]
    fn transposed_conv_gradients() {
        let x = noise(&[2, 3, 4, 4], 51);
        let w = noise(&[3, 2, 2, 2], 52);
        let b = noise(&[2], 53);
        let probe = noise(&[2, 2, 8, 8], 54);
        let f = |t: &Tape<'static, f64>, x: &Var<f64>, w: &Var<f64>, b: &Var<f64>| {
            let y = t.conv_transpose2d(x, w, Some(b), 2, 0)?;
            Ok(t.sum_all(&t.mul(&t.mul(&y, &y)?, &t.constant(probe.clone()))?))
        };
        let ex = check_gradient(&x, 1e-6, |t, v| f(t, v, &t.constant(w.clone()), &t.constant(b.clone()))).unwrap();
        let ew = check_gradient(&w, 1e-6, |t, v| f(t, &t.constant(x.clone()), v, &t.constant(b.clone()))).unwrap();
        let eb = check_gradient(&b, 1e-6, |t, v| f(t, &t.constant(x.clone()), &t.constant(w.clone()), v)).unwrap();
        assert!(ex < 1e-6 && ew < 1e-6 && eb < 1e-6, "{ex} {ew} {eb}");
    }
}
