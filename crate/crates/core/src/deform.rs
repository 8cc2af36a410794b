//! Deformable convolution (v1, single offset group, no modulation).

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::conv::{gemm, ConvGeom};
use crate::nn::{Conv2d, Init};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Four-neighbour bilinear weights at a fractional position, with their
/// partial derivatives. Corners outside the map carry zero weight.
#[derive(Debug, Clone, Copy)]
struct Taps<T> {
    index: [usize; 4],
    weight: [T; 4],
    dy: [T; 4],
    dx: [T; 4],
}

impl<T: Scalar> Taps<T> {
    fn at(h: usize, w: usize, y: T, x: T) -> Self {
        let zero = [T::zero(); 4];
        let mut taps = Self {
            index: [0; 4],
            weight: zero,
            dy: zero,
            dx: zero,
        };
        let (hf, wf) = (T::of(h as f64), T::of(w as f64));
        if !(y > -T::one() && y < hf && x > -T::one() && x < wf) {
            return taps;
        }
        let (y0, x0) = (y.floor(), x.floor());
        let (ly, lx) = (y - y0, x - x0);
        let (hy, hx) = (T::one() - ly, T::one() - lx);
        let (y0, x0) = (y0.to_isize().unwrap_or(-1), x0.to_isize().unwrap_or(-1));
        let corners = [
            (y0, x0, hy * hx, -hx, -hy),
            (y0, x0 + 1, hy * lx, -lx, hy),
            (y0 + 1, x0, ly * hx, hx, -ly),
            (y0 + 1, x0 + 1, ly * lx, lx, ly),
        ];
        for (k, &(cy, cx, wt, dy, dx)) in corners.iter().enumerate() {
            if cy >= 0 && cx >= 0 && (cy as usize) < h && (cx as usize) < w {
                taps.index[k] = cy as usize * w + cx as usize;
                taps.weight[k] = wt;
                taps.dy[k] = dy;
                taps.dx[k] = dx;
            }
        }
        taps
    }

    fn sample(&self, plane: &[T]) -> T {
        (0..4).map(|k| self.weight[k] * plane[self.index[k]]).sum()
    }
}

/// Bilinear sample of channel `c` of image `b` at fractional `(py, px)`.
/// Positions entirely outside the map give zero.
pub fn bilinear_sample<T: Scalar>(x: &Tensor<T>, b: usize, c: usize, py: f64, px: f64) -> T {
    let (h, w) = (x.dim(2), x.dim(3));
    let plane = &x.data()[(b * x.dim(1) + c) * h * w..][..h * w];
    Taps::at(h, w, T::of(py), T::of(px)).sample(plane)
}

/// Sampling taps for every kernel tap and output position of one image,
/// ordered `[t][oy·Wo + ox]`.
fn image_taps<T: Scalar>(g: &ConvGeom, offsets: &[T]) -> Vec<Taps<T>> {
    let n = g.cols();
    let kk = g.kh * g.kw;
    let mut taps = Vec::with_capacity(kk * n);
    for t in 0..kk {
        let (i, j) = (t / g.kw, t % g.kw);
        let (oy_plane, ox_plane) = (&offsets[2 * t * n..][..n], &offsets[(2 * t + 1) * n..][..n]);
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let p = oy * g.ow + ox;
                let y = T::of((oy * g.stride + i) as f64 - g.pad as f64) + oy_plane[p];
                let x = T::of((ox * g.stride + j) as f64 - g.pad as f64) + ox_plane[p];
                taps.push(Taps::at(g.h, g.w, y, x));
            }
        }
    }
    taps
}

fn fill_columns<T: Scalar>(g: &ConvGeom, taps: &[Taps<T>], image: &[T], cols: &mut [T]) {
    let n = g.cols();
    let kk = g.kh * g.kw;
    for c in 0..g.c {
        let plane = &image[c * g.h * g.w..][..g.h * g.w];
        for t in 0..kk {
            let row = &mut cols[(c * kk + t) * n..][..n];
            for (v, tap) in row.iter_mut().zip(&taps[t * n..(t + 1) * n]) {
                *v = tap.sample(plane);
            }
        }
    }
}

impl<T: Scalar> Tape<'_, T> {
    /// Deformable convolution. `offsets: [B, 2·kH·kW, Ho, Wo]` holds
    /// `(Δy, Δx)` pairs per kernel tap, in pixels; `weight: [Cout, Cin, kH, kW]`.
    #[allow(clippy::too_many_arguments)]
    pub fn deform_conv2d(
        &self,
        x: &Var<T>,
        offsets: &Var<T>,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<T>> {
        let ws = weight.shape().to_vec();
        let xs = x.shape().to_vec();
        if ws.len() != 4 || xs.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape("deform_conv2d", &xs, &ws));
        }
        let (cout, cin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let geom = ConvGeom::new(cin, xs[2], xs[3], kh, kw, stride, padding)?;
        let batch = xs[0];
        let expect = [batch, 2 * kh * kw, geom.oh, geom.ow];
        if offsets.shape() != expect {
            return Err(Error::shape("deform_conv2d offsets", offsets.shape(), &expect));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::shape("deform_conv2d bias", b.shape(), &[cout]));
            }
        }
        let (krows, n) = (geom.rows(), geom.cols());
        let in_plane = cin * geom.h * geom.w;
        let off_plane = 2 * kh * kw * n;
        let out_plane = cout * n;

        let (xd, od, wd) = (x.value().data(), offsets.value().data(), weight.value().data());
        let mut out = vec![T::zero(); batch * out_plane];
        let mut cols = vec![T::zero(); krows * n];
        for b in 0..batch {
            let taps = image_taps(&geom, &od[b * off_plane..(b + 1) * off_plane]);
            fill_columns(&geom, &taps, &xd[b * in_plane..(b + 1) * in_plane], &mut cols);
            gemm(cout, krows, n, wd, (krows as isize, 1), &cols, (n as isize, 1), T::zero(), &mut out[b * out_plane..(b + 1) * out_plane]);
            if let Some(bv) = bias {
                for (co, plane) in out[b * out_plane..(b + 1) * out_plane].chunks_mut(n).enumerate() {
                    let bc = bv.value().data()[co];
                    plane.iter_mut().for_each(|v| *v += bc);
                }
            }
        }
        let out = Tensor::new([batch, cout, geom.oh, geom.ow], out)?;

        let (xv, ov, wv) = (x.value().clone(), offsets.value().clone(), weight.value().clone());
        let mut inputs = vec![x, offsets, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(self.record(out, &inputs, move |g, needs| {
            let (gd, xd, od, wd) = (g.data(), xv.data(), ov.data(), wv.data());
            let kk = kh * kw;
            let mut dx = vec![T::zero(); if needs[0] { xd.len() } else { 0 }];
            let mut doff = vec![T::zero(); if needs[1] { od.len() } else { 0 }];
            let mut dw = vec![T::zero(); if needs[2] { wd.len() } else { 0 }];
            let mut cols = vec![T::zero(); krows * n];
            let mut dcols = vec![T::zero(); krows * n];
            for b in 0..batch {
                let taps = image_taps(&geom, &od[b * off_plane..(b + 1) * off_plane]);
                let image = &xd[b * in_plane..(b + 1) * in_plane];
                let gb = &gd[b * out_plane..(b + 1) * out_plane];
                if needs[2] {
                    fill_columns(&geom, &taps, image, &mut cols);
                    gemm(cout, n, krows, gb, (n as isize, 1), &cols, (1, n as isize), T::one(), &mut dw);
                }
                if !(needs[0] || needs[1]) {
                    continue;
                }
                gemm(krows, cout, n, wd, (1, krows as isize), gb, (n as isize, 1), T::zero(), &mut dcols);
                for c in 0..cin {
                    let plane = &image[c * geom.h * geom.w..][..geom.h * geom.w];
                    for t in 0..kk {
                        let drow = &dcols[(c * kk + t) * n..][..n];
                        for (p, (&dv, tap)) in drow.iter().zip(&taps[t * n..(t + 1) * n]).enumerate() {
                            if needs[0] {
                                let dplane = &mut dx[b * in_plane + c * geom.h * geom.w..][..geom.h * geom.w];
                                for k in 0..4 {
                                    dplane[tap.index[k]] += dv * tap.weight[k];
                                }
                            }
                            if needs[1] {
                                let (mut sy, mut sx) = (T::zero(), T::zero());
                                for k in 0..4 {
                                    let v = plane[tap.index[k]];
                                    sy += tap.dy[k] * v;
                                    sx += tap.dx[k] * v;
                                }
                                let base = b * off_plane;
                                doff[base + 2 * t * n + p] += dv * sy;
                                doff[base + (2 * t + 1) * n + p] += dv * sx;
                            }
                        }
                    }
                }
            }
            let mut grads = vec![
                if needs[0] { Some(Tensor::new(xv.shape().to_vec(), dx)?) } else { None },
                if needs[1] { Some(Tensor::new(ov.shape().to_vec(), doff)?) } else { None },
                if needs[2] { Some(Tensor::new(wv.shape().to_vec(), dw)?) } else { None },
            ];
            if needs.len() == 4 {
                let mut db = vec![T::zero(); cout];
                for b in 0..batch {
                    for (co, d) in db.iter_mut().enumerate() {
                        *d += gd[b * out_plane + co * n..][..n].iter().copied().sum::<T>();
                    }
                }
                grads.push(Some(Tensor::new([cout], db)?));
            }
            Ok(grads)
        }))
    }
}

/// Offset predictor plus deformable kernel, both `k×k`, stride 1, same padding.
#[derive(Debug, Clone)]
pub struct DeformConv2d {
    pub offset: Conv2d,
    pub conv: Conv2d,
}

impl DeformConv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        path: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let pad = kernel / 2;
        Ok(Self {
            offset: Conv2d::with_init(
                store,
                &format!("{path}.offset"),
                in_channels,
                2 * kernel * kernel,
                kernel,
                1,
                pad,
                Init::Zeros,
                rng,
            )?,
            conv: Conv2d::new(store, &format!("{path}.conv"), in_channels, out_channels, kernel, 1, pad, rng)?,
        })
    }

    pub fn predict_offsets<T: Scalar>(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        self.offset.forward(tape, x)
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let offsets = self.predict_offsets(tape, x)?;
        let w = tape.param(self.conv.weight);
        let b = self.conv.bias.map(|id| tape.param(id));
        tape.deform_conv2d(x, &offsets, &w, b.as_ref(), 1, self.conv.padding)
    }
}
