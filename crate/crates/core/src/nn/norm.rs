use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Init;
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Tape<'_, T> {
    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        let d = *x.shape().last().unwrap_or(&0);
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
        }
        let eps = T::of(eps);
        let dt = T::of(d as f64);
        let src = x.value().data();
        let (gv, bv) = (gamma.value().data(), beta.value().data());
        let rows = src.len() / d.max(1);
        let mut xhat = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(d.max(1)) {
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let gamma_v = gamma.value().clone();
        Ok(self.record(out, &[x, gamma, beta], move |g, needs| {
            let gd = g.data();
            let gam = gamma_v.data();
            let mut dgamma = vec![T::zero(); d];
            let mut dbeta = vec![T::zero(); d];
            let mut dx = if needs[0] { Vec::with_capacity(gd.len()) } else { Vec::new() };
            for (r, (grow, hrow)) in gd.chunks(d).zip(xhat.chunks(d)).enumerate() {
                let mut mean_dh = T::zero();
                let mut mean_dh_h = T::zero();
                for j in 0..d {
                    dgamma[j] += grow[j] * hrow[j];
                    dbeta[j] += grow[j];
                    let dh = grow[j] * gam[j];
                    mean_dh += dh;
                    mean_dh_h += dh * hrow[j];
                }
                if needs[0] {
                    mean_dh /= dt;
                    mean_dh_h /= dt;
                    for j in 0..d {
                        let dh = grow[j] * gam[j];
                        dx.push(inv_std[r] * (dh - mean_dh - hrow[j] * mean_dh_h));
                    }
                }
            }
            Ok(vec![
                if needs[0] {
                    Some(Tensor::new(g.shape().to_vec(), dx)?)
                } else {
                    None
                },
                Some(Tensor::new([d], dgamma)?),
                Some(Tensor::new([d], dbeta)?),
            ])
        }))
    }
}

/// Layer norm over the channel (last) axis of a token tensor.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, path: &str, dim: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            gamma: store.insert(format!("{path}.weight"), Init::Ones.tensor(&[dim], rng))?,
            beta: store.insert(format!("{path}.bias"), Init::Zeros.tensor(&[dim], rng))?,
            dim,
            eps: LAYER_NORM_EPS,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, &g, &b, self.eps)
    }

    /// Layer norm over the channel axis of a `[B, C, H, W]` map.
    pub fn forward_nchw<T: Scalar>(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let t = tape.permute(x, &[0, 2, 3, 1])?;
        let y = self.forward(tape, &t)?;
        tape.permute(&y, &[0, 3, 1, 2])
    }
}
