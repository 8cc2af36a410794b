//! Cross-attention refinement of encoder skip features, guided by decoder
//! features, followed by a spatial attention gate shared by every stage.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::swin::{SwinBlock, SwinBlockConfig};

/// Channel mean+max → 7×7 conv → sigmoid gate. Channel-count agnostic, so a
/// single instance serves every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedSpatialAttention {
    pub conv: Conv2d,
}

impl SharedSpatialAttention {
    pub const KERNEL: usize = 7;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, path: &str, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{path}.conv"), 2, 1, Self::KERNEL, 1, Self::KERNEL / 2, rng)?,
        })
    }

    /// `[B, 1, H, W]` gate in (0, 1).
    pub fn gate<T: Scalar>(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let avg = tape.mean(x, &[1], true)?;
        let max = tape.max(x, 1, true)?;
        let pooled = tape.concat(&[&avg, &max], 1)?;
        Ok(tape.sigmoid(&self.conv.forward(tape, &pooled)?))
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let g = self.gate(tape, x)?;
        tape.mul(x, &g)
    }
}

/// `[B, C, H, W]` → `[B, H·W, C]`.
fn to_tokens<T: Scalar>(tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let t = tape.permute(x, &[0, 2, 3, 1])?;
    tape.reshape(&t, &[b, h * w, c])
}

/// Per-level cross-attention stage. The spatial gate is a copy of the shared
/// instance's parameter ids, not a separate parameter set.
#[derive(Debug, Clone)]
pub struct CatmStage {
    pub swin: SwinBlock,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub k_skip: Linear,
    pub v_skip: Linear,
    pub out_proj: Linear,
    pub norm: LayerNorm,
    pub shared: SharedSpatialAttention,
    pub dim: usize,
    pub heads: usize,
}

impl CatmStage {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        path: &str,
        dim: usize,
        heads: usize,
        window: usize,
        mlp_ratio: usize,
        shared: &SharedSpatialAttention,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let cfg = SwinBlockConfig {
            dim,
            heads,
            window,
            shift: 0,
            mlp_ratio,
        };
        let lin = |store: &mut ParamStore<T>, name: &str, rng: &mut SeededRng| {
            Linear::new(store, &format!("{path}.{name}"), dim, dim, true, rng)
        };
        Ok(Self {
            swin: SwinBlock::new(store, &format!("{path}.swin"), cfg, rng)?,
            q: lin(store, "q", rng)?,
            k: lin(store, "k", rng)?,
            v: lin(store, "v", rng)?,
            k_skip: lin(store, "k_skip", rng)?,
            v_skip: lin(store, "v_skip", rng)?,
            out_proj: lin(store, "out_proj", rng)?,
            norm: LayerNorm::new(store, &format!("{path}.norm"), dim, rng)?,
            shared: shared.clone(),
            dim,
            heads,
        })
    }

    /// Decoder map → `(Q, K, V)`, each `[B, H·W, C]`.
    pub fn derive_qkv<T: Scalar>(&self, tape: &Tape<T>, x_dec: &Var<T>) -> Result<(Var<T>, Var<T>, Var<T>)> {
        if x_dec.rank() != 4 || x_dec.dim(1) != self.dim {
            return Err(Error::invalid("derive_qkv", format!("expected [B, {}, H, W], got {:?}", self.dim, x_dec.shape())));
        }
        let t = to_tokens(tape, &self.swin.forward(tape, x_dec)?)?;
        Ok((self.q.forward(tape, &t)?, self.k.forward(tape, &t)?, self.v.forward(tape, &t)?))
    }

    /// `LayerNorm(skip + out_proj(MHA(Q, K + K_s, V + V_s)))` as `[B, C, H, W]`.
    pub fn caf_fuse<T: Scalar>(&self, tape: &Tape<T>, x_skip: &Var<T>, q: &Var<T>, k: &Var<T>, v: &Var<T>) -> Result<Var<T>> {
        let (b, c, h, w) = (x_skip.dim(0), x_skip.dim(1), x_skip.dim(2), x_skip.dim(3));
        let n = h * w;
        if c != self.dim || q.shape() != [b, n, c] || k.shape() != [b, n, c] || v.shape() != [b, n, c] {
            return Err(Error::shape("caf_fuse", x_skip.shape(), q.shape()));
        }
        if self.heads == 0 || c % self.heads != 0 {
            return Err(Error::invalid("caf_fuse", format!("{c} channels over {} heads", self.heads)));
        }
        let (heads, d) = (self.heads, c / self.heads);
        let s = to_tokens(tape, x_skip)?;
        let k = tape.add(k, &self.k_skip.forward(tape, &s)?)?;
        let v = tape.add(v, &self.v_skip.forward(tape, &s)?)?;
        let split = |t: &Var<T>| -> Result<Var<T>> {
            let t = tape.reshape(t, &[b, n, heads, d])?;
            tape.permute(&t, &[0, 2, 1, 3])
        };
        let q = tape.mul_scalar(&split(q)?, 1.0 / (d as f64).sqrt());
        let attn = tape.softmax(&tape.matmul_bt(&q, &split(&k)?)?)?;
        let o = tape.matmul(&attn, &split(&v)?)?;
        let o = tape.reshape(&tape.permute(&o, &[0, 2, 1, 3])?, &[b, n, c])?;
        let y = self.norm.forward(tape, &tape.add(&s, &self.out_proj.forward(tape, &o)?)?)?;
        let y = tape.reshape(&y, &[b, h, w, c])?;
        tape.permute(&y, &[0, 3, 1, 2])
    }

    /// Refined skip features. Decoder features are resized to the skip grid
    /// when the two disagree.
    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, x_skip: &Var<T>, x_dec: &Var<T>) -> Result<Var<T>> {
        let (h, w) = (x_skip.dim(2), x_skip.dim(3));
        let dec = if x_dec.dim(2) != h || x_dec.dim(3) != w {
            tape.resize_bilinear(x_dec, h, w)?
        } else {
            x_dec.clone()
        };
        let (q, k, v) = self.derive_qkv(tape, &dec)?;
        let fused = self.caf_fuse(tape, x_skip, &q, &k, &v)?;
        self.shared.forward(tape, &fused)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_input_gradient, check_param_gradient};
    use crate::tensor::Tensor;

    fn noise(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = SeededRng::new(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.uniform(-1.0, 1.0))
    }

    fn zero(store: &mut ParamStore<f64>, lin: &Linear) {
        for id in [lin.weight, lin.bias.unwrap()] {
            let z = Tensor::zeros(store.value(id).shape().to_vec());
            store.set_value(id, z).unwrap();
        }
    }

    fn setup(dims: &[usize]) -> (ParamStore<f64>, SharedSpatialAttention, Vec<CatmStage>) {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(1);
        let sa = SharedSpatialAttention::new(&mut store, "catm.shared_sa", &mut rng).unwrap();
        let stages = dims
            .iter()
            .enumerate()
            .map(|(i, &d)| CatmStage::new(&mut store, &format!("catm.{i}"), d, 2, 4, 2, &sa, &mut rng).unwrap())
            .collect();
        (store, sa, stages)
    }

    #[test]
    fn gate_bounds_and_constant_input() {
        let (store, sa, _) = setup(&[]);
        let tape = Tape::inference(&store);
        let x = noise(&[2, 5, 6, 6], 2);
        let y = sa.forward(&tape, &tape.constant(x.clone())).unwrap();
        for (a, b) in y.value().data().iter().zip(x.data()) {
            assert!(a.abs() <= b.abs());
        }
        // spatially constant input: the zero-padded border differs, the interior does not
        let c = Tensor::from_fn([1, 3, 9, 9], |i| [0.3, -1.0, 2.0][i / 81]);
        let g = sa.gate(&tape, &tape.constant(c)).unwrap();
        let inner: Vec<f64> = (3..6).flat_map(|y| (3..6).map(move |x| (y, x))).map(|(y, x)| g.value().at(&[0, 0, y, x])).collect();
        assert!(inner.iter().all(|&v| v == inner[0] && v > 0.0 && v < 1.0));
    }

    #[test]
    fn qkv_shapes_and_fused_shape() {
        let (store, _, stages) = setup(&[8]);
        let tape = Tape::inference(&store);
        let dec = tape.constant(noise(&[2, 8, 4, 4], 3));
        let (q, k, v) = stages[0].derive_qkv(&tape, &dec).unwrap();
        for t in [&q, &k, &v] {
            assert_eq!(t.shape(), &[2, 16, 8]);
        }
        let skip = tape.constant(noise(&[2, 8, 4, 4], 4));
        assert_eq!(stages[0].caf_fuse(&tape, &skip, &q, &k, &v).unwrap().shape(), &[2, 8, 4, 4]);
        // decoder at a coarser grid is resized to the skip grid
        let coarse = tape.constant(noise(&[2, 8, 2, 2], 5));
        assert_eq!(stages[0].forward(&tape, &skip, &coarse).unwrap().shape(), &[2, 8, 4, 4]);
        assert!(stages[0].derive_qkv(&tape, &tape.constant(noise(&[1, 6, 4, 4], 6))).is_err());
    }

    #[test]
    fn zero_out_projection_reduces_to_normalized_skip() {
        let (mut store, sa, stages) = setup(&[8]);
        zero(&mut store, &stages[0].out_proj);
        let skip = noise(&[1, 8, 4, 4], 7);
        let dec = noise(&[1, 8, 4, 4], 8);
        let tape = Tape::inference(&store);
        let sv = tape.constant(skip);
        let (q, k, v) = stages[0].derive_qkv(&tape, &tape.constant(dec.clone())).unwrap();
        let fused = stages[0].caf_fuse(&tape, &sv, &q, &k, &v).unwrap();
        let normed = stages[0].norm.forward_nchw(&tape, &sv).unwrap();
        assert!(fused.value().max_abs_diff(normed.value()).unwrap() < 1e-12);
        let full = stages[0].forward(&tape, &sv, &tape.constant(dec)).unwrap();
        let expect = sa.forward(&tape, &normed).unwrap();
        assert!(full.value().max_abs_diff(expect.value()).unwrap() < 1e-12);
    }

    #[test]
    fn shared_gate_is_one_parameter_set() {
        let (store, sa, stages) = setup(&[8, 4, 12]);
        assert!(stages.iter().all(|s| s.shared == sa));
        let gate_params = store.iter().filter(|(_, p)| p.path.contains("shared_sa")).count();
        assert_eq!(gate_params, 2);

        // loss touching only stage 0 still lands in the buffers stage 2 reads
        let tape = Tape::with_params(&store);
        let y0 = stages[0]
            .forward(&tape, &tape.constant(noise(&[1, 8, 4, 4], 9)), &tape.constant(noise(&[1, 8, 4, 4], 10)))
            .unwrap();
        let loss = tape.sum_all(&tape.mul(&y0, &y0).unwrap());
        let grads = tape.backward(&loss).unwrap();
        let g = grads.param(stages[2].shared.conv.weight).expect("gate gradient");
        assert!(g.data().iter().any(|&v| v != 0.0));
        assert!(grads.param(stages[2].q.weight).is_none());
    }

    #[test]
    fn end_to_end_gradients() {
        let (mut store, _, stages) = setup(&[8]);
        // widen the small default init so every path carries a measurable gradient
        let mut rng = SeededRng::new(14);
        for id in store.ids().collect::<Vec<_>>() {
            let v = store.value(id).map(|v| v + rng.uniform(-0.3, 0.3));
            store.set_value(id, v).unwrap();
        }
        let skip = noise(&[1, 8, 4, 4], 11);
        let dec = noise(&[1, 8, 4, 4], 12);
        let probe = noise(&[1, 8, 4, 4], 13);
        let stage = &stages[0];
        let ex = check_input_gradient(&store, &skip, 1e-6, |t, s| {
            let y = stage.forward(t, s, &t.constant(dec.clone()))?;
            Ok(t.sum_all(&t.mul(&y, &t.constant(probe.clone()))?))
        })
        .unwrap();
        let ed = check_input_gradient(&store, &dec, 1e-5, |t, d| {
            let y = stage.forward(t, &t.constant(skip.clone()), d)?;
            Ok(t.sum_all(&t.mul(&y, &t.constant(probe.clone()))?))
        })
        .unwrap();
        assert!(ex < 1e-6 && ed < 1e-6, "{ex} {ed}");
        for id in [stage.q.weight, stage.k_skip.weight, stage.v.weight, stage.shared.conv.weight, stage.norm.gamma] {
            let picks: Vec<usize> = (0..store.value(id).numel()).step_by(5).collect();
            let e = check_param_gradient(&store, id, Some(&picks), 1e-5, |t| {
                let y = stage.forward(t, &t.constant(skip.clone()), &t.constant(dec.clone()))?;
                Ok(t.sum_all(&t.mul(&y, &t.constant(probe.clone()))?))
            })
            .unwrap();
            assert!(e < 1e-6, "{}: {e}", store.path(id));
        }
    }
}
