//! Adaptive fusion block: identity, resolution-aware Swin and deformable
//! branches, concatenated as `[identity, swin, deform]` and fused by a 1×1 conv.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::deform::DeformConv2d;
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::swin::{run_blocks, swin_stage, SwinBlock};

/// How the Swin branch behaves at a decoder level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AfbLevelPolicy {
    pub level: usize,
    /// Number of W-MSA/SW-MSA block pairs; `None` means a plain 3×3 conv.
    pub swin_stages_used: Option<usize>,
    /// Channel divisor applied inside the Swin branch.
    pub embed_dim_reduction: usize,
}

pub fn resolution_policy(level: usize) -> Result<AfbLevelPolicy> {
    let (stages, reduction) = match level {
        0 => (Some(2), 1),
        1 => (Some(3), 1),
        2 => (Some(4), 2),
        3 => (None, 1),
        _ => return Err(Error::invalid("resolution_policy", format!("level {level} is not in 0..=3"))),
    };
    Ok(AfbLevelPolicy {
        level,
        swin_stages_used: stages,
        embed_dim_reduction: reduction,
    })
}

#[derive(Debug, Clone)]
pub enum SwinBranch {
    Blocks {
        reduce: Option<(Conv2d, Conv2d)>,
        blocks: Vec<SwinBlock>,
    },
    Conv(Conv2d),
}

#[derive(Debug, Clone)]
pub struct Afb {
    pub policy: AfbLevelPolicy,
    pub swin: SwinBranch,
    pub deform: DeformConv2d,
    pub fuse: Conv2d,
    pub channels: usize,
}

impl Afb {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        path: &str,
        level: usize,
        channels: usize,
        heads: usize,
        window: usize,
        mlp_ratio: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let policy = resolution_policy(level)?;
        let swin = match policy.swin_stages_used {
            Some(stages) => {
                let inner = channels / policy.embed_dim_reduction;
                let reduce = if policy.embed_dim_reduction > 1 {
                    Some((
                        Conv2d::new(store, &format!("{path}.swin.reduce"), channels, inner, 1, 1, 0, rng)?,
                        Conv2d::new(store, &format!("{path}.swin.expand"), inner, channels, 1, 1, 0, rng)?,
                    ))
                } else {
                    None
                };
                let blocks = swin_stage(store, &format!("{path}.swin.blocks"), 2 * stages, inner, heads, window, mlp_ratio, rng)?;
                SwinBranch::Blocks { reduce, blocks }
            }
            None => SwinBranch::Conv(Conv2d::new(store, &format!("{path}.swin.conv"), channels, channels, 3, 1, 1, rng)?),
        };
        Ok(Self {
            policy,
            swin,
            deform: DeformConv2d::new(store, &format!("{path}.deform"), channels, channels, 3, rng)?,
            fuse: Conv2d::new(store, &format!("{path}.fuse"), 3 * channels, channels, 1, 1, 0, rng)?,
            channels,
        })
    }

    pub fn swin_branch<T: Scalar>(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        match &self.swin {
            SwinBranch::Conv(conv) => conv.forward(tape, x),
            SwinBranch::Blocks { reduce, blocks } => {
                let inner = match reduce {
                    Some((down, _)) => down.forward(tape, x)?,
                    None => x.clone(),
                };
                let t = tape.permute(&inner, &[0, 2, 3, 1])?;
                let t = run_blocks(tape, blocks, &t)?;
                let y = tape.permute(&t, &[0, 3, 1, 2])?;
                match reduce {
                    Some((_, up)) => up.forward(tape, &y),
                    None => Ok(y),
                }
            }
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        if x.rank() != 4 || x.dim(1) != self.channels {
            return Err(Error::invalid(
                "afb",
                format!("expected [B, {}, H, W], got {:?}", self.channels, x.shape()),
            ));
        }
        let s = self.swin_branch(tape, x)?;
        let d = self.deform.forward(tape, x)?;
        let cat = tape.concat(&[x, &s, &d], 1)?;
        self.fuse.forward(tape, &cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamId;
    use crate::tensor::Tensor;

    fn noise(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = SeededRng::new(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.uniform(-1.0, 1.0))
    }

    fn block(level: usize, c: usize) -> (ParamStore<f64>, Afb) {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(level as u64);
        let afb = Afb::new(&mut store, "afb", level, c, 2, 4, 2, &mut rng).unwrap();
        (store, afb)
    }

    #[test]
    fn policy_table() {
        assert_eq!(resolution_policy(0).unwrap().swin_stages_used, Some(2));
        assert_eq!(resolution_policy(1).unwrap().swin_stages_used, Some(3));
        let l2 = resolution_policy(2).unwrap();
        assert_eq!((l2.swin_stages_used, l2.embed_dim_reduction), (Some(4), 2));
        assert_eq!(resolution_policy(3).unwrap().swin_stages_used, None);
        assert!(resolution_policy(4).is_err());
    }

    #[test]
    fn shape_preserved_at_every_level() {
        for level in 0..4 {
            let (store, afb) = block(level, 8);
            let tape = Tape::inference(&store);
            let x = tape.constant(noise(&[1, 8, 8, 8], 1));
            assert_eq!(afb.forward(&tape, &x).unwrap().shape(), &[1, 8, 8, 8]);
            let n_blocks = match &afb.swin {
                SwinBranch::Blocks { blocks, .. } => blocks.len(),
                SwinBranch::Conv(_) => 0,
            };
            assert_eq!(n_blocks, [4, 6, 8, 0][level]);
        }
        let (store, afb) = block(0, 8);
        let tape = Tape::inference(&store);
        assert!(afb.forward(&tape, &tape.constant(noise(&[1, 6, 8, 8], 2))).is_err());
    }

    #[test]
    fn identity_selecting_fusion_weights_return_input() {
        for level in 0..4 {
            let c = 8;
            let (mut store, afb) = block(level, c);
            let w = Tensor::from_fn([c, 3 * c, 1, 1], |i| if i / (3 * c) == i % (3 * c) { 1.0 } else { 0.0 });
            store.set_value(afb.fuse.weight, w).unwrap();
            store.set_value(afb.fuse.bias.unwrap(), Tensor::zeros([c])).unwrap();
            let x = noise(&[2, c, 8, 8], 3);
            let tape = Tape::inference(&store);
            let y = afb.forward(&tape, &tape.constant(x.clone())).unwrap();
            assert_eq!(y.value(), &x, "level {level}");
        }
    }

    #[test]
    fn branches_run_in_parallel() {
        let (mut store, afb) = block(1, 8);
        let x = noise(&[1, 8, 8, 8], 4);
        let (before_swin, before_out) = {
            let tape = Tape::inference(&store);
            let xv = tape.constant(x.clone());
            (afb.swin_branch(&tape, &xv).unwrap().into_value(), afb.forward(&tape, &xv).unwrap().into_value())
        };
        let z = Tensor::zeros(store.value(afb.deform.conv.weight).shape().to_vec());
        store.set_value(afb.deform.conv.weight, z).unwrap();
        let tape = Tape::inference(&store);
        let xv = tape.constant(x);
        assert_eq!(afb.swin_branch(&tape, &xv).unwrap().value(), &before_swin);
        assert_ne!(afb.forward(&tape, &xv).unwrap().value(), &before_out);
    }

    #[test]
    fn every_branch_receives_gradient() {
        for level in [2, 3] {
            let (store, afb) = block(level, 8);
            let tape = Tape::with_params(&store);
            let y = afb.forward(&tape, &tape.constant(noise(&[1, 8, 8, 8], 5))).unwrap();
            let loss = tape.sum_all(&tape.mul(&y, &y).unwrap());
            let grads = tape.backward(&loss).unwrap();
            let swin_param: ParamId = match &afb.swin {
                SwinBranch::Blocks { blocks, .. } => blocks[0].attn.qkv.weight,
                SwinBranch::Conv(c) => c.weight,
            };
            for id in [swin_param, afb.deform.conv.weight, afb.fuse.weight] {
                let g = grads.param(id).unwrap();
                assert!(g.data().iter().any(|&v| v != 0.0), "{}", store.path(id));
            }
        }
    }
}
