//! Swin Transformer blocks: (shifted) window attention with relative
//! position bias, patch embedding and patch merging.
//!
//! Inside this module feature maps travel as channel-last token grids
//! `[B, H, W, C]`; [`SwinBlock::forward`] accepts `[B, C, H, W]`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Additive attention mask between tokens from different shift regions.
pub const MASK_VALUE: f64 = -100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwinBlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
    pub mlp_ratio: usize,
}

impl SwinBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config {
                key: "heads".into(),
                msg: format!("dim {} is not divisible by {} heads", self.dim, self.heads),
            });
        }
        if self.window == 0 {
            return Err(Error::Config {
                key: "window".into(),
                msg: "window must be at least 1".into(),
            });
        }
        if self.shift != 0 && self.shift != self.window / 2 {
            return Err(Error::Config {
                key: "shift".into(),
                msg: format!("shift must be 0 or {}", self.window / 2),
            });
        }
        Ok(())
    }

    /// Window and shift actually used on an `h×w` grid. A window that covers
    /// the whole map is clamped to it and the shift is dropped.
    pub fn effective(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let side = h.min(w);
        let (win, shift) = if self.window >= side {
            (side, 0)
        } else {
            (self.window, self.shift)
        };
        if win == 0 || h % win != 0 || w % win != 0 {
            return Err(Error::invalid(
                "swin",
                format!("{h}×{w} grid is not divisible by window {win}"),
            ));
        }
        Ok((win, shift))
    }
}

/// Gather index taking a `[B, H, W, C]` grid, cyclically shifted up-left by
/// `shift`, to `[B·nW, window², C]` windows in row-major window order.
pub fn window_partition_index(b: usize, h: usize, w: usize, c: usize, window: usize, shift: usize) -> Vec<usize> {
    let (nwy, nwx) = (h / window, w / window);
    let mut index = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for wy in 0..nwy {
            for wx in 0..nwx {
                for ty in 0..window {
                    for tx in 0..window {
                        let y = (wy * window + ty + shift) % h;
                        let x = (wx * window + tx + shift) % w;
                        let base = ((bi * h + y) * w + x) * c;
                        index.extend(base..base + c);
                    }
                }
            }
        }
    }
    index
}

fn invert(index: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; index.len()];
    for (o, &i) in index.iter().enumerate() {
        inv[i] = o;
    }
    inv
}

fn check_grid(op: &'static str, x: &[usize], window: usize) -> Result<()> {
    if x.len() != 4 || window == 0 || x[1] % window != 0 || x[2] % window != 0 {
        return Err(Error::invalid(op, format!("grid {x:?} does not tile into {window}×{window} windows")));
    }
    Ok(())
}

impl<T: Scalar> Tape<'_, T> {
    /// `[B, H, W, C]` → `[B·nW, window², C]`, after a cyclic shift by `shift`.
    pub fn window_partition(&self, x: &Var<T>, window: usize, shift: usize) -> Result<Var<T>> {
        check_grid("window_partition", x.shape(), window)?;
        let s = x.shape();
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let index = window_partition_index(b, h, w, c, window, shift);
        let nw = (h / window) * (w / window);
        self.gather(x, Arc::from(index), &[b * nw, window * window, c])
    }

    /// Inverse of [`Tape::window_partition`] back to `[B, H, W, C]`.
    pub fn window_reverse(&self, windows: &Var<T>, h: usize, w: usize, window: usize, shift: usize) -> Result<Var<T>> {
        let s = windows.shape();
        if s.len() != 3 || window == 0 || h % window != 0 || w % window != 0 || s[1] != window * window {
            return Err(Error::invalid("window_reverse", format!("windows {s:?} do not match {h}×{w}/{window}")));
        }
        let nw = (h / window) * (w / window);
        if s[0] % nw != 0 {
            return Err(Error::invalid("window_reverse", format!("{} windows for {nw} per image", s[0])));
        }
        let (b, c) = (s[0] / nw, s[2]);
        let index = invert(&window_partition_index(b, h, w, c, window, shift));
        self.gather(windows, Arc::from(index), &[b, h, w, c])
    }
}

/// `[N·N]` lookup into a `(2·table_window − 1)²`-row bias table for tokens
/// of a `window×window` patch.
pub fn relative_position_index(window: usize, table_window: usize) -> Vec<usize> {
    let n = window * window;
    let span = 2 * table_window - 1;
    let mut index = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dy = (i / window) as isize - (j / window) as isize + table_window as isize - 1;
            let dx = (i % window) as isize - (j % window) as isize + table_window as isize - 1;
            index.push(dy as usize * span + dx as usize);
        }
    }
    index
}

/// Additive `[nW, N, N]` mask for shifted windows: tokens that came from
/// different regions of the unshifted map get [`MASK_VALUE`].
pub fn shifted_window_mask<T: Scalar>(h: usize, w: usize, window: usize, shift: usize) -> Tensor<T> {
    let (nwy, nwx) = (h / window, w / window);
    let n = window * window;
    let region = |pos: usize, side: usize| {
        if pos < side - window {
            0
        } else if pos < side - shift {
            1
        } else {
            2
        }
    };
    let mut mask = Vec::with_capacity(nwy * nwx * n * n);
    for wy in 0..nwy {
        for wx in 0..nwx {
            let ids: Vec<usize> = (0..n)
                .map(|t| {
                    let y = wy * window + t / window;
                    let x = wx * window + t % window;
                    if shift == 0 {
                        0
                    } else {
                        region(y, h) * 3 + region(x, w)
                    }
                })
                .collect();
            for &a in &ids {
                for &b in &ids {
                    mask.push(if a == b { T::zero() } else { T::of(MASK_VALUE) });
                }
            }
        }
    }
    Tensor::new([nwy * nwx, n, n], mask).expect("mask shape")
}

/// Multi-head self-attention within windows, with relative position bias.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub bias_table: ParamId,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
}

impl WindowAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        path: &str,
        dim: usize,
        heads: usize,
        window: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let span = 2 * window - 1;
        Ok(Self {
            qkv: Linear::new(store, &format!("{path}.qkv"), dim, 3 * dim, true, rng)?,
            proj: Linear::new(store, &format!("{path}.proj"), dim, dim, true, rng)?,
            bias_table: store.insert(
                format!("{path}.relative_position_bias_table"),
                Init::TruncNormal(0.02).tensor(&[span * span, heads], rng),
            )?,
            dim,
            heads,
            window,
        })
    }

    /// `x: [Bw, N, C]` with `N = win²`, `win ≤ self.window`. `mask`, if
    /// given, is `[nW, N, N]` and `Bw` must be a multiple of `nW`.
    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, x: &Var<T>, win: usize, mask: Option<&Tensor<T>>) -> Result<Var<T>> {
        let (attn, v) = self.attention(tape, x, win, mask)?;
        let (bw, n, c) = (x.dim(0), x.dim(1), x.dim(2));
        let out = tape.matmul(&attn, &v)?;
        let out = tape.permute(&out, &[0, 2, 1, 3])?;
        let out = tape.reshape(&out, &[bw, n, c])?;
        self.proj.forward(tape, &out)
    }

    /// Softmax weights `[Bw, heads, N, N]` and values `[Bw, heads, N, d]`.
    pub fn attention<T: Scalar>(
        &self,
        tape: &Tape<T>,
        x: &Var<T>,
        win: usize,
        mask: Option<&Tensor<T>>,
    ) -> Result<(Var<T>, Var<T>)> {
        let s = x.shape().to_vec();
        if s.len() != 3 || s[2] != self.dim || s[1] != win * win || win > self.window {
            return Err(Error::invalid(
                "window_attention",
                format!("tokens {s:?} do not match dim {} and window {win}", self.dim),
            ));
        }
        let (bw, n, c) = (s[0], s[1], s[2]);
        let (h, d) = (self.heads, c / self.heads);
        let qkv = self.qkv.forward(tape, x)?;
        let qkv = tape.reshape(&qkv, &[bw, n, 3, h, d])?;
        let qkv = tape.permute(&qkv, &[2, 0, 3, 1, 4])?;
        let part = |i| tape.reshape(&tape.narrow(&qkv, 0, i, 1)?, &[bw, h, n, d]);
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let q = tape.mul_scalar(&q, 1.0 / (d as f64).sqrt());
        let mut attn = tape.matmul_bt(&q, &k)?;

        let rel = relative_position_index(win, self.window);
        let index: Vec<usize> = (0..h)
            .flat_map(|hi| rel.iter().map(move |&r| r * h + hi))
            .collect();
        let table = tape.param(self.bias_table);
        let bias = tape.gather(&table, Arc::from(index), &[h, n, n])?;
        attn = tape.add(&attn, &bias)?;

        if let Some(mask) = mask {
            let nw = mask.dim(0);
            if mask.shape() != [nw, n, n] || nw == 0 || bw % nw != 0 {
                return Err(Error::shape("window_attention mask", mask.shape(), &[bw, n, n]));
            }
            let m = tape.constant(mask.reshape([nw, 1, n, n])?);
            let a = tape.reshape(&attn, &[bw / nw, nw, h, n, n])?;
            attn = tape.reshape(&tape.add(&a, &m)?, &[bw, h, n, n])?;
        }
        Ok((tape.softmax(&attn)?, v))
    }
}

/// Pre-norm Swin block: `x + attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub cfg: SwinBlockConfig,
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SwinBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, path: &str, cfg: SwinBlockConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let hidden = cfg.dim * cfg.mlp_ratio;
        Ok(Self {
            cfg,
            norm1: LayerNorm::new(store, &format!("{path}.norm1"), cfg.dim, rng)?,
            attn: WindowAttention::new(store, &format!("{path}.attn"), cfg.dim, cfg.heads, cfg.window, rng)?,
            norm2: LayerNorm::new(store, &format!("{path}.norm2"), cfg.dim, rng)?,
            fc1: Linear::new(store, &format!("{path}.mlp.fc1"), cfg.dim, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{path}.mlp.fc2"), hidden, cfg.dim, true, rng)?,
        })
    }

    /// Attention sub-layer on a `[B, H, W, C]` grid, without the residual.
    pub fn attend<T: Scalar>(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let (h, w) = (x.dim(1), x.dim(2));
        let (win, shift) = self.cfg.effective(h, w)?;
        let windows = tape.window_partition(x, win, shift)?;
        let mask = (shift > 0).then(|| shifted_window_mask(h, w, win, shift));
        let out = self.attn.forward(tape, &windows, win, mask.as_ref())?;
        tape.window_reverse(&out, h, w, win, shift)
    }

    pub fn forward_tokens<T: Scalar>(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        if x.rank() != 4 || x.dim(3) != self.cfg.dim {
            return Err(Error::invalid("swin_block", format!("expected [B, H, W, {}], got {:?}", self.cfg.dim, x.shape())));
        }
        let a = self.attend(tape, &self.norm1.forward(tape, x)?)?;
        let x = tape.add(x, &a)?;
        let m = self.fc1.forward(tape, &self.norm2.forward(tape, &x)?)?;
        let m = self.fc2.forward(tape, &tape.gelu(&m))?;
        tape.add(&x, &m)
    }

    /// Same block on a `[B, C, H, W]` map.
    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let t = tape.permute(x, &[0, 2, 3, 1])?;
        let y = self.forward_tokens(tape, &t)?;
        tape.permute(&y, &[0, 3, 1, 2])
    }
}

/// Pairs of blocks alternating plain and shifted windows.
pub fn swin_stage<T: Scalar>(
    store: &mut ParamStore<T>,
    path: &str,
    depth: usize,
    dim: usize,
    heads: usize,
    window: usize,
    mlp_ratio: usize,
    rng: &mut SeededRng,
) -> Result<Vec<SwinBlock>> {
    (0..depth)
        .map(|i| {
            let cfg = SwinBlockConfig {
                dim,
                heads,
                window,
                shift: if i % 2 == 1 { window / 2 } else { 0 },
                mlp_ratio,
            };
            SwinBlock::new(store, &format!("{path}.block{i}"), cfg, rng)
        })
        .collect()
}

pub fn run_blocks<T: Scalar>(tape: &Tape<T>, blocks: &[SwinBlock], x: &Var<T>) -> Result<Var<T>> {
    let mut x = x.clone();
    for b in blocks {
        x = b.forward_tokens(tape, &x)?;
    }
    Ok(x)
}

/// Strided `patch×patch` convolution followed by layer norm.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Conv2d,
    pub norm: LayerNorm,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        path: &str,
        in_channels: usize,
        dim: usize,
        patch: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::new(store, &format!("{path}.proj"), in_channels, dim, patch, patch, 0, rng)?,
            norm: LayerNorm::new(store, &format!("{path}.norm"), dim, rng)?,
            patch,
        })
    }

    /// `[B, 3, H, W]` image → `[B, H/p, W/p, C]` tokens.
    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, image: &Var<T>) -> Result<Var<T>> {
        let s = image.shape();
        if s.len() != 4 || s[2] % self.patch != 0 || s[3] % self.patch != 0 {
            return Err(Error::invalid(
                "patch_embed",
                format!("input {s:?} is not divisible by patch size {}", self.patch),
            ));
        }
        let y = self.proj.forward(tape, image)?;
        let y = tape.permute(&y, &[0, 2, 3, 1])?;
        self.norm.forward(tape, &y)
    }
}

/// Gather index for 2×2 patch merging: `[B, H, W, C]` → `[B, H/2, W/2, 4C]`,
/// concatenating the (0,0), (1,0), (0,1), (1,1) neighbours.
pub fn patch_merge_index(b: usize, h: usize, w: usize, c: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for y in (0..h).step_by(2) {
            for x in (0..w).step_by(2) {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let base = ((bi * h + y + dy) * w + x + dx) * c;
                    index.extend(base..base + c);
                }
            }
        }
    }
    index
}

#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduction: Linear,
    pub dim: usize,
}

impl PatchMerge {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, path: &str, dim: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{path}.norm"), 4 * dim, rng)?,
            reduction: Linear::new(store, &format!("{path}.reduction"), 4 * dim, 2 * dim, false, rng)?,
            dim,
        })
    }

    /// `[B, H, W, C]` → `[B, H/2, W/2, 2C]`.
    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape().to_vec();
        if s.len() != 4 || s[3] != self.dim || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::invalid("patch_merge", format!("expected even [B, H, W, {}], got {s:?}", self.dim)));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let index = patch_merge_index(b, h, w, c);
        let merged = tape.gather(x, Arc::from(index), &[b, h / 2, w / 2, 4 * c])?;
        self.reduction.forward(tape, &self.norm.forward(tape, &merged)?)
    }
}
