//! The segmentation network: hierarchical Swin encoder, cross-attention
//! refined skips, adaptive-fusion decoder and a 4× upsampling head.

use serde::{Deserialize, Serialize};

use crate::afb::Afb;
use crate::autograd::{Tape, Var};
use crate::catm::{CatmStage, SharedSpatialAttention};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvTranspose2d};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::swin::{run_blocks, swin_stage, PatchEmbed, PatchMerge, SwinBlock, SwinBlockConfig};

pub const LEVELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub profile: Profile,
    pub input_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depths: [usize; LEVELS],
    pub heads: [usize; LEVELS],
    pub window: usize,
    pub mlp_ratio: usize,
    pub use_catm: bool,
    pub use_afb: bool,
    pub out_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ModelConfig {
    /// Swin-T sized network at 256×256.
    pub fn paper() -> Self {
        Self {
            profile: Profile::Paper,
            input_size: 256,
            patch_size: 4,
            in_channels: 3,
            embed_dim: 96,
            depths: [2, 2, 6, 2],
            heads: [3, 6, 12, 24],
            window: 8,
            mlp_ratio: 4,
            use_catm: true,
            use_afb: true,
            out_channels: 1,
        }
    }

    /// Desk-scale network at 64×64.
    pub fn tiny() -> Self {
        Self {
            profile: Profile::Tiny,
            input_size: 64,
            embed_dim: 24,
            heads: [1, 2, 4, 8],
            ..Self::paper()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self::paper(),
            Profile::Tiny => Self::tiny(),
        }
    }

    /// Channel width per encoder level.
    pub fn dims(&self) -> [usize; LEVELS] {
        std::array::from_fn(|i| self.embed_dim << i)
    }

    /// Grid side per encoder level.
    pub fn sides(&self) -> [usize; LEVELS] {
        std::array::from_fn(|i| self.input_size / self.patch_size >> i)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config { key: key.into(), msg });
        if self.patch_size != 4 {
            return bad("patch_size", format!("the 4× head requires patch size 4, got {}", self.patch_size));
        }
        if self.input_size == 0 || self.input_size % (self.patch_size << (LEVELS - 1)) != 0 {
            return bad("input_size", format!("{} is not divisible by {}", self.input_size, self.patch_size << (LEVELS - 1)));
        }
        if self.in_channels == 0 {
            return bad("in_channels", "must be positive".into());
        }
        if self.out_channels != 1 {
            return bad("out_channels", format!("only binary segmentation is supported, got {}", self.out_channels));
        }
        if self.embed_dim == 0 || self.embed_dim % 4 != 0 {
            return bad("embed_dim", format!("{} is not a positive multiple of 4", self.embed_dim));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio", "must be positive".into());
        }
        if self.depths.contains(&0) {
            return bad("depths", format!("{:?} has an empty stage", self.depths));
        }
        let (dims, sides) = (self.dims(), self.sides());
        for level in 0..LEVELS {
            let cfg = SwinBlockConfig {
                dim: dims[level],
                heads: self.heads[level],
                window: self.window,
                shift: self.window / 2,
                mlp_ratio: self.mlp_ratio,
            };
            cfg.validate()?;
            if let Err(e) = cfg.effective(sides[level], sides[level]) {
                return bad("window", format!("level {level}: {e}"));
            }
        }
        if self.use_afb && (dims[2] / 2) % self.heads[2] != 0 {
            return bad("heads", format!("reduced level-2 width {} is not divisible by {} heads", dims[2] / 2, self.heads[2]));
        }
        Ok(())
    }
}

/// Per-level feature refinement: the adaptive fusion block, or a single 3×3
/// conv when that block is switched off.
#[derive(Debug, Clone)]
pub enum Refiner {
    Afb(Box<Afb>),
    Conv(Conv2d),
}

impl Refiner {
    fn new<T: Scalar>(store: &mut ParamStore<T>, path: &str, cfg: &ModelConfig, level: usize, rng: &mut SeededRng) -> Result<Self> {
        let c = cfg.dims()[level];
        Ok(if cfg.use_afb {
            Refiner::Afb(Box::new(Afb::new(store, path, level, c, cfg.heads[level], cfg.window, cfg.mlp_ratio, rng)?))
        } else {
            Refiner::Conv(Conv2d::new(store, &format!("{path}.conv"), c, c, 3, 1, 1, rng)?)
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        match self {
            Refiner::Afb(afb) => afb.forward(tape, x),
            Refiner::Conv(conv) => conv.forward(tape, x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLevel {
    pub up: ConvTranspose2d,
    pub reduce: Conv2d,
    pub refine: Refiner,
}

#[derive(Debug, Clone)]
pub struct Head {
    pub up1: ConvTranspose2d,
    pub conv: Conv2d,
    pub up2: ConvTranspose2d,
    pub out: Conv2d,
}

impl Head {
    fn forward<T: Scalar>(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.up1.forward(tape, x)?;
        let y = tape.gelu(&self.conv.forward(tape, &y)?);
        let y = tape.gelu(&self.up2.forward(tape, &y)?);
        self.out.forward(tape, &y)
    }
}

/// Layer structure; parameter values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct SegmentationNet {
    pub cfg: ModelConfig,
    pub embed: PatchEmbed,
    pub stages: Vec<Vec<SwinBlock>>,
    pub merges: Vec<PatchMerge>,
    pub shared_sa: Option<SharedSpatialAttention>,
    /// One per skip level (0..3); empty when cross-attention is off.
    pub catm: Vec<CatmStage>,
    pub bottleneck: Refiner,
    /// Indexed by level 0..3.
    pub decoder: Vec<DecoderLevel>,
    pub head: Head,
}

impl SegmentationNet {
    pub fn build<T: Scalar>(cfg: &ModelConfig, rng: &mut SeededRng) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let net = Self::build_into(cfg, &mut store, rng)?;
        Ok((net, store))
    }

    pub fn build_into<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.dims();
        let embed = PatchEmbed::new(store, "encoder.patch_embed", cfg.in_channels, cfg.embed_dim, cfg.patch_size, rng)?;
        let mut stages = Vec::with_capacity(LEVELS);
        let mut merges = Vec::with_capacity(LEVELS - 1);
        for level in 0..LEVELS {
            let path = format!("encoder.stage{level}");
            stages.push(swin_stage(store, &path, cfg.depths[level], dims[level], cfg.heads[level], cfg.window, cfg.mlp_ratio, rng)?);
            if level + 1 < LEVELS {
                merges.push(PatchMerge::new(store, &format!("encoder.merge{level}"), dims[level], rng)?);
            }
        }
        let (shared_sa, catm) = if cfg.use_catm {
            let sa = SharedSpatialAttention::new(store, "catm.shared_sa", rng)?;
            let stages = (0..LEVELS - 1)
                .map(|l| CatmStage::new(store, &format!("catm.level{l}"), dims[l], cfg.heads[l], cfg.window, cfg.mlp_ratio, &sa, rng))
                .collect::<Result<Vec<_>>>()?;
            (Some(sa), stages)
        } else {
            (None, Vec::new())
        };
        let bottleneck = Refiner::new(store, "decoder.level3.refine", cfg, LEVELS - 1, rng)?;
        let decoder = (0..LEVELS - 1)
            .map(|l| {
                let path = format!("decoder.level{l}");
                Ok(DecoderLevel {
                    up: ConvTranspose2d::new(store, &format!("{path}.up"), dims[l + 1], dims[l], 2, 2, rng)?,
                    reduce: Conv2d::new(store, &format!("{path}.reduce"), 2 * dims[l], dims[l], 1, 1, 0, rng)?,
                    refine: Refiner::new(store, &format!("{path}.refine"), cfg, l, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let c = dims[0];
        let head = Head {
            up1: ConvTranspose2d::new(store, "head.up1", c, c / 2, 2, 2, rng)?,
            conv: Conv2d::new(store, "head.conv", c / 2, c / 2, 3, 1, 1, rng)?,
            up2: ConvTranspose2d::new(store, "head.up2", c / 2, c / 4, 2, 2, rng)?,
            out: Conv2d::new(store, "head.out", c / 4, cfg.out_channels, 1, 1, 0, rng)?,
        };
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            stages,
            merges,
            shared_sa,
            catm,
            bottleneck,
            decoder,
            head,
        })
    }

    /// Four `[B, C_l, H_l, W_l]` encoder features, finest first.
    pub fn encode<T: Scalar>(&self, tape: &Tape<T>, image: &Var<T>) -> Result<Vec<Var<T>>> {
        let n = self.cfg.input_size;
        let s = image.shape();
        if s.len() != 4 || s[1] != self.cfg.in_channels || s[2] != n || s[3] != n {
            return Err(Error::invalid(
                "encode",
                format!("expected [B, {}, {n}, {n}] image, got {s:?}", self.cfg.in_channels),
            ));
        }
        let mut tokens = self.embed.forward(tape, image)?;
        let mut pyramid = Vec::with_capacity(LEVELS);
        for level in 0..LEVELS {
            tokens = run_blocks(tape, &self.stages[level], &tokens)?;
            pyramid.push(tape.permute(&tokens, &[0, 3, 1, 2])?);
            if level + 1 < LEVELS {
                tokens = self.merges[level].forward(tape, &tokens)?;
            }
        }
        Ok(pyramid)
    }

    /// Logits `[B, 1, H, W]` from an encoder pyramid.
    pub fn decode<T: Scalar>(&self, tape: &Tape<T>, pyramid: &[Var<T>]) -> Result<Var<T>> {
        if pyramid.len() != LEVELS {
            return Err(Error::invalid("decode", format!("expected {LEVELS} levels, got {}", pyramid.len())));
        }
        let mut d = self.bottleneck.forward(tape, &pyramid[LEVELS - 1])?;
        for level in (0..LEVELS - 1).rev() {
            let stage = &self.decoder[level];
            let up = stage.up.forward(tape, &d)?;
            let skip = match self.catm.get(level) {
                Some(catm) => catm.forward(tape, &pyramid[level], &up)?,
                None => pyramid[level].clone(),
            };
            let cat = tape.concat(&[&skip, &up], 1)?;
            d = stage.refine.forward(tape, &stage.reduce.forward(tape, &cat)?)?;
        }
        self.head.forward(tape, &d)
    }

    pub fn logits<T: Scalar>(&self, tape: &Tape<T>, image: &Var<T>) -> Result<Var<T>> {
        let pyramid = self.encode(tape, image)?;
        self.decode(tape, &pyramid)
    }

    /// Per-pixel lesion probability.
    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, image: &Var<T>) -> Result<Var<T>> {
        Ok(tape.sigmoid(&self.logits(tape, image)?))
    }
}

pub fn count_params<T: Scalar>(store: &ParamStore<T>) -> usize {
    store.num_scalars()
}
